#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "seat/error.hpp"
#include "seat/tensor.hpp"

namespace seat {

using NodeId = std::size_t;

enum class Padding { same, valid };

/**
 * Static reverse-mode computation graph over dense tensors.
 *
 * Nodes are appended in construction order, so the node list is always
 * topologically sorted. Named inputs are bound with set_input() (or through
 * the map overload of forward()); shapes are checked at forward time, which
 * lets one graph serve any batch size. Values of a graph are not modified
 * between forward() and backward().
 */
class Graph {
 public:
  enum class Op {
    input, matmul, conv2d, add, sub, mul, affine, relu, softmax, log_softmax,
    log, clamp, sum, sum_rows, mean, row_max, flatten
  };

  // ---- construction -------------------------------------------------------

  NodeId input(std::string name, bool requires_grad = false) {
    if (inputs_.count(name)) throw Error("duplicate graph input '" + name + "'");
    NodeId id = push(Op::input, {});
    nodes_[id].name = name;
    nodes_[id].requires_grad = requires_grad;
    inputs_.emplace(std::move(name), id);
    return id;
  }

  /// [m,k] x [k,n] -> [m,n]
  NodeId matmul(NodeId a, NodeId b) { return push(Op::matmul, {a, b}); }

  /// x [B,Cin,H,W], w [Cout,Cin,kh,kw] -> [B,Cout,Ho,Wo]; stride 1.
  NodeId conv2d(NodeId x, NodeId w, Padding pad) {
    NodeId id = push(Op::conv2d, {x, w});
    nodes_[id].pad = pad;
    return id;
  }

  /// Elementwise sum. A rank-1 right operand of length a.dim(1) is broadcast
  /// along axis 1 (feature axis of [B,N], channel axis of [B,C,H,W]).
  NodeId add(NodeId a, NodeId b) { return push(Op::add, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return push(Op::sub, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return push(Op::mul, {a, b}); }

  /// scale * a + shift
  NodeId affine(NodeId a, double scale, double shift) {
    NodeId id = push(Op::affine, {a});
    nodes_[id].p0 = scale;
    nodes_[id].p1 = shift;
    return id;
  }

  NodeId relu(NodeId a) { return push(Op::relu, {a}); }
  /// Row-wise over the last axis of a rank-2 tensor.
  NodeId softmax(NodeId a) { return push(Op::softmax, {a}); }
  NodeId log_softmax(NodeId a) { return push(Op::log_softmax, {a}); }
  NodeId log(NodeId a) { return push(Op::log, {a}); }

  NodeId clamp(NodeId a, double lo, double hi) {
    NodeId id = push(Op::clamp, {a});
    nodes_[id].p0 = lo;
    nodes_[id].p1 = hi;
    return id;
  }

  NodeId sum(NodeId a) { return push(Op::sum, {a}); }
  /// [B,C] -> [B]
  NodeId sum_rows(NodeId a) { return push(Op::sum_rows, {a}); }
  NodeId mean(NodeId a) { return push(Op::mean, {a}); }
  /// [B,C] -> [B]; ties go to the lowest column index.
  NodeId row_max(NodeId a) { return push(Op::row_max, {a}); }
  /// [B, ...] -> [B, prod(...)]
  NodeId flatten(NodeId a) { return push(Op::flatten, {a}); }

  void mark_output(std::string name, NodeId id) {
    check_id(id);
    outputs_[std::move(name)] = id;
  }

  NodeId output_id(const std::string& name) const {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw Error("unknown graph output '" + name + "'");
    return it->second;
  }

  NodeId input_id(const std::string& name) const {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) throw Error("unknown graph input '" + name + "'");
    return it->second;
  }

  bool has_input(const std::string& name) const { return inputs_.count(name) != 0; }

  void set_requires_grad(const std::string& name, bool on) { nodes_[input_id(name)].requires_grad = on; }

  std::size_t node_count() const noexcept { return nodes_.size(); }
  Op op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& parents(NodeId id) const { return nodes_.at(id).parents; }
  const std::map<std::string, NodeId>& inputs() const noexcept { return inputs_; }

  // ---- evaluation ---------------------------------------------------------

  void set_input(const std::string& name, Tensor value) {
    Node& n = nodes_[input_id(name)];
    n.value = std::move(value);
    n.bound = true;
  }

  /// Overwrite a bound input in place from a flat buffer (no reallocation
  /// when the shape is unchanged).
  void set_input(const std::string& name, const Shape& shape, std::span<const double> values) {
    Node& n = nodes_[input_id(name)];
    if (!n.bound || n.value.shape() != shape) n.value = Tensor(shape);
    if (values.size() != n.value.size()) throw Error("input '" + name + "' size mismatch");
    std::copy(values.begin(), values.end(), n.value.data().begin());
    n.bound = true;
  }

  /// Evaluate every node from the currently bound inputs.
  void run() {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.op == Op::input) {
        if (!n.bound) throw GraphError(id, "input '" + n.name + "' is not bound");
        continue;
      }
      eval(id);
      if (!n.value.all_finite()) throw NonFiniteError(id, "non-finite intermediate value");
    }
    evaluated_ = true;
  }

  std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& bindings) {
    for (const auto& [name, t] : bindings) set_input(name, t);
    run();
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : outputs_) out.emplace(name, nodes_[id].value);
    return out;
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Tensor& value(const std::string& output) const { return value(output_id(output)); }

  /// Populate gradients of a scalar node with respect to every node on a
  /// path from a gradient-requiring input.
  void backward(NodeId seed) {
    check_id(seed);
    if (!evaluated_) throw GraphError(seed, "backward before forward");
    if (nodes_[seed].value.size() != 1) throw GraphError(seed, "backward seed is not scalar");

    const std::size_t count = seed + 1;
    std::vector<char> needs(nodes_.size(), 0);
    for (NodeId id = 0; id < count; ++id) {
      const Node& n = nodes_[id];
      if (n.op == Op::input) {
        needs[id] = n.requires_grad;
      } else {
        for (NodeId p : n.parents) needs[id] = needs[id] || needs[p];
      }
    }
    active_.assign(nodes_.size(), 0);
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      const bool leaf = n.op == Op::input && n.requires_grad;
      if ((id < count && needs[id]) || leaf) {
        active_[id] = 1;
        if (n.grad.shape() != n.value.shape()) {
          n.grad = Tensor(n.value.shape());
        } else {
          std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
        }
      }
    }
    if (!active_[seed]) return;
    nodes_[seed].grad[0] = 1.0;
    for (NodeId id = seed + 1; id-- > 0;) {
      if (active_[id] && nodes_[id].op != Op::input) propagate(id);
    }
  }

  std::map<std::string, Tensor> backward(const std::string& seed_output) {
    backward(output_id(seed_output));
    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : inputs_)
      if (nodes_[id].requires_grad) grads.emplace(name, nodes_[id].grad);
    return grads;
  }

  /// Gradient buffer of a node after backward(); zero-sized if inactive.
  const Tensor& grad(NodeId id) const { return nodes_.at(id).grad; }
  const Tensor& grad(const std::string& input) const { return grad(input_id(input)); }

 private:
  struct Node {
    Op op = Op::input;
    std::vector<NodeId> parents;
    std::string name;
    bool requires_grad = false;
    bool bound = false;
    double p0 = 0.0;
    double p1 = 0.0;
    Padding pad = Padding::valid;
    std::size_t aux = 0;  // conv padding actually applied
    std::vector<std::size_t> argmax;
    Tensor value;
    Tensor grad;
  };

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const RowMat>;
  using Map = Eigen::Map<RowMat>;

  NodeId push(Op op, std::vector<NodeId> parents) {
    for (NodeId p : parents) check_id(p);
    Node n;
    n.op = op;
    n.parents = std::move(parents);
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    return nodes_.size() - 1;
  }

  void check_id(NodeId id) const {
    if (id >= nodes_.size()) throw Error("node id " + std::to_string(id) + " does not exist");
  }

  [[noreturn]] void shape_fail(NodeId id, const std::string& what) const {
    throw ShapeError(id, what);
  }

  const Tensor& pv(NodeId id, std::size_t k) const { return nodes_[nodes_[id].parents[k]].value; }

  static void ensure_shape(Tensor& t, const Shape& s) {
    if (t.shape() != s) t = Tensor(s);
  }

  // conv helpers ------------------------------------------------------------
  struct ConvGeom {
    std::size_t batch, cin, h, w, cout, kh, kw, pad, ho, wo;
  };

  ConvGeom conv_geom(NodeId id) const {
    const Tensor& x = pv(id, 0);
    const Tensor& w = pv(id, 1);
    if (x.rank() != 4 || w.rank() != 4) shape_fail(id, "conv2d expects rank-4 input and kernel");
    if (x.dim(1) != w.dim(1))
      shape_fail(id, "conv2d channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, 0};
    if (nodes_[id].pad == Padding::same) {
      if (g.kh % 2 == 0 || g.kw % 2 == 0 || g.kh != g.kw) shape_fail(id, "same padding needs a square odd kernel");
      g.pad = g.kh / 2;
    }
    if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) shape_fail(id, "conv2d kernel larger than input");
    g.ho = g.h + 2 * g.pad - g.kh + 1;
    g.wo = g.w + 2 * g.pad - g.kw + 1;
    return g;
  }

  static void im2col(const ConvGeom& g, const double* x, RowMat& cols) {
    cols.setZero(g.cin * g.kh * g.kw, g.ho * g.wo);
    for (std::size_t c = 0; c < g.cin; ++c)
      for (std::size_t i = 0; i < g.kh; ++i)
        for (std::size_t j = 0; j < g.kw; ++j) {
          const std::size_t row = (c * g.kh + i) * g.kw + j;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox + j) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              cols(row, oy * g.wo + ox) = x[(c * g.h + iy) * g.w + ix];
            }
          }
        }
  }

  static void col2im_add(const ConvGeom& g, const RowMat& cols, double* dx) {
    for (std::size_t c = 0; c < g.cin; ++c)
      for (std::size_t i = 0; i < g.kh; ++i)
        for (std::size_t j = 0; j < g.kw; ++j) {
          const std::size_t row = (c * g.kh + i) * g.kw + j;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox + j) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              dx[(c * g.h + iy) * g.w + ix] += cols(row, oy * g.wo + ox);
            }
          }
        }
  }

  // forward -----------------------------------------------------------------
  void eval(NodeId id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::input:
        break;
      case Op::matmul: {
        const Tensor& a = pv(id, 0);
        const Tensor& b = pv(id, 1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
          shape_fail(id, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        ensure_shape(n.value, {a.dim(0), b.dim(1)});
        Map(n.value.data().data(), a.dim(0), b.dim(1)).noalias() =
            MapC(a.data().data(), a.dim(0), a.dim(1)) * MapC(b.data().data(), b.dim(0), b.dim(1));
        break;
      }
      case Op::conv2d: {
        const ConvGeom g = conv_geom(id);
        ensure_shape(n.value, {g.batch, g.cout, g.ho, g.wo});
        const Tensor& x = pv(id, 0);
        MapC w(pv(id, 1).data().data(), g.cout, g.cin * g.kh * g.kw);
        RowMat cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          im2col(g, x.data().data() + b * g.cin * g.h * g.w, cols);
          Map(n.value.data().data() + b * g.cout * g.ho * g.wo, g.cout, g.ho * g.wo).noalias() = w * cols;
        }
        break;
      }
      case Op::add: {
        const Tensor& a = pv(id, 0);
        const Tensor& b = pv(id, 1);
        ensure_shape(n.value, a.shape());
        if (a.shape() == b.shape()) {
          for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] + b[i];
        } else if (b.rank() == 1 && a.rank() >= 2 && a.dim(1) == b.dim(0)) {
          const std::size_t inner = a.size() / (a.dim(0) * a.dim(1));
          for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] + b[(i / inner) % b.dim(0)];
        } else {
          shape_fail(id, "add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
        }
        break;
      }
      case Op::sub:
      case Op::mul: {
        const Tensor& a = pv(id, 0);
        const Tensor& b = pv(id, 1);
        if (a.shape() != b.shape())
          shape_fail(id, std::string(n.op == Op::sub ? "sub " : "mul ") + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        ensure_shape(n.value, a.shape());
        if (n.op == Op::sub) {
          for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] - b[i];
        } else {
          for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] * b[i];
        }
        break;
      }
      case Op::affine: {
        const Tensor& a = pv(id, 0);
        ensure_shape(n.value, a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = n.p0 * a[i] + n.p1;
        break;
      }
      case Op::relu: {
        const Tensor& a = pv(id, 0);
        ensure_shape(n.value, a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] > 0.0 ? a[i] : 0.0;
        break;
      }
      case Op::softmax:
      case Op::log_softmax: {
        const Tensor& a = pv(id, 0);
        if (a.rank() != 2) shape_fail(id, "softmax expects rank 2, got " + shape_str(a.shape()));
        ensure_shape(n.value, a.shape());
        const std::size_t rows = a.dim(0), cols = a.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* in = a.data().data() + r * cols;
          double* out = n.value.data().data() + r * cols;
          const double mx = *std::max_element(in, in + cols);
          double z = 0.0;
          for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
          if (n.op == Op::softmax) {
            for (std::size_t c = 0; c < cols; ++c) out[c] = std::exp(in[c] - mx) / z;
          } else {
            const double lz = std::log(z) + mx;
            for (std::size_t c = 0; c < cols; ++c) out[c] = in[c] - lz;
          }
        }
        break;
      }
      case Op::log: {
        const Tensor& a = pv(id, 0);
        ensure_shape(n.value, a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = std::log(a[i]);
        break;
      }
      case Op::clamp: {
        const Tensor& a = pv(id, 0);
        ensure_shape(n.value, a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = std::clamp(a[i], n.p0, n.p1);
        break;
      }
      case Op::sum:
      case Op::mean: {
        const Tensor& a = pv(id, 0);
        ensure_shape(n.value, {});
        double s = 0.0;
        for (double v : a.data()) s += v;
        n.value[0] = n.op == Op::sum ? s : s / static_cast<double>(a.size());
        break;
      }
      case Op::sum_rows:
      case Op::row_max: {
        const Tensor& a = pv(id, 0);
        if (a.rank() != 2) shape_fail(id, "row reduction expects rank 2, got " + shape_str(a.shape()));
        const std::size_t rows = a.dim(0), cols = a.dim(1);
        ensure_shape(n.value, {rows});
        if (n.op == Op::row_max) n.argmax.assign(rows, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* in = a.data().data() + r * cols;
          if (n.op == Op::sum_rows) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += in[c];
            n.value[r] = s;
          } else {
            std::size_t best = 0;
            for (std::size_t c = 1; c < cols; ++c)
              if (in[c] > in[best]) best = c;
            n.argmax[r] = best;
            n.value[r] = in[best];
          }
        }
        break;
      }
      case Op::flatten: {
        const Tensor& a = pv(id, 0);
        if (a.rank() < 1) shape_fail(id, "flatten of a scalar");
        ensure_shape(n.value, {a.dim(0), a.size() / a.dim(0)});
        std::copy(a.data().begin(), a.data().end(), n.value.data().begin());
        break;
      }
    }
  }

  // backward ----------------------------------------------------------------
  Tensor* pgrad(NodeId id, std::size_t k) {
    const NodeId p = nodes_[id].parents[k];
    return active_[p] ? &nodes_[p].grad : nullptr;
  }

  void propagate(NodeId id) {
    Node& n = nodes_[id];
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::input:
        break;
      case Op::matmul: {
        const Tensor& a = pv(id, 0);
        const Tensor& b = pv(id, 1);
        MapC dc(g.data().data(), a.dim(0), b.dim(1));
        if (Tensor* da = pgrad(id, 0))
          Map(da->data().data(), a.dim(0), a.dim(1)).noalias() += dc * MapC(b.data().data(), b.dim(0), b.dim(1)).transpose();
        if (Tensor* db = pgrad(id, 1))
          Map(db->data().data(), b.dim(0), b.dim(1)).noalias() += MapC(a.data().data(), a.dim(0), a.dim(1)).transpose() * dc;
        break;
      }
      case Op::conv2d: {
        const ConvGeom geo = conv_geom(id);
        const Tensor& x = pv(id, 0);
        MapC w(pv(id, 1).data().data(), geo.cout, geo.cin * geo.kh * geo.kw);
        Tensor* dx = pgrad(id, 0);
        Tensor* dw = pgrad(id, 1);
        RowMat cols, dcols;
        for (std::size_t b = 0; b < geo.batch; ++b) {
          MapC dout(g.data().data() + b * geo.cout * geo.ho * geo.wo, geo.cout, geo.ho * geo.wo);
          if (dw) {
            im2col(geo, x.data().data() + b * geo.cin * geo.h * geo.w, cols);
            Map(dw->data().data(), geo.cout, geo.cin * geo.kh * geo.kw).noalias() += dout * cols.transpose();
          }
          if (dx) {
            dcols.noalias() = w.transpose() * dout;
            col2im_add(geo, dcols, dx->data().data() + b * geo.cin * geo.h * geo.w);
          }
        }
        break;
      }
      case Op::add: {
        const Tensor& a = pv(id, 0);
        const Tensor& b = pv(id, 1);
        if (Tensor* da = pgrad(id, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        if (Tensor* db = pgrad(id, 1)) {
          if (a.shape() == b.shape()) {
            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i];
          } else {
            const std::size_t inner = a.size() / (a.dim(0) * a.dim(1));
            for (std::size_t i = 0; i < g.size(); ++i) (*db)[(i / inner) % b.dim(0)] += g[i];
          }
        }
        break;
      }
      case Op::sub: {
        if (Tensor* da = pgrad(id, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        if (Tensor* db = pgrad(id, 1))
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
        break;
      }
      case Op::mul: {
        const Tensor& a = pv(id, 0);
        const Tensor& b = pv(id, 1);
        if (Tensor* da = pgrad(id, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * b[i];
        if (Tensor* db = pgrad(id, 1))
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * a[i];
        break;
      }
      case Op::affine: {
        if (Tensor* da = pgrad(id, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += n.p0 * g[i];
        break;
      }
      case Op::relu: {
        const Tensor& a = pv(id, 0);
        if (Tensor* da = pgrad(id, 0))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (a[i] > 0.0) (*da)[i] += g[i];
        break;
      }
      case Op::softmax: {
        Tensor* da = pgrad(id, 0);
        if (!da) break;
        const std::size_t rows = n.value.dim(0), cols = n.value.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = n.value.data().data() + r * cols;
          const double* dy = g.data().data() + r * cols;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
          for (std::size_t c = 0; c < cols; ++c) (*da)[r * cols + c] += y[c] * (dy[c] - dot);
        }
        break;
      }
      case Op::log_softmax: {
        Tensor* da = pgrad(id, 0);
        if (!da) break;
        const std::size_t rows = n.value.dim(0), cols = n.value.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = n.value.data().data() + r * cols;
          const double* dy = g.data().data() + r * cols;
          double s = 0.0;
          for (std::size_t c = 0; c < cols; ++c) s += dy[c];
          for (std::size_t c = 0; c < cols; ++c) (*da)[r * cols + c] += dy[c] - std::exp(y[c]) * s;
        }
        break;
      }
      case Op::log: {
        const Tensor& a = pv(id, 0);
        if (Tensor* da = pgrad(id, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] / a[i];
        break;
      }
      case Op::clamp: {
        const Tensor& a = pv(id, 0);
        if (Tensor* da = pgrad(id, 0))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (a[i] >= n.p0 && a[i] <= n.p1) (*da)[i] += g[i];
        break;
      }
      case Op::sum:
      case Op::mean: {
        Tensor* da = pgrad(id, 0);
        if (!da) break;
        const double s = n.op == Op::sum ? g[0] : g[0] / static_cast<double>(da->size());
        for (double& v : da->data()) v += s;
        break;
      }
      case Op::sum_rows: {
        Tensor* da = pgrad(id, 0);
        if (!da) break;
        const std::size_t cols = da->dim(1);
        for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += g[i / cols];
        break;
      }
      case Op::row_max: {
        Tensor* da = pgrad(id, 0);
        if (!da) break;
        const std::size_t cols = da->dim(1);
        for (std::size_t r = 0; r < n.argmax.size(); ++r) (*da)[r * cols + n.argmax[r]] += g[r];
        break;
      }
      case Op::flatten: {
        if (Tensor* da = pgrad(id, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_;
  std::map<std::string, NodeId> outputs_;
  std::vector<char> active_;
  bool evaluated_ = false;
};

/// Five-point central difference of a scalar function of one offset:
/// (8 (f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h, error O(h^4).
template <class F>
double fd_derivative(F&& f_at_offset, double h = 1e-3) {
  if (!(h > 0.0)) throw Error("finite-difference step must be positive");
  const double d1 = f_at_offset(h) - f_at_offset(-h);
  const double d2 = f_at_offset(2.0 * h) - f_at_offset(-2.0 * h);
  return (8.0 * d1 - d2) / (12.0 * h);
}

/// |a - b| / max(|a|, |b|, 1e-12).
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

/**
 * Largest relative_error between backward() and fd_derivative over every
 * element of every gradient-requiring input.
 */
inline double grad_check(Graph& graph, const std::map<std::string, Tensor>& inputs, const std::string& seed,
                         double h = 1e-3) {
  graph.forward(inputs);
  const std::map<std::string, Tensor> analytic = graph.backward(seed);
  const NodeId seed_id = graph.output_id(seed);
  double worst = 0.0;
  for (const auto& [name, grad] : analytic) {
    Tensor probe = inputs.at(name);
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double orig = probe[i];
      const double fd = fd_derivative(
          [&](double off) {
            probe[i] = orig + off;
            graph.set_input(name, probe);
            graph.run();
            return graph.value(seed_id).item();
          },
          h);
      probe[i] = orig;
      worst = std::max(worst, relative_error(grad[i], fd));
    }
    graph.set_input(name, probe);
  }
  graph.run();
  return worst;
}

}  // namespace seat
