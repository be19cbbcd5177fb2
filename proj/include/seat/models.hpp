#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seat/autodiff.hpp"
#include "seat/params.hpp"
#include "seat/random.hpp"

namespace seat {

enum class ModelKind { mlp, cnn };
enum class TrainLoss { ce, trades, mart };
enum class AttackLoss { ce, margin };

/// Probabilities inside logs are clamped to this distance from 0 and 1.
inline constexpr double kProbClamp = 1e-12;

struct ModelSpec {
  ModelKind kind = ModelKind::mlp;
  /// mlp: input width, hidden widths..., num_classes.
  std::vector<std::size_t> layer_sizes;
  /// cnn: per-sample input shape {C, H, W}.
  Shape input_shape;
  std::vector<std::size_t> conv_channels;
  std::size_t kernel = 3;
  Padding padding = Padding::same;
  std::size_t num_classes = 0;

  static ModelSpec mlp(std::vector<std::size_t> sizes) {
    ModelSpec s;
    s.kind = ModelKind::mlp;
    s.num_classes = sizes.empty() ? 0 : sizes.back();
    s.layer_sizes = std::move(sizes);
    s.validate();
    return s;
  }

  static ModelSpec cnn(Shape input, std::vector<std::size_t> channels, std::size_t classes,
                       Padding padding = Padding::same) {
    ModelSpec s;
    s.kind = ModelKind::cnn;
    s.input_shape = std::move(input);
    s.conv_channels = std::move(channels);
    s.num_classes = classes;
    s.padding = padding;
    s.validate();
    return s;
  }

  /// Per-sample input shape expected by the network.
  Shape sample_shape() const { return kind == ModelKind::mlp ? Shape{layer_sizes.front()} : input_shape; }

  void validate() const {
    if (num_classes < 2) throw Error("model needs at least 2 classes");
    if (kind == ModelKind::mlp) {
      if (layer_sizes.size() < 2) throw Error("mlp needs an input and an output width");
      if (layer_sizes.back() != num_classes) throw Error("mlp final width must equal num_classes");
      for (std::size_t w : layer_sizes)
        if (w == 0) throw Error("mlp widths must be positive");
    } else {
      if (input_shape.size() != 3) throw Error("cnn input shape must be {C,H,W}");
      if (conv_channels.empty()) throw Error("cnn needs at least one conv layer");
      if (kernel % 2 == 0 && padding == Padding::same) throw Error("same padding needs an odd kernel");
      std::size_t h = input_shape[1], w = input_shape[2];
      for (std::size_t i = 0; i < conv_channels.size(); ++i) {
        if (padding == Padding::valid) {
          if (h < kernel || w < kernel) throw Error("cnn input too small for valid convolutions");
          h -= kernel - 1;
          w -= kernel - 1;
        }
      }
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline ParamLayout model_layout(const ModelSpec& spec) {
  std::vector<std::pair<std::string, Shape>> entries;
  if (spec.kind == ModelKind::mlp) {
    for (std::size_t i = 0; i + 1 < spec.layer_sizes.size(); ++i) {
      entries.emplace_back("fc" + std::to_string(i) + ".weight", Shape{spec.layer_sizes[i], spec.layer_sizes[i + 1]});
      entries.emplace_back("fc" + std::to_string(i) + ".bias", Shape{spec.layer_sizes[i + 1]});
    }
  } else {
    std::size_t cin = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
    for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
      const std::size_t cout = spec.conv_channels[i];
      entries.emplace_back("conv" + std::to_string(i) + ".weight", Shape{cout, cin, spec.kernel, spec.kernel});
      entries.emplace_back("conv" + std::to_string(i) + ".bias", Shape{cout});
      if (spec.padding == Padding::valid) {
        h -= spec.kernel - 1;
        w -= spec.kernel - 1;
      }
      cin = cout;
    }
    entries.emplace_back("head.weight", Shape{cin * h * w, spec.num_classes});
    entries.emplace_back("head.bias", Shape{spec.num_classes});
  }
  return make_layout(entries);
}

/// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector p(model_layout(spec));
  Rng rng(derive_seed({seed, 0x1417ULL}));
  std::size_t fan_in = 1;
  for (const auto& e : p.layout()) {
    if (e.shape.size() >= 2) fan_in = e.shape.size() == 4 ? e.shape[1] * e.shape[2] * e.shape[3] : e.shape[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : p.view(e)) v = rng.uniform(-bound, bound);
  }
  return p;
}

inline Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  Tensor t({labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw Error("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) + " outside [0, " +
                  std::to_string(num_classes) + ")");
    t.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return t;
}

/// Row-wise argmax; ties resolve to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& scores) {
  std::vector<int> out(scores.dim(0));
  for (std::size_t r = 0; r < scores.dim(0); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.dim(1); ++c)
      if (scores.at(r, c) > scores.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

inline Tensor softmax_rows(const Tensor& logits) {
  Tensor p(logits.shape());
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    double mx = logits.at(r, 0);
    for (std::size_t c = 1; c < logits.dim(1); ++c) mx = std::max(mx, logits.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < logits.dim(1); ++c) z += std::exp(logits.at(r, c) - mx);
    for (std::size_t c = 0; c < logits.dim(1); ++c) p.at(r, c) = std::exp(logits.at(r, c) - mx) / z;
  }
  return p;
}

// ---- loss graph builders ---------------------------------------------------

namespace loss_graph {

/// Batch mean of -sum_k onehot_k log softmax(z)_k.
inline NodeId cross_entropy(Graph& g, NodeId logits, NodeId onehot) {
  return g.affine(g.mean(g.sum_rows(g.mul(g.log_softmax(logits), onehot))), -1.0, 0.0);
}

/// Per-row KL(p || q) given log-probabilities.
inline NodeId kl_rows(Graph& g, NodeId log_p, NodeId log_q, NodeId p) {
  return g.sum_rows(g.mul(p, g.sub(log_p, log_q)));
}

/// CE(nat) + eta * mean KL(softmax(nat) || softmax(adv)).
inline NodeId trades(Graph& g, NodeId nat, NodeId adv, NodeId onehot, double eta) {
  const NodeId ce = cross_entropy(g, nat, onehot);
  const NodeId lp_nat = g.log_softmax(nat);
  const NodeId kl = kl_rows(g, lp_nat, g.log_softmax(adv), g.softmax(nat));
  return g.add(ce, g.affine(g.mean(kl), eta, 0.0));
}

/**
 * CE(adv) + eta * mean[(1 - p_nat,y) KL(p_adv || p_nat)]
 *   + mean[-log(1 - max_{k != y} p_adv,k)].
 * `off_target` is 1 - onehot.
 */
inline NodeId mart(Graph& g, NodeId nat, NodeId adv, NodeId onehot, NodeId off_target, double eta) {
  const NodeId ce = cross_entropy(g, adv, onehot);
  const NodeId p_nat = g.softmax(nat);
  const NodeId p_adv = g.softmax(adv);
  const NodeId weight = g.affine(g.sum_rows(g.mul(p_nat, onehot)), -1.0, 1.0);
  const NodeId kl = kl_rows(g, g.log_softmax(adv), g.log_softmax(nat), p_adv);
  const NodeId weighted = g.affine(g.mean(g.mul(weight, kl)), eta, 0.0);
  const NodeId wrong = g.row_max(g.mul(p_adv, off_target));
  const NodeId margin = g.log(g.clamp(g.affine(wrong, -1.0, 1.0), kProbClamp, 1.0 - kProbClamp));
  return g.add(g.add(ce, weighted), g.affine(g.mean(margin), -1.0, 0.0));
}

/// Batch mean of max_{k != y} z_k - z_y. `mask` holds a large negative value
/// on the true class and zero elsewhere.
inline NodeId margin(Graph& g, NodeId logits, NodeId onehot, NodeId mask) {
  const NodeId best_wrong = g.row_max(g.add(logits, mask));
  const NodeId correct = g.sum_rows(g.mul(logits, onehot));
  return g.mean(g.sub(best_wrong, correct));
}

}  // namespace loss_graph

namespace detail {

inline double eval_pair_loss(const Tensor& nat, const Tensor* adv, std::span<const int> labels, TrainLoss kind,
                             double eta) {
  if (nat.rank() != 2) throw Error("logits must be [batch, classes]");
  if (adv && adv->shape() != nat.shape())
    throw Error("logit shape mismatch " + shape_str(nat.shape()) + " vs " + shape_str(adv->shape()));
  if (labels.size() != nat.dim(0)) throw Error("label count does not match batch");
  Graph g;
  const NodeId zn = g.input("nat");
  const NodeId za = g.input("adv");
  const NodeId oh = g.input("onehot");
  const NodeId off = g.input("off");
  NodeId out = 0;
  switch (kind) {
    case TrainLoss::ce: out = loss_graph::cross_entropy(g, zn, oh); break;
    case TrainLoss::trades: out = loss_graph::trades(g, zn, za, oh, eta); break;
    case TrainLoss::mart: out = loss_graph::mart(g, zn, za, oh, off, eta); break;
  }
  g.mark_output("loss", out);
  Tensor onehot = one_hot(labels, nat.dim(1));
  Tensor offt(onehot.shape());
  for (std::size_t i = 0; i < offt.size(); ++i) offt[i] = 1.0 - onehot[i];
  return g.forward({{"nat", nat}, {"adv", adv ? *adv : nat}, {"onehot", onehot}, {"off", offt}}).at("loss").item();
}

}  // namespace detail

inline double loss_ce(const Tensor& logits, std::span<const int> labels) {
  return detail::eval_pair_loss(logits, nullptr, labels, TrainLoss::ce, 0.0);
}

inline double loss_trades(const Tensor& nat, const Tensor& adv, std::span<const int> labels, double eta) {
  if (eta < 0.0) throw Error("eta must be non-negative");
  return detail::eval_pair_loss(nat, &adv, labels, TrainLoss::trades, eta);
}

/// `eta` scales the weighted KL term; 1 gives the plain sum of the three terms.
inline double loss_mart(const Tensor& nat, const Tensor& adv, std::span<const int> labels, double eta = 1.0) {
  return detail::eval_pair_loss(nat, &adv, labels, TrainLoss::mart, eta);
}

// ---- classifier --------------------------------------------------------------

/**
 * A model architecture plus cached computation graphs for its heads.
 *
 * Parameters are supplied per call, so one Classifier evaluates any number
 * of parameter vectors (live weights, ensembles, snapshots). Not thread-safe;
 * use one instance per thread.
 */
class Classifier {
 public:
  explicit Classifier(ModelSpec spec) : spec_(std::move(spec)), layout_(model_layout(spec_)) { spec_.validate(); }

  const ModelSpec& spec() const noexcept { return spec_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t num_classes() const noexcept { return spec_.num_classes; }

  /// Reshape a batch to the model's input layout; per-sample sizes must match.
  Tensor adapt_input(const Tensor& x) const {
    const Shape sample = spec_.sample_shape();
    if (x.rank() < 2 || x.size() / x.dim(0) != shape_size(sample))
      throw Error("input " + shape_str(x.shape()) + " does not match model input " + shape_str(sample));
    Shape full{x.dim(0)};
    full.insert(full.end(), sample.begin(), sample.end());
    return x.shape() == full ? x : x.reshaped(full);
  }

  Tensor logits(const ParamVector& params, const Tensor& x) {
    Head& h = head(HeadKind::logits, 0.0);
    bind_params(h, params);
    h.graph.set_input("x", adapt_input(x));
    h.graph.run();
    return h.graph.value(h.out);
  }

  Tensor probabilities(const ParamVector& params, const Tensor& x) { return softmax_rows(logits(params, x)); }

  /// Gradient of the batch-mean attack objective with respect to the input.
  Tensor input_gradient(const ParamVector& params, const Tensor& x, std::span<const int> labels, AttackLoss loss) {
    Head& h = head(loss == AttackLoss::ce ? HeadKind::ce : HeadKind::margin, 0.0);
    bind_params(h, params);
    const Tensor xin = adapt_input(x);
    h.graph.set_input("x", xin);
    bind_labels(h, labels, xin.dim(0));
    for (const auto& e : layout_) h.graph.set_requires_grad(e.name, false);
    h.graph.set_requires_grad("x", true);
    h.graph.run();
    h.graph.backward(h.out);
    return h.graph.grad("x").reshaped(x.shape());
  }

  /**
   * Training loss on a minibatch. CE uses only `x_adv`; TRADES and MART use
   * both views. When `grad` is non-null it receives d loss / d params.
   */
  double loss(const ParamVector& params, TrainLoss kind, double eta, const Tensor& x_nat, const Tensor& x_adv,
              std::span<const int> labels, ParamVector* grad = nullptr) {
    const HeadKind hk = kind == TrainLoss::ce ? HeadKind::ce : (kind == TrainLoss::trades ? HeadKind::trades : HeadKind::mart);
    Head& h = head(hk, eta);
    bind_params(h, params);
    const Tensor xa = adapt_input(x_adv);
    h.graph.set_input("x", xa);
    if (hk != HeadKind::ce) h.graph.set_input("x_nat", adapt_input(x_nat));
    bind_labels(h, labels, xa.dim(0));
    for (const auto& e : layout_) h.graph.set_requires_grad(e.name, grad != nullptr);
    h.graph.set_requires_grad("x", false);
    if (hk != HeadKind::ce) h.graph.set_requires_grad("x_nat", false);
    h.graph.run();
    const double value = h.graph.value(h.out).item();
    if (grad) {
      if (grad->layout() != layout_) *grad = ParamVector(layout_);
      h.graph.backward(h.out);
      for (const auto& e : layout_) {
        const Tensor& gt = h.graph.grad(e.name);
        std::copy(gt.data().begin(), gt.data().end(), grad->view(e).begin());
      }
    }
    return value;
  }

 private:
  enum class HeadKind { logits, ce, trades, mart, margin };

  struct Head {
    Graph graph;
    NodeId out = 0;
    double eta = 0.0;
  };

  NodeId build_network(Graph& g, NodeId x) const {
    NodeId h = x;
    if (spec_.kind == ModelKind::mlp) {
      const std::size_t layers = spec_.layer_sizes.size() - 1;
      for (std::size_t i = 0; i < layers; ++i) {
        const std::string p = "fc" + std::to_string(i);
        h = g.add(g.matmul(h, g.input_id(p + ".weight")), g.input_id(p + ".bias"));
        if (i + 1 < layers) h = g.relu(h);
      }
      return h;
    }
    for (std::size_t i = 0; i < spec_.conv_channels.size(); ++i) {
      const std::string p = "conv" + std::to_string(i);
      h = g.relu(g.add(g.conv2d(h, g.input_id(p + ".weight"), spec_.padding), g.input_id(p + ".bias")));
    }
    return g.add(g.matmul(g.flatten(h), g.input_id("head.weight")), g.input_id("head.bias"));
  }

  Head& head(HeadKind kind, double eta) {
    const int key = static_cast<int>(kind);
    auto it = heads_.find(key);
    if (it != heads_.end() && it->second->eta == eta) return *it->second;
    auto h = std::make_unique<Head>();
    h->eta = eta;
    Graph& g = h->graph;
    for (const auto& e : layout_) g.input(e.name, true);
    const NodeId x = g.input("x");
    const NodeId z = build_network(g, x);
    switch (kind) {
      case HeadKind::logits: h->out = z; break;
      case HeadKind::ce: h->out = loss_graph::cross_entropy(g, z, g.input("onehot")); break;
      case HeadKind::margin: {
        const NodeId oh = g.input("onehot");
        h->out = loss_graph::margin(g, z, oh, g.input("mask"));
        break;
      }
      case HeadKind::trades:
      case HeadKind::mart: {
        const NodeId zn = build_network(g, g.input("x_nat"));
        const NodeId oh = g.input("onehot");
        h->out = kind == HeadKind::trades ? loss_graph::trades(g, zn, z, oh, eta)
                                          : loss_graph::mart(g, zn, z, oh, g.input("off"), eta);
        break;
      }
    }
    g.mark_output("out", h->out);
    Head& ref = *h;
    heads_[key] = std::move(h);
    return ref;
  }

  void bind_params(Head& h, const ParamVector& params) {
    require_same_layout(layout_, params.layout());
    for (const auto& e : layout_) h.graph.set_input(e.name, e.shape, params.view(e));
  }

  void bind_labels(Head& h, std::span<const int> labels, std::size_t batch) {
    if (labels.size() != batch) throw Error("label count does not match batch");
    Tensor oh = one_hot(labels, spec_.num_classes);
    if (h.graph.has_input("mask")) {
      Tensor mask(oh.shape());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = oh[i] > 0.0 ? -1e9 : 0.0;
      h.graph.set_input("mask", std::move(mask));
    }
    if (h.graph.has_input("off")) {
      Tensor off(oh.shape());
      for (std::size_t i = 0; i < off.size(); ++i) off[i] = 1.0 - oh[i];
      h.graph.set_input("off", std::move(off));
    }
    h.graph.set_input("onehot", std::move(oh));
  }

  ModelSpec spec_;
  ParamLayout layout_;
  std::map<int, std::unique_ptr<Head>> heads_;
};

inline Tensor predict(const ModelSpec& spec, const ParamVector& params, const Tensor& x) {
  return Classifier(spec).logits(params, x);
}

}  // namespace seat
