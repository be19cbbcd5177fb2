#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "seat/error.hpp"
#include "seat/params.hpp"
#include "seat/random.hpp"
#include "seat/tensor.hpp"

namespace seat {

enum class Split { train, test };

inline std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

/// Labelled inputs in [0,1]. `inputs` is [N, ...].
struct Dataset {
  Tensor inputs;
  std::vector<int> labels;
  std::string name;
  Split split = Split::train;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }

  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }

  void validate() const {
    if (inputs.rank() < 2 || inputs.dim(0) != labels.size())
      throw Error("dataset '" + name + "': input rows do not match label count");
    for (double v : inputs.data())
      if (!(v >= 0.0 && v <= 1.0)) throw Error("dataset '" + name + "': input outside [0,1]");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
        throw Error("dataset '" + name + "': label " + std::to_string(y) + " out of range");
  }

  Dataset subset(std::span<const std::size_t> rows, std::string new_name = {}) const {
    Dataset d;
    d.inputs = inputs.gather_rows(rows);
    d.labels.reserve(rows.size());
    for (std::size_t r : rows) d.labels.push_back(labels.at(r));
    d.name = new_name.empty() ? name : std::move(new_name);
    d.split = split;
    d.num_classes = num_classes;
    return d;
  }

  Dataset head(std::size_t n) const {
    std::vector<std::size_t> rows(std::min(n, size()));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return subset(rows);
  }

  /// n rows spread evenly over the set (all rows when n >= size()).
  Dataset strided(std::size_t n) const {
    std::vector<std::size_t> rows(std::min(n, size()));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i * size() / rows.size();
    return subset(rows);
  }
};

// ---- synthetic -------------------------------------------------------------

namespace detail {

inline void minmax_scale_columns(std::vector<double>& xy, std::size_t cols) {
  const std::size_t rows = xy.size() / cols;
  for (std::size_t c = 0; c < cols; ++c) {
    double lo = xy[c], hi = xy[c];
    for (std::size_t r = 0; r < rows; ++r) {
      lo = std::min(lo, xy[r * cols + c]);
      hi = std::max(hi, xy[r * cols + c]);
    }
    for (std::size_t r = 0; r < rows; ++r) {
      double& v = xy[r * cols + c];
      v = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.5;
    }
  }
}

}  // namespace detail

/**
 * Two interleaving half circles, n/2 points each, with optional Gaussian
 * noise, min-max scaled into [0,1]^2. Class 0 is the upper arc
 * (cos t, sin t); class 1 the lower arc (1 - cos t, 0.5 - sin t).
 */
inline Dataset gen_two_moons(std::size_t n, double noise_sigma, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) throw Error("two-moons needs an even n >= 2, got " + std::to_string(n));
  if (noise_sigma < 0.0) throw Error("two-moons noise must be non-negative");
  const std::size_t half = n / 2;
  std::vector<double> xy(2 * n);
  std::vector<int> labels(n);
  Rng rng(derive_seed({seed, 0x300A5ULL}));
  for (std::size_t i = 0; i < half; ++i) {
    const double t = half > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
    xy[2 * i] = std::cos(t);
    xy[2 * i + 1] = std::sin(t);
    labels[i] = 0;
    xy[2 * (half + i)] = 1.0 - std::cos(t);
    xy[2 * (half + i) + 1] = 0.5 - std::sin(t);
    labels[half + i] = 1;
  }
  if (noise_sigma > 0.0)
    for (double& v : xy) v += noise_sigma * rng.normal();
  detail::minmax_scale_columns(xy, 2);
  Dataset d;
  d.inputs = Tensor({n, 2}, std::move(xy));
  d.labels = std::move(labels);
  d.name = "two-moons";
  d.num_classes = 2;
  return d;
}

/// Disjoint train/test sets cut from one scaled draw (alternating rows per class).
inline std::pair<Dataset, Dataset> two_moons_split(std::size_t n_train, std::size_t n_test, double noise_sigma,
                                                   std::uint64_t seed) {
  if (n_train % 2 || n_test % 2) throw Error("two-moons split sizes must be even");
  const Dataset all = gen_two_moons(n_train + n_test, noise_sigma, seed);
  const std::size_t half = all.size() / 2;
  std::vector<std::size_t> train, test;
  for (std::size_t cls = 0; cls < 2; ++cls) {
    std::size_t tr = 0, te = 0;
    for (std::size_t i = 0; i < half; ++i) {
      const bool to_test = (i % 2 == 1 && te < n_test / 2) || tr >= n_train / 2;
      (to_test ? test : train).push_back(cls * half + i);
      (to_test ? te : tr)++;
    }
  }
  Dataset a = all.subset(train, "two-moons");
  Dataset b = all.subset(test, "two-moons");
  b.split = Split::test;
  return {std::move(a), std::move(b)};
}

// ---- IDX (MNIST) -------------------------------------------------------------

class IdxError : public Error {
 public:
  enum class Code { io, bad_magic, truncated, count_mismatch, bad_label };
  IdxError(Code code, const std::string& what) : Error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

namespace detail {

/// Whole file contents; gzip-compressed files are inflated transparently.
inline std::vector<unsigned char> read_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IdxError(IdxError::Code::io, "cannot open '" + path + "'");
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      throw IdxError(IdxError::Code::io, "read error on '" + path + "'");
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Reads an IDX image/label file pair; pixels are scaled by 1/255.
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  using Code = IdxError::Code;
  const auto img = detail::read_maybe_gz(images_path);
  const auto lab = detail::read_maybe_gz(labels_path);
  if (img.size() < 16) throw IdxError(Code::truncated, "'" + images_path + "': truncated header");
  if (detail::be32(img, 0) != kIdxImagesMagic)
    throw IdxError(Code::bad_magic, "'" + images_path + "': not an IDX image file (bad magic)");
  if (lab.size() < 8) throw IdxError(Code::truncated, "'" + labels_path + "': truncated header");
  if (detail::be32(lab, 0) != kIdxLabelsMagic)
    throw IdxError(Code::bad_magic, "'" + labels_path + "': not an IDX label file (bad magic)");
  const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8), cols = detail::be32(img, 12);
  const std::size_t nl = detail::be32(lab, 4);
  if (n == 0 || rows == 0 || cols == 0) throw IdxError(Code::truncated, "'" + images_path + "': empty image set");
  if (img.size() < 16 + n * rows * cols) throw IdxError(Code::truncated, "'" + images_path + "': truncated payload");
  if (lab.size() < 8 + nl) throw IdxError(Code::truncated, "'" + labels_path + "': truncated payload");
  if (n != nl)
    throw IdxError(Code::count_mismatch,
                   "image count " + std::to_string(n) + " does not match label count " + std::to_string(nl));
  Dataset d;
  d.inputs = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.inputs[i] = static_cast<double>(img[16 + i]) / 255.0;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[8 + i] > 9) throw IdxError(Code::bad_label, "label byte " + std::to_string(lab[8 + i]) + " out of range");
    d.labels[i] = lab[8 + i];
  }
  d.name = "mnist";
  d.num_classes = 10;
  return d;
}

/**
 * Fixed subsets of an IDX set. "mnist-1k" / "mnist-4k" take the first 100 /
 * 400 examples of every class in file order; "mnist-test-1k" takes the last
 * 100 of every class, disjoint from the train presets when each class has at
 * least 500 examples.
 */
inline std::vector<std::size_t> mnist_subset_indices(const Dataset& full, std::string_view preset) {
  std::size_t per_class = 0;
  bool from_end = false;
  if (preset == "mnist-1k") {
    per_class = 100;
  } else if (preset == "mnist-4k") {
    per_class = 400;
  } else if (preset == "mnist-test-1k") {
    per_class = 100;
    from_end = true;
  } else {
    throw Error("unknown MNIST subset '" + std::string(preset) + "'");
  }
  std::vector<std::vector<std::size_t>> by_class(full.num_classes);
  for (std::size_t i = 0; i < full.size(); ++i) by_class[full.labels[i]].push_back(i);
  std::vector<std::size_t> out;
  for (auto& rows : by_class) {
    if (rows.size() < per_class) throw Error("not enough examples per class for " + std::string(preset));
    if (from_end) {
      out.insert(out.end(), rows.end() - per_class, rows.end());
    } else {
      out.insert(out.end(), rows.begin(), rows.begin() + per_class);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---- atomic file output ------------------------------------------------------

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Shortest round-trip decimal form; "nan" for NaN.
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  std::array<char, 32> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

/// CSV with a header row, unquoted fields, '.' decimals and LF endings.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> row) {
    if (row.size() != header_.size()) throw Error("csv row width does not match header");
    rows_.push_back(std::move(row));
  }

  const std::vector<std::vector<std::string>>& rows() const noexcept { return rows_; }

  std::string str() const {
    std::string s;
    auto line = [&s](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) s += ',';
        s += cells[i];
      }
      s += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return s;
  }

  void write(const std::filesystem::path& path) const { write_file_atomic(path, str()); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// ---- checkpoints -------------------------------------------------------------

class CheckpointError : public Error {
 public:
  enum class Code { io, bad_magic, unsupported_version, truncated, invalid };
  CheckpointError(Code code, const std::string& what) : Error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

inline constexpr std::string_view kCheckpointMagic = "SEATCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamVector params;
  /// JSON text exactly as stored.
  std::string metadata;

  nlohmann::json meta() const { return nlohmann::json::parse(metadata); }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void raw(std::string_view s) { bytes.append(s); }
  std::string bytes;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError(CheckpointError::Code::truncated, "checkpoint truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{static_cast<unsigned char>(b_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/**
 * Layout:
 *   "SEATCKPT" | u32 version | u32 entries |
 *   entries x (u32 name_len, name, u32 ndim, u64 dims..., u64 offset) |
 *   u64 count | count x f32 | u64 meta_len | meta JSON
 * All integers and floats little-endian.
 */
inline void save_checkpoint(const ParamVector& params, const nlohmann::json& meta, const std::filesystem::path& path) {
  if (params.empty()) throw CheckpointError(CheckpointError::Code::invalid, "refusing to save an empty parameter vector");
  detail::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.layout().size()));
  for (const auto& e : params.layout()) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.raw(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.u64(d);
    w.u64(e.offset);
  }
  w.u64(params.size());
  for (double v : params.data()) w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  const std::string text = meta.dump();
  w.u64(text.size());
  w.raw(text);
  write_file_atomic(path, w.bytes);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  using Code = CheckpointError::Code;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Code::io, "cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader r(bytes);
  if (bytes.size() < kCheckpointMagic.size() || r.raw(kCheckpointMagic.size()) != kCheckpointMagic)
    throw CheckpointError(Code::bad_magic, "'" + path.string() + "' is not a SEATCKPT file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(Code::unsupported_version, "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t entries = r.u32();
  ParamLayout layout;
  for (std::uint32_t i = 0; i < entries; ++i) {
    LayoutEntry e;
    e.name = r.raw(r.u32());
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(r.u64());
    e.offset = r.u64();
    layout.push_back(std::move(e));
  }
  const std::uint64_t count = r.u64();
  if (count != layout_size(layout)) throw CheckpointError(Code::invalid, "payload size does not match layout");
  if (count > bytes.size()) throw CheckpointError(Code::truncated, "checkpoint truncated");
  std::vector<double> values(count);
  for (auto& v : values) v = static_cast<double>(std::bit_cast<float>(r.u32()));
  std::string meta = r.raw(r.u64());
  if (!r.at_end()) throw CheckpointError(Code::invalid, "trailing bytes after checkpoint metadata");
  if (!nlohmann::json::accept(meta)) throw CheckpointError(Code::invalid, "checkpoint metadata is not JSON");
  try {
    return Checkpoint{ParamVector(std::move(layout), std::move(values)), std::move(meta)};
  } catch (const LayoutError& ex) {
    throw CheckpointError(Code::invalid, ex.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace seat
