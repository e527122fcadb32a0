#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sspformer/core/autodiff.hpp"
#include "sspformer/core/errors.hpp"
#include "sspformer/core/fts.hpp"
#include "sspformer/core/hash.hpp"
#include "sspformer/core/ops.hpp"
#include "sspformer/core/rng.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

// recon is the masked-reconstruction pretraining task; the others are the
// downstream fine-tuning targets, each owning a task token, head and tail.
enum class TaskKind { recon, sr2, sr3, sr4, denoise, segment };

inline const std::vector<TaskKind>& all_tasks() {
  static const std::vector<TaskKind> k = {TaskKind::recon, TaskKind::sr2,     TaskKind::sr3,
                                          TaskKind::sr4,   TaskKind::denoise, TaskKind::segment};
  return k;
}

inline std::string task_name(TaskKind t) {
  switch (t) {
    case TaskKind::recon: return "recon";
    case TaskKind::sr2: return "sr2";
    case TaskKind::sr3: return "sr3";
    case TaskKind::sr4: return "sr4";
    case TaskKind::denoise: return "denoise";
    case TaskKind::segment: return "segment";
  }
  throw ConfigError("unreachable task kind");
}

inline TaskKind parse_task(const std::string& s) {
  for (TaskKind t : all_tasks())
    if (task_name(t) == s) return t;
  throw ConfigError("unknown task '" + s + "'");
}

inline std::size_t sr_factor(TaskKind t) {
  switch (t) {
    case TaskKind::sr2: return 2;
    case TaskKind::sr3: return 3;
    case TaskKind::sr4: return 4;
    default: return 0;
  }
}

struct ModelConfig {
  std::size_t patch = 16;
  std::size_t embed = 384;
  std::size_t enc_layers = 12;
  std::size_t dec_layers = 4;
  std::size_t heads = 8;
  std::size_t d_k = 48;
  std::size_t conv_channels = 32;  // slim head/tail width
  std::size_t in_channels = 6;
  std::size_t seg_classes = 4;
  std::size_t img_h = 224;
  std::size_t img_w = 224;
  double icn_epsilon = 1e-5;
  double foreground_fraction = 0.05;

  void validate() const {
    if (heads * d_k != embed)
      throw ConfigError("heads*d_k (" + std::to_string(heads * d_k) + ") must equal embed " + std::to_string(embed));
    if (patch == 0 || img_h % patch != 0 || img_w % patch != 0)
      throw ConfigError("patch " + std::to_string(patch) + " must divide " + std::to_string(img_h) + "x" +
                        std::to_string(img_w));
    if (embed == 0 || enc_layers == 0 || dec_layers == 0 || heads == 0 || conv_channels == 0 || in_channels == 0 ||
        seg_classes == 0)
      throw ConfigError("all model dimensions must be positive");
    if (icn_epsilon <= 0.0) throw ConfigError("icn_epsilon must be > 0");
  }

  std::size_t grid_h() const { return img_h / patch; }
  std::size_t grid_w() const { return img_w / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  std::size_t ffn_hidden() const { return 4 * embed; }
  std::size_t patch_dim() const { return conv_channels * patch * patch; }

  std::size_t out_channels(TaskKind t) const {
    switch (t) {
      case TaskKind::recon: return in_channels;
      case TaskKind::segment: return seg_classes;
      default: return 3;
    }
  }

  // Single-CPU configuration used by the end-to-end training checks.
  static ModelConfig desk() {
    ModelConfig c;
    c.patch = 4;
    c.embed = 64;
    c.enc_layers = 2;
    c.dec_layers = 1;
    c.heads = 4;
    c.d_k = 16;
    c.conv_channels = 8;
    c.in_channels = 6;
    c.seg_classes = 4;
    c.img_h = 64;
    c.img_w = 64;
    return c;
  }
};

enum class InitMode { zeros, trunc_normal };

struct Param {
  RealTensor value;
  bool trainable = true;
};

enum class ParamFilter { all, trainable, frozen };

// Named parameter map. Freezing flips flags only; values move exclusively
// through the optimizer, which skips frozen entries.
class ParamStore {
 public:
  void add(const std::string& path, RealTensor value, bool trainable = true) {
    if (params_.count(path)) throw PathError("duplicate parameter path " + path);
    params_.emplace(path, Param{std::move(value), trainable});
  }

  bool has(const std::string& path) const { return params_.count(path) != 0; }

  Param& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw PathError("no parameter at " + path);
    return it->second;
  }
  const Param& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw PathError("no parameter at " + path);
    return it->second;
  }

  RealTensor& value(const std::string& path) { return at(path).value; }
  const RealTensor& value(const std::string& path) const { return at(path).value; }

  std::vector<std::string> paths(const std::string& prefix = "") const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

  void freeze(const std::string& prefix) { set_trainable(prefix, false); }
  void unfreeze(const std::string& prefix) { set_trainable(prefix, true); }

  std::size_t count_params(ParamFilter f = ParamFilter::all, const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) {
      if (k.rfind(prefix, 0) != 0) continue;
      if (f == ParamFilter::trainable && !v.trainable) continue;
      if (f == ParamFilter::frozen && v.trainable) continue;
      n += v.value.size();
    }
    return n;
  }

  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  // SSPF1 checkpoint: UTF-8 manifest (path dtype rank dims trainable offset)
  // followed by the concatenated FTS1 blobs the offsets point into.
  void save(std::ostream& os) const {
    std::ostringstream blobs;
    std::ostringstream manifest;
    manifest << "SSPF1\n" << params_.size() << "\n";
    for (const auto& [k, v] : params_) {
      const auto offset = static_cast<std::uint64_t>(blobs.tellp());
      manifest << k << " 0 " << v.value.rank();
      for (std::size_t d = 0; d < v.value.rank(); ++d) manifest << ' ' << v.value.shape[d];
      manifest << ' ' << (v.trainable ? 1 : 0) << ' ' << offset << "\n";
      fts::write(blobs, v.value);
    }
    manifest << "DATA\n";
    os << manifest.str() << blobs.str();
    if (!os) throw IoError("checkpoint write failed");
  }

  void save_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw PathError("cannot open " + path + " for writing");
    save(f);
  }

  static ParamStore load(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "SSPF1") throw IoError("bad checkpoint magic");
    if (!std::getline(is, line)) throw IoError("checkpoint manifest truncated");
    std::size_t count = 0;
    try {
      count = std::stoul(line);
    } catch (const std::exception&) {
      throw IoError("bad checkpoint entry count '" + line + "'");
    }
    struct Entry {
      std::string path;
      Shape shape;
      bool trainable;
      std::uint64_t offset;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::getline(is, line)) throw IoError("checkpoint manifest truncated");
      std::istringstream ls(line);
      Entry e;
      int dtype = -1, trainable = -1;
      std::size_t rank = 0;
      if (!(ls >> e.path >> dtype >> rank)) throw IoError("malformed manifest line: " + line);
      if (dtype != 0) throw IoError("unsupported checkpoint dtype " + std::to_string(dtype));
      if (rank > 8) throw IoError("implausible checkpoint rank " + std::to_string(rank));
      e.shape.dims.resize(rank);
      for (std::size_t d = 0; d < rank; ++d)
        if (!(ls >> e.shape.dims[d])) throw IoError("malformed manifest line: " + line);
      if (!(ls >> trainable >> e.offset)) throw IoError("malformed manifest line: " + line);
      e.trainable = trainable != 0;
      entries.push_back(std::move(e));
    }
    if (!std::getline(is, line) || line != "DATA") throw IoError("checkpoint DATA marker missing");
    std::ostringstream rest;
    rest << is.rdbuf();
    const std::string blob = rest.str();
    ParamStore out;
    for (const auto& e : entries) {
      if (e.offset > blob.size()) throw IoError("checkpoint offset past end for " + e.path);
      std::istringstream bs(blob.substr(e.offset));
      RealTensor t = fts::read_real(bs);
      if (t.shape != e.shape) throw IoError("checkpoint shape mismatch for " + e.path);
      out.add(e.path, std::move(t), e.trainable);
    }
    return out;
  }

  static ParamStore load_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw PathError("cannot open " + path);
    return load(f);
  }

 private:
  void set_trainable(const std::string& prefix, bool flag) {
    std::size_t matched = 0;
    for (auto& [k, v] : params_) {
      if (k.rfind(prefix, 0) != 0) continue;
      v.trainable = flag;
      ++matched;
    }
    if (matched == 0) throw PathError("no parameter matches prefix '" + prefix + "'");
  }

  std::map<std::string, Param> params_;
};

// Serialized-byte hash of every parameter under a prefix; bit identity proxy.
inline std::uint64_t hash_params(const ParamStore& store, const std::string& prefix = "") {
  std::ostringstream os;
  for (const auto& path : store.paths(prefix)) fts::write(os, store.at(path).value);
  return fnv1a64(os.str());
}

namespace detail {
inline RealTensor init_tensor(const Shape& shape, InitMode mode, Rng& rng, double stddev = 0.02) {
  RealTensor t(shape);
  if (mode == InitMode::trunc_normal)
    for (auto& x : t.data) x = rng.truncated_normal(stddev);
  return t;
}

inline void add_attention_params(ParamStore& ps, const std::string& prefix, std::size_t d, InitMode mode, Rng& rng) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) ps.add(prefix + "." + w, init_tensor(Shape{d, d}, mode, rng));
  for (const char* b : {"bq", "bk", "bv", "bo"}) ps.add(prefix + "." + b, RealTensor::zeros(Shape{d}));
}

inline void add_ffn_params(ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t hidden, InitMode mode,
                           Rng& rng) {
  ps.add(prefix + ".w1", init_tensor(Shape{d, hidden}, mode, rng));
  ps.add(prefix + ".b1", RealTensor::zeros(Shape{hidden}));
  ps.add(prefix + ".w2", init_tensor(Shape{hidden, d}, mode, rng));
  ps.add(prefix + ".b2", RealTensor::zeros(Shape{d}));
}

inline void add_conv_pair(ParamStore& ps, const std::string& prefix, std::size_t cin, std::size_t mid, std::size_t cout,
                          InitMode mode, Rng& rng) {
  ps.add(prefix + ".conv1.w", init_tensor(Shape{mid, cin, 3, 3}, mode, rng));
  ps.add(prefix + ".conv1.b", RealTensor::zeros(Shape{mid}));
  ps.add(prefix + ".conv2.w", init_tensor(Shape{cout, mid, 3, 3}, mode, rng));
  ps.add(prefix + ".conv2.b", RealTensor::zeros(Shape{cout}));
}
}  // namespace detail

// All task heads, tails and tokens are created up front; parameter creation
// order is fixed, so a given (mode, seed) yields a bit-identical store.
inline ParamStore build_model(const ModelConfig& cfg, InitMode mode, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamStore ps;

  for (TaskKind t : all_tasks())
    detail::add_conv_pair(ps, "head." + task_name(t), cfg.in_channels, cfg.conv_channels, cfg.conv_channels, mode, rng);

  ps.add("encoder.embed.proj.w", detail::init_tensor(Shape{cfg.patch_dim(), cfg.embed}, mode, rng));
  ps.add("encoder.embed.proj.b", RealTensor::zeros(Shape{cfg.embed}));
  ps.add("encoder.embed.pos", RealTensor::zeros(Shape{cfg.tokens(), cfg.embed}));
  ps.add("encoder.mask_token", detail::init_tensor(Shape{cfg.embed}, mode, rng));
  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    const std::string prefix = "encoder.layer" + std::to_string(i);
    detail::add_attention_params(ps, prefix + ".attn", cfg.embed, mode, rng);
    detail::add_ffn_params(ps, prefix + ".ffn", cfg.embed, cfg.ffn_hidden(), mode, rng);
  }

  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    const std::string prefix = "decoder.layer" + std::to_string(i);
    detail::add_attention_params(ps, prefix + ".self", cfg.embed, mode, rng);
    detail::add_attention_params(ps, prefix + ".cross", cfg.embed, mode, rng);
    detail::add_ffn_params(ps, prefix + ".ffn", cfg.embed, cfg.ffn_hidden(), mode, rng);
  }
  for (TaskKind t : all_tasks())
    ps.add("decoder.task." + task_name(t), detail::init_tensor(Shape{cfg.embed}, mode, rng));
  ps.add("decoder.deembed.w", detail::init_tensor(Shape{cfg.embed, cfg.patch_dim()}, mode, rng));
  ps.add("decoder.deembed.b", RealTensor::zeros(Shape{cfg.patch_dim()}));

  for (TaskKind t : all_tasks()) {
    const std::size_t r = sr_factor(t);
    const std::size_t cout = cfg.out_channels(t) * (r == 0 ? 1 : r * r);
    detail::add_conv_pair(ps, "tail." + task_name(t), cfg.conv_channels, cfg.conv_channels, cout, mode, rng);
  }
  return ps;
}

// Incremented whenever an ICN call falls back to whole-tensor statistics.
inline std::atomic<std::uint64_t> g_icn_empty_mask_warnings{0};

namespace detail {
struct MaskStats {
  double mean, stddev;
};

inline MaskStats masked_stats(const RealTensor& x, const RealTensor& mask) {
  double cnt = 0.0;
  for (double m : mask.data) cnt += m > 0.5 ? 1.0 : 0.0;
  const bool empty = cnt == 0.0;
  if (empty) {
    ++g_icn_empty_mask_warnings;
    cnt = static_cast<double>(x.size());
  }
  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (empty || mask.data[i] > 0.5) mean += x.data[i];
  mean /= cnt;
  double var = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (empty || mask.data[i] > 0.5) {
      const double d = x.data[i] - mean;
      var += d * d;
    }
  var /= cnt;
  return {mean, std::sqrt(var)};
}
}  // namespace detail

// Instance-centre normalization: statistics over the foreground mask, applied
// everywhere. mask must be elementwise-shaped like x (broadcast it first).
inline RealTensor icn(const RealTensor& x, const RealTensor& mask, double eps = 1e-5) {
  if (x.shape != mask.shape) throw ShapeError("icn mask " + mask.shape.str() + " vs x " + x.shape.str());
  const auto st = detail::masked_stats(x, mask);
  RealTensor out = x;
  const double denom = st.stddev + eps;
  for (auto& v : out.data) v = (v - st.mean) / denom;
  return out;
}

// Broadcast helpers building elementwise ICN masks.
inline RealTensor token_mask_elems(const std::vector<bool>& rows, std::size_t d) {
  RealTensor m(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i])
      for (std::size_t j = 0; j < d; ++j) m.at(i, j) = 1.0;
  return m;
}

inline RealTensor pixel_mask_elems(const RealTensor& hw, std::size_t c) {
  if (hw.rank() != 2) throw ShapeError("pixel mask must be [H,W], got " + hw.shape.str());
  RealTensor m(Shape{c, hw.shape[0], hw.shape[1]});
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t i = 0; i < hw.size(); ++i) m.data[cc * hw.size() + i] = hw.data[i] > 0.5 ? 1.0 : 0.0;
  return m;
}

// Foreground tokens of an input image: pixels above foreground_fraction of the
// channel-mean maximum, tokens where foregrounds hold a strict majority.
inline std::vector<bool> foreground_tokens(const RealTensor& x, std::size_t patch, double foreground_fraction) {
  if (x.rank() != 3) throw ShapeError("foreground_tokens expects [C,H,W], got " + x.shape.str());
  const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("patch " + std::to_string(patch) + " does not divide " + x.shape.str());
  RealTensor mean(Shape{h, w});
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t i = 0; i < h * w; ++i) mean.data[i] += x.data[cc * h * w + i];
  double mx = 0.0;
  for (auto& v : mean.data) {
    v /= static_cast<double>(c);
    mx = std::max(mx, v);
  }
  const double thr = foreground_fraction * mx;
  const std::size_t gh = h / patch, gw = w / patch;
  std::vector<bool> out(gh * gw);
  for (std::size_t pi = 0; pi < gh; ++pi)
    for (std::size_t pj = 0; pj < gw; ++pj) {
      std::size_t fg = 0;
      for (std::size_t u = 0; u < patch; ++u)
        for (std::size_t v = 0; v < patch; ++v) fg += mean.at(pi * patch + u, pj * patch + v) > thr ? 1 : 0;
      out[pi * gw + pj] = 2 * fg > patch * patch;
    }
  return out;
}

// Per-sample forward context: one tape, memoized parameter leaves so shared
// parameters accumulate gradients through a single node.
struct ModelRun {
  Tape& tape;
  ParamStore& store;
  const ModelConfig& cfg;
  std::map<std::string, Var> leaves;

  ModelRun(Tape& t, ParamStore& s, const ModelConfig& c) : tape(t), store(s), cfg(c) {}

  Var p(const std::string& path) {
    auto it = leaves.find(path);
    if (it != leaves.end()) return it->second;
    const Param& pr = store.at(path);
    Var v = tape.leaf(pr.value, pr.trainable);
    leaves.emplace(path, v);
    return v;
  }

  // Gradient of the last backward() for a parameter path, zeros if untouched.
  RealTensor grad(const std::string& path) const {
    auto it = leaves.find(path);
    if (it == leaves.end() || !it->second->has_grad) return RealTensor::zeros(store.at(path).value.shape);
    return it->second->grad;
  }
};

inline Var icn_t(ModelRun& run, Var x, const RealTensor& elem_mask) {
  if (x->value.shape != elem_mask.shape)
    throw ShapeError("icn mask " + elem_mask.shape.str() + " vs x " + x->value.shape.str());
  Tape& T = run.tape;
  double cnt = 0.0;
  for (double m : elem_mask.data) cnt += m > 0.5 ? 1.0 : 0.0;
  RealTensor mask = elem_mask;
  if (cnt == 0.0) {
    ++g_icn_empty_mask_warnings;
    mask = RealTensor::full(elem_mask.shape, 1.0);
    cnt = static_cast<double>(elem_mask.size());
  }
  Var mu = T.scale(T.sum_all(T.mul_mask(x, mask)), 1.0 / cnt);
  Var centered = T.sub_b(x, mu);
  Var masked_dev = T.mul_mask(centered, mask);
  Var var = T.scale(T.sum_all(T.mul(masked_dev, masked_dev)), 1.0 / cnt);
  Var denom = T.add_const(T.sqrt_elem(var), run.cfg.icn_epsilon);
  return T.div_b(centered, denom);
}

namespace detail {
inline Var linear(ModelRun& run, Var x, const std::string& w, const std::string& b) {
  return run.tape.add_rowvec(run.tape.matmul(x, run.p(w)), run.p(b));
}

// Multi-head scaled dot-product attention with output projection (no residual).
inline Var attention(ModelRun& run, Var q_in, Var k_in, Var v_in, const std::string& prefix) {
  Tape& T = run.tape;
  const std::size_t heads = run.cfg.heads, dk = run.cfg.d_k;
  if (heads * dk != q_in->value.shape[1])
    throw ConfigError("attention width " + std::to_string(q_in->value.shape[1]) + " != heads*d_k");
  Var q = linear(run, q_in, prefix + ".wq", prefix + ".bq");
  Var k = linear(run, k_in, prefix + ".wk", prefix + ".bk");
  Var v = linear(run, v_in, prefix + ".wv", prefix + ".bv");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = T.slice_cols(q, h * dk, (h + 1) * dk);
    Var kh = T.slice_cols(k, h * dk, (h + 1) * dk);
    Var vh = T.slice_cols(v, h * dk, (h + 1) * dk);
    Var logits = T.scale(T.matmul(qh, T.transpose(kh)), scale);
    Var weights = T.softmax_rows(logits);
    head_out.push_back(T.matmul(weights, vh));
  }
  Var concat = T.concat_cols(head_out);
  return linear(run, concat, prefix + ".wo", prefix + ".bo");
}

inline Var ffn(ModelRun& run, Var x, const std::string& prefix) {
  Var h = run.tape.gelu(linear(run, x, prefix + ".w1", prefix + ".b1"));
  return linear(run, h, prefix + ".w2", prefix + ".b2");
}

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p *= 2;
  return p;
}

// 0/1 matrix embedding a gh x gw token grid into the top-left of gh2 x gw2.
inline RealTensor grid_pad_matrix(std::size_t gh, std::size_t gw, std::size_t gh2, std::size_t gw2) {
  RealTensor s(Shape{gh2 * gw2, gh * gw});
  for (std::size_t i = 0; i < gh; ++i)
    for (std::size_t j = 0; j < gw; ++j) s.at(i * gw2 + j, i * gw + j) = 1.0;
  return s;
}
}  // namespace detail

// ICN -> multi-head self-attention -> projection -> residual.
inline Var msa_block_t(ModelRun& run, Var z, const RealTensor& elem_mask, const std::string& prefix) {
  Var xhat = icn_t(run, z, elem_mask);
  Var a = detail::attention(run, xhat, xhat, xhat, prefix);
  return run.tape.add(z, a);
}

// y = FFN(x_hat) ⊙ sigmoid(real(ifft2(|fft2(x_hat)|))) over the token grid;
// non-power-of-two grids are zero-padded for the transform and cropped back.
inline Var fg_ffn_t(ModelRun& run, Var xhat, std::size_t gh, std::size_t gw, const std::string& prefix) {
  Tape& T = run.tape;
  if (xhat->value.shape[0] != gh * gw)
    throw ShapeError("fg_ffn tokens " + xhat->value.shape.str() + " vs grid " + std::to_string(gh) + "x" +
                     std::to_string(gw));
  Var f = detail::ffn(run, xhat, prefix);
  Var spect;
  if (is_power_of_two(gh) && is_power_of_two(gw)) {
    spect = T.fourier_mag(xhat, gh, gw);
  } else {
    const std::size_t gh2 = detail::next_pow2(gh), gw2 = detail::next_pow2(gw);
    const RealTensor pad = detail::grid_pad_matrix(gh, gw, gh2, gw2);
    Var padded = T.matmul(T.constant(pad), xhat);
    Var mag = T.fourier_mag(padded, gh2, gw2);
    spect = T.matmul(T.constant(transpose(pad)), mag);
  }
  Var gate = T.sigmoid(spect);
  return T.mul(f, gate);
}

// L x (msa_block, then gated FFN with pre-ICN and residual).
inline Var encoder_forward_t(ModelRun& run, Var z0, const RealTensor& elem_mask, std::size_t gh, std::size_t gw) {
  Var z = z0;
  for (std::size_t i = 0; i < run.cfg.enc_layers; ++i) {
    const std::string prefix = "encoder.layer" + std::to_string(i);
    z = msa_block_t(run, z, elem_mask, prefix + ".attn");
    Var xhat = icn_t(run, z, elem_mask);
    z = run.tape.add(z, fg_ffn_t(run, xhat, gh, gw, prefix + ".ffn"));
  }
  return z;
}

struct TokenSeqT {
  Var tokens;     // patch embeddings e_i
  Var positions;  // learnable p_i, sliced to this grid
};

// Patchify + linear projection + position lookup. Grids smaller than the
// configured one use the top-left block of the learned position grid.
inline TokenSeqT patch_embed_t(ModelRun& run, Var f) {
  const ModelConfig& cfg = run.cfg;
  const Shape& s = f->value.shape;
  if (s.rank() != 3 || s[0] != cfg.conv_channels)
    throw ShapeError("patch_embed expects [" + std::to_string(cfg.conv_channels) + ",H,W], got " + s.str());
  const std::size_t gh = s[1] / cfg.patch, gw = s[2] / cfg.patch;
  Tape& T = run.tape;
  Var patches = T.patchify(f, cfg.patch);
  Var tokens = detail::linear(run, patches, "encoder.embed.proj.w", "encoder.embed.proj.b");
  Var pos_full = run.p("encoder.embed.pos");
  Var pos;
  if (gh == cfg.grid_h() && gw == cfg.grid_w()) {
    pos = pos_full;
  } else {
    if (gh > cfg.grid_h() || gw > cfg.grid_w())
      throw ShapeError("token grid " + std::to_string(gh) + "x" + std::to_string(gw) + " exceeds configured " +
                       std::to_string(cfg.grid_h()) + "x" + std::to_string(cfg.grid_w()));
    RealTensor sel(Shape{gh * gw, cfg.tokens()});
    for (std::size_t i = 0; i < gh; ++i)
      for (std::size_t j = 0; j < gw; ++j) sel.at(i * gw + j, i * cfg.grid_w() + j) = 1.0;
    pos = T.matmul(T.constant(sel), pos_full);
  }
  return TokenSeqT{tokens, pos};
}

// Two same-padding 3x3 convs with GELU between; parameters owned per task.
inline Var head_forward_t(ModelRun& run, Var x, TaskKind task) {
  const std::string prefix = "head." + task_name(task);
  Tape& T = run.tape;
  Var h = T.add_chan_bias(T.conv2d(x, run.p(prefix + ".conv1.w"), Pad::same), run.p(prefix + ".conv1.b"));
  h = T.gelu(h);
  return T.add_chan_bias(T.conv2d(h, run.p(prefix + ".conv2.w"), Pad::same), run.p(prefix + ".conv2.b"));
}

// l x (self-attention, task-token cross-attention over encoder features, FFN),
// then linear de-embedding back to a [C,H,W] map at token-grid resolution * P.
inline Var decoder_forward_t(ModelRun& run, Var fE, TaskKind task, const RealTensor& elem_mask, std::size_t gh,
                             std::size_t gw) {
  Tape& T = run.tape;
  Var state = fE;
  Var task_token = run.p("decoder.task." + task_name(task));
  for (std::size_t i = 0; i < run.cfg.dec_layers; ++i) {
    const std::string prefix = "decoder.layer" + std::to_string(i);
    Var xhat = icn_t(run, state, elem_mask);
    state = T.add(state, detail::attention(run, xhat, xhat, xhat, prefix + ".self"));
    Var q = T.add_rowvec(icn_t(run, state, elem_mask), task_token);
    Var k = T.add_rowvec(fE, task_token);
    state = T.add(state, detail::attention(run, q, k, fE, prefix + ".cross"));
    state = T.add(state, detail::ffn(run, icn_t(run, state, elem_mask), prefix + ".ffn"));
  }
  Var tokens = detail::linear(run, state, "decoder.deembed.w", "decoder.deembed.b");
  return T.unpatchify(tokens, run.cfg.conv_channels, gh * run.cfg.patch, gw * run.cfg.patch, run.cfg.patch);
}

// Task tail: conv-GELU-conv; sr tails emit 3*r^2 channels then pixel-shuffle.
inline Var tail_forward_t(ModelRun& run, Var fD, TaskKind task) {
  const std::string prefix = "tail." + task_name(task);
  Tape& T = run.tape;
  Var h = T.add_chan_bias(T.conv2d(fD, run.p(prefix + ".conv1.w"), Pad::same), run.p(prefix + ".conv1.b"));
  h = T.gelu(h);
  Var out = T.add_chan_bias(T.conv2d(h, run.p(prefix + ".conv2.w"), Pad::same), run.p(prefix + ".conv2.b"));
  const std::size_t r = sr_factor(task);
  if (r != 0) out = T.pixel_shuffle(out, r);
  return out;
}

struct ForwardResult {
  Var output;          // task-shaped output tensor
  Var encoder_tokens;  // z_L, reused by the consistency loss
};

// Full pipeline: head -> patch embed (-> mask) -> +positions -> encoder ->
// task decoder -> tail. masked, when provided, must match the token count.
inline ForwardResult model_forward_t(ModelRun& run, Var x, TaskKind task, const std::vector<bool>* masked = nullptr) {
  const ModelConfig& cfg = run.cfg;
  const Shape& s = x->value.shape;
  if (s.rank() != 3 || s[0] != cfg.in_channels)
    throw ShapeError("model input must be [" + std::to_string(cfg.in_channels) + ",H,W], got " + s.str());
  if (s[1] % cfg.patch != 0 || s[2] % cfg.patch != 0)
    throw ShapeError("patch " + std::to_string(cfg.patch) + " does not divide input " + s.str());
  const std::size_t gh = s[1] / cfg.patch, gw = s[2] / cfg.patch;
  const RealTensor elem_mask =
      token_mask_elems(foreground_tokens(x->value, cfg.patch, cfg.foreground_fraction), cfg.embed);

  Var feat = head_forward_t(run, x, task);
  TokenSeqT seq = patch_embed_t(run, feat);
  Var tokens = seq.tokens;
  if (masked != nullptr) tokens = run.tape.apply_mask(tokens, run.p("encoder.mask_token"), *masked);
  Var z0 = run.tape.add(tokens, seq.positions);
  Var zL = encoder_forward_t(run, z0, elem_mask, gh, gw);
  Var fD = decoder_forward_t(run, zL, task, elem_mask, gh, gw);
  Var out = tail_forward_t(run, fD, task);
  return ForwardResult{out, zL};
}

// ---- value-level wrappers (no-grad tape) for direct use and tests ----

inline RealTensor head_forward(ParamStore& store, const ModelConfig& cfg, const RealTensor& x, TaskKind task) {
  Tape tape(false);
  ModelRun run(tape, store, cfg);
  return head_forward_t(run, tape.constant(x), task)->value;
}

struct TokenSequence {
  RealTensor tokens;
  RealTensor positions;
};

inline TokenSequence patch_embed(ParamStore& store, const ModelConfig& cfg, const RealTensor& f) {
  Tape tape(false);
  ModelRun run(tape, store, cfg);
  TokenSeqT seq = patch_embed_t(run, tape.constant(f));
  return TokenSequence{seq.tokens->value, seq.positions->value};
}

inline RealTensor msa_block(ParamStore& store, const ModelConfig& cfg, const RealTensor& z,
                            const RealTensor& elem_mask, const std::string& prefix) {
  Tape tape(false);
  ModelRun run(tape, store, cfg);
  return msa_block_t(run, tape.constant(z), elem_mask, prefix)->value;
}

inline RealTensor fg_ffn(ParamStore& store, const ModelConfig& cfg, const RealTensor& xhat, std::size_t gh,
                         std::size_t gw, const std::string& prefix) {
  Tape tape(false);
  ModelRun run(tape, store, cfg);
  return fg_ffn_t(run, tape.constant(xhat), gh, gw, prefix)->value;
}

inline RealTensor encoder_forward(ParamStore& store, const ModelConfig& cfg, const RealTensor& z0,
                                  const RealTensor& elem_mask, std::size_t gh, std::size_t gw) {
  Tape tape(false);
  ModelRun run(tape, store, cfg);
  return encoder_forward_t(run, tape.constant(z0), elem_mask, gh, gw)->value;
}

inline RealTensor decoder_forward(ParamStore& store, const ModelConfig& cfg, const RealTensor& fE, TaskKind task,
                                  const RealTensor& elem_mask, std::size_t gh, std::size_t gw) {
  Tape tape(false);
  ModelRun run(tape, store, cfg);
  return decoder_forward_t(run, tape.constant(fE), task, elem_mask, gh, gw)->value;
}

inline RealTensor tail_forward(ParamStore& store, const ModelConfig& cfg, const RealTensor& fD, TaskKind task) {
  Tape tape(false);
  ModelRun run(tape, store, cfg);
  return tail_forward_t(run, tape.constant(fD), task)->value;
}

inline RealTensor model_forward(ParamStore& store, const ModelConfig& cfg, const RealTensor& x, TaskKind task,
                                const std::vector<bool>* masked = nullptr) {
  Tape tape(false);
  ModelRun run(tape, store, cfg);
  return model_forward_t(run, tape.constant(x), task, masked).output->value;
}

}  // namespace sspf
