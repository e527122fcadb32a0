#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "sspformer/augment/augment.hpp"
#include "sspformer/core/autodiff.hpp"
#include "sspformer/core/errors.hpp"
#include "sspformer/core/rng.hpp"
#include "sspformer/core/tensor.hpp"
#include "sspformer/data/phantom.hpp"
#include "sspformer/model/model.hpp"

namespace sspf {

enum class ReconNorm { masked_only, all_pixels };

struct LossConfig {
  double lambda_contrastive = 0.1;
  ReconNorm recon_norm = ReconNorm::masked_only;
  std::vector<std::pair<std::size_t, std::size_t>> consistency_pairs = {{0, 1}};

  void validate(std::size_t channels) const {
    if (lambda_contrastive < 0.0) throw ConfigError("lambda_contrastive must be >= 0");
    for (const auto& [a, b] : consistency_pairs)
      if (a >= channels || b >= channels)
        throw ConfigError("consistency pair (" + std::to_string(a) + "," + std::to_string(b) +
                          ") outside channel count " + std::to_string(channels));
  }
};

struct TrainConfig {
  double lr0 = 5e-5;
  std::size_t warmup_epochs = 10;
  std::size_t epochs = 100;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  std::size_t steps_per_epoch = 0;  // 0: ceil(dataset / batch)
  std::size_t checkpoint_every = 0;  // epochs; 0 = final only
  // ablation toggles
  bool inv_freq_mask = true;
  bool fft_noise = true;
  bool freq_att = true;
  // augmentation knobs
  double p_base = 0.25;
  double tau = 0.5;
  double noise_lambda = 0.5;
  double noise_sigma = 0.1;
  WeightKind weight_kind = WeightKind::linear;
  // fine-tuning
  double finetune_noise_sigma = 0.10;
  std::size_t finetune_sr = 2;
  bool finetune_augment = true;

  void validate() const {
    if (lr0 <= 0.0) throw ConfigError("lr0 must be > 0");
    if (epochs == 0 || batch == 0) throw ConfigError("epochs and batch must be positive");
    if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be < epochs");
    if (!(p_base > 0.0 && p_base <= 1.0)) throw ConfigError("p_base must lie in (0,1]");
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0,1)");
    if (noise_lambda < 0.0 || noise_sigma < 0.0) throw ConfigError("noise parameters must be >= 0");
    if (finetune_noise_sigma < 0.0) throw ConfigError("finetune_noise_sigma must be >= 0");
    if (finetune_sr < 2 || finetune_sr > 4) throw ConfigError("finetune_sr must be 2, 3 or 4");
  }
};

// Linear 0 -> lr0 over the warm-up, then cosine to 0 at the final step.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr0) {
  if (total_steps == 0) throw ContractError("lr schedule needs total_steps > 0");
  if (warmup_steps >= total_steps) throw ContractError("warm-up must end before the schedule does");
  if (step <= warmup_steps && warmup_steps > 0)
    return lr0 * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * progress));
}

namespace detail {
// 0/1 pixel weights covering the plan's masked patches, over all channels.
inline RealTensor plan_pixel_mask(const MaskPlan& plan, const Shape& like) {
  const std::size_t p = plan.patch_size;
  const std::size_t c = like.rank() == 3 ? like[0] : 1;
  const std::size_t h = like.rank() == 3 ? like[1] : like[0];
  const std::size_t w = like.rank() == 3 ? like[2] : like[1];
  if (h != plan.grid_h * p || w != plan.grid_w * p)
    throw ShapeError("plan grid does not tile " + like.str());
  RealTensor m(like);
  for (std::size_t pi = 0; pi < plan.grid_h; ++pi)
    for (std::size_t pj = 0; pj < plan.grid_w; ++pj) {
      if (!plan.decisions[pi * plan.grid_w + pj]) continue;
      for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t u = 0; u < p; ++u)
          for (std::size_t v = 0; v < p; ++v) {
            const std::size_t idx = (cc * h + pi * p + u) * w + pj * p + v;
            m.data[idx] = 1.0;
          }
    }
  return m;
}
}  // namespace detail

// MSE over pixels of masked patches (default) or over everything.
inline double recon_loss(const RealTensor& pred, const RealTensor& target, const MaskPlan& plan,
                         ReconNorm mode = ReconNorm::masked_only) {
  if (pred.shape != target.shape)
    throw ShapeError("recon_loss shapes differ: " + pred.shape.str() + " vs " + target.shape.str());
  if (mode == ReconNorm::all_pixels) {
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = pred.data[i] - target.data[i];
      s += d * d;
    }
    return s / static_cast<double>(pred.size());
  }
  const RealTensor m = detail::plan_pixel_mask(plan, pred.shape);
  double s = 0.0, cnt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = (pred.data[i] - target.data[i]) * m.data[i];
    s += d * d;
    cnt += m.data[i];
  }
  return cnt > 0.0 ? s / cnt : 0.0;
}

inline Var recon_loss_t(Tape& T, Var pred, const RealTensor& target, const MaskPlan& plan,
                        ReconNorm mode = ReconNorm::masked_only) {
  if (pred->value.shape != target.shape)
    throw ShapeError("recon_loss shapes differ: " + pred->value.shape.str() + " vs " + target.shape.str());
  Var diff = T.sub(pred, T.constant(target));
  if (mode == ReconNorm::all_pixels) return T.mean_all(T.mul(diff, diff));
  const RealTensor m = detail::plan_pixel_mask(plan, target.shape);
  double cnt = 0.0;
  for (double x : m.data) cnt += x;
  if (cnt == 0.0) return T.constant(RealTensor(Shape{1}, {0.0}));  // nothing masked this draw
  Var masked = T.mul_mask(diff, m);
  return T.scale(T.sum_all(T.mul(masked, masked)), 1.0 / cnt);
}

inline std::atomic<std::uint64_t> g_consistency_zero_warnings{0};

// 1 - cosine similarity; zero vectors pin the loss at 1 and count a warning.
inline double consistency_loss(const RealTensor& a, const RealTensor& b) {
  if (a.shape != b.shape) throw ShapeError("consistency shapes differ: " + a.shape.str() + " vs " + b.shape.str());
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.data[i] * b.data[i];
    na += a.data[i] * a.data[i];
    nb += b.data[i] * b.data[i];
  }
  if (na == 0.0 || nb == 0.0) {
    ++g_consistency_zero_warnings;
    return 1.0;
  }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

inline Var consistency_loss_t(Tape& T, Var a, Var b) {
  if (norm2(a->value) == 0.0 || norm2(b->value) == 0.0) {
    ++g_consistency_zero_warnings;
    return T.constant(RealTensor(Shape{1}, {1.0}));
  }
  Var dot = T.sum_all(T.mul(a, b));
  Var na = T.sqrt_elem(T.sum_all(T.mul(a, a)));
  Var nb = T.sqrt_elem(T.sum_all(T.mul(b, b)));
  Var cosv = T.div_b(dot, T.mul(na, nb));
  return T.add_const(T.scale(cosv, -1.0), 1.0);
}

inline double total_loss(double sup, double con, double lambda) {
  if (lambda < 0.0) throw ContractError("lambda must be >= 0");
  return sup + lambda * con;
}

// ---- optimizer ----

// Adam with beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected.
struct AdamState {
  struct Moments {
    RealTensor m, v;
  };
  std::map<std::string, Moments> moments;
  std::size_t t = 0;
};

inline void optimizer_step(ParamStore& store, const std::map<std::string, RealTensor>& grads, AdamState& state,
                           double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  state.t += 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  std::size_t used = 0;
  for (auto& [path, param] : store) {
    if (!param.trainable) continue;
    const auto it = grads.find(path);
    if (it == grads.end()) throw ContractError("missing gradient for trainable parameter " + path);
    const RealTensor& g = it->second;
    if (g.shape != param.value.shape) throw ContractError("gradient shape mismatch for " + path);
    ++used;
    auto& mo = state.moments[path];
    if (mo.m.size() == 0) {
      mo.m = RealTensor::zeros(g.shape);
      mo.v = RealTensor::zeros(g.shape);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      mo.m.data[i] = b1 * mo.m.data[i] + (1.0 - b1) * g.data[i];
      mo.v.data[i] = b2 * mo.v.data[i] + (1.0 - b2) * g.data[i] * g.data[i];
      const double mhat = mo.m.data[i] / c1;
      const double vhat = mo.v.data[i] / c2;
      param.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  if (used != grads.size()) throw ContractError("gradient map carries entries for non-trainable parameters");
}

// ---- shared step plumbing ----

struct StepStats {
  double lr = 0.0, sup = 0.0, con = 0.0, total = 0.0;
};

// Worker cap for batch fan-out (SSPF_THREADS via the CLI). Results are
// reduced in fixed sample order, so the cap never changes the numbers.
inline std::atomic<std::size_t> g_thread_cap{1};

inline void set_thread_cap(std::size_t n) {
  if (n == 0) throw ContractError("thread cap must be >= 1");
  g_thread_cap.store(n);
}

namespace detail {
inline Rng batch_rng(std::uint64_t seed, std::size_t step) {
  return Rng::derive(seed, 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(step) + 1));
}

template <typename Fn>
void parallel_samples(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(g_thread_cap.load(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      try {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline void accumulate_grads(ModelRun& run, std::map<std::string, RealTensor>& grads) {
  for (auto& [path, param] : run.store) {
    if (!param.trainable) continue;
    RealTensor g = run.grad(path);
    auto it = grads.find(path);
    if (it == grads.end())
      grads.emplace(path, std::move(g));
    else
      for (std::size_t i = 0; i < it->second.size(); ++i) it->second.data[i] += g.data[i];
  }
}

inline RealTensor take_channels(const RealTensor& x, std::size_t k) {
  if (x.rank() != 3 || x.shape[0] < k) throw ShapeError("cannot take " + std::to_string(k) + " channels of " + x.shape.str());
  RealTensor out(Shape{k, x.shape[1], x.shape[2]});
  std::copy(x.data.begin(), x.data.begin() + static_cast<long>(out.size()), out.data.begin());
  return out;
}

inline RealTensor channel_mean_image(const RealTensor& x) {
  const std::size_t c = x.shape[0], hw = x.shape[1] * x.shape[2];
  RealTensor m(Shape{x.shape[1], x.shape[2]});
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t i = 0; i < hw; ++i) m.data[i] += x.data[cc * hw + i];
  for (auto& v : m.data) v /= static_cast<double>(c);
  return m;
}

// Per-patch k-space noise across every channel; per-patch derived seeds keep
// the augmentation order-independent and replayable.
inline RealTensor noise_all_patches(const RealTensor& x, std::size_t p, const TrainConfig& tcfg,
                                    std::uint64_t sample_seed) {
  if (tcfg.noise_lambda == 0.0) return x;
  const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const std::size_t gh = h / p, gw = w / p;
  RealTensor out = x;
  RealTensor patch(Shape{p, p});
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t pi = 0; pi < gh; ++pi)
      for (std::size_t pj = 0; pj < gw; ++pj) {
        for (std::size_t u = 0; u < p; ++u)
          for (std::size_t v = 0; v < p; ++v) patch.at(u, v) = x.at(cc, pi * p + u, pj * p + v);
        NoiseSpec spec;
        spec.lambda = tcfg.noise_lambda;
        spec.sigma = tcfg.noise_sigma;
        spec.weight_kind = tcfg.weight_kind;
        spec.seed = sample_seed ^ (0x51ed2701ull + (cc * gh + pi) * gw + pj);
        const RealTensor noised = kspace_noise(patch, spec);
        for (std::size_t u = 0; u < p; ++u)
          for (std::size_t v = 0; v < p; ++v) out.at(cc, pi * p + u, pj * p + v) = noised.at(u, v);
      }
  return out;
}

// Mean-pooled encoder tokens of a single-sequence view (other channels zero).
inline Var channel_embedding(ModelRun& run, const RealTensor& x, std::size_t channel) {
  RealTensor view = RealTensor::zeros(x.shape);
  const std::size_t hw = x.shape[1] * x.shape[2];
  std::copy(x.data.begin() + static_cast<long>(channel * hw), x.data.begin() + static_cast<long>((channel + 1) * hw),
            view.data.begin() + static_cast<long>(channel * hw));
  ForwardResult r = model_forward_t(run, run.tape.constant(view), TaskKind::recon, nullptr);
  return run.tape.mean_rows(r.encoder_tokens);
}
}  // namespace detail

namespace detail {
struct SampleOut {
  std::map<std::string, RealTensor> grads;
  double sup = 0.0, con = 0.0, total = 0.0;
  std::uint64_t seed = 0;
};

// Reduce per-sample results in fixed order; mean over the batch.
inline StepStats reduce_batch(const std::vector<SampleOut>& outs, std::map<std::string, RealTensor>& grads,
                              std::size_t step, const char* phase) {
  StepStats stats;
  const double inv_b = 1.0 / static_cast<double>(outs.size());
  for (const auto& out : outs) {
    if (!std::isfinite(out.total)) {
      char seedbuf[32];
      std::snprintf(seedbuf, sizeof(seedbuf), "%016llx", static_cast<unsigned long long>(out.seed));
      throw NumericError("non-finite " + std::string(phase) + " loss at step " + std::to_string(step) +
                         ", batch seed 0x" + seedbuf);
    }
    stats.sup += out.sup * inv_b;
    stats.con += out.con * inv_b;
    stats.total += out.total * inv_b;
    for (const auto& [path, g] : out.grads) {
      auto it = grads.find(path);
      if (it == grads.end())
        grads.emplace(path, g);
      else
        for (std::size_t i = 0; i < g.size(); ++i) it->second.data[i] += g.data[i];
    }
  }
  for (auto& [path, g] : grads)
    for (auto& x : g.data) x *= inv_b;
  return stats;
}
}  // namespace detail

// One pretraining update: mask + noise the batch, reconstruct the clean
// pixels, optionally add the cross-sequence consistency term, step Adam.
// Batch items may fan out over worker threads; numbers are invariant to that.
inline StepStats pretrain_step(ParamStore& store, const ModelConfig& mcfg, const TrainConfig& tcfg,
                               const LossConfig& lcfg, const std::vector<RealTensor>& volumes, std::size_t step,
                               double lr, AdamState& adam) {
  if (volumes.empty()) throw ContractError("pretrain_step needs a non-empty dataset");
  Rng br = detail::batch_rng(tcfg.seed, step);
  const bool use_consistency =
      tcfg.freq_att && lcfg.lambda_contrastive > 0.0 && mcfg.in_channels >= 2 && !lcfg.consistency_pairs.empty();

  std::vector<std::pair<std::size_t, std::uint64_t>> picks(tcfg.batch);
  for (auto& [idx, seed] : picks) {
    idx = static_cast<std::size_t>(br.below(volumes.size()));
    seed = br.next_u64();
  }
  std::vector<detail::SampleOut> outs(tcfg.batch);
  detail::parallel_samples(tcfg.batch, [&](std::size_t bi) {
    const RealTensor& clean = volumes[picks[bi].first];
    const std::uint64_t sample_seed = picks[bi].second;
    detail::SampleOut& out = outs[bi];
    out.seed = sample_seed;

    MaskPlan plan;
    if (tcfg.inv_freq_mask) {
      const EdgeMap edges = edge_energy(detail::channel_mean_image(clean));
      plan = plan_mask(edges, mcfg.patch, tcfg.p_base, tcfg.tau, sample_seed ^ 0x6d61736bull);
    } else {
      plan = plan_mask_uniform(clean.shape[1], clean.shape[2], mcfg.patch, tcfg.p_base, sample_seed ^ 0x6d61736bull);
    }
    const RealTensor input = tcfg.fft_noise ? detail::noise_all_patches(clean, mcfg.patch, tcfg, sample_seed) : clean;

    Tape tape;
    ModelRun run(tape, store, mcfg);
    ForwardResult fwd = model_forward_t(run, tape.constant(input), TaskKind::recon, &plan.decisions);
    Var sup = recon_loss_t(tape, fwd.output, clean, plan, lcfg.recon_norm);
    Var total = sup;
    Var con = nullptr;
    if (use_consistency) {
      for (const auto& [a, b] : lcfg.consistency_pairs) {
        Var pair_loss = consistency_loss_t(tape, detail::channel_embedding(run, input, a),
                                           detail::channel_embedding(run, input, b));
        con = con == nullptr ? pair_loss : tape.add(con, pair_loss);
      }
      con = tape.scale(con, 1.0 / static_cast<double>(lcfg.consistency_pairs.size()));
      total = tape.add(sup, tape.scale(con, lcfg.lambda_contrastive));
    }
    out.sup = sup->value.data[0];
    out.con = con != nullptr ? con->value.data[0] : 0.0;
    out.total = total->value.data[0];
    if (std::isfinite(out.total)) {
      tape.backward(total);
      detail::accumulate_grads(run, out.grads);
    }
  });

  std::map<std::string, RealTensor> grads;
  StepStats stats = detail::reduce_batch(outs, grads, step, "pretraining");
  stats.lr = lr;
  optimizer_step(store, grads, adam, lr);
  return stats;
}

// ---- fine-tuning ----

struct FinetuneSample {
  RealTensor volume;  // clean [6,H,W]
  RealTensor labels;  // [H,W] integer classes, used by segment
};

namespace detail {
inline RealTensor flip_lr(const RealTensor& x) {
  RealTensor out = x;
  const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(cc, i, j) = x.at(cc, i, w - 1 - j);
  return out;
}

inline RealTensor flip_lr_2d(const RealTensor& x) {
  RealTensor out = x;
  const std::size_t h = x.shape[0], w = x.shape[1];
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = x.at(i, w - 1 - j);
  return out;
}

// Centre rotation; bilinear for intensities, nearest for label maps.
inline RealTensor rotate(const RealTensor& x, double degrees, bool nearest) {
  const double th = degrees * M_PI / 180.0, ct = std::cos(th), st = std::sin(th);
  const bool chan = x.rank() == 3;
  const std::size_t c = chan ? x.shape[0] : 1;
  const std::size_t h = chan ? x.shape[1] : x.shape[0];
  const std::size_t w = chan ? x.shape[2] : x.shape[1];
  const double ci = (static_cast<double>(h) - 1.0) / 2.0, cj = (static_cast<double>(w) - 1.0) / 2.0;
  RealTensor out = RealTensor::zeros(x.shape);
  auto src = [&](std::size_t cc, long i, long j) -> double {
    if (i < 0 || j < 0 || i >= static_cast<long>(h) || j >= static_cast<long>(w)) return 0.0;
    const std::size_t off = (chan ? cc * h : 0) + static_cast<std::size_t>(i);
    return x.data[off * w + static_cast<std::size_t>(j)];
  };
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double di = static_cast<double>(i) - ci, dj = static_cast<double>(j) - cj;
        const double si = ct * di - st * dj + ci;
        const double sj = st * di + ct * dj + cj;
        double v;
        if (nearest) {
          v = src(cc, std::lround(si), std::lround(sj));
        } else {
          const long i0 = static_cast<long>(std::floor(si)), j0 = static_cast<long>(std::floor(sj));
          const double fi = si - static_cast<double>(i0), fj = sj - static_cast<double>(j0);
          v = (1 - fi) * (1 - fj) * src(cc, i0, j0) + (1 - fi) * fj * src(cc, i0, j0 + 1) +
              fi * (1 - fj) * src(cc, i0 + 1, j0) + fi * fj * src(cc, i0 + 1, j0 + 1);
        }
        const std::size_t off = (chan ? cc * h : 0) + i;
        out.data[off * w + j] = v;
      }
  return out;
}

// Random flip, rotation in ±15 degrees, intensity jitter ±10%.
inline void augment_sample(RealTensor& volume, RealTensor& labels, Rng& rng) {
  if (rng.uniform() < 0.5) {
    volume = flip_lr(volume);
    labels = flip_lr_2d(labels);
  }
  const double deg = rng.uniform(-15.0, 15.0);
  volume = rotate(volume, deg, false);
  labels = rotate(labels, deg, true);
  const double jitter = 1.0 + rng.uniform(-0.1, 0.1);
  for (auto& v : volume.data) v = std::clamp(v * jitter, 0.0, 1.0);
}
}  // namespace detail

// Build the (input, target) pair a task trains and evaluates on.
struct TaskPair {
  RealTensor input;   // [6,h,w] model input
  RealTensor target;  // [3,H,W] image target or [H,W] labels
};

inline TaskPair make_task_pair(const FinetuneSample& s, TaskKind task, const TrainConfig& tcfg,
                               std::uint64_t sample_seed) {
  TaskPair out;
  switch (task) {
    case TaskKind::denoise: {
      Rng nrng = Rng::derive(sample_seed, 0x6e6f6973ull);
      out.input = add_gaussian_noise(s.volume, tcfg.finetune_noise_sigma, nrng);
      out.target = detail::take_channels(s.volume, 3);
      break;
    }
    case TaskKind::sr2:
    case TaskKind::sr3:
    case TaskKind::sr4: {
      out.input = degrade_sr(s.volume, sr_factor(task));
      out.target = detail::take_channels(s.volume, 3);
      break;
    }
    case TaskKind::segment: {
      out.input = s.volume;
      out.target = s.labels;
      break;
    }
    case TaskKind::recon:
      throw ConfigError("recon is a pretraining task, not a fine-tuning target");
  }
  return out;
}

// One asymmetric fine-tuning update; demands a frozen encoder and leaves it
// bit-identical (frozen leaves take no gradient at all).
inline StepStats finetune_step(ParamStore& store, const ModelConfig& mcfg, const TrainConfig& tcfg, TaskKind task,
                               const std::vector<FinetuneSample>& samples, std::size_t step, double lr,
                               AdamState& adam) {
  if (samples.empty()) throw ContractError("finetune_step needs a non-empty dataset");
  for (const auto& path : store.paths("encoder."))
    if (store.at(path).trainable) throw ContractError("encoder parameter " + path + " is not frozen");

  Rng br = detail::batch_rng(tcfg.seed, step);
  std::vector<std::pair<std::size_t, std::uint64_t>> picks(tcfg.batch);
  for (auto& [idx, seed] : picks) {
    idx = static_cast<std::size_t>(br.below(samples.size()));
    seed = br.next_u64();
  }
  std::vector<detail::SampleOut> outs(tcfg.batch);
  detail::parallel_samples(tcfg.batch, [&](std::size_t bi) {
    const std::uint64_t sample_seed = picks[bi].second;
    detail::SampleOut& out = outs[bi];
    out.seed = sample_seed;
    FinetuneSample s = samples[picks[bi].first];
    if (tcfg.finetune_augment) {
      Rng arng = Rng::derive(sample_seed, 0x617567ull);
      detail::augment_sample(s.volume, s.labels, arng);
    }
    const TaskPair pair = make_task_pair(s, task, tcfg, sample_seed);

    Tape tape;
    ModelRun run(tape, store, mcfg);
    ForwardResult fwd = model_forward_t(run, tape.constant(pair.input), task, nullptr);
    Var loss;
    if (task == TaskKind::segment) {
      loss = tape.softmax_xent(fwd.output, pair.target);
    } else {
      if (fwd.output->value.shape != pair.target.shape)
        throw ShapeError("task output " + fwd.output->value.shape.str() + " vs target " + pair.target.shape.str());
      Var diff = tape.sub(fwd.output, tape.constant(pair.target));
      loss = tape.mean_all(tape.mul(diff, diff));
    }
    out.sup = out.total = loss->value.data[0];
    if (std::isfinite(out.total)) {
      tape.backward(loss);
      detail::accumulate_grads(run, out.grads);
    }
  });

  std::map<std::string, RealTensor> grads;
  StepStats stats = detail::reduce_batch(outs, grads, step, "fine-tuning");
  stats.lr = lr;
  optimizer_step(store, grads, adam, lr);
  return stats;
}

// ---- run loops and artifacts ----

struct RunResult {
  std::vector<StepStats> steps;
  std::string checkpoint_path;
};

namespace detail {
inline void write_run_header(std::ostream& os) { os << "epoch,step,lr,L_sup,L_con,L_total\n"; }

inline void write_run_row(std::ostream& os, std::size_t epoch, std::size_t step, const StepStats& st) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g,%.17g,%.17g\n", epoch, step, st.lr, st.sup, st.con, st.total);
  os << buf;
}

inline std::size_t resolve_spe(const TrainConfig& tcfg, std::size_t dataset) {
  if (tcfg.steps_per_epoch != 0) return tcfg.steps_per_epoch;
  return (dataset + tcfg.batch - 1) / tcfg.batch;
}
}  // namespace detail

inline RunResult run_pretrain(ParamStore& store, const ModelConfig& mcfg, const TrainConfig& tcfg,
                              const LossConfig& lcfg, const std::vector<RealTensor>& volumes,
                              const std::string& out_dir) {
  mcfg.validate();
  tcfg.validate();
  lcfg.validate(mcfg.in_channels);
  const std::size_t spe = detail::resolve_spe(tcfg, volumes.size());
  const std::size_t total_steps = tcfg.epochs * spe;
  const std::size_t warmup_steps = tcfg.warmup_epochs * spe;

  std::ofstream csv(out_dir + "/run.csv", std::ios::trunc);
  if (!csv) throw PathError("cannot open " + out_dir + "/run.csv");
  detail::write_run_header(csv);

  RunResult result;
  AdamState adam;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    for (std::size_t k = 0; k < spe; ++k, ++step) {
      const double lr = lr_at(step + 1, total_steps, warmup_steps, tcfg.lr0);
      const StepStats st = pretrain_step(store, mcfg, tcfg, lcfg, volumes, step, lr, adam);
      detail::write_run_row(csv, epoch, step, st);
      result.steps.push_back(st);
    }
    if (tcfg.checkpoint_every != 0 && (epoch + 1) % tcfg.checkpoint_every == 0 && epoch + 1 != tcfg.epochs)
      store.save_file(out_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".sspf");
  }
  result.checkpoint_path = out_dir + "/ckpt_final.sspf";
  store.save_file(result.checkpoint_path);
  return result;
}

inline RunResult run_finetune(ParamStore& store, const ModelConfig& mcfg, const TrainConfig& tcfg, TaskKind task,
                              const std::vector<FinetuneSample>& samples, const std::string& out_dir) {
  mcfg.validate();
  tcfg.validate();
  const std::size_t spe = detail::resolve_spe(tcfg, samples.size());
  const std::size_t total_steps = tcfg.epochs * spe;
  const std::size_t warmup_steps = tcfg.warmup_epochs * spe;

  std::ofstream csv(out_dir + "/run.csv", std::ios::trunc);
  if (!csv) throw PathError("cannot open " + out_dir + "/run.csv");
  detail::write_run_header(csv);

  RunResult result;
  AdamState adam;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    for (std::size_t k = 0; k < spe; ++k, ++step) {
      const double lr = lr_at(step + 1, total_steps, warmup_steps, tcfg.lr0);
      const StepStats st = finetune_step(store, mcfg, tcfg, task, samples, step, lr, adam);
      detail::write_run_row(csv, epoch, step, st);
      result.steps.push_back(st);
    }
    if (tcfg.checkpoint_every != 0 && (epoch + 1) % tcfg.checkpoint_every == 0 && epoch + 1 != tcfg.epochs)
      store.save_file(out_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".sspf");
  }
  result.checkpoint_path = out_dir + "/ckpt_final.sspf";
  store.save_file(result.checkpoint_path);
  return result;
}

}  // namespace sspf
