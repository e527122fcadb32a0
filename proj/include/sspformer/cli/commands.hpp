#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sspformer/augment/augment.hpp"
#include "sspformer/cli/config.hpp"
#include "sspformer/core/fts.hpp"
#include "sspformer/core/hash.hpp"
#include "sspformer/data/phantom.hpp"
#include "sspformer/metrics/metrics.hpp"
#include "sspformer/model/model.hpp"
#include "sspformer/train/train.hpp"

namespace sspf {

// Command implementations for the sspf tool live here so tests can exercise
// the exact production code path without spawning processes.

namespace detail {
inline void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw PathError("cannot create directory " + path + ": " + ec.message());
}

inline std::string zero_pad(std::size_t i, int width = 4) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%0*zu", width, i);
  return buf;
}

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

inline RealTensor channel_slice(const RealTensor& x, std::size_t c) {
  RealTensor out(Shape{x.shape[1], x.shape[2]});
  const std::size_t hw = out.size();
  std::copy(x.data.begin() + static_cast<long>(c * hw), x.data.begin() + static_cast<long>((c + 1) * hw),
            out.data.begin());
  return out;
}

// ssim is a 2-D windowed metric; multi-channel images score as the channel mean.
inline double ssim_channels(const RealTensor& pred, const RealTensor& target) {
  if (pred.rank() == 2) return ssim(pred, target);
  if (pred.rank() != 3 || pred.shape != target.shape)
    throw ShapeError("ssim_channels expects matching [C,H,W], got " + pred.shape.str() + " vs " + target.shape.str());
  double s = 0.0;
  for (std::size_t c = 0; c < pred.shape[0]; ++c) s += ssim(channel_slice(pred, c), channel_slice(target, c));
  return s / static_cast<double>(pred.shape[0]);
}
}  // namespace detail

// ---- phantom ----

struct PhantomArgs {
  std::size_t count = 4;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  std::string out;
};

inline void cmd_phantom(const PhantomArgs& a) {
  if (a.out.empty()) throw ConfigError("phantom: --out is required");
  detail::ensure_dir(a.out);
  std::vector<ManifestEntry> manifest;
  for (std::size_t i = 0; i < a.count; ++i) {
    Rng rng = Rng::derive(a.seed, i);
    const Phantom ph = phantom_generate(rng, a.size, a.size);
    const std::string vol_path = a.out + "/phantom_" + detail::zero_pad(i) + ".fts";
    const std::string lab_path = a.out + "/labels_" + detail::zero_pad(i) + ".fts";
    fts::write_file(vol_path, ph.volume);
    RealTensor labels(Shape{2, a.size, a.size});
    std::copy(ph.tissue_labels.data.begin(), ph.tissue_labels.data.end(), labels.data.begin());
    std::copy(ph.lesion_mask.data.begin(), ph.lesion_mask.data.end(),
              labels.data.begin() + static_cast<long>(a.size * a.size));
    fts::write_file(lab_path, labels);
    manifest.push_back({vol_path, "volume", kPhantomChannels});
    manifest.push_back({lab_path, "labels", 2});
  }
  std::ofstream mf(a.out + "/manifest.tsv", std::ios::trunc);
  if (!mf) throw PathError("cannot open " + a.out + "/manifest.tsv");
  write_manifest(mf, manifest);
}

// ---- augment preview ----

struct AugmentArgs {
  std::string in;
  std::string mode = "both";  // mask | noise | both
  double p_base = 0.25;
  double lambda = 0.5;
  double sigma = 0.1;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t patch = 16;
  double tau = 0.5;
  std::string weight = "linear";
};

inline void cmd_augment(const AugmentArgs& a) {
  if (a.mode != "mask" && a.mode != "noise" && a.mode != "both")
    throw ConfigError("augment: --mode must be mask, noise or both, got '" + a.mode + "'");
  if (a.in.empty() || a.out.empty()) throw ConfigError("augment: --in and --out are required");
  WeightKind wk;
  if (a.weight == "linear")
    wk = WeightKind::linear;
  else if (a.weight == "quadratic")
    wk = WeightKind::quadratic;
  else
    throw ConfigError("augment: --weight must be linear or quadratic, got '" + a.weight + "'");
  detail::ensure_dir(a.out);

  RealTensor x = fts::read_real_file(a.in);
  if (x.rank() == 2) x = RealTensor(Shape{1, x.shape[0], x.shape[1]}, std::vector<double>(x.data));
  if (x.rank() != 3) throw ShapeError("augment input must be [H,W] or [C,H,W], got " + x.shape.str());
  const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
  if (h % a.patch != 0 || w % a.patch != 0)
    throw ShapeError("patch " + std::to_string(a.patch) + " does not divide input " + x.shape.str());
  const std::size_t gh = h / a.patch, gw = w / a.patch;

  RealTensor out = x;
  std::ostringstream stats;

  // Noise first (visible-patch perturbation), then masking zeroes patches on
  // top; masked patches end up zero either way so the order is immaterial.
  if (a.mode == "noise" || a.mode == "both") {
    NoiseSpec spec;
    spec.lambda = a.lambda;
    spec.sigma = a.sigma;
    spec.weight_kind = wk;
    std::vector<double> ring_power;   // mean |F'-F|^2 by folded radius ring
    std::vector<std::size_t> ring_n;
    RealTensor patch(Shape{a.patch, a.patch});
    for (std::size_t cc = 0; cc < c; ++cc)
      for (std::size_t pi = 0; pi < gh; ++pi)
        for (std::size_t pj = 0; pj < gw; ++pj) {
          for (std::size_t u = 0; u < a.patch; ++u)
            for (std::size_t v = 0; v < a.patch; ++v) patch.at(u, v) = x.at(cc, pi * a.patch + u, pj * a.patch + v);
          spec.seed = a.seed ^ (0x51ed2701ull + ((cc * gh + pi) * gw + pj));
          const RealTensor noised = kspace_noise(patch, spec);
          const ComplexTensor df = fft2(to_complex(noised)), cf = fft2(to_complex(patch));
          for (std::size_t u = 0; u < a.patch; ++u)
            for (std::size_t v = 0; v < a.patch; ++v) {
              const long fu = u <= a.patch / 2 ? static_cast<long>(u) : static_cast<long>(u) - static_cast<long>(a.patch);
              const long fv = v <= a.patch / 2 ? static_cast<long>(v) : static_cast<long>(v) - static_cast<long>(a.patch);
              const auto ring = static_cast<std::size_t>(
                  std::lround(std::sqrt(static_cast<double>(fu * fu + fv * fv))));
              if (ring >= ring_power.size()) {
                ring_power.resize(ring + 1, 0.0);
                ring_n.resize(ring + 1, 0);
              }
              ring_power[ring] += std::norm(df.at(u, v) - cf.at(u, v));
              ++ring_n[ring];
            }
          for (std::size_t u = 0; u < a.patch; ++u)
            for (std::size_t v = 0; v < a.patch; ++v) out.at(cc, pi * a.patch + u, pj * a.patch + v) = noised.at(u, v);
        }
    for (std::size_t r = 0; r < ring_power.size(); ++r) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "noise_ring_%zu=%.17g\n", r,
                    ring_n[r] ? ring_power[r] / static_cast<double>(ring_n[r]) : 0.0);
      stats << buf;
    }
  }

  if (a.mode == "mask" || a.mode == "both") {
    const RealTensor mean = detail::channel_mean_image(x);
    const MaskPlan plan = plan_mask(edge_energy(mean), a.patch, a.p_base, a.tau, a.seed);
    for (std::size_t pi = 0; pi < gh; ++pi)
      for (std::size_t pj = 0; pj < gw; ++pj)
        if (plan.decisions[pi * gw + pj])
          for (std::size_t cc = 0; cc < c; ++cc)
            for (std::size_t u = 0; u < a.patch; ++u)
              for (std::size_t v = 0; v < a.patch; ++v) out.at(cc, pi * a.patch + u, pj * a.patch + v) = 0.0;
    std::ofstream pf(a.out + "/plan.csv", std::ios::trunc);
    if (!pf) throw PathError("cannot open " + a.out + "/plan.csv");
    write_plan_csv(pf, plan);
    char buf[256];
    std::snprintf(buf, sizeof(buf), "masked_fraction=%.17g\nexpected_fraction=%.17g\nhigh_tier_fraction=%.17g\n",
                  plan.masked_fraction(), plan.expected_fraction(),
                  static_cast<double>(std::count(plan.tiers.begin(), plan.tiers.end(), Tier::high)) /
                      static_cast<double>(plan.patches()));
    stats << buf;
  }

  fts::write_file(a.out + "/augmented.fts", out);
  std::ofstream sf(a.out + "/stats.txt", std::ios::trunc);
  if (!sf) throw PathError("cannot open " + a.out + "/stats.txt");
  sf << stats.str();
}

// ---- shared corpus plumbing for pretrain / finetune / eval ----

struct DataItem {
  Phantom phantom;
  std::uint64_t seed = 0;  // generation seed, reused for evaluation noise
};

inline std::vector<DataItem> generate_corpus(const RunConfig& rc) {
  const std::size_t count = rc.get_size("data.count");
  const std::size_t size = rc.get_size("data.size");
  const std::uint64_t seed = rc.get_u64("data.seed");
  std::vector<DataItem> items;
  items.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, i);
    items.push_back({phantom_generate(rng, size, size), rng.next_u64()});
  }
  return items;
}

inline Splits<DataItem> split_corpus(const RunConfig& rc) {
  const std::vector<double> f = rc.get_doubles("data.split");
  if (f.size() != 3) throw ConfigError("data.split needs exactly 3 fractions");
  return split_dataset(generate_corpus(rc), {f[0], f[1], f[2]}, rc.get_u64("data.seed") ^ 0x73706c6974ull);
}

inline std::vector<RealTensor> corpus_volumes(const std::vector<DataItem>& items) {
  std::vector<RealTensor> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.phantom.volume);
  return out;
}

inline std::vector<FinetuneSample> corpus_samples(const std::vector<DataItem>& items) {
  std::vector<FinetuneSample> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back({it.phantom.volume, it.phantom.tissue_labels});
  return out;
}

// Mean denoise PSNR of model output vs clean target over a held-out set,
// alongside the noisy-input identity baseline.
struct DenoiseEval {
  double psnr_model = 0.0;
  double psnr_input = 0.0;
};

inline DenoiseEval eval_denoise(ParamStore& store, const ModelConfig& mcfg, double sigma,
                                const std::vector<DataItem>& held_out, std::size_t max_samples = 0) {
  if (held_out.empty()) throw ContractError("denoise evaluation needs a non-empty held-out set");
  const std::size_t n = max_samples == 0 ? held_out.size() : std::min(max_samples, held_out.size());
  DenoiseEval ev;
  for (std::size_t i = 0; i < n; ++i) {
    const DataItem& it = held_out[i];
    Rng nrng = Rng::derive(it.seed, 0x6e6f6973ull);
    const RealTensor noisy = add_gaussian_noise(it.phantom.volume, sigma, nrng);
    const RealTensor target = detail::take_channels(it.phantom.volume, 3);
    const RealTensor pred = model_forward(store, mcfg, noisy, TaskKind::denoise);
    ev.psnr_model += psnr(pred, target);
    ev.psnr_input += psnr(detail::take_channels(noisy, 3), target);
  }
  ev.psnr_model /= static_cast<double>(n);
  ev.psnr_input /= static_cast<double>(n);
  return ev;
}

// ---- pretrain (plus the lambda sweep and the ablation grid) ----

struct PretrainArgs {
  std::string config;   // key=value file; empty = all defaults
  std::string out_dir;
  std::string sweep;    // "", "lambda" or "lambda=0,0.1,..."
  bool ablate = false;
  std::optional<std::uint64_t> seed;  // overrides train.seed
};

namespace detail {
inline RunConfig load_run_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig rc;
  if (!path.empty()) rc.parse_file(path);
  if (seed) rc.set("train.seed", std::to_string(*seed));
  return rc;
}

inline StepStats last_step(const RunResult& r) {
  if (r.steps.empty()) throw ContractError("run produced no steps");
  return r.steps.back();
}

// One pretraining run into out_dir: echo config, train on the train split,
// leave run.csv + ckpt_final.sspf behind.
inline RunResult pretrain_once(const RunConfig& rc, const std::vector<RealTensor>& train_volumes,
                               const std::string& out_dir) {
  ensure_dir(out_dir);
  rc.echo_file(out_dir + "/config.txt");
  ParamStore store = build_model(rc.model_config(), rc.init_mode(), rc.get_u64("init.seed"));
  return run_pretrain(store, rc.model_config(), rc.train_config(), rc.loss_config(), train_volumes, out_dir);
}

inline std::vector<double> parse_sweep(const std::string& sweep) {
  const std::string def = "0,0.1,0.2,0.3,0.5";
  std::string list;
  if (sweep == "lambda")
    list = def;
  else if (sweep.rfind("lambda=", 0) == 0)
    list = sweep.substr(7);
  else
    throw ConfigError("--sweep understands lambda=<grid>, got '" + sweep + "'");
  std::vector<double> grid;
  std::istringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      grid.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("bad sweep value '" + item + "'");
    }
  }
  if (grid.empty()) throw ConfigError("empty sweep grid");
  return grid;
}
}  // namespace detail

struct AblationRow {
  std::string name;
  bool inv_freq_mask, fft_noise, freq_att;
};

inline const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows = {
      {"baseline", false, false, false},
      {"only_fft", false, true, false},
      {"only_mask", true, false, false},
      {"full", true, true, true},
  };
  return rows;
}

inline void cmd_pretrain(const PretrainArgs& a) {
  if (a.out_dir.empty()) throw ConfigError("pretrain: --out-dir is required");
  RunConfig rc = detail::load_run_config(a.config, a.seed);
  detail::ensure_dir(a.out_dir);
  Splits<DataItem> splits = split_corpus(rc);
  const std::vector<RealTensor> train_volumes = corpus_volumes(splits.train);
  if (train_volumes.empty()) throw ConfigError("train split is empty; raise data.count or data.split");

  if (!a.sweep.empty()) {
    const std::vector<double> grid = detail::parse_sweep(a.sweep);
    std::ofstream sw(a.out_dir + "/sweep.csv", std::ios::trunc);
    if (!sw) throw PathError("cannot open " + a.out_dir + "/sweep.csv");
    sw << "lambda,L_sup,L_con,L_total\n";
    for (double lambda : grid) {
      RunConfig sub = rc;
      sub.set("loss.lambda_contrastive", std::to_string(lambda));
      const RunResult r = detail::pretrain_once(sub, train_volumes, a.out_dir + "/lambda_" + detail::fmt_g(lambda));
      const StepStats st = detail::last_step(r);
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g\n", detail::fmt_g(lambda).c_str(), st.sup, st.con,
                    st.total);
      sw << buf;
    }
    return;
  }

  if (a.ablate) {
    std::ofstream ab(a.out_dir + "/ablation.csv", std::ios::trunc);
    if (!ab) throw PathError("cannot open " + a.out_dir + "/ablation.csv");
    ab << "name,inv_freq_mask,fft_noise,freq_att,psnr,psnr_input\n";
    const std::vector<DataItem>& held_out = splits.test.empty() ? splits.val : splits.test;
    for (const AblationRow& row : ablation_rows()) {
      RunConfig sub = rc;
      sub.set("train.inv_freq_mask", row.inv_freq_mask ? "1" : "0");
      sub.set("train.fft_noise", row.fft_noise ? "1" : "0");
      sub.set("train.freq_att", row.freq_att ? "1" : "0");
      const std::string dir = a.out_dir + "/" + row.name;
      detail::pretrain_once(sub, train_volumes, dir);

      ParamStore store = ParamStore::load_file(dir + "/ckpt_final.sspf");
      store.freeze("encoder.");
      const std::string ft_dir = dir + "/finetune_denoise";
      detail::ensure_dir(ft_dir);
      const TrainConfig tcfg = sub.train_config();
      run_finetune(store, sub.model_config(), tcfg, TaskKind::denoise, corpus_samples(splits.train), ft_dir);

      const DenoiseEval ev = eval_denoise(store, sub.model_config(), tcfg.finetune_noise_sigma, held_out,
                                          sub.get_size("eval.max_samples"));
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%.17g,%.17g\n", row.name.c_str(), row.inv_freq_mask ? 1 : 0,
                    row.fft_noise ? 1 : 0, row.freq_att ? 1 : 0, ev.psnr_model, ev.psnr_input);
      ab << buf;
    }
    return;
  }

  detail::pretrain_once(rc, train_volumes, a.out_dir);
}

// ---- finetune ----

struct FinetuneArgs {
  std::string config;
  std::string task;
  std::string checkpoint;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

inline void cmd_finetune(const FinetuneArgs& a) {
  if (a.out_dir.empty()) throw ConfigError("finetune: --out-dir is required");
  if (a.checkpoint.empty()) throw ConfigError("finetune: --checkpoint is required");
  const TaskKind task = parse_task(a.task);
  RunConfig rc = detail::load_run_config(a.config, a.seed);
  detail::ensure_dir(a.out_dir);
  rc.echo_file(a.out_dir + "/config.txt");
  ParamStore store = ParamStore::load_file(a.checkpoint);
  store.freeze("encoder.");
  Splits<DataItem> splits = split_corpus(rc);
  if (splits.train.empty()) throw ConfigError("train split is empty; raise data.count or data.split");
  run_finetune(store, rc.model_config(), rc.train_config(), task, corpus_samples(splits.train), a.out_dir);
}

// ---- eval ----

struct EvalArgs {
  std::string config;
  std::string task;
  std::string checkpoint;
  std::string out_dir;
};

inline void cmd_eval(const EvalArgs& a) {
  if (a.out_dir.empty()) throw ConfigError("eval: --out-dir is required");
  if (a.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  const TaskKind task = parse_task(a.task);
  if (task == TaskKind::recon) throw ConfigError("recon is a pretraining task; evaluate a downstream task");
  RunConfig rc = detail::load_run_config(a.config, std::nullopt);
  detail::ensure_dir(a.out_dir);
  rc.echo_file(a.out_dir + "/config.txt");
  ParamStore store = ParamStore::load_file(a.checkpoint);
  const ModelConfig mcfg = rc.model_config();
  const TrainConfig tcfg = rc.train_config();
  Splits<DataItem> splits = split_corpus(rc);
  const std::vector<DataItem>& held_out = splits.test.empty() ? splits.val : splits.test;
  if (held_out.empty()) throw ConfigError("held-out split is empty; raise data.count or data.split");
  const std::size_t cap = rc.get_size("eval.max_samples");
  const std::size_t n = cap == 0 ? held_out.size() : std::min(cap, held_out.size());

  MetricReport report;
  for (std::size_t i = 0; i < n; ++i) {
    const DataItem& it = held_out[i];
    const std::string sid = "test_" + detail::zero_pad(i);
    const std::string tname = task_name(task);
    if (task == TaskKind::segment) {
      const RealTensor logits = model_forward(store, mcfg, it.phantom.volume, task);
      const std::size_t k = logits.shape[0], h = logits.shape[1], w = logits.shape[2];
      RealTensor pred_labels(Shape{h, w});
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          std::size_t best = 0;
          for (std::size_t cc = 1; cc < k; ++cc)
            if (logits.at(cc, y, x) > logits.at(best, y, x)) best = cc;
          pred_labels.at(y, x) = static_cast<double>(best);
        }
      for (std::size_t cls = 1; cls < mcfg.seg_classes; ++cls) {
        RealTensor pm(Shape{h, w}), gm(Shape{h, w});
        bool pm_any = false, gm_any = false;
        for (std::size_t e = 0; e < pm.size(); ++e) {
          pm.data[e] = pred_labels.data[e] == static_cast<double>(cls) ? 1.0 : 0.0;
          gm.data[e] = it.phantom.tissue_labels.data[e] == static_cast<double>(cls) ? 1.0 : 0.0;
          pm_any = pm_any || pm.data[e] > 0.5;
          gm_any = gm_any || gm.data[e] > 0.5;
        }
        report.add(sid, tname, "dice_class" + std::to_string(cls), dice(pm, gm));
        if (pm_any && gm_any) report.add(sid, tname, "hd95_class" + std::to_string(cls), hd95(pm, gm));
      }
      continue;
    }

    RealTensor input;
    RealTensor baseline;  // identity/interpolation reference in target space
    const RealTensor target = detail::take_channels(it.phantom.volume, 3);
    if (task == TaskKind::denoise) {
      Rng nrng = Rng::derive(it.seed, 0x6e6f6973ull);
      input = add_gaussian_noise(it.phantom.volume, tcfg.finetune_noise_sigma, nrng);
      baseline = detail::take_channels(input, 3);
    } else {
      input = degrade_sr(it.phantom.volume, sr_factor(task));
      baseline = upsample_nn(detail::take_channels(input, 3), sr_factor(task));
    }
    const RealTensor pred = model_forward(store, mcfg, input, task);
    report.add(sid, tname, "psnr", psnr(pred, target));
    report.add(sid, tname, "ssim", detail::ssim_channels(pred, target));
    report.add(sid, tname, "psnr_input", psnr(baseline, target));
  }

  std::ofstream mf(a.out_dir + "/metrics.csv", std::ios::trunc);
  if (!mf) throw PathError("cannot open " + a.out_dir + "/metrics.csv");
  report.write_csv(mf);
}

// Stable exit-code contract: 0 success, 2 config/contract, 3 I/O, 4 numeric.
template <typename Fn>
int run_command(Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 4;
  } catch (const PathError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sspf
