// Acceptance gate for the full pipeline: numerics, gradients, augmentation
// statistics, training contracts, metrics and CLI plumbing. One line per
// criterion; the process fails if any line says FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sspformer/cli/commands.hpp"
#include "sspformer/sspformer.hpp"

using namespace sspf;

namespace {

int g_failed = 0;

void criterion(int n, const std::string& name, double budget_s, const std::function<bool(std::string&)>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string why;
  bool ok = false;
  try {
    ok = body(why);
  } catch (const std::exception& e) {
    ok = false;
    why = std::string("unexpected exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (ok && budget_s > 0.0 && secs > budget_s) {
    ok = false;
    why = "over time budget";
  }
  if (!ok) ++g_failed;
  std::printf("%s criterion %d: %s (%.1f s", ok ? "PASS" : "FAIL", n, name.c_str(), secs);
  if (budget_s > 0.0) std::printf(" / budget %.0f s", budget_s);
  std::printf(")");
  if (!why.empty()) std::printf(" -- %s", why.c_str());
  std::printf("\n");
  std::fflush(stdout);
}

std::string fresh_dir(const std::string& tag) {
  const std::string d = "/tmp/sspf_accept_" + tag;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::istringstream is(slurp(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) fields.push_back(tok);
    rows.push_back(std::move(fields));
  }
  return rows;
}

char g_why[512];

// ---------------------------------------------------------------- criterion 1

bool c1_fft(std::string& why) {
  const std::vector<std::size_t> sizes = {4, 8, 16, 32, 64};
  Rng rng(101);
  for (std::size_t h : sizes)
    for (std::size_t w : sizes) {
      const RealTensor x = RealTensor::random_uniform(Shape{h, w}, rng);
      const ComplexTensor F = fft2(to_complex(x));
      const ComplexTensor back = ifft2(F);
      double num = 0.0, den = 0.0, px = 0.0, pf = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = back.data[i].real() - x.data[i];
        num += d * d + back.data[i].imag() * back.data[i].imag();
        den += x.data[i] * x.data[i];
        px += x.data[i] * x.data[i];
        pf += std::norm(F.data[i]);
      }
      if (std::sqrt(num / den) > 1e-10) {
        std::snprintf(g_why, sizeof(g_why), "round-trip error %g at %zux%zu", std::sqrt(num / den), h, w);
        why = g_why;
        return false;
      }
      const double parseval = std::abs(px - pf / static_cast<double>(h * w)) / px;
      if (parseval > 1e-9) {
        std::snprintf(g_why, sizeof(g_why), "Parseval error %g at %zux%zu", parseval, h, w);
        why = g_why;
        return false;
      }
    }

  // direct O(N^2) DFT oracle on 8x8
  const RealTensor x = RealTensor::random_uniform(Shape{8, 8}, rng);
  const ComplexTensor F = fft2(to_complex(x));
  double max_f = 0.0, max_d = 0.0;
  for (std::size_t u = 0; u < 8; ++u)
    for (std::size_t v = 0; v < 8; ++v) {
      std::complex<double> acc(0.0, 0.0);
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
          const double ang = -2.0 * M_PI *
                             (static_cast<double>(u * i) / 8.0 + static_cast<double>(v * j) / 8.0);
          acc += x.at(i, j) * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      max_f = std::max(max_f, std::abs(acc));
      max_d = std::max(max_d, std::abs(acc - F.at(u, v)));
    }
  if (max_d / max_f > 1e-9) {
    std::snprintf(g_why, sizeof(g_why), "DFT oracle mismatch %g", max_d / max_f);
    why = g_why;
    return false;
  }
  return true;
}

// ---------------------------------------------------------------- criterion 2

using Builder = std::function<Var(Tape&, std::vector<Var>&)>;

struct OpSpec {
  std::string name;
  std::vector<Shape> shapes;
  Builder build;
  double lo = -1.0, hi = 1.0;  // input range (sqrt and div need positive data)
};

bool fd_match(double ad, double fd, double tol, double floor_abs) {
  const double diff = std::abs(ad - fd);
  return diff <= std::max(tol * std::max(std::abs(ad), std::abs(fd)), floor_abs);
}

bool check_op(const OpSpec& spec, std::uint64_t seed, std::string& why) {
  Rng rng(seed);
  std::vector<RealTensor> xs;
  for (const Shape& s : spec.shapes) {
    RealTensor t = RealTensor::random_uniform(s, rng);
    for (auto& v : t.data) v = spec.lo + (v + 1.0) * 0.5 * (spec.hi - spec.lo);
    xs.push_back(std::move(t));
  }

  Tape tape(true);
  std::vector<Var> vars;
  for (const RealTensor& t : xs) vars.push_back(tape.leaf(t, true));
  Var out = spec.build(tape, vars);
  RealTensor W = RealTensor::random_uniform(out->value.shape, rng);
  tape.backward(tape.sum_all(tape.mul(out, tape.constant(W))));

  auto loss_at = [&](const std::vector<RealTensor>& vals) {
    Tape t2(false);
    std::vector<Var> v2;
    for (const RealTensor& t : vals) v2.push_back(t2.leaf(t, false));
    Var o2 = spec.build(t2, v2);
    double s = 0.0;
    for (std::size_t i = 0; i < o2->value.size(); ++i) s += W.data[i] * o2->value.data[i];
    return s;
  };

  for (std::size_t k = 0; k < xs.size(); ++k) {
    const RealTensor& g = vars[k]->grad;
    const std::size_t n = xs[k].size();
    const std::size_t step = std::max<std::size_t>(1, n / 4);
    for (std::size_t i = seed % step; i < n; i += step) {
      const double h = 1e-6 * std::max(1.0, std::abs(xs[k].data[i]));
      std::vector<RealTensor> plus = xs, minus = xs;
      plus[k].data[i] += h;
      minus[k].data[i] -= h;
      const double fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
      const double ad = vars[k]->has_grad ? g.data[i] : 0.0;
      if (!fd_match(ad, fd, 1e-4, 1e-7)) {
        std::snprintf(g_why, sizeof(g_why), "op %s input %zu elem %zu: ad=%.8g fd=%.8g (seed %llu)",
                      spec.name.c_str(), k, i, ad, fd, static_cast<unsigned long long>(seed));
        why = g_why;
        return false;
      }
    }
  }
  return true;
}

std::vector<OpSpec> op_suite() {
  std::vector<OpSpec> ops;
  auto B = [](Builder b) { return b; };
  ops.push_back({"add", {Shape{3, 4}, Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.add(v[0], v[1]); })});
  ops.push_back({"sub", {Shape{3, 4}, Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.sub(v[0], v[1]); })});
  ops.push_back({"mul", {Shape{3, 4}, Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.mul(v[0], v[1]); })});
  ops.push_back({"scale", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.scale(v[0], 1.7); })});
  ops.push_back(
      {"add_const", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.add_const(v[0], 0.3); })});
  {
    RealTensor m(Shape{3, 4});
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = i % 3 == 0 ? 1.0 : 0.0;
    ops.push_back({"mul_mask", {Shape{3, 4}}, B([m](Tape& t, std::vector<Var>& v) { return t.mul_mask(v[0], m); })});
  }
  ops.push_back({"sqrt_elem", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.sqrt_elem(v[0]); }), 0.5,
                 1.5});
  ops.push_back({"gelu", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.gelu(v[0]); }), -2.0, 2.0});
  ops.push_back({"sigmoid", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.sigmoid(v[0]); }), -2.0, 2.0});
  ops.push_back({"sum_all", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.sum_all(v[0]); })});
  ops.push_back({"mean_all", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.mean_all(v[0]); })});
  ops.push_back({"mean_rows", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.mean_rows(v[0]); })});
  ops.push_back(
      {"add_b", {Shape{3, 4}, Shape{1}}, B([](Tape& t, std::vector<Var>& v) { return t.add_b(v[0], v[1]); })});
  ops.push_back(
      {"sub_b", {Shape{3, 4}, Shape{1}}, B([](Tape& t, std::vector<Var>& v) { return t.sub_b(v[0], v[1]); })});
  ops.push_back(
      {"mul_b", {Shape{3, 4}, Shape{1}}, B([](Tape& t, std::vector<Var>& v) { return t.mul_b(v[0], v[1]); })});
  ops.push_back({"div_b", {Shape{3, 4}, Shape{1}}, B([](Tape& t, std::vector<Var>& v) { return t.div_b(v[0], v[1]); }),
                 0.7, 1.3});
  ops.push_back(
      {"matmul", {Shape{3, 4}, Shape{4, 5}}, B([](Tape& t, std::vector<Var>& v) { return t.matmul(v[0], v[1]); })});
  ops.push_back({"transpose", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.transpose(v[0]); })});
  ops.push_back(
      {"slice_cols", {Shape{3, 6}}, B([](Tape& t, std::vector<Var>& v) { return t.slice_cols(v[0], 1, 4); })});
  ops.push_back({"concat_cols", {Shape{3, 2}, Shape{3, 3}},
                 B([](Tape& t, std::vector<Var>& v) { return t.concat_cols({v[0], v[1]}); })});
  ops.push_back(
      {"softmax_rows", {Shape{3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.softmax_rows(v[0]); }), -2.0, 2.0});
  ops.push_back({"add_rowvec", {Shape{3, 4}, Shape{4}},
                 B([](Tape& t, std::vector<Var>& v) { return t.add_rowvec(v[0], v[1]); })});
  ops.push_back({"conv2d", {Shape{2, 5, 6}, Shape{3, 2, 3, 3}},
                 B([](Tape& t, std::vector<Var>& v) { return t.conv2d(v[0], v[1]); })});
  ops.push_back({"add_chan_bias", {Shape{3, 5, 6}, Shape{3}},
                 B([](Tape& t, std::vector<Var>& v) { return t.add_chan_bias(v[0], v[1]); })});
  ops.push_back(
      {"pixel_shuffle", {Shape{8, 3, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.pixel_shuffle(v[0], 2); })});
  ops.push_back({"patchify", {Shape{2, 4, 4}}, B([](Tape& t, std::vector<Var>& v) { return t.patchify(v[0], 2); })});
  ops.push_back({"unpatchify", {Shape{4, 8}},
                 B([](Tape& t, std::vector<Var>& v) { return t.unpatchify(v[0], 2, 4, 4, 2); })});
  {
    const std::vector<bool> masked = {true, false, true, false};
    ops.push_back({"apply_mask", {Shape{4, 5}, Shape{5}},
                   B([masked](Tape& t, std::vector<Var>& v) { return t.apply_mask(v[0], v[1], masked); })});
  }
  ops.push_back(
      {"fourier_mag", {Shape{16, 3}}, B([](Tape& t, std::vector<Var>& v) { return t.fourier_mag(v[0], 4, 4); })});
  {
    RealTensor labels(Shape{4, 4});
    for (std::size_t i = 0; i < labels.size(); ++i) labels.data[i] = static_cast<double>(i % 3);
    ops.push_back({"softmax_xent", {Shape{3, 4, 4}},
                   B([labels](Tape& t, std::vector<Var>& v) { return t.softmax_xent(v[0], labels); }), -2.0, 2.0});
  }
  return ops;
}

// Reduced-model finite differences: D=8, 2 heads, 2 encoder layers, P=4,
// 16x16 input, reconstruction task with a non-empty token mask so the mask
// token participates.
bool check_reduced_model(std::uint64_t seed, std::string& why) {
  ModelConfig mc;
  mc.patch = 4;
  mc.embed = 8;
  mc.enc_layers = 2;
  mc.dec_layers = 1;
  mc.heads = 2;
  mc.d_k = 4;
  mc.conv_channels = 4;
  mc.img_h = 16;
  mc.img_w = 16;
  ParamStore ps = build_model(mc, InitMode::trunc_normal, seed);
  Rng rng(seed * 31 + 7);
  const RealTensor x = RealTensor::random_uniform(Shape{6, 16, 16}, rng);
  std::vector<bool> masked(mc.tokens(), false);
  for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = rng.below(4) == 0;
  masked[2] = true;  // guarantee at least one masked token

  Tape tape(true);
  ModelRun run(tape, ps, mc);
  Var xvar = tape.leaf(x, true);
  auto fr = model_forward_t(run, xvar, TaskKind::recon, &masked);
  RealTensor W = RealTensor::random_uniform(fr.output->value.shape, rng);
  tape.backward(tape.sum_all(tape.mul(fr.output, tape.constant(W))));

  auto loss_now = [&]() {
    const RealTensor out = model_forward(ps, mc, x, TaskKind::recon, &masked);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += W.data[i] * out.data[i];
    return s;
  };

  auto touched = [](const std::string& path) {
    if (path.rfind("head.", 0) == 0) return path.rfind("head.recon.", 0) == 0;
    if (path.rfind("tail.", 0) == 0) return path.rfind("tail.recon.", 0) == 0;
    if (path.rfind("decoder.task.", 0) == 0) return path == "decoder.task.recon";
    return true;
  };

  for (const std::string& path : ps.paths("")) {
    if (!touched(path)) continue;
    const RealTensor gad = run.grad(path);
    RealTensor& w = ps.value(path);
    const std::size_t n = w.size();
    const std::size_t step = std::max<std::size_t>(1, n / 2);
    for (std::size_t i = seed % step; i < n; i += step) {
      const double keep = w.data[i];
      const double h = 1e-6 * std::max(1.0, std::abs(keep));
      w.data[i] = keep + h;
      const double lp = loss_now();
      w.data[i] = keep - h;
      const double lm = loss_now();
      w.data[i] = keep;
      const double fd = (lp - lm) / (2.0 * h);
      if (!fd_match(gad.data[i], fd, 1e-4, 1e-7)) {
        std::snprintf(g_why, sizeof(g_why), "param %s elem %zu: ad=%.8g fd=%.8g (seed %llu)", path.c_str(), i,
                      gad.data[i], fd, static_cast<unsigned long long>(seed));
        why = g_why;
        return false;
      }
    }
  }

  // input-side gradient through the whole stack
  for (std::size_t i : {0ul, x.size() / 2, x.size() - 1}) {
    RealTensor xp = x, xm = x;
    const double h = 1e-6 * std::max(1.0, std::abs(x.data[i]));
    xp.data[i] += h;
    xm.data[i] -= h;
    auto loss_of = [&](const RealTensor& in) {
      const RealTensor out = model_forward(ps, mc, in, TaskKind::recon, &masked);
      double s = 0.0;
      for (std::size_t k = 0; k < out.size(); ++k) s += W.data[k] * out.data[k];
      return s;
    };
    const double fd = (loss_of(xp) - loss_of(xm)) / (2.0 * h);
    if (!fd_match(xvar->grad.data[i], fd, 1e-4, 1e-7)) {
      std::snprintf(g_why, sizeof(g_why), "input elem %zu: ad=%.8g fd=%.8g (seed %llu)", i, xvar->grad.data[i], fd,
                    static_cast<unsigned long long>(seed));
      why = g_why;
      return false;
    }
  }
  return true;
}

bool c2_gradients(std::string& why) {
  const std::vector<OpSpec> ops = op_suite();
  for (const OpSpec& spec : ops)
    for (std::uint64_t seed = 1; seed <= 5; ++seed)
      if (!check_op(spec, seed, why)) return false;
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    if (!check_reduced_model(seed, why)) return false;
  return true;
}

// ---------------------------------------------------------------- criterion 3

bool c3_masking(std::string& why) {
  // flat left half, ramp right half: clean high/low tier split
  RealTensor img(Shape{80, 80});
  for (std::size_t i = 0; i < 80; ++i)
    for (std::size_t j = 40; j < 80; ++j) img.at(i, j) = 0.1 * static_cast<double>(j - 40);
  const EdgeMap edges = edge_energy(img);

  std::size_t draws = 0, masked = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const MaskPlan plan = plan_mask(edges, 8, 0.25, 0.5, 1000 + s);
    if (plan.expected_fraction() != 0.25) {
      why = "expected fraction drifted off 0.25";
      return false;
    }
    for (std::size_t i = 0; i < plan.patches(); ++i) {
      if (plan.tiers[i] == Tier::high && plan.probs[i] != 0.125) {
        std::snprintf(g_why, sizeof(g_why), "high-tier prob %g is not exactly 0.125", plan.probs[i]);
        why = g_why;
        return false;
      }
      ++draws;
      masked += plan.decisions[i] ? 1 : 0;
    }
  }
  if (draws != 10000) {
    why = "draw count is not 10000";
    return false;
  }
  const double frac = static_cast<double>(masked) / 10000.0;
  const double bound = 3.0 * std::sqrt(0.25 * 0.75 / 10000.0);
  if (std::abs(frac - 0.25) >= bound) {
    std::snprintf(g_why, sizeof(g_why), "masked fraction %g outside 0.25 +- %g", frac, bound);
    why = g_why;
    return false;
  }
  return true;
}

// ---------------------------------------------------------------- criterion 4

bool c4_noise_spectrum(std::string& why) {
  Rng rng(404);
  const RealTensor patch = RealTensor::random_uniform(Shape{16, 16}, rng);
  const ComplexTensor F = fft2(to_complex(patch));

  NoiseSpec spec;
  spec.lambda = 0.5;
  spec.sigma = 0.1;
  spec.weight_kind = WeightKind::linear;

  // lambda = 0 is a bit-identity
  NoiseSpec id = spec;
  id.lambda = 0.0;
  id.seed = 9;
  const RealTensor same = kspace_noise(patch, id);
  for (std::size_t i = 0; i < patch.size(); ++i)
    if (same.data[i] != patch.data[i]) {
      why = "lambda=0 is not bit-identical";
      return false;
    }

  const double mean_in = [&] {
    double m = 0.0;
    for (double v : patch.data) m += v;
    return m / static_cast<double>(patch.size());
  }();

  RealTensor power = RealTensor::zeros(Shape{16, 16});
  const std::size_t draws = 10000;
  double worst_mean = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    spec.seed = 7000 + d;
    const RealTensor noised = kspace_noise(patch, spec);
    double m = 0.0;
    for (double v : noised.data) m += v;
    m /= static_cast<double>(noised.size());
    worst_mean = std::max(worst_mean, std::abs(m - mean_in));
    const ComplexTensor Fn = fft2(to_complex(noised));
    for (std::size_t i = 0; i < Fn.size(); ++i) power.data[i] += std::norm(Fn.data[i] - F.data[i]);
  }
  if (worst_mean > 1e-9) {
    std::snprintf(g_why, sizeof(g_why), "mean drifted by %g", worst_mean);
    why = g_why;
    return false;
  }

  const RealTensor Wgt = radial_weight(16, 16, WeightKind::linear);
  for (std::size_t u = 0; u < 16; ++u)
    for (std::size_t v = 0; v < 16; ++v) {
      const double w = Wgt.at(u, v);
      const double expected = 2.0 * spec.sigma * spec.sigma * spec.lambda * spec.lambda * std::norm(F.at(u, v)) * w * w;
      const double empirical = power.at(u, v) / static_cast<double>(draws);
      if (expected < 1e-24) {
        if (empirical > 1e-20) {
          std::snprintf(g_why, sizeof(g_why), "bin (%zu,%zu) should carry no noise, got %g", u, v, empirical);
          why = g_why;
          return false;
        }
        continue;
      }
      if (std::abs(empirical / expected - 1.0) > 0.05) {
        std::snprintf(g_why, sizeof(g_why), "bin (%zu,%zu) power off by %.2f%%", u, v,
                      100.0 * std::abs(empirical / expected - 1.0));
        why = g_why;
        return false;
      }
    }
  return true;
}

// ---------------------------------------------------------------- criterion 5

ModelConfig tiny_model() {
  ModelConfig c;
  c.patch = 4;
  c.embed = 8;
  c.enc_layers = 2;
  c.dec_layers = 1;
  c.heads = 2;
  c.d_k = 4;
  c.conv_channels = 4;
  c.img_h = 16;
  c.img_w = 16;
  return c;
}

const char* kTinyRunConfig =
    "model.patch=4\n"
    "model.embed=8\n"
    "model.enc_layers=2\n"
    "model.dec_layers=1\n"
    "model.heads=2\n"
    "model.d_k=4\n"
    "model.conv_channels=4\n"
    "model.img_h=32\n"
    "model.img_w=32\n"
    "train.epochs=2\n"
    "train.warmup_epochs=1\n"
    "train.batch=1\n"
    "train.steps_per_epoch=2\n"
    "data.count=4\n"
    "data.size=32\n"
    "data.split=0.5,0.25,0.25\n"
    "eval.max_samples=1\n";

bool c5_lambda_composition(std::string& why) {
  Rng rng(55);
  for (int i = 0; i < 100; ++i) {
    const double sup = rng.uniform() * 10.0;
    const double con = rng.uniform() * 10.0;
    if (total_loss(sup, con, 0.0) != sup) {
      why = "total loss with lambda=0 is not bitwise the supervised loss";
      return false;
    }
  }

  // one optimizer step: lambda=0 must match supervised-only training bit for bit
  const ModelConfig mc = tiny_model();
  Rng vr(56);
  std::vector<RealTensor> vols;
  for (int i = 0; i < 2; ++i) vols.push_back(RealTensor::random_uniform(Shape{6, 16, 16}, vr));
  auto one_step = [&](double lambda, bool freq_att) {
    ParamStore ps = build_model(mc, InitMode::trunc_normal, 4);
    TrainConfig tc;
    tc.batch = 2;
    tc.seed = 3;
    tc.epochs = 2;
    tc.warmup_epochs = 0;
    tc.freq_att = freq_att;
    LossConfig lc;
    lc.lambda_contrastive = lambda;
    AdamState adam;
    pretrain_step(ps, mc, tc, lc, vols, 0, 5e-5, adam);
    return hash_params(ps);
  };
  if (one_step(0.0, true) != one_step(0.1, false)) {
    why = "lambda=0 step differs from supervised-only step";
    return false;
  }

  // CLI sweep must run the exact published grid
  const std::string work = fresh_dir("c5");
  {
    std::ofstream f(work + "/cfg.txt");
    f << kTinyRunConfig;
  }
  PretrainArgs a;
  a.config = work + "/cfg.txt";
  a.out_dir = work + "/sw";
  a.sweep = "lambda";
  cmd_pretrain(a);
  const auto rows = read_csv(work + "/sw/sweep.csv");
  const std::vector<std::string> grid = {"0", "0.1", "0.2", "0.3", "0.5"};
  if (rows.size() != 6) {
    why = "sweep.csv does not have 5 result rows";
    return false;
  }
  for (std::size_t i = 0; i < 5; ++i) {
    if (rows[i + 1][0] != grid[i]) {
      std::snprintf(g_why, sizeof(g_why), "sweep row %zu is lambda=%s, expected %s", i + 1, rows[i + 1][0].c_str(),
                    grid[i].c_str());
      why = g_why;
      return false;
    }
    if (!std::filesystem::exists(work + "/sw/lambda_" + grid[i] + "/run.csv")) {
      why = "sweep member run directory missing";
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------- criterion 6

bool c6_finetune_integrity(std::string& why) {
  const ModelConfig mc = tiny_model();
  TrainConfig tc;
  tc.batch = 2;
  tc.seed = 5;
  tc.epochs = 2;
  tc.warmup_epochs = 0;
  tc.finetune_augment = false;
  Rng rng(66);
  std::vector<FinetuneSample> samples;
  for (int i = 0; i < 2; ++i) {
    FinetuneSample s;
    s.volume = RealTensor::random_uniform(Shape{6, 16, 16}, rng);
    s.labels = RealTensor::zeros(Shape{16, 16});
    samples.push_back(std::move(s));
  }
  ParamStore ps = build_model(mc, InitMode::trunc_normal, 6);
  ps.freeze("encoder.");
  const std::uint64_t enc0 = hash_params(ps, "encoder.");
  const std::uint64_t dec0 = hash_params(ps, "decoder.");
  const std::uint64_t tail0 = hash_params(ps, "tail.denoise.");
  AdamState adam;
  for (std::size_t s = 0; s < 100; ++s) finetune_step(ps, mc, tc, TaskKind::denoise, samples, s, 1e-3, adam);
  if (hash_params(ps, "encoder.") != enc0) {
    why = "encoder hash changed across 100 fine-tune steps";
    return false;
  }
  if (hash_params(ps, "decoder.") == dec0) {
    why = "decoder hash did not change";
    return false;
  }
  if (hash_params(ps, "tail.denoise.") == tail0) {
    why = "tail hash did not change";
    return false;
  }
  return true;
}

// ---------------------------------------------------------------- criterion 7

// Desk-scale settings: values chosen so the 300-step budgeted run learns on a
// single CPU. The 4-pixel patch matters: with 8-pixel patches each patch
// crosses the 64-dim token as 1 dim/pixel and the frozen-encoder denoiser
// plateaus ~3 dB below the identity baseline.
struct DeskScale {
  std::size_t patch = 4, embed = 64, enc = 2, dec = 1, heads = 4, conv = 16;
  std::size_t batch = 4;
  std::size_t pretrain_steps = 300;
  std::size_t finetune_steps = 600;
  double finetune_lr = 1e-3;
};

ModelConfig desk_model(const DeskScale& d) {
  ModelConfig mc;
  mc.patch = d.patch;
  mc.embed = d.embed;
  mc.enc_layers = d.enc;
  mc.dec_layers = d.dec;
  mc.heads = d.heads;
  mc.d_k = d.embed / d.heads;
  mc.conv_channels = d.conv;
  mc.img_h = 64;
  mc.img_w = 64;
  return mc;
}

bool c7_desk_scale(std::string& why) {
  const DeskScale d;
  const ModelConfig mc = desk_model(d);
  TrainConfig tc;
  tc.batch = d.batch;
  tc.seed = 7;
  tc.epochs = 2;
  tc.warmup_epochs = 0;
  tc.finetune_augment = false;
  tc.finetune_noise_sigma = 0.10;
  const LossConfig lc;

  std::vector<RealTensor> vols;
  std::vector<FinetuneSample> samples;
  for (std::size_t i = 0; i < 64; ++i) {
    Rng r = Rng::derive(700, i);
    Phantom ph = phantom_generate(r, 64, 64);
    vols.push_back(ph.volume);
    samples.push_back({std::move(ph.volume), std::move(ph.tissue_labels)});
  }

  ParamStore ps = build_model(mc, InitMode::trunc_normal, 1);
  AdamState adam;
  std::vector<double> L;
  for (std::size_t s = 0; s < d.pretrain_steps; ++s) L.push_back(pretrain_step(ps, mc, tc, lc, vols, s, 5e-5, adam).sup);
  auto smooth5 = [&](std::size_t last) {  // mean of the five losses ending at `last`
    double m = 0.0;
    for (std::size_t k = last - 4; k <= last; ++k) m += L[k];
    return m / 5.0;
  };
  const double early = smooth5(4);  // smoothed value at step 5
  const double late = smooth5(d.pretrain_steps - 1);
  if (!(late <= 0.5 * early)) {
    std::snprintf(g_why, sizeof(g_why), "masked-recon loss fell %.1f%% (needs >= 50%%): %.5f -> %.5f",
                  100.0 * (1.0 - late / early), early, late);
    why = g_why;
    return false;
  }

  // asymmetric denoise fine-tuning, then the held-out PSNR margin
  ps.freeze("encoder.");
  AdamState fadam;
  for (std::size_t s = 0; s < d.finetune_steps; ++s)
    finetune_step(ps, mc, tc, TaskKind::denoise, samples, s, d.finetune_lr, fadam);

  double psnr_model = 0.0, psnr_input = 0.0;
  for (std::size_t i = 0; i < 16; ++i) {
    Rng r = Rng::derive(700, 64 + i);  // held-out: fresh generation seeds
    const Phantom ph = phantom_generate(r, 64, 64);
    Rng nr = Rng::derive(9000 + i, 0x6e6f6973ull);
    const RealTensor noisy = add_gaussian_noise(ph.volume, 0.10, nr);
    const RealTensor target = detail::take_channels(ph.volume, 3);
    const RealTensor pred = model_forward(ps, mc, noisy, TaskKind::denoise);
    psnr_model += psnr(pred, target);
    psnr_input += psnr(detail::take_channels(noisy, 3), target);
  }
  psnr_model /= 16.0;
  psnr_input /= 16.0;
  if (!(psnr_model >= psnr_input + 1.0)) {
    std::snprintf(g_why, sizeof(g_why), "denoise PSNR %.3f dB vs identity %.3f dB (needs +1.0 dB)", psnr_model,
                  psnr_input);
    why = g_why;
    return false;
  }
  std::snprintf(g_why, sizeof(g_why), "loss %.4f -> %.4f, PSNR %.2f dB vs identity %.2f dB", early, late, psnr_model,
                psnr_input);
  why = g_why;  // report the numbers even on success
  return true;
}

// ---------------------------------------------------------------- criterion 8

double dice_oracle(const RealTensor& a, const RealTensor& b) {
  std::size_t na = 0, nb = 0, inter = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a.data[i] > 0.5, pb = b.data[i] > 0.5;
    na += pa;
    nb += pb;
    inter += pa && pb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

std::vector<std::pair<long, long>> boundary_oracle(const RealTensor& m) {
  const long h = static_cast<long>(m.shape[0]), w = static_cast<long>(m.shape[1]);
  auto at = [&](long i, long j) { return i >= 0 && i < h && j >= 0 && j < w && m.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) > 0.5; };
  std::vector<std::pair<long, long>> out;
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j)
      if (at(i, j) && (!at(i - 1, j) || !at(i + 1, j) || !at(i, j - 1) || !at(i, j + 1))) out.emplace_back(i, j);
  return out;
}

double hd95_oracle(const RealTensor& a, const RealTensor& b) {
  const auto ba = boundary_oracle(a), bb = boundary_oracle(b);
  std::vector<double> pool;
  auto directed = [&pool](const std::vector<std::pair<long, long>>& from, const std::vector<std::pair<long, long>>& to) {
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dx = static_cast<double>(p.first - q.first), dy = static_cast<double>(p.second - q.second);
        best = std::min(best, std::sqrt(dx * dx + dy * dy));
      }
      pool.push_back(best);
    }
  };
  directed(ba, bb);
  directed(bb, ba);
  std::stable_sort(pool.begin(), pool.end());
  const double rank = 0.95 * static_cast<double>(pool.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, pool.size() - 1);
  return pool[lo] + (rank - static_cast<double>(lo)) * (pool[hi] - pool[lo]);
}

bool c8_metric_oracles(std::string& why) {
  Rng rng(88);
  std::size_t done = 0;
  while (done < 100) {
    const std::size_t h = 3 + rng.below(30), w = 3 + rng.below(30);
    RealTensor a(Shape{h, w}), b(Shape{h, w});
    bool a_any = false, b_any = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      a.data[i] = rng.below(10) < 3 ? 1.0 : 0.0;
      b.data[i] = rng.below(10) < 3 ? 1.0 : 0.0;
      a_any = a_any || a.data[i] > 0.5;
      b_any = b_any || b.data[i] > 0.5;
    }
    if (!a_any || !b_any) continue;
    ++done;
    if (dice(a, b) != dice_oracle(a, b)) {
      std::snprintf(g_why, sizeof(g_why), "dice mismatch on pair %zu (%zux%zu)", done, h, w);
      why = g_why;
      return false;
    }
    if (hd95(a, b) != hd95_oracle(a, b)) {
      std::snprintf(g_why, sizeof(g_why), "hd95 mismatch on pair %zu (%zux%zu)", done, h, w);
      why = g_why;
      return false;
    }
  }

  RealTensor zeros = RealTensor::zeros(Shape{32, 32});
  RealTensor tenth = RealTensor::full(Shape{32, 32}, 0.1);
  if (std::abs(psnr(tenth, zeros) - 20.0) > 1e-9) {
    std::snprintf(g_why, sizeof(g_why), "uniform-0.1 PSNR is %.12f dB, not 20", psnr(tenth, zeros));
    why = g_why;
    return false;
  }
  Rng xr(89);
  const RealTensor x = RealTensor::random_uniform(Shape{64, 64}, xr);
  if (ssim(x, x) != 1.0) {
    why = "SSIM(x,x) is not exactly 1";
    return false;
  }
  return true;
}

// ---------------------------------------------------------------- criterion 9

// Ablation benchmark scale: same corpus and model family as criterion 7.
// The full-vs-baseline ordering only becomes meaningful once each leg nears
// its fine-tune plateau (short legs compare transient optimization speed, and
// an over-coarse patch caps every leg at the same token-capacity ceiling), so
// legs run 300 pretrain + 300 fine-tune steps at the 4-pixel patch.
bool c9_ablation(std::string& why) {
  const DeskScale d;
  std::ostringstream cfg;
  cfg << "model.patch=" << d.patch << "\nmodel.embed=" << d.embed << "\nmodel.enc_layers=" << d.enc
      << "\nmodel.dec_layers=" << d.dec << "\nmodel.heads=" << d.heads << "\nmodel.d_k=" << d.embed / d.heads
      << "\nmodel.conv_channels=" << d.conv << "\nmodel.img_h=64\nmodel.img_w=64\n"
      << "train.epochs=2\ntrain.warmup_epochs=0\ntrain.batch=4\ntrain.steps_per_epoch=150\n"
      << "train.lr0=1e-3\n"
      << "data.count=64\ndata.size=64\n"
      << "eval.max_samples=8\n";
  const std::string work = fresh_dir("c9");
  {
    std::ofstream f(work + "/cfg.txt");
    f << cfg.str();
  }
  PretrainArgs a;
  a.config = work + "/cfg.txt";
  a.out_dir = work + "/ab";
  a.ablate = true;
  cmd_pretrain(a);

  const auto rows = read_csv(work + "/ab/ablation.csv");
  if (rows.size() != 5) {
    why = "ablation.csv does not have 4 result rows";
    return false;
  }
  const std::vector<std::string> names = {"baseline", "only_fft", "only_mask", "full"};
  std::map<std::string, double> psnr_of;
  for (std::size_t i = 0; i < 4; ++i) {
    if (rows[i + 1][0] != names[i]) {
      std::snprintf(g_why, sizeof(g_why), "row %zu is '%s', expected '%s'", i + 1, rows[i + 1][0].c_str(),
                    names[i].c_str());
      why = g_why;
      return false;
    }
    psnr_of[rows[i + 1][0]] = std::stod(rows[i + 1][4]);
  }
  if (!(psnr_of["full"] >= psnr_of["baseline"])) {
    std::snprintf(g_why, sizeof(g_why), "full %.3f dB < baseline %.3f dB", psnr_of["full"], psnr_of["baseline"]);
    why = g_why;
    return false;
  }
  std::snprintf(g_why, sizeof(g_why), "full %.2f dB vs baseline %.2f dB", psnr_of["full"], psnr_of["baseline"]);
  why = g_why;
  return true;
}

// --------------------------------------------------------------- criterion 10

bool c10_reproducibility(std::string& why) {
  const std::string work = fresh_dir("c10");
  {
    std::ofstream f(work + "/cfg.txt");
    f << kTinyRunConfig;
  }
  for (const char* run : {"a", "b"}) {
    PretrainArgs a;
    a.config = work + "/cfg.txt";
    a.out_dir = work + "/run_" + std::string(run);
    cmd_pretrain(a);
  }
  if (slurp(work + "/run_a/run.csv").empty() || slurp(work + "/run_a/run.csv") != slurp(work + "/run_b/run.csv")) {
    why = "run.csv differs between identical invocations";
    return false;
  }
  if (slurp(work + "/run_a/ckpt_final.sspf").empty() ||
      slurp(work + "/run_a/ckpt_final.sspf") != slurp(work + "/run_b/ckpt_final.sspf")) {
    why = "final checkpoint differs between identical invocations";
    return false;
  }
  return true;
}

}  // namespace

int main() {
  criterion(1, "FFT round-trip, Parseval and direct DFT oracle", 5.0, c1_fft);
  criterion(2, "finite-difference gradients for every op and the reduced model", 120.0, c2_gradients);
  criterion(3, "hierarchical masking probabilities and global masked fraction", 10.0, c3_masking);
  criterion(4, "k-space noise power spectrum, identity and mean preservation", 30.0, c4_noise_spectrum);
  criterion(5, "lambda composition: supervised-only equivalence and sweep grid", 0.0, c5_lambda_composition);
  criterion(6, "asymmetric fine-tuning freezes the encoder bytes", 0.0, c6_finetune_integrity);
  criterion(7, "desk-scale learning signal: pretraining drop and denoise margin", 900.0, c7_desk_scale);
  criterion(8, "dice/hd95 equal brute-force oracles; PSNR and SSIM anchors", 0.0, c8_metric_oracles);
  criterion(9, "ablation grid emits four named rows; full beats baseline", 0.0, c9_ablation);
  criterion(10, "bit-identical pretraining replay", 0.0, c10_reproducibility);
  if (g_failed) std::printf("%d criterion(s) failed\n", g_failed);
  return g_failed ? 1 : 0;
}
