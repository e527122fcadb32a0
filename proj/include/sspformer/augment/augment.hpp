#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/fft.hpp"
#include "sspformer/core/ops.hpp"
#include "sspformer/core/rng.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

// Non-negative edge energy sharing the spatial shape of its source image.
struct EdgeMap {
  RealTensor values;
};

// E = (|dI/dx| + |dI/dy|)/2, central differences inside, replicated borders.
inline EdgeMap edge_energy(const RealTensor& image) {
  if (image.rank() != 2) throw ShapeError("edge_energy expects [H,W], got " + image.shape.str());
  const std::size_t h = image.shape[0], w = image.shape[1];
  if (h < 2 || w < 2) throw ShapeError("edge_energy needs at least 2 pixels per axis, got " + image.shape.str());
  EdgeMap e{RealTensor(image.shape)};
  auto clamp = [](std::size_t i, long d, std::size_t n) {
    const long j = static_cast<long>(i) + d;
    return static_cast<std::size_t>(std::clamp<long>(j, 0, static_cast<long>(n) - 1));
  };
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double gx = (image.at(i, clamp(j, 1, w)) - image.at(i, clamp(j, -1, w))) / 2.0;
      const double gy = (image.at(clamp(i, 1, h), j) - image.at(clamp(i, -1, h), j)) / 2.0;
      e.values.at(i, j) = (std::abs(gx) + std::abs(gy)) / 2.0;
    }
  return e;
}

enum class Tier : std::uint8_t { low = 0, high = 1 };

// Per-patch masking plan over the (H/P)x(W/P) grid. High-edge patches carry
// probability 0.5*p_base exactly; the low tier is back-solved so the expected
// global masked fraction hits p_base (clamped to 1 if that is unreachable).
struct MaskPlan {
  std::size_t patch_size = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<double> scores;
  std::vector<Tier> tiers;
  std::vector<double> probs;
  std::vector<bool> decisions;
  std::uint64_t seed = 0;
  bool warning = false;  // expected fraction could not reach p_base

  std::size_t patches() const { return grid_h * grid_w; }

  double masked_fraction() const {
    if (decisions.empty()) return 0.0;
    std::size_t m = 0;
    for (bool d : decisions) m += d ? 1 : 0;
    return static_cast<double>(m) / static_cast<double>(decisions.size());
  }

  double expected_fraction() const {
    if (probs.empty()) return 0.0;
    double s = 0.0;
    for (double p : probs) s += p;
    return s / static_cast<double>(probs.size());
  }
};

inline MaskPlan plan_mask(const EdgeMap& edges, std::size_t p, double p_base, double tau, std::uint64_t seed) {
  const std::size_t h = edges.values.shape[0], w = edges.values.shape[1];
  if (p == 0 || h % p != 0 || w % p != 0)
    throw ShapeError("patch size " + std::to_string(p) + " does not divide " + edges.values.shape.str());
  if (!(p_base > 0.0 && p_base <= 1.0)) throw ContractError("p_base must lie in (0,1]");
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("tau must lie in (0,1)");

  MaskPlan plan;
  plan.patch_size = p;
  plan.grid_h = h / p;
  plan.grid_w = w / p;
  plan.seed = seed;
  const std::size_t n = plan.patches();
  plan.scores.resize(n);
  for (std::size_t pi = 0; pi < plan.grid_h; ++pi)
    for (std::size_t pj = 0; pj < plan.grid_w; ++pj) {
      double s = 0.0;
      for (std::size_t u = 0; u < p; ++u)
        for (std::size_t v = 0; v < p; ++v) s += edges.values.at(pi * p + u, pj * p + v);
      plan.scores[pi * plan.grid_w + pj] = s / static_cast<double>(p * p);
    }

  const double thresh = quantile(plan.scores, tau);
  plan.tiers.resize(n);
  std::size_t n_high = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool high = plan.scores[i] >= thresh;  // ties go to high-edge
    plan.tiers[i] = high ? Tier::high : Tier::low;
    n_high += high ? 1 : 0;
  }

  const double p_high = 0.5 * p_base;
  const double f_high = static_cast<double>(n_high) / static_cast<double>(n);
  const double f_low = 1.0 - f_high;
  double p_low = 0.0;
  if (f_low > 0.0) {
    p_low = p_base * (1.0 - 0.5 * f_high) / f_low;
    if (p_low > 1.0) p_low = 1.0;
  }
  plan.probs.resize(n);
  for (std::size_t i = 0; i < n; ++i) plan.probs[i] = plan.tiers[i] == Tier::high ? p_high : p_low;
  plan.warning = std::abs(plan.expected_fraction() - p_base) > 1e-12;

  Rng rng(seed);
  plan.decisions.resize(n);
  for (std::size_t i = 0; i < n; ++i) plan.decisions[i] = rng.uniform() < plan.probs[i];
  return plan;
}

// Flat plan for the masking ablation: one tier, every patch at p_base.
inline MaskPlan plan_mask_uniform(std::size_t h, std::size_t w, std::size_t p, double p_base, std::uint64_t seed) {
  if (p == 0 || h % p != 0 || w % p != 0)
    throw ShapeError("patch size " + std::to_string(p) + " does not divide " + std::to_string(h) + "x" +
                     std::to_string(w));
  if (!(p_base > 0.0 && p_base <= 1.0)) throw ContractError("p_base must lie in (0,1]");
  MaskPlan plan;
  plan.patch_size = p;
  plan.grid_h = h / p;
  plan.grid_w = w / p;
  plan.seed = seed;
  const std::size_t n = plan.patches();
  plan.scores.assign(n, 0.0);
  plan.tiers.assign(n, Tier::low);
  plan.probs.assign(n, p_base);
  Rng rng(seed);
  plan.decisions.resize(n);
  for (std::size_t i = 0; i < n; ++i) plan.decisions[i] = rng.uniform() < p_base;
  return plan;
}

// Replace the token rows the plan masks with mask_token; other rows untouched.
inline RealTensor apply_mask(const RealTensor& tokens, const MaskPlan& plan, const RealTensor& mask_token) {
  if (tokens.rank() != 2 || tokens.shape[0] != plan.patches())
    throw ShapeError("apply_mask: tokens " + tokens.shape.str() + " vs plan grid " + std::to_string(plan.patches()));
  if (mask_token.rank() != 1 || mask_token.shape[0] != tokens.shape[1])
    throw ShapeError("apply_mask: mask token " + mask_token.shape.str() + " vs tokens " + tokens.shape.str());
  RealTensor out = tokens;
  const std::size_t d = tokens.shape[1];
  for (std::size_t i = 0; i < plan.decisions.size(); ++i)
    if (plan.decisions[i])
      for (std::size_t j = 0; j < d; ++j) out.at(i, j) = mask_token.data[j];
  return out;
}

enum class WeightKind : std::uint8_t { linear = 0, quadratic = 1 };

// Frequency-weighted Gaussian noise in k-space.
struct NoiseSpec {
  double lambda = 0.5;
  double sigma = 0.1;
  WeightKind weight_kind = WeightKind::linear;
  std::uint64_t seed = 0;

  void validate() const {
    if (lambda < 0.0) throw ContractError("noise lambda must be >= 0");
    if (sigma < 0.0) throw ContractError("noise sigma must be >= 0");
  }
};

// Radial ramp over FFT bins: (r/r_max)^k with centered (folded) frequencies,
// DC pinned to 0, the extreme corner to 1.
inline RealTensor radial_weight(std::size_t h, std::size_t w, WeightKind kind) {
  if (h == 0 || w == 0) throw ShapeError("radial_weight needs positive extents");
  RealTensor out(Shape{h, w});
  auto fold = [](std::size_t i, std::size_t n) {
    const double half = static_cast<double>(n) / 2.0;
    const double d = static_cast<double>(i);
    return d <= half ? d : d - static_cast<double>(n);
  };
  const double fmax_h = std::floor(static_cast<double>(h) / 2.0);
  const double fmax_w = std::floor(static_cast<double>(w) / 2.0);
  const double r_max = std::sqrt(fmax_h * fmax_h + fmax_w * fmax_w);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      if (r_max == 0.0) {
        out.at(u, v) = 0.0;
        continue;
      }
      const double fu = fold(u, h), fv = fold(v, w);
      double r = std::sqrt(fu * fu + fv * fv) / r_max;
      if (kind == WeightKind::quadratic) r *= r;
      out.at(u, v) = r;
    }
  out.data[0] = 0.0;  // DC exactly untouched
  return out;
}

// F' = F + lambda*|F|*W*eta with eta Hermitian-symmetric complex Gaussian, so
// the returned image is real and E|eta|^2 = 2*sigma^2 uniformly across bins
// (the symmetrized sum keeps that moment even at self-conjugate bins).
inline RealTensor kspace_noise(const RealTensor& patch, const NoiseSpec& spec) {
  if (patch.rank() != 2) throw ShapeError("kspace_noise expects [h,w], got " + patch.shape.str());
  const std::size_t h = patch.shape[0], w = patch.shape[1];
  if (!is_power_of_two(h) || !is_power_of_two(w))
    throw SizingError("kspace_noise extents must be powers of two, got " + patch.shape.str());
  spec.validate();
  if (spec.lambda == 0.0) return patch;

  ComplexTensor f = fft2(to_complex(patch));
  Rng rng(spec.seed);
  ComplexTensor eta0(patch.shape);
  for (auto& z : eta0.data) {
    const double re = rng.normal(0.0, spec.sigma);
    const double im = rng.normal(0.0, spec.sigma);
    z = Cplx(re, im);
  }
  const RealTensor wgt = radial_weight(h, w, spec.weight_kind);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      const Cplx mirrored = eta0.at((h - u) % h, (w - v) % w);
      const Cplx eta = (eta0.at(u, v) + std::conj(mirrored)) * inv_sqrt2;
      f.at(u, v) += spec.lambda * std::abs(f.at(u, v)) * wgt.at(u, v) * eta;
    }
  return real_part(ifft2(f));
}

// patch_index,tier,prob,masked rows; %.17g on prob keeps replays byte-stable.
inline void write_plan_csv(std::ostream& os, const MaskPlan& plan) {
  os << "patch_index,tier,prob,masked\n";
  char buf[64];
  for (std::size_t i = 0; i < plan.patches(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", plan.probs[i]);
    os << i << ',' << (plan.tiers[i] == Tier::high ? "high" : "low") << ',' << buf << ','
       << (plan.decisions[i] ? 1 : 0) << '\n';
  }
}

}  // namespace sspf
