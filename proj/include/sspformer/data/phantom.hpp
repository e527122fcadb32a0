#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/rng.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

// Synthetic six-channel slice with aligned tissue labels and lesion mask.
// Labels: 0 background, 1 skull, 2 brain, 3 ventricle.
struct Phantom {
  RealTensor volume;         // [6,H,W], intensities in [0,1]
  RealTensor tissue_labels;  // [H,W], integer-valued 0..3
  RealTensor lesion_mask;    // [H,W], 0/1
};

inline constexpr std::size_t kPhantomChannels = 6;
inline constexpr std::size_t kPhantomClasses = 4;

namespace detail {
// Per-channel base intensity for (background, skull, brain, ventricle) plus a
// lesion contrast delta; rows are pairwise distinct by construction.
inline constexpr double kIntensity[kPhantomChannels][kPhantomClasses] = {
    {0.02, 0.85, 0.55, 0.20}, {0.02, 0.30, 0.45, 0.90}, {0.02, 0.35, 0.50, 0.15},
    {0.03, 0.20, 0.60, 0.35}, {0.02, 0.40, 0.65, 0.55}, {0.02, 0.25, 0.70, 0.75},
};
inline constexpr double kLesionDelta[kPhantomChannels] = {-0.20, 0.30, 0.35, 0.30, -0.30, -0.25};

struct Ellipse {
  double ci, cj, ri, rj;
  bool contains(double i, double j) const {
    const double di = (i - ci) / ri, dj = (j - cj) / rj;
    return di * di + dj * dj <= 1.0;
  }
};
}  // namespace detail

inline Phantom phantom_generate(Rng& rng, std::size_t h, std::size_t w) {
  if (h < 32 || w < 32)
    throw SizingError("phantom extent " + std::to_string(h) + "x" + std::to_string(w) + " below 32x32 minimum");
  const double hh = static_cast<double>(h), ww = static_cast<double>(w);

  const double ci = hh / 2.0 + rng.uniform(-0.05, 0.05) * hh;
  const double cj = ww / 2.0 + rng.uniform(-0.05, 0.05) * ww;
  detail::Ellipse skull{ci, cj, (0.42 + rng.uniform(-0.02, 0.02)) * hh, (0.40 + rng.uniform(-0.02, 0.02)) * ww};
  const double shrink = 0.82 + rng.uniform(-0.03, 0.03);
  detail::Ellipse brain{ci, cj, skull.ri * shrink, skull.rj * shrink};
  const double voff = (0.08 + rng.uniform(-0.02, 0.02)) * ww;
  const double vri = (0.10 + rng.uniform(-0.02, 0.02)) * hh;
  const double vrj = (0.06 + rng.uniform(-0.02, 0.02)) * ww;
  detail::Ellipse vent_l{ci, cj - voff, vri, vrj};
  detail::Ellipse vent_r{ci, cj + voff, vri, vrj};

  const bool has_lesion = rng.uniform() < 0.7;
  const double th = rng.uniform(0.0, 2.0 * M_PI);
  const double fr = rng.uniform(0.25, 0.6);
  detail::Ellipse lesion{ci + fr * brain.ri * std::cos(th), cj + fr * brain.rj * std::sin(th),
                         (0.05 + rng.uniform(0.0, 0.03)) * hh, (0.05 + rng.uniform(0.0, 0.03)) * ww};

  Phantom ph;
  ph.tissue_labels = RealTensor(Shape{h, w});
  ph.lesion_mask = RealTensor(Shape{h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double di = static_cast<double>(i), dj = static_cast<double>(j);
      int label = 0;
      if (skull.contains(di, dj)) label = 1;
      if (brain.contains(di, dj)) label = 2;
      if (label == 2 && (vent_l.contains(di, dj) || vent_r.contains(di, dj))) label = 3;
      ph.tissue_labels.at(i, j) = static_cast<double>(label);
      ph.lesion_mask.at(i, j) = (has_lesion && label == 2 && lesion.contains(di, dj)) ? 1.0 : 0.0;
    }

  // smooth multiplicative bias bump, shared geometry, per-channel amplitude
  const double bci = ci + rng.uniform(-0.2, 0.2) * hh;
  const double bcj = cj + rng.uniform(-0.2, 0.2) * ww;
  const double bsi = (0.5 + rng.uniform(-0.1, 0.1)) * hh;
  const double bsj = (0.5 + rng.uniform(-0.1, 0.1)) * ww;
  RealTensor bump(Shape{h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double di = (static_cast<double>(i) - bci) / bsi;
      const double dj = (static_cast<double>(j) - bcj) / bsj;
      bump.at(i, j) = std::exp(-0.5 * (di * di + dj * dj));
    }

  ph.volume = RealTensor(Shape{kPhantomChannels, h, w});
  for (std::size_t c = 0; c < kPhantomChannels; ++c) {
    double base[kPhantomClasses];
    for (std::size_t k = 0; k < kPhantomClasses; ++k)
      base[k] = detail::kIntensity[c][k] * (1.0 + rng.uniform(-0.1, 0.1));
    const double delta = detail::kLesionDelta[c] * (1.0 + rng.uniform(-0.1, 0.1));
    const double amp = rng.uniform(0.05, 0.15) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const int label = static_cast<int>(ph.tissue_labels.at(i, j));
        double v = base[label];
        if (ph.lesion_mask.at(i, j) > 0.5) v += delta;
        v *= 1.0 + amp * (bump.at(i, j) - 0.5);
        ph.volume.at(c, i, j) = std::clamp(v, 0.0, 1.0);
      }
  }
  return ph;
}

// r x r box-average downsampling; accepts [H,W] or [C,H,W].
inline RealTensor degrade_sr(const RealTensor& image, std::size_t r) {
  if (r == 0) throw ShapeError("degrade_sr factor must be >= 1");
  if (image.rank() == 3) {
    const std::size_t c = image.shape[0];
    if (image.shape[1] % r != 0 || image.shape[2] % r != 0)
      throw ShapeError("degrade_sr: factor " + std::to_string(r) + " does not divide " + image.shape.str());
    RealTensor out(Shape{c, image.shape[1] / r, image.shape[2] / r});
    for (std::size_t cc = 0; cc < c; ++cc)
      for (std::size_t i = 0; i < out.shape[1]; ++i)
        for (std::size_t j = 0; j < out.shape[2]; ++j) {
          double s = 0.0;
          for (std::size_t u = 0; u < r; ++u)
            for (std::size_t v = 0; v < r; ++v) s += image.at(cc, i * r + u, j * r + v);
          out.at(cc, i, j) = s / static_cast<double>(r * r);
        }
    return out;
  }
  if (image.rank() != 2) throw ShapeError("degrade_sr expects [H,W] or [C,H,W], got " + image.shape.str());
  if (image.shape[0] % r != 0 || image.shape[1] % r != 0)
    throw ShapeError("degrade_sr: factor " + std::to_string(r) + " does not divide " + image.shape.str());
  RealTensor out(Shape{image.shape[0] / r, image.shape[1] / r});
  for (std::size_t i = 0; i < out.shape[0]; ++i)
    for (std::size_t j = 0; j < out.shape[1]; ++j) {
      double s = 0.0;
      for (std::size_t u = 0; u < r; ++u)
        for (std::size_t v = 0; v < r; ++v) s += image.at(i * r + u, j * r + v);
      out.at(i, j) = s / static_cast<double>(r * r);
    }
  return out;
}

// Nearest-neighbour upsample, the inverse-resolution partner of degrade_sr.
inline RealTensor upsample_nn(const RealTensor& image, std::size_t r) {
  if (r == 0) throw ShapeError("upsample_nn factor must be >= 1");
  if (image.rank() == 3) {
    RealTensor out(Shape{image.shape[0], image.shape[1] * r, image.shape[2] * r});
    for (std::size_t c = 0; c < image.shape[0]; ++c)
      for (std::size_t i = 0; i < out.shape[1]; ++i)
        for (std::size_t j = 0; j < out.shape[2]; ++j) out.at(c, i, j) = image.at(c, i / r, j / r);
    return out;
  }
  if (image.rank() != 2) throw ShapeError("upsample_nn expects [H,W] or [C,H,W], got " + image.shape.str());
  RealTensor out(Shape{image.shape[0] * r, image.shape[1] * r});
  for (std::size_t i = 0; i < out.shape[0]; ++i)
    for (std::size_t j = 0; j < out.shape[1]; ++j) out.at(i, j) = image.at(i / r, j / r);
  return out;
}

// Additive i.i.d. N(0, sigma^2), unclipped. sigma=0 returns the input without
// consuming any draws.
inline RealTensor add_gaussian_noise(const RealTensor& image, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ContractError("noise sigma must be >= 0");
  if (sigma == 0.0) return image;
  RealTensor out = image;
  for (auto& x : out.data) x += rng.normal(0.0, sigma);
  return out;
}

template <typename T>
struct Splits {
  std::vector<T> train, val, test;
};

// Deterministic shuffle, then floor-sized train/val cuts with the remainder in
// test; disjoint and exhaustive by construction.
template <typename T>
Splits<T> split_dataset(std::vector<T> items, const std::array<double, 3>& fractions, std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  Rng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
  const std::size_t n = items.size();
  const auto n_train = static_cast<std::size_t>(std::floor(fractions[0] * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::floor(fractions[1] * static_cast<double>(n)));
  Splits<T> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train)
      out.train.push_back(std::move(items[i]));
    else if (i < n_train + n_val)
      out.val.push_back(std::move(items[i]));
    else
      out.test.push_back(std::move(items[i]));
  }
  return out;
}

// Line-oriented dataset manifest: path<TAB>role<TAB>channel-count.
struct ManifestEntry {
  std::string path;
  std::string role;
  std::size_t channels = 0;
};

inline void write_manifest(std::ostream& os, const std::vector<ManifestEntry>& entries) {
  for (const auto& e : entries) os << e.path << '\t' << e.role << '\t' << e.channels << '\n';
}

inline std::vector<ManifestEntry> read_manifest(std::istream& is) {
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!std::getline(ls, e.path, '\t') || !std::getline(ls, e.role, '\t') || !(ls >> e.channels))
      throw IoError("malformed manifest line: " + line);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace sspf
