#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sspformer/augment/augment.hpp"
#include "sspformer/core/errors.hpp"
#include "sspformer/model/model.hpp"
#include "sspformer/train/train.hpp"

namespace sspf {

// Flat key=value run configuration. Every tunable in the pipeline has a key
// with a default; unknown keys are rejected and the fully resolved map is
// echoed into the run directory so any run can be replayed from its echo.
class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        // model
        {"model.patch", "16"},
        {"model.embed", "384"},
        {"model.enc_layers", "12"},
        {"model.dec_layers", "4"},
        {"model.heads", "8"},
        {"model.d_k", "48"},
        {"model.conv_channels", "32"},
        {"model.in_channels", "6"},
        {"model.seg_classes", "4"},
        {"model.img_h", "224"},
        {"model.img_w", "224"},
        {"model.icn_epsilon", "1e-5"},
        {"model.foreground_fraction", "0.05"},
        // initialization
        {"init.mode", "trunc_normal"},
        {"init.seed", "1"},
        // training
        {"train.lr0", "5e-5"},
        {"train.warmup_epochs", "10"},
        {"train.epochs", "100"},
        {"train.batch", "8"},
        {"train.seed", "0"},
        {"train.steps_per_epoch", "0"},
        {"train.checkpoint_every", "0"},
        {"train.inv_freq_mask", "1"},
        {"train.fft_noise", "1"},
        {"train.freq_att", "1"},
        {"train.p_base", "0.25"},
        {"train.tau", "0.5"},
        {"train.noise_lambda", "0.5"},
        {"train.noise_sigma", "0.1"},
        {"train.weight_kind", "linear"},
        {"train.finetune_noise_sigma", "0.1"},
        {"train.finetune_sr", "2"},
        {"train.finetune_augment", "1"},
        // loss
        {"loss.lambda_contrastive", "0.1"},
        {"loss.recon_norm", "masked_only"},
        {"loss.consistency_pairs", "0:1"},
        // data
        {"data.count", "64"},
        {"data.size", "64"},
        {"data.seed", "77"},
        {"data.split", "0.75,0.125,0.125"},
        // evaluation
        {"eval.sigma_grid", "0.05,0.1,0.15,0.2,0.25"},
        {"eval.max_samples", "0"},
    };
    return d;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
  }

  void parse(std::istream& is) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto start = line.find_first_not_of(" \t");
      if (start == std::string::npos) continue;
      if (line[start] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + " has no '=': " + line);
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw PathError("cannot open config " + path);
    parse(f);
  }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    try {
      std::size_t pos = 0;
      const double v = std::stod(raw(key), &pos);
      if (pos != raw(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not a number: '" + raw(key) + "'");
    }
  }

  std::uint64_t get_u64(const std::string& key) const {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(raw(key), &pos);
      if (pos != raw(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not an integer: '" + raw(key) + "'");
    }
  }

  std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

  bool get_bool(const std::string& key) const {
    const std::string& v = raw(key);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config key " + key + " is not a boolean: '" + v + "'");
  }

  std::vector<double> get_doubles(const std::string& key) const {
    std::vector<double> out;
    std::istringstream ss(raw(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        out.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw ConfigError("config key " + key + " has a bad number: '" + item + "'");
      }
    }
    if (out.empty()) throw ConfigError("config key " + key + " is empty");
    return out;
  }

  std::vector<std::pair<std::size_t, std::size_t>> get_pairs(const std::string& key) const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::istringstream ss(raw(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("config key " + key + " expects a:b pairs, got '" + item + "'");
      try {
        out.emplace_back(std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1)));
      } catch (const std::exception&) {
        throw ConfigError("config key " + key + " has a bad pair: '" + item + "'");
      }
    }
    return out;
  }

  void echo(std::ostream& os) const {
    for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
  }

  void echo_file(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw PathError("cannot open " + path + " for writing");
    echo(f);
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.patch = get_size("model.patch");
    m.embed = get_size("model.embed");
    m.enc_layers = get_size("model.enc_layers");
    m.dec_layers = get_size("model.dec_layers");
    m.heads = get_size("model.heads");
    m.d_k = get_size("model.d_k");
    m.conv_channels = get_size("model.conv_channels");
    m.in_channels = get_size("model.in_channels");
    m.seg_classes = get_size("model.seg_classes");
    m.img_h = get_size("model.img_h");
    m.img_w = get_size("model.img_w");
    m.icn_epsilon = get_double("model.icn_epsilon");
    m.foreground_fraction = get_double("model.foreground_fraction");
    m.validate();
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lr0 = get_double("train.lr0");
    t.warmup_epochs = get_size("train.warmup_epochs");
    t.epochs = get_size("train.epochs");
    t.batch = get_size("train.batch");
    t.seed = get_u64("train.seed");
    t.steps_per_epoch = get_size("train.steps_per_epoch");
    t.checkpoint_every = get_size("train.checkpoint_every");
    t.inv_freq_mask = get_bool("train.inv_freq_mask");
    t.fft_noise = get_bool("train.fft_noise");
    t.freq_att = get_bool("train.freq_att");
    t.p_base = get_double("train.p_base");
    t.tau = get_double("train.tau");
    t.noise_lambda = get_double("train.noise_lambda");
    t.noise_sigma = get_double("train.noise_sigma");
    const std::string& wk = raw("train.weight_kind");
    if (wk == "linear")
      t.weight_kind = WeightKind::linear;
    else if (wk == "quadratic")
      t.weight_kind = WeightKind::quadratic;
    else
      throw ConfigError("train.weight_kind must be linear or quadratic, got '" + wk + "'");
    t.finetune_noise_sigma = get_double("train.finetune_noise_sigma");
    t.finetune_sr = get_size("train.finetune_sr");
    t.finetune_augment = get_bool("train.finetune_augment");
    t.validate();
    return t;
  }

  LossConfig loss_config() const {
    LossConfig l;
    l.lambda_contrastive = get_double("loss.lambda_contrastive");
    const std::string& rn = raw("loss.recon_norm");
    if (rn == "masked_only")
      l.recon_norm = ReconNorm::masked_only;
    else if (rn == "all_pixels")
      l.recon_norm = ReconNorm::all_pixels;
    else
      throw ConfigError("loss.recon_norm must be masked_only or all_pixels, got '" + rn + "'");
    l.consistency_pairs = get_pairs("loss.consistency_pairs");
    return l;
  }

  InitMode init_mode() const {
    const std::string& m = raw("init.mode");
    if (m == "zeros") return InitMode::zeros;
    if (m == "trunc_normal") return InitMode::trunc_normal;
    throw ConfigError("init.mode must be zeros or trunc_normal, got '" + m + "'");
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t");
    const auto b = s.find_last_not_of(" \t");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace sspf
