#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vmrfa/data.hpp"
#include "vmrfa/losses.hpp"
#include "vmrfa/network.hpp"

namespace vmrfa {

// Learning-rate schedule: the base rate is multiplied by `factor` at every
// milestone epoch.
struct Schedule {
  std::vector<int> milestones{150, 180, 210, 240, 270, 300, 330, 360};
  float factor = 0.5f;
  int total_epochs = 450;

  void validate() const {
    for (std::size_t i = 1; i < milestones.size(); ++i) {
      if (milestones[i] <= milestones[i - 1]) {
        fail<ConfigError>("schedule: milestones must be strictly increasing");
      }
    }
    if (factor <= 0.0f || factor >= 1.0f) {
      fail<ConfigError>("schedule: factor must lie in (0, 1), got ", factor);
    }
    if (total_epochs < 1) fail<ConfigError>("schedule: total_epochs must be positive");
  }
};

inline float lr_at(int epoch, const Schedule& schedule, float base_lr) {
  if (epoch < 0 || epoch >= schedule.total_epochs) {
    fail<ContractError>("lr_at: epoch ", epoch, " outside [0, ",
                        schedule.total_epochs, ")");
  }
  float lr = base_lr;
  for (int m : schedule.milestones) {
    if (m <= epoch) lr *= schedule.factor;
  }
  return lr;
}

struct OptimizerConfig {
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float lr_backbone = 0.01f;
  float lr_head = 0.1f;
  bool bn_weight_decay = true;  // apply weight decay to gamma/beta as well
};

// Full training configuration. Defaults are the full-scale values; the toy
// scale preset only changes the network architecture, so desk runs normally
// also override data.p/data.k and sched.total_epochs.
struct TrainConfig {
  std::uint64_t seed = 0;

  ScalePreset scale = ScalePreset::toy;
  bool attention = true;
  CameraLossSite camera_loss_site = CameraLossSite::attention;
  int strips = 6;

  LossWeights weights;
  float margin = 0.3f;
  float epsilon = 0.1f;

  std::string manifest;
  int p = 24;
  int k = 4;
  std::optional<int> num_cameras;

  HdaConfig hda;
  OptimizerConfig opt;

  std::vector<int> milestones;  // empty: scaled from the 450-epoch schedule
  float sched_factor = 0.5f;
  int total_epochs = 450;

  int checkpoint_interval = 10;  // epochs; 0 writes only the final checkpoint
  std::string out_dir = "run";

  // Milestones scale with the epoch budget unless given explicitly. Very
  // short budgets can collapse several scaled milestones onto one epoch;
  // duplicates and out-of-range entries are dropped.
  Schedule schedule() const {
    Schedule s;
    s.factor = sched_factor;
    s.total_epochs = total_epochs;
    if (!milestones.empty()) {
      s.milestones = milestones;
    } else if (total_epochs != 450) {
      std::vector<int> scaled;
      for (int m : s.milestones) {
        const int epoch =
            static_cast<int>(std::lround(static_cast<double>(m) * total_epochs / 450.0));
        if (epoch >= 1 && epoch < total_epochs &&
            (scaled.empty() || epoch > scaled.back())) {
          scaled.push_back(epoch);
        }
      }
      s.milestones = std::move(scaled);
    }
    s.validate();
    return s;
  }

  NetworkConfig network_config(int num_identities, int cameras) const {
    NetworkConfig cfg = scale == ScalePreset::paper
                            ? NetworkConfig::paper_preset(num_identities, cameras)
                            : NetworkConfig::toy_preset(num_identities, cameras);
    cfg.strips = strips;
    cfg.attention_enabled = attention;
    cfg.camera_loss_site = camera_loss_site;
    cfg.validate();
    return cfg;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) {
    fail<ConfigError>("config: key '", key, "' has invalid value '", value, "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  fail<ConfigError>("config: key '", key, "' expects a boolean, got '", value, "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::istringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    out.push_back(parse_number<int>(key, trim(item)));
  }
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "seed",
      "net.scale",
      "net.attention",
      "net.camera_loss_site",
      "net.strips",
      "loss.lambda1",
      "loss.lambda2",
      "loss.lambda3",
      "loss.margin",
      "loss.epsilon",
      "data.manifest",
      "data.p",
      "data.k",
      "data.num_cameras",
      "hda.sigma",
      "hda.clip",
      "hda.apply_prob",
      "opt.momentum",
      "opt.weight_decay",
      "opt.lr_backbone",
      "opt.lr_head",
      "opt.bn_weight_decay",
      "sched.milestones",
      "sched.factor",
      "sched.total_epochs",
      "train.checkpoint_interval",
      "train.out_dir",
  };
  return keys;
}

inline void apply_config_value(TrainConfig& cfg, const std::string& key,
                               const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  if (key == "seed") {
    cfg.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "net.scale") {
    if (value == "paper") cfg.scale = ScalePreset::paper;
    else if (value == "toy") cfg.scale = ScalePreset::toy;
    else fail<ConfigError>("config: net.scale must be 'paper' or 'toy', got '", value, "'");
  } else if (key == "net.attention") {
    cfg.attention = parse_bool(key, value);
  } else if (key == "net.camera_loss_site") {
    if (value == "attention") cfg.camera_loss_site = CameraLossSite::attention;
    else if (value == "backbone_pre_mask") cfg.camera_loss_site = CameraLossSite::backbone_pre_mask;
    else if (value == "backbone_post_mask") cfg.camera_loss_site = CameraLossSite::backbone_post_mask;
    else if (value == "none") cfg.camera_loss_site = CameraLossSite::none;
    else fail<ConfigError>("config: unknown camera loss site '", value, "'");
  } else if (key == "net.strips") {
    cfg.strips = parse_number<int>(key, value);
  } else if (key == "loss.lambda1") {
    cfg.weights.lambda1 = parse_number<float>(key, value);
  } else if (key == "loss.lambda2") {
    cfg.weights.lambda2 = parse_number<float>(key, value);
  } else if (key == "loss.lambda3") {
    cfg.weights.lambda3 = parse_number<float>(key, value);
  } else if (key == "loss.margin") {
    cfg.margin = parse_number<float>(key, value);
  } else if (key == "loss.epsilon") {
    cfg.epsilon = parse_number<float>(key, value);
  } else if (key == "data.manifest") {
    cfg.manifest = value;
  } else if (key == "data.p") {
    cfg.p = parse_number<int>(key, value);
  } else if (key == "data.k") {
    cfg.k = parse_number<int>(key, value);
  } else if (key == "data.num_cameras") {
    cfg.num_cameras = parse_number<int>(key, value);
  } else if (key == "hda.sigma") {
    cfg.hda.sigma = parse_number<float>(key, value);
  } else if (key == "hda.clip") {
    cfg.hda.clip = parse_number<float>(key, value);
  } else if (key == "hda.apply_prob") {
    cfg.hda.apply_prob = parse_number<float>(key, value);
  } else if (key == "opt.momentum") {
    cfg.opt.momentum = parse_number<float>(key, value);
  } else if (key == "opt.weight_decay") {
    cfg.opt.weight_decay = parse_number<float>(key, value);
  } else if (key == "opt.lr_backbone") {
    cfg.opt.lr_backbone = parse_number<float>(key, value);
  } else if (key == "opt.lr_head") {
    cfg.opt.lr_head = parse_number<float>(key, value);
  } else if (key == "opt.bn_weight_decay") {
    cfg.opt.bn_weight_decay = parse_bool(key, value);
  } else if (key == "sched.milestones") {
    cfg.milestones = detail::parse_int_list(key, value);
  } else if (key == "sched.factor") {
    cfg.sched_factor = parse_number<float>(key, value);
  } else if (key == "sched.total_epochs") {
    cfg.total_epochs = parse_number<int>(key, value);
  } else if (key == "train.checkpoint_interval") {
    cfg.checkpoint_interval = parse_number<int>(key, value);
  } else if (key == "train.out_dir") {
    cfg.out_dir = value;
  } else {
    std::string keys;
    for (const std::string& k : config_keys()) keys += "\n  " + k;
    fail<ConfigError>("config: unknown key '", key, "'; valid keys are:", keys);
  }
}

// `key = value` lines; blank lines and '#' comments are ignored.
inline void parse_config_stream(TrainConfig& cfg, std::istream& in,
                                const std::string& source) {
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    const std::string stripped = detail::trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      fail<ConfigError>(source, ":", row, ": expected 'key = value', got '", stripped,
                        "'");
    }
    apply_config_value(cfg, detail::trim(stripped.substr(0, eq)),
                       detail::trim(stripped.substr(eq + 1)));
  }
}

inline TrainConfig load_config(const std::optional<std::string>& path,
                               const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  if (path) {
    std::ifstream in(*path);
    if (!in) fail<IoError>("cannot open config file ", *path);
    parse_config_stream(cfg, in, *path);
  }
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      fail<ConfigError>("--set expects key=value, got '", kv, "'");
    }
    apply_config_value(cfg, detail::trim(kv.substr(0, eq)),
                       detail::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace vmrfa
