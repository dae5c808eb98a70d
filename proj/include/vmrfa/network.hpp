#pragma once

#include <array>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vmrfa/losses.hpp"
#include "vmrfa/mrfa.hpp"
#include "vmrfa/modules.hpp"
#include "vmrfa/serialize.hpp"

namespace vmrfa {

enum class CameraLossSite { attention, backbone_pre_mask, backbone_post_mask, none };
enum class ScalePreset { paper, toy };

inline const char* to_string(CameraLossSite site) {
  switch (site) {
    case CameraLossSite::attention: return "attention";
    case CameraLossSite::backbone_pre_mask: return "backbone_pre_mask";
    case CameraLossSite::backbone_post_mask: return "backbone_post_mask";
    case CameraLossSite::none: return "none";
  }
  return "?";
}

// Structural hyperparameters of the whole model. The paper preset is the
// full-scale network; the toy preset divides widths by 8 and keeps one
// residual block per stage so the stack trains in minutes on a CPU.
struct NetworkConfig {
  ScalePreset scale_preset = ScalePreset::toy;
  int input_height = 96;
  int input_width = 32;
  int stem_channels = 8;
  std::array<int, 4> stage_channels{32, 64, 128, 256};
  std::array<int, 4> blocks_per_stage{1, 1, 1, 1};
  int strips = 6;
  int global_dim = 64;
  int local_dim = 32;
  int camera_dim = 64;
  int aux_dim = 64;
  int num_identities = 1;
  int num_cameras = 1;
  CameraLossSite camera_loss_site = CameraLossSite::attention;
  bool attention_enabled = true;

  int descriptor_dim() const { return global_dim + strips * local_dim; }
  // Stem and the first three stages each halve the spatial extent; stage 4
  // keeps it (its down-sampling is removed).
  int final_height() const { return input_height / 16; }
  int final_width() const { return input_width / 16; }

  static NetworkConfig paper_preset(int num_identities, int num_cameras) {
    NetworkConfig cfg;
    cfg.scale_preset = ScalePreset::paper;
    cfg.input_height = 384;
    cfg.input_width = 128;
    cfg.stem_channels = 64;
    cfg.stage_channels = {256, 512, 1024, 2048};
    cfg.blocks_per_stage = {3, 4, 6, 3};
    cfg.global_dim = 512;
    cfg.local_dim = 256;
    cfg.camera_dim = 512;
    cfg.aux_dim = 512;
    cfg.num_identities = num_identities;
    cfg.num_cameras = num_cameras;
    return cfg;
  }

  static NetworkConfig toy_preset(int num_identities, int num_cameras) {
    NetworkConfig cfg;
    cfg.num_identities = num_identities;
    cfg.num_cameras = num_cameras;
    return cfg;
  }

  void validate() const {
    if (input_height % 16 != 0 || input_width % 16 != 0 || final_width() < 1) {
      fail<ConfigError>("network: input resolution ", input_height, "x", input_width,
                        " must be a positive multiple of 16");
    }
    if (strips < 1 || final_height() % strips != 0) {
      fail<ConfigError>("network: final feature height ", final_height(),
                        " is not divisible by ", strips, " strips");
    }
    for (int c : stage_channels) {
      if (c < 4 || c % 4 != 0) {
        fail<ConfigError>("network: stage channels must be positive multiples of 4");
      }
    }
    if (attention_enabled) {
      if (stage_channels[1] % 4 != 0 || stage_channels[2] % 4 != 0) {
        fail<ConfigError>("network: attention inputs must have channels divisible by 4");
      }
      if (stage_channels[2] != 2 * stage_channels[1] ||
          stage_channels[3] != 2 * stage_channels[2]) {
        fail<ConfigError>(
            "network: attention masks require stage channels to double at stages 3 "
            "and 4");
      }
    }
    if (camera_loss_site == CameraLossSite::attention && !attention_enabled) {
      fail<ConfigError>("network: camera_loss_site=attention requires attention_enabled");
    }
    if (num_identities < 1 || num_cameras < 1) {
      fail<ConfigError>("network: need at least one identity and one camera");
    }
    if (global_dim < 1 || local_dim < 1 || camera_dim < 1 || aux_dim < 1) {
      fail<ConfigError>("network: feature dimensions must be positive");
    }
  }
};

// Everything the training step needs from one forward pass, plus shape taps
// used by tests and the mask dump tooling.
struct ForwardOutputs {
  std::vector<Var> id_logits;        // strips + 1 heads, global first
  Var descriptor;                    // N x descriptor_dim, unit rows
  Var aux_triplet_feature;           // N x aux_dim, unit rows
  std::vector<Var> camera_features;  // two N x camera_dim taps, empty if site=none
  std::vector<Var> camera_logits;    // matching classifier outputs
  Var final_map;                     // masked stage-4 map
  std::optional<Var> mask1, mask2;
  std::optional<Var> pre_mask1, pre_mask2;
};

namespace detail {

struct Bottleneck {
  ConvLayer c1, c2, c3;
  BatchNormLayer b1, b2, b3;
  std::optional<ConvLayer> proj;
  std::optional<BatchNormLayer> proj_bn;

  Bottleneck() = default;
  Bottleneck(const std::string& name, int in_ch, int out_ch, int stride, Rng& rng) {
    const int width = out_ch / 4;
    c1 = ConvLayer(name + ".conv1", in_ch, width, HW{1, 1}, HW{1, 1}, HW{0, 0},
                   false, LrGroup::backbone, rng);
    b1 = BatchNormLayer(name + ".bn1", width, LrGroup::backbone);
    c2 = ConvLayer(name + ".conv2", width, width, HW{3, 3}, HW{stride, stride},
                   HW{1, 1}, false, LrGroup::backbone, rng);
    b2 = BatchNormLayer(name + ".bn2", width, LrGroup::backbone);
    c3 = ConvLayer(name + ".conv3", width, out_ch, HW{1, 1}, HW{1, 1}, HW{0, 0},
                   false, LrGroup::backbone, rng);
    b3 = BatchNormLayer(name + ".bn3", out_ch, LrGroup::backbone);
    if (stride != 1 || in_ch != out_ch) {
      proj = ConvLayer(name + ".proj", in_ch, out_ch, HW{1, 1}, HW{stride, stride},
                       HW{0, 0}, false, LrGroup::backbone, rng);
      proj_bn = BatchNormLayer(name + ".proj_bn", out_ch, LrGroup::backbone);
    }
  }

  Var forward(Graph& g, Var x, BnMode mode) {
    Var y = relu(b1.forward(g, c1.forward(g, x), mode));
    y = relu(b2.forward(g, c2.forward(g, y), mode));
    y = b3.forward(g, c3.forward(g, y), mode);
    Var shortcut = proj ? proj_bn->forward(g, proj->forward(g, x), mode) : x;
    return relu(elementwise_add(y, shortcut));
  }

  void register_state(StateRegistry& reg) {
    c1.register_state(reg);
    b1.register_state(reg);
    c2.register_state(reg);
    b2.register_state(reg);
    c3.register_state(reg);
    b3.register_state(reg);
    if (proj) {
      proj->register_state(reg);
      proj_bn->register_state(reg);
    }
  }
};

}  // namespace detail

class Network {
 public:
  Network(NetworkConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    // Each module draws from a stream keyed by its own name, so initial
    // values do not depend on which other modules exist.
    auto module_rng = [seed](const std::string& name) {
      return Rng::stream(seed, detail::fnv1a(name.c_str()));
    };

    {
      Rng rng = module_rng("stem");
      stem_conv_ = ConvLayer("stem.conv", 3, config_.stem_channels, HW{7, 7}, HW{2, 2},
                             HW{3, 3}, false, LrGroup::backbone, rng);
      stem_bn_ = BatchNormLayer("stem.bn", config_.stem_channels, LrGroup::backbone);
    }

    const std::array<int, 4> stage_strides{1, 2, 2, 1};
    int in_ch = config_.stem_channels;
    for (int s = 0; s < 4; ++s) {
      const int out_ch = config_.stage_channels[static_cast<std::size_t>(s)];
      std::vector<detail::Bottleneck> blocks;
      for (int b = 0; b < config_.blocks_per_stage[static_cast<std::size_t>(s)]; ++b) {
        const std::string name = detail::concat("stage", s + 1, ".block", b);
        Rng rng = module_rng(name);
        blocks.emplace_back(name, in_ch, out_ch,
                            b == 0 ? stage_strides[static_cast<std::size_t>(s)] : 1,
                            rng);
        in_ch = out_ch;
      }
      stages_[static_cast<std::size_t>(s)] = std::move(blocks);
    }

    if (config_.attention_enabled) {
      Rng rng1 = module_rng("mrfa1");
      mrfa1_ = MrfaModule("mrfa1",
                          MrfaConfig::for_channels(config_.stage_channels[1], 2), rng1);
      Rng rng2 = module_rng("mrfa2");
      mrfa2_ = MrfaModule("mrfa2",
                          MrfaConfig::for_channels(config_.stage_channels[2], 1), rng2);
    }

    const int final_ch = config_.stage_channels[3];
    {
      Rng rng = module_rng("head.global");
      global_extractor_ = FeatureExtractor("head.global", final_ch, config_.global_dim,
                                           LrGroup::head, rng);
    }
    for (int s = 0; s < config_.strips; ++s) {
      const std::string name = detail::concat("head.strip", s);
      Rng rng = module_rng(name);
      strip_extractors_.emplace_back(name, final_ch, config_.local_dim, LrGroup::head,
                                     rng);
    }
    {
      Rng rng = module_rng("head.aux");
      aux_fc_ = LinearLayer("head.aux.fc", config_.stage_channels[2], config_.aux_dim,
                            std::sqrt(2.0f / static_cast<float>(config_.stage_channels[2])),
                            LrGroup::head, rng);
    }

    constexpr float kClassifierStd = 0.01f;
    {
      Rng rng = module_rng("cls.global");
      id_classifiers_.emplace_back("cls.global", config_.global_dim,
                                   config_.num_identities, kClassifierStd,
                                   LrGroup::head, rng);
    }
    for (int s = 0; s < config_.strips; ++s) {
      const std::string name = detail::concat("cls.strip", s);
      Rng rng = module_rng(name);
      id_classifiers_.emplace_back(name, config_.local_dim, config_.num_identities,
                                   kClassifierStd, LrGroup::head, rng);
    }

    if (config_.camera_loss_site != CameraLossSite::none) {
      const auto [dim1, dim2] = camera_tap_dims();
      const std::array<int, 2> dims{dim1, dim2};
      for (int k = 0; k < 2; ++k) {
        const std::string ex_name = detail::concat("cam.extract", k);
        Rng ex_rng = module_rng(ex_name);
        camera_extractors_.emplace_back(ex_name, dims[static_cast<std::size_t>(k)],
                                        config_.camera_dim, LrGroup::head, ex_rng);
        const std::string cls_name = detail::concat("cam.cls", k);
        Rng cls_rng = module_rng(cls_name);
        camera_classifiers_.emplace_back(cls_name, config_.camera_dim,
                                         config_.num_cameras, kClassifierStd,
                                         LrGroup::head, cls_rng);
      }
    }

    build_registry();
  }

  const NetworkConfig& config() const { return config_; }

  // Full forward pass. Train mode requires a batch of at least two images.
  ForwardOutputs forward(Graph& g, const Tensor& images, BnMode mode) {
    if (images.rank() != 4 || images.dim(1) != 3 ||
        images.dim(2) != config_.input_height || images.dim(3) != config_.input_width) {
      fail<DimensionError>("network: expected input N x 3 x ", config_.input_height,
                           " x ", config_.input_width, ", got ",
                           shape_str(images.shape()));
    }
    if (mode == BnMode::train && images.dim(0) < 2) {
      fail<ContractError>("network: train mode needs a batch of at least 2 images");
    }

    Var x = g.value(images);
    x = relu(stem_bn_.forward(g, stem_conv_.forward(g, x), mode));
    x = pool2d(x, PoolMode::max, HW{2, 2}, HW{2, 2});
    x = run_stage(g, 0, x, mode);
    Var x2 = run_stage(g, 1, x, mode);

    ForwardOutputs out;
    std::optional<MrfaOutput> att1, att2;
    if (config_.attention_enabled) att1 = mrfa1_->forward(g, x2, mode);

    Var x3 = run_stage(g, 2, x2, mode);
    Var x3_masked = att1 ? apply_mask(x3, att1->mask) : x3;
    if (config_.attention_enabled) att2 = mrfa2_->forward(g, x3_masked, mode);

    Var x4 = run_stage(g, 3, x3_masked, mode);
    Var x4_masked = att2 ? apply_mask(x4, att2->mask) : x4;
    out.final_map = x4_masked;
    if (att1) {
      out.mask1 = att1->mask;
      out.pre_mask1 = att1->pre_mask_feature;
    }
    if (att2) {
      out.mask2 = att2->mask;
      out.pre_mask2 = att2->pre_mask_feature;
    }

    Var global_feat =
        global_extractor_.forward(g, flatten_pooled(global_avg_pool(x4_masked)), mode);
    std::vector<Var> features{global_feat};
    const int strip_h = config_.final_height() / config_.strips;
    for (int s = 0; s < config_.strips; ++s) {
      Var strip = slice_height(x4_masked, s * strip_h, (s + 1) * strip_h);
      features.push_back(strip_extractors_[static_cast<std::size_t>(s)].forward(
          g, flatten_pooled(global_avg_pool(strip)), mode));
    }
    for (std::size_t i = 0; i < features.size(); ++i) {
      out.id_logits.push_back(id_classifiers_[i].forward(g, features[i]));
    }
    out.descriptor = l2_normalize(concat_channels(features));
    out.aux_triplet_feature =
        l2_normalize(aux_fc_.forward(g, flatten_pooled(global_avg_pool(x3_masked))));

    if (config_.camera_loss_site != CameraLossSite::none) {
      Var tap1 = x3, tap2 = x4;
      switch (config_.camera_loss_site) {
        case CameraLossSite::attention:
          tap1 = att1->pre_mask_feature;
          tap2 = att2->pre_mask_feature;
          break;
        case CameraLossSite::backbone_pre_mask:
          tap1 = x3;
          tap2 = x4;
          break;
        case CameraLossSite::backbone_post_mask:
          tap1 = x3_masked;
          tap2 = x4_masked;
          break;
        case CameraLossSite::none: break;
      }
      const std::array<Var, 2> taps{tap1, tap2};
      for (int k = 0; k < 2; ++k) {
        Var feat = camera_extractors_[static_cast<std::size_t>(k)].forward(
            g, flatten_pooled(global_avg_pool(taps[static_cast<std::size_t>(k)])), mode);
        out.camera_features.push_back(feat);
        out.camera_logits.push_back(
            camera_classifiers_[static_cast<std::size_t>(k)].forward(g, feat));
      }
    }
    return out;
  }

  ForwardOutputs forward_train(Graph& g, const Tensor& images) {
    return forward(g, images, BnMode::train);
  }

  // Inference embedding with running batch-norm statistics. Deterministic and
  // independent of batch composition.
  Tensor embed(const Tensor& images) {
    Graph g(/*grad_enabled=*/false);
    return forward(g, images, BnMode::eval).descriptor.value();
  }

  // The two per-module camera features at the configured placement.
  std::vector<Var> camera_loss_tap(Graph& g, const Tensor& images, BnMode mode) {
    if (config_.camera_loss_site == CameraLossSite::none) {
      fail<ContractError>("camera_loss_tap: camera_loss_site is none");
    }
    return forward(g, images, mode).camera_features;
  }

  const StateRegistry& state() const { return registry_; }
  std::vector<Parameter*> parameters() const { return registry_.parameters(); }

  void zero_grad() {
    for (Parameter* p : registry_.parameters()) p->zero_grad();
  }

  // Assigns every named state tensor from `entries`. Validates completely
  // before mutating anything.
  void load_state(const std::map<std::string, Tensor>& entries) {
    for (const StateEntry& e : registry_.entries()) {
      auto it = entries.find(e.name);
      if (it == entries.end()) {
        fail<FormatError>("checkpoint is missing entry '", e.name, "'");
      }
      if (it->second.shape() != e.tensor->shape()) {
        fail<FormatError>("checkpoint entry '", e.name, "' has shape ",
                          shape_str(it->second.shape()), ", expected ",
                          shape_str(e.tensor->shape()));
      }
    }
    for (const StateEntry& e : registry_.entries()) {
      *e.tensor = entries.at(e.name);
    }
  }

 private:
  std::pair<int, int> camera_tap_dims() const {
    switch (config_.camera_loss_site) {
      case CameraLossSite::attention:
        return {config_.stage_channels[1], config_.stage_channels[2]};
      case CameraLossSite::backbone_pre_mask:
      case CameraLossSite::backbone_post_mask:
        return {config_.stage_channels[2], config_.stage_channels[3]};
      case CameraLossSite::none: break;
    }
    return {0, 0};
  }

  Var run_stage(Graph& g, int stage, Var x, BnMode mode) {
    for (detail::Bottleneck& block : stages_[static_cast<std::size_t>(stage)]) {
      x = block.forward(g, x, mode);
    }
    return x;
  }

  void build_registry() {
    stem_conv_.register_state(registry_);
    stem_bn_.register_state(registry_);
    for (auto& stage : stages_) {
      for (auto& block : stage) block.register_state(registry_);
    }
    if (mrfa1_) mrfa1_->register_state(registry_);
    if (mrfa2_) mrfa2_->register_state(registry_);
    global_extractor_.register_state(registry_);
    for (auto& ex : strip_extractors_) ex.register_state(registry_);
    aux_fc_.register_state(registry_);
    for (auto& cls : id_classifiers_) cls.register_state(registry_);
    for (auto& ex : camera_extractors_) ex.register_state(registry_);
    for (auto& cls : camera_classifiers_) cls.register_state(registry_);
  }

  NetworkConfig config_;
  ConvLayer stem_conv_;
  BatchNormLayer stem_bn_;
  std::array<std::vector<detail::Bottleneck>, 4> stages_;
  std::optional<MrfaModule> mrfa1_, mrfa2_;
  FeatureExtractor global_extractor_;
  std::vector<FeatureExtractor> strip_extractors_;
  LinearLayer aux_fc_;
  std::vector<LinearLayer> id_classifiers_;
  std::vector<FeatureExtractor> camera_extractors_;
  std::vector<LinearLayer> camera_classifiers_;
  StateRegistry registry_;
};

// --- checkpoint file --------------------------------------------------------
// magic "VMRF", version u32 LE, entry count u32 LE, then per entry:
// name length u32 LE, UTF-8 name, tensor in the portable tensor format.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::string& path,
                             const std::vector<std::pair<std::string, const Tensor*>>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail<IoError>("cannot open ", path, " for writing");
  out.write("VMRF", 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, *tensor);
  }
  if (!out) fail<IoError>("write failed for ", path);
}

inline std::map<std::string, Tensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail<IoError>("cannot open ", path, " for reading");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "VMRF", 4) != 0) {
    fail<FormatError>("bad checkpoint magic at offset 0");
  }
  const std::uint32_t version = detail::get_u32(in, 4, "checkpoint version");
  if (version != kCheckpointVersion) {
    fail<FormatError>("unsupported checkpoint version ", version, " at offset 4");
  }
  const std::uint32_t count = detail::get_u32(in, 8, "entry count");
  std::map<std::string, Tensor> entries;
  std::int64_t offset = 12;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(in, offset, "name length");
    offset += 4;
    if (name_len == 0 || name_len > 4096) {
      fail<FormatError>("implausible name length ", name_len, " at offset ",
                        offset - 4);
    }
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) fail<FormatError>("truncated name at offset ", offset);
    offset += name_len;
    Tensor t = read_tensor(in, offset);
    offset += 12 + 4ll * t.rank() + 4ll * t.numel();
    if (!entries.emplace(std::move(name), std::move(t)).second) {
      fail<FormatError>("duplicate checkpoint entry at offset ", offset);
    }
  }
  return entries;
}

}  // namespace vmrfa
