#pragma once

#include <string>
#include <vector>

#include "vmrfa/modules.hpp"

namespace vmrfa {

// Multi-receptive field attention configuration. The module reduces C input
// channels to C/4 per branch, covers receptive fields 1/3/5/7 and lifts the
// concatenated C-channel feature to out_channels (2C) for masking.
struct MrfaConfig {
  int in_channels = 0;
  int out_channels = 0;
  int spatial_stride = 1;

  static MrfaConfig for_channels(int c, int stride) {
    return MrfaConfig{c, 2 * c, stride};
  }

  void validate() const {
    if (in_channels <= 0 || in_channels % 4 != 0) {
      fail<ConfigError>("mrfa: in_channels must be a positive multiple of 4, got ",
                        in_channels);
    }
    if (out_channels <= 0) {
      fail<ConfigError>("mrfa: out_channels must be positive, got ", out_channels);
    }
    if (spatial_stride != 1 && spatial_stride != 2) {
      fail<ConfigError>("mrfa: spatial_stride must be 1 or 2, got ", spatial_stride);
    }
  }
};

struct MrfaOutput {
  Var mask;              // N x out_channels x H' x W', elements in (0, 2)
  Var pre_mask_feature;  // N x in_channels x H' x W', the concatenated branches
};

// The attention module: four parallel branches behind 1x1 reductions.
//   branch 1: 1x1
//   branch 2: 1x1 -> 3x3
//   branch 3: 1x1 -> 3x3 -> 3x3           (effective 5x5)
//   branch 4: 1x1 -> 1x7 -> 7x1           (effective 7x7)
// With spatial_stride 2 a 2x2 average pool follows each 1x1 reduction so the
// mask matches the next backbone stage. Every conv is followed by bn + relu
// except the final 1x1 lift, which feeds tanh(x) + 1.
class MrfaModule {
 public:
  MrfaModule() = default;

  MrfaModule(const std::string& name, MrfaConfig config, Rng& rng)
      : config_(config) {
    config_.validate();
    const int c = config_.in_channels;
    const int branch = c / 4;
    const LrGroup group = LrGroup::head;
    for (int i = 0; i < 4; ++i) {
      const std::string base = name + ".branch" + std::to_string(i + 1);
      reduce_[i] = ConvLayer(base + ".reduce", c, branch, HW{1, 1}, HW{1, 1},
                             HW{0, 0}, false, group, rng);
      reduce_bn_[i] = BatchNormLayer(base + ".reduce_bn", branch, group);
    }
    b2_conv_ = ConvLayer(name + ".branch2.conv3", branch, branch, HW{3, 3}, HW{1, 1},
                         HW{1, 1}, false, group, rng);
    b2_bn_ = BatchNormLayer(name + ".branch2.conv3_bn", branch, group);
    b3_conv1_ = ConvLayer(name + ".branch3.conv3a", branch, branch, HW{3, 3},
                          HW{1, 1}, HW{1, 1}, false, group, rng);
    b3_bn1_ = BatchNormLayer(name + ".branch3.conv3a_bn", branch, group);
    b3_conv2_ = ConvLayer(name + ".branch3.conv3b", branch, branch, HW{3, 3},
                          HW{1, 1}, HW{1, 1}, false, group, rng);
    b3_bn2_ = BatchNormLayer(name + ".branch3.conv3b_bn", branch, group);
    b4_conv1x7_ = ConvLayer(name + ".branch4.conv1x7", branch, branch, HW{1, 7},
                            HW{1, 1}, HW{0, 3}, false, group, rng);
    b4_bn1_ = BatchNormLayer(name + ".branch4.conv1x7_bn", branch, group);
    b4_conv7x1_ = ConvLayer(name + ".branch4.conv7x1", branch, branch, HW{7, 1},
                            HW{1, 1}, HW{3, 0}, false, group, rng);
    b4_bn2_ = BatchNormLayer(name + ".branch4.conv7x1_bn", branch, group);
    lift_ = ConvLayer(name + ".lift", c, config_.out_channels, HW{1, 1}, HW{1, 1},
                      HW{0, 0}, true, group, rng);
  }

  const MrfaConfig& config() const { return config_; }

  MrfaOutput forward(Graph& g, Var input, BnMode mode) {
    if (input.value().dim(1) != config_.in_channels) {
      fail<DimensionError>("mrfa: input has ", input.value().dim(1),
                           " channels, config expects ", config_.in_channels);
    }
    std::vector<Var> branches(4);
    for (int i = 0; i < 4; ++i) {
      Var r = reduce_[i].forward(g, input);
      if (config_.spatial_stride == 2) {
        r = pool2d(r, PoolMode::avg, HW{2, 2}, HW{2, 2});
      }
      branches[static_cast<std::size_t>(i)] =
          relu(reduce_bn_[i].forward(g, r, mode));
    }
    branches[1] = relu(b2_bn_.forward(g, b2_conv_.forward(g, branches[1]), mode));
    branches[2] = relu(b3_bn1_.forward(g, b3_conv1_.forward(g, branches[2]), mode));
    branches[2] = relu(b3_bn2_.forward(g, b3_conv2_.forward(g, branches[2]), mode));
    branches[3] = relu(b4_bn1_.forward(g, b4_conv1x7_.forward(g, branches[3]), mode));
    branches[3] = relu(b4_bn2_.forward(g, b4_conv7x1_.forward(g, branches[3]), mode));

    Var pre_mask = concat_channels(branches);
    Var mask = add_scalar(tanh_op(lift_.forward(g, pre_mask)), 1.0f);
    return MrfaOutput{mask, pre_mask};
  }

  void register_state(StateRegistry& reg) {
    for (int i = 0; i < 4; ++i) {
      reduce_[i].register_state(reg);
      reduce_bn_[i].register_state(reg);
    }
    b2_conv_.register_state(reg);
    b2_bn_.register_state(reg);
    b3_conv1_.register_state(reg);
    b3_bn1_.register_state(reg);
    b3_conv2_.register_state(reg);
    b3_bn2_.register_state(reg);
    b4_conv1x7_.register_state(reg);
    b4_bn1_.register_state(reg);
    b4_conv7x1_.register_state(reg);
    b4_bn2_.register_state(reg);
    lift_.register_state(reg);
  }

 private:
  MrfaConfig config_;
  ConvLayer reduce_[4];
  BatchNormLayer reduce_bn_[4];
  ConvLayer b2_conv_;
  BatchNormLayer b2_bn_;
  ConvLayer b3_conv1_, b3_conv2_;
  BatchNormLayer b3_bn1_, b3_bn2_;
  ConvLayer b4_conv1x7_, b4_conv7x1_;
  BatchNormLayer b4_bn1_, b4_bn2_;
  ConvLayer lift_;
};

// Applies an attention mask to a same-shaped feature map.
inline Var apply_mask(Var feature, Var mask) {
  check_same_shape(feature.value(), mask.value(), "apply_mask");
  return elementwise_mul(feature, mask);
}

}  // namespace vmrfa
