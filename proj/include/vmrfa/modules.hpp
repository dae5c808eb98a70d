#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vmrfa/ops.hpp"
#include "vmrfa/rng.hpp"

namespace vmrfa {

// Named view of every tensor a network persists: trainable parameters plus
// batch-norm running statistics (reserved ".running_*" suffixes).
struct StateEntry {
  std::string name;
  Tensor* tensor;
  Parameter* param;  // null for non-trainable statistics
};

class StateRegistry {
 public:
  void add_param(Parameter& p) {
    entries_.push_back(StateEntry{p.name, &p.value, &p});
  }
  void add_stat(std::string name, Tensor& t) {
    entries_.push_back(StateEntry{std::move(name), &t, nullptr});
  }

  const std::vector<StateEntry>& entries() const { return entries_; }

  std::vector<Parameter*> parameters() const {
    std::vector<Parameter*> out;
    for (const StateEntry& e : entries_) {
      if (e.param != nullptr) out.push_back(e.param);
    }
    return out;
  }

 private:
  std::vector<StateEntry> entries_;
};

namespace init {

// He normal initialization scaled by the fan-out of a convolution kernel.
inline void he_fan_out(Tensor& w, int fan_out, Rng& rng) {
  w.fill_normal(rng, 0.0f, std::sqrt(2.0f / static_cast<float>(fan_out)));
}

}  // namespace init

struct ConvLayer {
  Parameter weight;
  std::optional<Parameter> bias;
  HW stride;
  HW padding;

  ConvLayer() = default;
  ConvLayer(const std::string& name, int in_ch, int out_ch, HW kernel, HW stride_,
            HW padding_, bool with_bias, LrGroup group, Rng& rng)
      : weight(name + ".weight", Tensor(Shape{out_ch, in_ch, kernel.h, kernel.w}),
               group),
        stride(stride_),
        padding(padding_) {
    init::he_fan_out(weight.value, out_ch * kernel.h * kernel.w, rng);
    if (with_bias) bias.emplace(name + ".bias", Tensor(Shape{out_ch}), group);
  }

  Var forward(Graph& g, Var x) {
    std::optional<Var> b;
    if (bias) b = g.param(*bias);
    return conv2d(x, g.param(weight), b, stride, padding);
  }

  void register_state(StateRegistry& reg) {
    reg.add_param(weight);
    if (bias) reg.add_param(*bias);
  }
};

struct BatchNormLayer {
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
  std::string name;

  BatchNormLayer() = default;
  BatchNormLayer(const std::string& name_, int channels, LrGroup group)
      : gamma(name_ + ".gamma", Tensor(Shape{channels}, 1.0f), group),
        beta(name_ + ".beta", Tensor(Shape{channels}), group),
        running_mean(Shape{channels}, 0.0f),
        running_var(Shape{channels}, 1.0f),
        name(name_) {}

  Var forward(Graph& g, Var x, BnMode mode) {
    return batch_norm(x, g.param(gamma), g.param(beta), running_mean, running_var,
                      mode, momentum, eps);
  }

  void register_state(StateRegistry& reg) {
    reg.add_param(gamma);
    reg.add_param(beta);
    reg.add_stat(name + ".running_mean", running_mean);
    reg.add_stat(name + ".running_var", running_var);
  }
};

struct LinearLayer {
  Parameter weight;  // out x in
  Parameter bias;

  LinearLayer() = default;
  LinearLayer(const std::string& name, int in_dim, int out_dim, float weight_std,
              LrGroup group, Rng& rng)
      : weight(name + ".weight", Tensor(Shape{out_dim, in_dim}), group),
        bias(name + ".bias", Tensor(Shape{out_dim}), group) {
    weight.value.fill_normal(rng, 0.0f, weight_std);
  }

  Var forward(Graph& g, Var x) {
    return affine(x, g.param(weight), g.param(bias));
  }

  void register_state(StateRegistry& reg) {
    reg.add_param(weight);
    reg.add_param(bias);
  }
};

// Reduces a pooled N x C vector to a compact feature: affine -> bn -> relu.
struct FeatureExtractor {
  LinearLayer fc;
  BatchNormLayer bn;

  FeatureExtractor() = default;
  FeatureExtractor(const std::string& name, int in_dim, int out_dim, LrGroup group,
                   Rng& rng)
      : fc(name + ".fc", in_dim, out_dim,
           std::sqrt(2.0f / static_cast<float>(in_dim)), group, rng),
        bn(name + ".bn", out_dim, group) {}

  Var forward(Graph& g, Var pooled, BnMode mode) {
    return relu(bn.forward(g, fc.forward(g, pooled), mode));
  }

  void register_state(StateRegistry& reg) {
    fc.register_state(reg);
    bn.register_state(reg);
  }
};

}  // namespace vmrfa
