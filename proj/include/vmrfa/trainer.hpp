#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "vmrfa/config.hpp"
#include "vmrfa/data.hpp"
#include "vmrfa/losses.hpp"
#include "vmrfa/network.hpp"

namespace vmrfa {

// SGD with momentum and coupled weight decay:
//   g' = grad + weight_decay * param
//   buf = momentum * buf + g'
//   param -= lr_group * buf
class SgdOptimizer {
 public:
  SgdOptimizer() = default;

  SgdOptimizer(std::vector<Parameter*> params, OptimizerConfig config)
      : params_(std::move(params)), config_(config) {
    buffers_.reserve(params_.size());
    for (const Parameter* p : params_) buffers_.emplace_back(p->value.shape());
  }

  const OptimizerConfig& config() const { return config_; }

  void step(float lr_backbone, float lr_head) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      if (p.grad.empty() || !p.grad.same_shape(p.value)) {
        fail<ContractError>("sgd_step: missing gradient for parameter '", p.name, "'");
      }
      const float lr = p.group == LrGroup::backbone ? lr_backbone : lr_head;
      const float wd = decays(p) ? config_.weight_decay : 0.0f;
      Tensor& buf = buffers_[i];
      float* value = p.value.data();
      float* buffer = buf.data();
      const float* grad = p.grad.data();
      const std::int64_t n = p.value.numel();
      for (std::int64_t j = 0; j < n; ++j) {
        const float adjusted = grad[j] + wd * value[j];
        buffer[j] = config_.momentum * buffer[j] + adjusted;
        value[j] -= lr * buffer[j];
      }
    }
  }

  // Momentum buffers become checkpoint entries under a reserved suffix.
  std::vector<std::pair<std::string, Tensor*>> buffer_entries() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.emplace_back(params_[i]->name + ".momentum", &buffers_[i]);
    }
    return out;
  }

 private:
  bool decays(const Parameter& p) const {
    if (config_.bn_weight_decay) return true;
    const std::string& n = p.name;
    auto ends_with = [&](const char* suffix) {
      const std::size_t len = std::char_traits<char>::length(suffix);
      return n.size() >= len && n.compare(n.size() - len, len, suffix) == 0;
    };
    return !(ends_with(".gamma") || ends_with(".beta"));
  }

  std::vector<Parameter*> params_;
  std::vector<Tensor> buffers_;
  OptimizerConfig config_;
};

struct StepLoss {
  float id = 0.0f;
  float triplet1 = 0.0f;
  float triplet2 = 0.0f;
  float camera = 0.0f;
  float combined = 0.0f;
};

inline constexpr const char* kLogHeader =
    "epoch,step,L_ID,L1_triplet,L2_triplet,L_camera,combined";

// End-to-end optimization loop: P x K sampling, the augmentation chain, the
// combined objective, SGD with two learning-rate groups and per-epoch
// checkpointing. Deterministic for a fixed (config, dataset, seed).
class Trainer {
 public:
  Trainer(TrainConfig config, Dataset dataset)
      : config_(std::move(config)), dataset_(std::move(dataset)) {
    const int cameras = config_.num_cameras.value_or(dataset_.num_cameras);
    if (dataset_.num_cameras > cameras) {
      fail<ConfigError>("trainer: dataset uses ", dataset_.num_cameras,
                        " cameras but config allows ", cameras);
    }
    net_config_ = config_.network_config(dataset_.num_identities, cameras);
    network_ = std::make_unique<Network>(net_config_, config_.seed);
    optimizer_ = SgdOptimizer(network_->parameters(), config_.opt);
    sampler_ = std::make_unique<PkSampler>(
        dataset_, BatchSpec{config_.p, config_.k, config_.seed});
    schedule_ = config_.schedule();
    triplet_ = TripletConfig{config_.margin, config_.p, config_.k};
    camera_ = CameraLossConfig{config_.epsilon, cameras};
    std::filesystem::create_directories(config_.out_dir);
  }

  Network& network() { return *network_; }
  const NetworkConfig& network_config() const { return net_config_; }
  const Schedule& schedule() const { return schedule_; }
  int steps_per_epoch() const { return sampler_->steps_per_epoch(); }
  int next_epoch() const { return next_epoch_; }

  std::string checkpoint_path() const {
    return (std::filesystem::path(config_.out_dir) / "checkpoint.vmrf").string();
  }
  std::string log_path() const {
    return (std::filesystem::path(config_.out_dir) / "train_log.csv").string();
  }

  StepLoss run_step(Graph& g, int epoch, int step) {
    const std::vector<int> indices = sampler_->sample(epoch, step);
    const int batch = static_cast<int>(indices.size());
    Tensor images(Shape{batch, 3, net_config_.input_height, net_config_.input_width});
    std::vector<int> ids(static_cast<std::size_t>(batch));
    std::vector<int> cams(static_cast<std::size_t>(batch));
    const std::int64_t image_size =
        3ll * net_config_.input_height * net_config_.input_width;
    for (int i = 0; i < batch; ++i) {
      const LabeledImage sample = dataset_.load(static_cast<std::size_t>(indices[i]));
      const std::int64_t sample_index =
          static_cast<std::int64_t>(step) * batch + i;
      Rng rng = Rng::stream(config_.seed, 0xa09ULL, static_cast<std::uint64_t>(epoch),
                            static_cast<std::uint64_t>(sample_index));
      Tensor pixels = augment_chain(sample, config_.hda, net_config_.input_height,
                                    net_config_.input_width, true, rng);
      std::copy(pixels.data(), pixels.data() + image_size,
                images.data() + static_cast<std::int64_t>(i) * image_size);
      ids[static_cast<std::size_t>(i)] = sample.person_id;
      cams[static_cast<std::size_t>(i)] = sample.camera_id;
    }

    ForwardOutputs out = network_->forward_train(g, images);
    LossParts parts;
    parts.id = id_loss(out.id_logits, ids);
    parts.triplet_descriptor = batch_hard_triplet(out.descriptor, ids, triplet_);
    parts.triplet_auxiliary = batch_hard_triplet(out.aux_triplet_feature, ids, triplet_);
    if (net_config_.camera_loss_site != CameraLossSite::none) {
      parts.camera = camera_loss(out.camera_logits, cams, camera_);
    }
    Var combined = combined_loss(parts, config_.weights);

    network_->zero_grad();
    g.backward(combined);
    optimizer_.step(lr_at(epoch, schedule_, config_.opt.lr_backbone),
                    lr_at(epoch, schedule_, config_.opt.lr_head));

    StepLoss loss;
    loss.id = parts.id.value()[0];
    loss.triplet1 = parts.triplet_descriptor.value()[0];
    loss.triplet2 = parts.triplet_auxiliary.value()[0];
    loss.camera = parts.camera ? parts.camera->value()[0] : 0.0f;
    loss.combined = combined.value()[0];
    return loss;
  }

  // Runs epochs [next_epoch, stop_epoch or total_epochs). Appends one CSV row
  // per step and checkpoints after each interval; a divergence abort leaves
  // the last written checkpoint in place.
  void run(std::optional<int> stop_epoch = std::nullopt) {
    std::ofstream log(log_path(), next_epoch_ == 0 ? std::ios::trunc : std::ios::app);
    if (!log) fail<IoError>("cannot open ", log_path(), " for writing");
    if (next_epoch_ == 0) log << kLogHeader << "\n";

    const int last = std::min(schedule_.total_epochs,
                              stop_epoch.value_or(schedule_.total_epochs));
    const int steps = steps_per_epoch();
    for (int epoch = next_epoch_; epoch < last; ++epoch) {
      for (int step = 0; step < steps; ++step) {
        Graph g;
        const StepLoss loss = run_step(g, epoch, step);
        char row[192];
        std::snprintf(row, sizeof(row), "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g", epoch, step,
                      loss.id, loss.triplet1, loss.triplet2, loss.camera,
                      loss.combined);
        log << row << "\n";
      }
      log.flush();
      next_epoch_ = epoch + 1;
      if (config_.checkpoint_interval > 0 &&
          next_epoch_ % config_.checkpoint_interval == 0) {
        save_checkpoint(checkpoint_path());
      }
    }
    save_checkpoint(checkpoint_path());
  }

  // Checkpoint = network parameters and running statistics, optimizer
  // momentum buffers, the completed epoch count, and enough architecture
  // metadata for `embed` to rebuild classifier shapes.
  void save_checkpoint(const std::string& path) {
    std::vector<std::pair<std::string, const Tensor*>> entries;
    for (const StateEntry& e : network_->state().entries()) {
      entries.emplace_back(e.name, e.tensor);
    }
    for (const auto& [name, tensor] : optimizer_.buffer_entries()) {
      entries.emplace_back(name, tensor);
    }
    Tensor epoch_counter = Tensor::scalar(static_cast<float>(next_epoch_));
    Tensor ids = Tensor::scalar(static_cast<float>(net_config_.num_identities));
    Tensor cams = Tensor::scalar(static_cast<float>(net_config_.num_cameras));
    entries.emplace_back("meta.epochs_done", &epoch_counter);
    entries.emplace_back("meta.num_identities", &ids);
    entries.emplace_back("meta.num_cameras", &cams);
    write_checkpoint(path, entries);
  }

  void load_checkpoint(const std::string& path) {
    const std::map<std::string, Tensor> entries = read_checkpoint(path);
    network_->load_state(entries);
    for (auto& [name, tensor] : optimizer_.buffer_entries()) {
      auto it = entries.find(name);
      if (it == entries.end()) {
        fail<FormatError>("checkpoint is missing entry '", name, "'");
      }
      if (it->second.shape() != tensor->shape()) {
        fail<FormatError>("checkpoint entry '", name, "' has unexpected shape");
      }
      *tensor = it->second;
    }
    auto meta = entries.find("meta.epochs_done");
    if (meta == entries.end()) {
      fail<FormatError>("checkpoint is missing entry 'meta.epochs_done'");
    }
    next_epoch_ = static_cast<int>(meta->second[0]);
  }

 private:
  TrainConfig config_;
  Dataset dataset_;
  NetworkConfig net_config_;
  std::unique_ptr<Network> network_;
  SgdOptimizer optimizer_;
  std::unique_ptr<PkSampler> sampler_;
  Schedule schedule_;
  TripletConfig triplet_;
  CameraLossConfig camera_;
  int next_epoch_ = 0;
};

}  // namespace vmrfa
