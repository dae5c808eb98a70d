#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vmrfa/ops.hpp"

namespace vmrfa {

// Weights balancing the combined objective.
struct LossWeights {
  float lambda1 = 5.0f;  // triplet on the concatenated descriptor
  float lambda2 = 5.0f;  // triplet on the auxiliary post-mask feature
  float lambda3 = 1.0f;  // camera classification
};

// Batch-hard mining configuration. Batches must hold exactly P identities
// with K images each.
struct TripletConfig {
  float margin = 0.3f;
  int p = 24;
  int k = 4;
};

struct CameraLossConfig {
  float epsilon = 0.1f;
  int num_cameras = 6;
};

namespace detail {

inline void check_labels(const std::vector<int>& labels, int num_classes, int rows,
                         const char* op) {
  if (static_cast<int>(labels.size()) != rows) {
    fail<DimensionError>(op, ": ", labels.size(), " labels for ", rows, " rows");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      fail<DataError>(op, ": label ", labels[i], " at row ", i, " outside [0, ",
                      num_classes, ")");
    }
  }
}

// Mean over rows of -logprobs[i, labels[i]].
inline Var nll_mean(Var logprobs, const std::vector<int>& labels) {
  Graph& g = *logprobs.graph;
  const Tensor& lp = logprobs.value();
  check_rank(lp, 2, "nll_mean", "logprobs");
  const int rows = lp.dim(0), classes = lp.dim(1);
  check_labels(labels, classes, rows, "nll_mean");
  double s = 0.0;
  for (int i = 0; i < rows; ++i) {
    s -= lp[static_cast<std::int64_t>(i) * classes + labels[static_cast<std::size_t>(i)]];
  }
  const float value = static_cast<float>(s / rows);
  const int in_id = logprobs.id;
  auto backward = [=](Graph& gg, int self) {
    const float gv = gg.node(self).grad[0] / static_cast<float>(rows);
    Tensor& gi = gg.grad_buffer(in_id);
    for (int i = 0; i < rows; ++i) {
      gi[static_cast<std::int64_t>(i) * classes + labels[static_cast<std::size_t>(i)]] -= gv;
    }
  };
  return g.record("nll_mean", Tensor::scalar(value), {in_id}, backward);
}

// Mean over rows of the cross-entropy against the label-smoothed target
// q'(j) = (1 - eps) * delta(j, label) + eps / classes.
inline Var smoothed_nll_mean(Var logprobs, const std::vector<int>& labels, float eps) {
  Graph& g = *logprobs.graph;
  const Tensor& lp = logprobs.value();
  check_rank(lp, 2, "smoothed_nll_mean", "logprobs");
  const int rows = lp.dim(0), classes = lp.dim(1);
  check_labels(labels, classes, rows, "smoothed_nll_mean");
  const double uniform = static_cast<double>(eps) / classes;
  const double on_true = 1.0 - static_cast<double>(eps);
  double s = 0.0;
  for (int i = 0; i < rows; ++i) {
    const float* row = lp.data() + static_cast<std::int64_t>(i) * classes;
    double row_sum = 0.0;
    for (int j = 0; j < classes; ++j) row_sum += row[j];
    s -= uniform * row_sum + on_true * row[labels[static_cast<std::size_t>(i)]];
  }
  const float value = static_cast<float>(s / rows);
  const int in_id = logprobs.id;
  auto backward = [=](Graph& gg, int self) {
    const float gv = gg.node(self).grad[0] / static_cast<float>(rows);
    const float u = static_cast<float>(uniform) * gv;
    const float t = static_cast<float>(on_true) * gv;
    Tensor& gi = gg.grad_buffer(in_id);
    for (int i = 0; i < rows; ++i) {
      float* row = gi.data() + static_cast<std::int64_t>(i) * classes;
      for (int j = 0; j < classes; ++j) row[j] -= u;
      row[labels[static_cast<std::size_t>(i)]] -= t;
    }
  };
  return g.record("smoothed_nll_mean", Tensor::scalar(value), {in_id}, backward);
}

}  // namespace detail

// Identity softmax cross-entropy summed over every classification head and
// averaged over the batch.
inline Var id_loss(const std::vector<Var>& id_logits, const std::vector<int>& labels) {
  if (id_logits.empty()) fail<ContractError>("id_loss: no logit heads");
  std::optional<Var> total;
  for (const Var& head : id_logits) {
    Var term = detail::nll_mean(log_softmax(head), labels);
    total = total ? elementwise_add(*total, term) : term;
  }
  return *total;
}

// Label-smoothed camera (view) target distribution.
inline std::vector<float> smoothed_camera_distribution(int camera,
                                                       const CameraLossConfig& config) {
  if (camera < 0 || camera >= config.num_cameras) {
    fail<DataError>("smoothed_camera_distribution: camera ", camera, " outside [0, ",
                    config.num_cameras, ")");
  }
  std::vector<float> q(static_cast<std::size_t>(config.num_cameras),
                       config.epsilon / static_cast<float>(config.num_cameras));
  q[static_cast<std::size_t>(camera)] += 1.0f - config.epsilon;
  return q;
}

// View-specific loss over the per-attention-module camera classifier outputs.
// camera_logits[k] is the N x num_cameras output of the k-th classifier.
inline Var camera_loss(const std::vector<Var>& camera_logits,
                       const std::vector<int>& camera_labels,
                       const CameraLossConfig& config) {
  if (camera_logits.empty()) fail<ContractError>("camera_loss: no classifier heads");
  std::optional<Var> total;
  for (const Var& head : camera_logits) {
    if (head.value().dim(1) != config.num_cameras) {
      fail<ConfigError>("camera_loss: classifier emits ", head.value().dim(1),
                        " classes but config.num_cameras is ", config.num_cameras);
    }
    Var term = detail::smoothed_nll_mean(log_softmax(head), camera_labels,
                                         config.epsilon);
    total = total ? elementwise_add(*total, term) : term;
  }
  return *total;
}

// Batch-hard triplet loss over Euclidean distances within a P x K batch.
// The positive max runs over the anchor's own identity (anchor included);
// the negative min runs over every other identity.
inline Var batch_hard_triplet(Var features, const std::vector<int>& identity_labels,
                              const TripletConfig& config) {
  Graph& g = *features.graph;
  const Tensor& x = features.value();
  detail::check_rank(x, 2, "batch_hard_triplet", "features");
  const int n = x.dim(0), dim = x.dim(1);
  if (config.p < 2 || config.k < 2) {
    fail<ConfigError>("batch_hard_triplet: requires P >= 2 and K >= 2, got P=",
                      config.p, " K=", config.k);
  }
  if (n != config.p * config.k || static_cast<int>(identity_labels.size()) != n) {
    fail<ContractError>("batch_hard_triplet: batch of ", n, " rows with ",
                        identity_labels.size(), " labels does not match P*K = ",
                        config.p * config.k);
  }
  std::map<int, int> counts;
  for (int label : identity_labels) ++counts[label];
  if (static_cast<int>(counts.size()) != config.p) {
    fail<ContractError>("batch_hard_triplet: ", counts.size(),
                        " distinct identities, expected P = ", config.p);
  }
  for (const auto& [label, count] : counts) {
    if (count != config.k) {
      fail<ContractError>("batch_hard_triplet: identity ", label, " has ", count,
                          " samples, expected K = ", config.k);
    }
  }

  // Pairwise Euclidean distances with the negative round-off clamped before
  // the square root.
  std::vector<double> sq_norm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* row = x.data() + static_cast<std::int64_t>(i) * dim;
    sq_norm[static_cast<std::size_t>(i)] = detail::dot8(row, row, dim);
  }
  std::vector<float> dist(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    const float* ri = x.data() + static_cast<std::int64_t>(i) * dim;
    for (int j = 0; j < n; ++j) {
      const double d2 = sq_norm[static_cast<std::size_t>(i)] +
                        sq_norm[static_cast<std::size_t>(j)] -
                        2.0 * detail::dot8(ri, x.data() + static_cast<std::int64_t>(j) * dim, dim);
      dist[static_cast<std::size_t>(i) * n + j] =
          static_cast<float>(std::sqrt(std::max(0.0, d2)));
    }
  }

  std::vector<int> hardest_pos(static_cast<std::size_t>(n));
  std::vector<int> hardest_neg(static_cast<std::size_t>(n));
  std::vector<char> active(static_cast<std::size_t>(n));
  double loss_sum = 0.0;
  for (int a = 0; a < n; ++a) {
    const float* drow = dist.data() + static_cast<std::size_t>(a) * n;
    int pos = -1, neg = -1;
    for (int j = 0; j < n; ++j) {
      if (identity_labels[static_cast<std::size_t>(j)] ==
          identity_labels[static_cast<std::size_t>(a)]) {
        if (pos < 0 || drow[j] > drow[pos]) pos = j;
      } else {
        if (neg < 0 || drow[j] < drow[neg]) neg = j;
      }
    }
    const float term = config.margin + drow[pos] - drow[neg];
    hardest_pos[static_cast<std::size_t>(a)] = pos;
    hardest_neg[static_cast<std::size_t>(a)] = neg;
    active[static_cast<std::size_t>(a)] = term > 0.0f ? 1 : 0;
    if (term > 0.0f) loss_sum += term;
  }
  const float value = static_cast<float>(loss_sum / n);

  const int in_id = features.id;
  auto backward = [=, dist = std::move(dist), hardest_pos = std::move(hardest_pos),
                   hardest_neg = std::move(hardest_neg),
                   active = std::move(active)](Graph& gg, int self) {
    const float gv = gg.node(self).grad[0] / static_cast<float>(n);
    const Tensor& xv = gg.node(in_id).value;
    Tensor& gi = gg.grad_buffer(in_id);
    auto add_pair = [&](int a, int b, float coef) {
      // coef * d||x_a - x_b|| / dx; zero subgradient at coincident points
      const float d = dist[static_cast<std::size_t>(a) * n + b];
      if (d <= 0.0f) return;
      const float* xa = xv.data() + static_cast<std::int64_t>(a) * dim;
      const float* xb = xv.data() + static_cast<std::int64_t>(b) * dim;
      float* ga = gi.data() + static_cast<std::int64_t>(a) * dim;
      float* gb = gi.data() + static_cast<std::int64_t>(b) * dim;
      const float scale = coef / d;
      for (int t = 0; t < dim; ++t) {
        const float u = (xa[t] - xb[t]) * scale;
        ga[t] += u;
        gb[t] -= u;
      }
    };
    for (int a = 0; a < n; ++a) {
      if (!active[static_cast<std::size_t>(a)]) continue;
      add_pair(a, hardest_pos[static_cast<std::size_t>(a)], gv);
      add_pair(a, hardest_neg[static_cast<std::size_t>(a)], -gv);
    }
  };
  return g.record("batch_hard_triplet", Tensor::scalar(value), {in_id}, backward);
}

struct LossParts {
  Var id;
  Var triplet_descriptor;
  Var triplet_auxiliary;
  std::optional<Var> camera;  // absent when view-specific learning is off
};

// L_ID + lambda1 * L1_triplet + lambda2 * L2_triplet + lambda3 * L_camera.
inline Var combined_loss(const LossParts& parts, const LossWeights& weights) {
  auto check_finite = [](const Var& v, const char* name) {
    if (!std::isfinite(v.value()[0])) {
      fail<DivergenceError>("combined_loss: non-finite part ", name, " = ",
                            v.value()[0]);
    }
  };
  check_finite(parts.id, "L_ID");
  check_finite(parts.triplet_descriptor, "L1_triplet");
  check_finite(parts.triplet_auxiliary, "L2_triplet");
  if (parts.camera) check_finite(*parts.camera, "L_camera");

  Var total = elementwise_add(
      parts.id, elementwise_add(scale(parts.triplet_descriptor, weights.lambda1),
                                scale(parts.triplet_auxiliary, weights.lambda2)));
  if (parts.camera) {
    total = elementwise_add(total, scale(*parts.camera, weights.lambda3));
  }
  return total;
}

}  // namespace vmrfa
