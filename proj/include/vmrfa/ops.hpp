#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "vmrfa/gemm.hpp"
#include "vmrfa/graph.hpp"

namespace vmrfa {

enum class PoolMode { avg, max, global_avg };
enum class BnMode { train, eval };

// Height/width pair for strides, windows and padding.
struct HW {
  int h = 1;
  int w = 1;
};

namespace detail {

inline void check_rank(const Tensor& t, int rank, const char* op, const char* role) {
  if (t.rank() != rank) {
    fail<DimensionError>(op, ": ", role, " must have rank ", rank, ", got ",
                         shape_str(t.shape()));
  }
}

// Floor-division output extent, the mainstream framework convention.
inline int conv_out_dim(int in, int pad, int kernel, int stride, const char* op,
                        const char* axis) {
  const int span = in + 2 * pad - kernel;
  if (span < 0) {
    fail<DimensionError>(op, ": axis ", axis, " with extent ", in, " is smaller than kernel ",
                         kernel, " under padding ", pad);
  }
  return span / stride + 1;
}

}  // namespace detail

// --- convolution -----------------------------------------------------------

// Cross-correlation (no kernel flip). input N x C x H x W, weight O x C x Kh x Kw.
inline Var conv2d(Var input, Var weight, std::optional<Var> bias, HW stride,
                  HW padding) {
  check_same_graph(input, weight, "conv2d");
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  detail::check_rank(x, 4, "conv2d", "input");
  detail::check_rank(w, 4, "conv2d", "weight");
  if (x.dim(1) != w.dim(1)) {
    fail<DimensionError>("conv2d: input channel axis 1 has ", x.dim(1),
                         " channels but weight channel axis 1 has ", w.dim(1));
  }
  if (stride.h <= 0 || stride.w <= 0 || padding.h < 0 || padding.w < 0) {
    fail<DimensionError>("conv2d: stride must be positive and padding non-negative");
  }
  const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  const int out_ch = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int out_h = detail::conv_out_dim(height, padding.h, kh, stride.h, "conv2d", "H");
  const int out_w = detail::conv_out_dim(width, padding.w, kw, stride.w, "conv2d", "W");
  if (bias) {
    check_same_graph(input, *bias, "conv2d");
    if (bias->value().rank() != 1 || bias->value().dim(0) != out_ch) {
      fail<DimensionError>("conv2d: bias must have shape [", out_ch, "], got ",
                           shape_str(bias->value().shape()));
    }
  }

  const std::int64_t kdim = static_cast<std::int64_t>(channels) * kh * kw;
  const std::int64_t plane = static_cast<std::int64_t>(out_h) * out_w;
  const std::int64_t in_plane = static_cast<std::int64_t>(channels) * height * width;

  Tensor out(Shape{batch, out_ch, out_h, out_w});
  std::vector<float> col(static_cast<std::size_t>(kdim * plane));
  for (int n = 0; n < batch; ++n) {
    detail::im2col(x.data() + n * in_plane, channels, height, width, kh, kw, stride.h,
                   stride.w, padding.h, padding.w, out_h, out_w, col.data());
    detail::matmul_nn(out.data() + static_cast<std::int64_t>(n) * out_ch * plane,
                      w.data(), col.data(), out_ch, static_cast<int>(plane),
                      static_cast<int>(kdim), false);
  }
  if (bias) {
    const float* b = bias->value().data();
    float* o = out.data();
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < out_ch; ++c) {
        const float bv = b[c];
        float* dst = o + (static_cast<std::int64_t>(n) * out_ch + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) dst[i] += bv;
      }
    }
  }

  const int in_id = input.id, w_id = weight.id;
  const int b_id = bias ? bias->id : -1;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& grad_out = gg.node(self).grad;
    const Tensor& xv = gg.node(in_id).value;
    const Tensor& wv = gg.node(w_id).value;
    const bool want_input = gg.node(in_id).needs_grad;
    const bool want_weight = gg.node(w_id).needs_grad;
    std::vector<float> col_buf(static_cast<std::size_t>(kdim * plane));
    std::vector<float> col_grad;
    if (want_input) col_grad.resize(static_cast<std::size_t>(kdim * plane));
    for (int n = 0; n < batch; ++n) {
      const float* go = grad_out.data() + static_cast<std::int64_t>(n) * out_ch * plane;
      if (want_weight || want_input) {
        detail::im2col(xv.data() + n * in_plane, channels, height, width, kh, kw,
                       stride.h, stride.w, padding.h, padding.w, out_h, out_w,
                       col_buf.data());
      }
      if (want_weight) {
        detail::matmul_nt(gg.grad_buffer(w_id).data(), go, col_buf.data(), out_ch,
                          static_cast<int>(kdim), static_cast<int>(plane), true);
      }
      if (want_input) {
        detail::matmul_tn(col_grad.data(), wv.data(), go, static_cast<int>(kdim),
                          static_cast<int>(plane), out_ch, false);
        detail::col2im(col_grad.data(), channels, height, width, kh, kw, stride.h,
                       stride.w, padding.h, padding.w, out_h, out_w,
                       gg.grad_buffer(in_id).data() + n * in_plane);
      }
      if (b_id >= 0 && gg.node(b_id).needs_grad) {
        float* gb = gg.grad_buffer(b_id).data();
        for (int c = 0; c < out_ch; ++c) {
          double s = 0.0;
          const float* row = go + static_cast<std::int64_t>(c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) s += row[i];
          gb[c] += static_cast<float>(s);
        }
      }
    }
  };

  std::vector<int> inputs{in_id, w_id};
  if (b_id >= 0) inputs.push_back(b_id);
  return g.record("conv2d", std::move(out), std::move(inputs), backward);
}

// --- pooling ----------------------------------------------------------------

inline Var pool2d(Var input, PoolMode mode, HW window = HW{}, HW stride = HW{}) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  detail::check_rank(x, 4, "pool2d", "input");
  const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);

  if (mode == PoolMode::global_avg) {
    const std::int64_t plane = static_cast<std::int64_t>(height) * width;
    Tensor out(Shape{batch, channels, 1, 1});
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const float* src = x.data() + (static_cast<std::int64_t>(n) * channels + c) * plane;
        double s = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) s += src[i];
        out.at(n, c, 0, 0) = static_cast<float>(s / static_cast<double>(plane));
      }
    }
    const int in_id = input.id;
    auto backward = [=](Graph& gg, int self) {
      const Tensor& go = gg.node(self).grad;
      Tensor& gi = gg.grad_buffer(in_id);
      const float inv = 1.0f / static_cast<float>(plane);
      for (int n = 0; n < batch; ++n) {
        for (int c = 0; c < channels; ++c) {
          const float v = go.at(n, c, 0, 0) * inv;
          float* dst = gi.data() + (static_cast<std::int64_t>(n) * channels + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) dst[i] += v;
        }
      }
    };
    return g.record("global_avg_pool", std::move(out), {in_id}, backward);
  }

  if (window.h <= 0 || window.w <= 0 || stride.h <= 0 || stride.w <= 0) {
    fail<DimensionError>("pool2d: window and stride must be positive");
  }
  if (window.h > height || window.w > width || (height - window.h) % stride.h != 0 ||
      (width - window.w) % stride.w != 0) {
    fail<DimensionError>("pool2d: window ", window.h, "x", window.w, " stride ",
                         stride.h, "x", stride.w, " does not tile input ", height,
                         "x", width, " evenly");
  }
  const int out_h = (height - window.h) / stride.h + 1;
  const int out_w = (width - window.w) / stride.w + 1;
  const std::int64_t in_plane = static_cast<std::int64_t>(height) * width;

  Tensor out(Shape{batch, channels, out_h, out_w});
  std::vector<std::int64_t> argmax;
  if (mode == PoolMode::max) argmax.resize(static_cast<std::size_t>(out.numel()));

  std::int64_t oi = 0;
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const float* src = x.data() + (static_cast<std::int64_t>(n) * channels + c) * in_plane;
      for (int ho = 0; ho < out_h; ++ho) {
        for (int wo = 0; wo < out_w; ++wo, ++oi) {
          const int h0 = ho * stride.h, w0 = wo * stride.w;
          if (mode == PoolMode::avg) {
            double s = 0.0;
            for (int i = 0; i < window.h; ++i) {
              for (int j = 0; j < window.w; ++j) s += src[(h0 + i) * width + (w0 + j)];
            }
            out[oi] = static_cast<float>(s / (window.h * window.w));
          } else {
            // first maximum in row-major scan order wins ties
            std::int64_t best = static_cast<std::int64_t>(h0) * width + w0;
            float best_v = src[best];
            for (int i = 0; i < window.h; ++i) {
              for (int j = 0; j < window.w; ++j) {
                const std::int64_t idx = static_cast<std::int64_t>(h0 + i) * width + (w0 + j);
                if (src[idx] > best_v) {
                  best_v = src[idx];
                  best = idx;
                }
              }
            }
            out[oi] = best_v;
            argmax[static_cast<std::size_t>(oi)] =
                (static_cast<std::int64_t>(n) * channels + c) * in_plane + best;
          }
        }
      }
    }
  }

  const int in_id = input.id;
  if (mode == PoolMode::avg) {
    auto backward = [=](Graph& gg, int self) {
      const Tensor& go = gg.node(self).grad;
      Tensor& gi = gg.grad_buffer(in_id);
      const float inv = 1.0f / static_cast<float>(window.h * window.w);
      std::int64_t k = 0;
      for (int n = 0; n < batch; ++n) {
        for (int c = 0; c < channels; ++c) {
          float* dst = gi.data() + (static_cast<std::int64_t>(n) * channels + c) * in_plane;
          for (int ho = 0; ho < out_h; ++ho) {
            for (int wo = 0; wo < out_w; ++wo, ++k) {
              const float v = go[k] * inv;
              for (int i = 0; i < window.h; ++i) {
                for (int j = 0; j < window.w; ++j) {
                  dst[(ho * stride.h + i) * width + (wo * stride.w + j)] += v;
                }
              }
            }
          }
        }
      }
    };
    return g.record("avg_pool", std::move(out), {in_id}, backward);
  }

  auto backward = [=, indices = std::move(argmax)](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t k = 0; k < go.numel(); ++k) {
      gi[indices[static_cast<std::size_t>(k)]] += go[k];
    }
  };
  return g.record("max_pool", std::move(out), {in_id}, backward);
}

inline Var global_avg_pool(Var input) { return pool2d(input, PoolMode::global_avg); }

// --- affine -----------------------------------------------------------------

// input N x D, weight M x D, bias M; output = input * weight^T + bias.
inline Var affine(Var input, Var weight, Var bias) {
  check_same_graph(input, weight, "affine");
  check_same_graph(input, bias, "affine");
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  detail::check_rank(x, 2, "affine", "input");
  detail::check_rank(w, 2, "affine", "weight");
  if (x.dim(1) != w.dim(1)) {
    fail<DimensionError>("affine: input inner axis has ", x.dim(1),
                         " but weight inner axis has ", w.dim(1));
  }
  const int rows = x.dim(0), in_dim = x.dim(1), out_dim = w.dim(0);
  if (bias.value().rank() != 1 || bias.value().dim(0) != out_dim) {
    fail<DimensionError>("affine: bias must have shape [", out_dim, "], got ",
                         shape_str(bias.value().shape()));
  }

  Tensor out(Shape{rows, out_dim});
  detail::matmul_nt(out.data(), x.data(), w.data(), rows, out_dim, in_dim, false);
  const float* b = bias.value().data();
  for (int n = 0; n < rows; ++n) {
    float* row = out.data() + static_cast<std::int64_t>(n) * out_dim;
    for (int m = 0; m < out_dim; ++m) row[m] += b[m];
  }

  const int in_id = input.id, w_id = weight.id, b_id = bias.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    if (gg.node(in_id).needs_grad) {
      detail::matmul_nn(gg.grad_buffer(in_id).data(), go.data(),
                        gg.node(w_id).value.data(), rows, in_dim, out_dim, true);
    }
    if (gg.node(w_id).needs_grad) {
      detail::matmul_tn(gg.grad_buffer(w_id).data(), go.data(),
                        gg.node(in_id).value.data(), out_dim, in_dim, rows, true);
    }
    if (gg.node(b_id).needs_grad) {
      float* gb = gg.grad_buffer(b_id).data();
      for (int m = 0; m < out_dim; ++m) {
        double s = 0.0;
        for (int n = 0; n < rows; ++n) s += go[static_cast<std::int64_t>(n) * out_dim + m];
        gb[m] += static_cast<float>(s);
      }
    }
  };
  return g.record("affine", std::move(out), {in_id, w_id, b_id}, backward);
}

// --- batch normalization ----------------------------------------------------

// Per-channel normalization over axis 1 of an N x C x ... tensor. Train mode
// uses batch statistics (biased variance) and folds them into the running
// estimates; eval mode uses the running estimates.
inline Var batch_norm(Var input, Var gamma, Var beta, Tensor& running_mean,
                      Tensor& running_var, BnMode mode, float momentum = 0.1f,
                      float eps = 1e-5f) {
  check_same_graph(input, gamma, "batch_norm");
  check_same_graph(input, beta, "batch_norm");
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  if (x.rank() < 2) {
    fail<DimensionError>("batch_norm: input rank must be at least 2, got ",
                         shape_str(x.shape()));
  }
  const int batch = x.dim(0), channels = x.dim(1);
  std::int64_t spatial = 1;
  for (int i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
  const std::int64_t per_channel = static_cast<std::int64_t>(batch) * spatial;
  if (gamma.value().numel() != channels || beta.value().numel() != channels ||
      running_mean.numel() != channels || running_var.numel() != channels) {
    fail<DimensionError>("batch_norm: gamma/beta/running stats must have ", channels,
                         " elements");
  }
  if (mode == BnMode::train && per_channel <= 1) {
    fail<ContractError>(
        "batch_norm: degenerate batch, need more than one element per channel in "
        "train mode");
  }

  std::vector<float> mean(static_cast<std::size_t>(channels));
  std::vector<float> invstd(static_cast<std::size_t>(channels));
  if (mode == BnMode::train) {
    for (int c = 0; c < channels; ++c) {
      double s = 0.0, s2 = 0.0;
      for (int n = 0; n < batch; ++n) {
        const float* src = x.data() + (static_cast<std::int64_t>(n) * channels + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          s += src[i];
          s2 += static_cast<double>(src[i]) * src[i];
        }
      }
      const double m = s / static_cast<double>(per_channel);
      const double var = std::max(0.0, s2 / static_cast<double>(per_channel) - m * m);
      mean[c] = static_cast<float>(m);
      invstd[c] = static_cast<float>(1.0 / std::sqrt(var + eps));
      running_mean[c] = (1.0f - momentum) * running_mean[c] + momentum * mean[c];
      running_var[c] =
          (1.0f - momentum) * running_var[c] + momentum * static_cast<float>(var);
    }
  } else {
    for (int c = 0; c < channels; ++c) {
      mean[c] = running_mean[c];
      invstd[c] = 1.0f / std::sqrt(running_var[c] + eps);
    }
  }

  Tensor out(x.shape());
  const float* gm = gamma.value().data();
  const float* bt = beta.value().data();
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * channels + c) * spatial;
      const float mu = mean[static_cast<std::size_t>(c)];
      const float is = invstd[static_cast<std::size_t>(c)];
      const float gmc = gm[c], btc = bt[c];
      const float* src = x.data() + base;
      float* dst = out.data() + base;
      for (std::int64_t i = 0; i < spatial; ++i) {
        dst[i] = (src[i] - mu) * is * gmc + btc;
      }
    }
  }

  const int in_id = input.id, gm_id = gamma.id, bt_id = beta.id;
  const bool train = (mode == BnMode::train);
  auto backward = [=, mean = std::move(mean), invstd = std::move(invstd)](Graph& gg,
                                                                          int self) {
    const Tensor& go = gg.node(self).grad;
    const Tensor& xv = gg.node(in_id).value;
    const float* gmv = gg.node(gm_id).value.data();
    for (int c = 0; c < channels; ++c) {
      const float mu = mean[static_cast<std::size_t>(c)];
      const float is = invstd[static_cast<std::size_t>(c)];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int n = 0; n < batch; ++n) {
        const std::int64_t base = (static_cast<std::int64_t>(n) * channels + c) * spatial;
        const float* gp = go.data() + base;
        const float* xp = xv.data() + base;
        for (std::int64_t i = 0; i < spatial; ++i) {
          sum_g += gp[i];
          sum_gx += static_cast<double>(gp[i]) * ((xp[i] - mu) * is);
        }
      }
      if (gg.node(bt_id).needs_grad) {
        gg.grad_buffer(bt_id)[c] += static_cast<float>(sum_g);
      }
      if (gg.node(gm_id).needs_grad) {
        gg.grad_buffer(gm_id)[c] += static_cast<float>(sum_gx);
      }
      if (gg.node(in_id).needs_grad) {
        Tensor& gi = gg.grad_buffer(in_id);
        const float gmc = gmv[c];
        const float mg = train ? static_cast<float>(sum_g / static_cast<double>(per_channel)) : 0.0f;
        const float mgx = train ? static_cast<float>(sum_gx / static_cast<double>(per_channel)) : 0.0f;
        for (int n = 0; n < batch; ++n) {
          const std::int64_t base = (static_cast<std::int64_t>(n) * channels + c) * spatial;
          const float* gp = go.data() + base;
          const float* xp = xv.data() + base;
          float* dst = gi.data() + base;
          for (std::int64_t i = 0; i < spatial; ++i) {
            const float xhat = (xp[i] - mu) * is;
            dst[i] += gmc * is * (gp[i] - mg - xhat * mgx);
          }
        }
      }
    }
  };
  return g.record(train ? "batch_norm_train" : "batch_norm_eval", std::move(out),
                  {in_id, gm_id, bt_id}, backward);
}

// --- pointwise and structural ops -------------------------------------------

inline Var relu(Var input) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    const Tensor& xv = gg.node(in_id).value;
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t i = 0; i < go.numel(); ++i) {
      if (xv[i] > 0.0f) gi[i] += go[i];
    }
  };
  return g.record("relu", std::move(out), {in_id}, backward);
}

inline Var tanh_op(Var input) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    const Tensor& y = gg.node(self).value;
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t i = 0; i < go.numel(); ++i) gi[i] += go[i] * (1.0f - y[i] * y[i]);
  };
  return g.record("tanh", std::move(out), {in_id}, backward);
}

inline Var elementwise_mul(Var a, Var b) {
  check_same_graph(a, b, "elementwise_mul");
  Graph& g = *a.graph;
  check_same_shape(a.value(), b.value(), "elementwise_mul");
  Tensor out(a.value().shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  const int a_id = a.id, b_id = b.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    const Tensor& avv = gg.node(a_id).value;
    const Tensor& bvv = gg.node(b_id).value;
    if (gg.node(a_id).needs_grad) {
      Tensor& ga = gg.grad_buffer(a_id);
      for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * bvv[i];
    }
    if (gg.node(b_id).needs_grad) {
      Tensor& gb = gg.grad_buffer(b_id);
      for (std::int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * avv[i];
    }
  };
  return g.record("elementwise_mul", std::move(out), {a_id, b_id}, backward);
}

inline Var elementwise_add(Var a, Var b) {
  check_same_graph(a, b, "elementwise_add");
  Graph& g = *a.graph;
  check_same_shape(a.value(), b.value(), "elementwise_add");
  Tensor out(a.value().shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  const int a_id = a.id, b_id = b.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    if (gg.node(a_id).needs_grad) gg.accumulate_grad(a_id, go);
    if (gg.node(b_id).needs_grad) gg.accumulate_grad(b_id, go);
  };
  return g.record("elementwise_add", std::move(out), {a_id, b_id}, backward);
}

inline Var add_scalar(Var input, float c) {
  Graph& g = *input.graph;
  Tensor out(input.value().shape());
  const Tensor& x = input.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x[i] + c;
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    gg.accumulate_grad(in_id, gg.node(self).grad);
  };
  return g.record("add_scalar", std::move(out), {in_id}, backward);
}

inline Var scale(Var input, float c) {
  Graph& g = *input.graph;
  Tensor out(input.value().shape());
  const Tensor& x = input.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x[i] * c;
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t i = 0; i < go.numel(); ++i) gi[i] += go[i] * c;
  };
  return g.record("scale", std::move(out), {in_id}, backward);
}

// Concatenation along axis 1. Inputs must agree on every other axis.
inline Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) fail<ContractError>("concat_channels: no inputs");
  Graph& g = *parts[0].graph;
  const Tensor& first = parts[0].value();
  if (first.rank() < 2) {
    fail<DimensionError>("concat_channels: inputs must have rank >= 2");
  }
  const int lead = first.dim(0);
  std::int64_t inner = 1;
  for (int i = 2; i < first.rank(); ++i) inner *= first.dim(i);
  int total_ch = 0;
  for (const Var& p : parts) {
    check_same_graph(parts[0], p, "concat_channels");
    const Tensor& t = p.value();
    std::int64_t p_inner = 1;
    for (int i = 2; i < t.rank(); ++i) p_inner *= t.dim(i);
    if (t.rank() != first.rank() || t.dim(0) != lead || p_inner != inner) {
      fail<DimensionError>("concat_channels: incompatible shapes ",
                           shape_str(first.shape()), " vs ", shape_str(t.shape()));
    }
    total_ch += t.dim(1);
  }
  Shape out_shape = first.shape();
  out_shape[1] = total_ch;
  Tensor out(out_shape);
  std::int64_t ch_offset = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    const std::int64_t block = static_cast<std::int64_t>(t.dim(1)) * inner;
    for (int n = 0; n < lead; ++n) {
      std::copy(t.data() + n * block, t.data() + (n + 1) * block,
                out.data() + (static_cast<std::int64_t>(n) * total_ch + ch_offset) * inner);
    }
    ch_offset += t.dim(1);
  }

  std::vector<int> ids;
  std::vector<int> chans;
  for (const Var& p : parts) {
    ids.push_back(p.id);
    chans.push_back(p.value().dim(1));
  }
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::int64_t block = static_cast<std::int64_t>(chans[k]) * inner;
      if (gg.node(ids[k]).needs_grad) {
        Tensor& gi = gg.grad_buffer(ids[k]);
        for (int n = 0; n < lead; ++n) {
          const float* src =
              go.data() + (static_cast<std::int64_t>(n) * total_ch + offset) * inner;
          float* dst = gi.data() + n * block;
          for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      offset += chans[k];
    }
  };
  return g.record("concat_channels", std::move(out), std::move(ids), backward);
}

// L2 normalization along the last axis; divides by (norm + 1e-12).
inline Var l2_normalize(Var input) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  const int last = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / last;
  constexpr double kEps = 1e-12;
  Tensor out(x.shape());
  std::vector<float> norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* src = x.data() + r * last;
    const double n2 = detail::dot8(src, src, last);
    const double norm = std::sqrt(n2);
    norms[static_cast<std::size_t>(r)] = static_cast<float>(norm);
    const float inv = static_cast<float>(1.0 / (norm + kEps));
    float* dst = out.data() + r * last;
    for (int i = 0; i < last; ++i) dst[i] = src[i] * inv;
  }
  const int in_id = input.id;
  auto backward = [=, norms = std::move(norms)](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    const Tensor& xv = gg.node(in_id).value;
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* gp = go.data() + r * last;
      const float* xp = xv.data() + r * last;
      float* dst = gi.data() + r * last;
      const double norm = norms[static_cast<std::size_t>(r)];
      const double s = norm + kEps;
      const double inv_s = 1.0 / s;
      double gx = 0.0;
      for (int i = 0; i < last; ++i) gx += static_cast<double>(gp[i]) * xp[i];
      const double coef = norm > 0.0 ? gx / (s * s * norm) : 0.0;
      for (int i = 0; i < last; ++i) {
        dst[i] += static_cast<float>(gp[i] * inv_s - xp[i] * coef);
      }
    }
  };
  return g.record("l2_normalize", std::move(out), {in_id}, backward);
}

// Log-softmax along the last axis, stabilized by max subtraction.
inline Var log_softmax(Var input) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  const int last = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / last;
  Tensor out(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* src = x.data() + r * last;
    float mx = src[0];
    for (int i = 1; i < last; ++i) mx = std::max(mx, src[i]);
    double sum = 0.0;
    for (int i = 0; i < last; ++i) sum += std::exp(static_cast<double>(src[i]) - mx);
    const float log_sum = static_cast<float>(std::log(sum));
    float* dst = out.data() + r * last;
    for (int i = 0; i < last; ++i) dst[i] = (src[i] - mx) - log_sum;
  }
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    const Tensor& y = gg.node(self).value;
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* gp = go.data() + r * last;
      const float* yp = y.data() + r * last;
      float* dst = gi.data() + r * last;
      double gsum = 0.0;
      for (int i = 0; i < last; ++i) gsum += gp[i];
      for (int i = 0; i < last; ++i) {
        dst[i] += static_cast<float>(gp[i] - std::exp(static_cast<double>(yp[i])) * gsum);
      }
    }
  };
  return g.record("log_softmax", std::move(out), {in_id}, backward);
}

// Height slice [h0, h1) of an N x C x H x W tensor.
inline Var slice_height(Var input, int h0, int h1) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  detail::check_rank(x, 4, "slice_height", "input");
  const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (h0 < 0 || h1 > height || h0 >= h1) {
    fail<DimensionError>("slice_height: range [", h0, ", ", h1,
                         ") invalid for height ", height);
  }
  const int out_h = h1 - h0;
  Tensor out(Shape{batch, channels, out_h, width});
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const float* src =
          x.data() + ((static_cast<std::int64_t>(n) * channels + c) * height + h0) * width;
      float* dst =
          out.data() + (static_cast<std::int64_t>(n) * channels + c) * out_h * width;
      std::copy(src, src + static_cast<std::int64_t>(out_h) * width, dst);
    }
  }
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    Tensor& gi = gg.grad_buffer(in_id);
    for (int n = 0; n < batch; ++n) {
      for (int c = 0; c < channels; ++c) {
        const float* src =
            go.data() + (static_cast<std::int64_t>(n) * channels + c) * out_h * width;
        float* dst =
            gi.data() + ((static_cast<std::int64_t>(n) * channels + c) * height + h0) * width;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(out_h) * width; ++i) {
          dst[i] += src[i];
        }
      }
    }
  };
  return g.record("slice_height", std::move(out), {in_id}, backward);
}

inline Var reshape(Var input, Shape new_shape) {
  Graph& g = *input.graph;
  Tensor out = input.value().reshaped(new_shape);
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    const Tensor& go = gg.node(self).grad;
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t i = 0; i < go.numel(); ++i) gi[i] += go[i];
  };
  return g.record("reshape", std::move(out), {in_id}, backward);
}

// N x C x 1 x 1 -> N x C convenience used after global pooling.
inline Var flatten_pooled(Var input) {
  const Tensor& x = input.value();
  return reshape(input, Shape{x.dim(0), x.dim(1)});
}

inline Var sum_all(Var input) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i];
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    const float gv = gg.node(self).grad[0];
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t i = 0; i < gi.numel(); ++i) gi[i] += gv;
  };
  return g.record("sum_all", Tensor::scalar(static_cast<float>(s)), {in_id}, backward);
}

inline Var mean_all(Var input) {
  Graph& g = *input.graph;
  const Tensor& x = input.value();
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i];
  const float inv = 1.0f / static_cast<float>(x.numel());
  const int in_id = input.id;
  auto backward = [=](Graph& gg, int self) {
    const float gv = gg.node(self).grad[0] * inv;
    Tensor& gi = gg.grad_buffer(in_id);
    for (std::int64_t i = 0; i < gi.numel(); ++i) gi[i] += gv;
  };
  return g.record("mean_all", Tensor::scalar(static_cast<float>(s) * inv), {in_id},
                  backward);
}

}  // namespace vmrfa
