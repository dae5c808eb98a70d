#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vmrfa/losses.hpp"
#include "vmrfa/network.hpp"
#include "vmrfa/ops.hpp"
#include "vmrfa/trainer.hpp"

namespace vmrfa {

struct FdOptions {
  double step = 1e-2;
  // Relative error is |a - n| / max(|a|, |n|, denom_floor). Below the floor
  // the comparison turns absolute; tol * floor sits just above the float32
  // finite-difference noise, which bounds what the oracle can resolve.
  double denom_floor = 0.2;
  int max_coords_per_tensor = 0;  // 0 checks every coordinate
  std::uint64_t seed = 17;
};

struct FdReport {
  double max_rel = 0.0;
  int coords_checked = 0;

  void merge(double analytic, double numeric, double floor) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
    max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
    ++coords_checked;
  }
};

// Central finite differences of a scalar-valued graph against the analytic
// gradients of its leaf inputs. `build` must construct the same scalar from
// the given leaves every time it is called.
inline FdReport check_op_gradients(
    const std::vector<Tensor>& inputs,
    const std::function<Var(Graph&, const std::vector<Var>&)>& build,
    const FdOptions& opts = {}) {
  // analytic pass
  std::vector<Tensor> grads;
  {
    Graph g;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(g.value(t, /*needs_grad=*/true));
    Var root = build(g, vars);
    g.backward(root);
    for (const Var& v : vars) {
      grads.push_back(g.node(v.id).grad.empty() ? Tensor(v.value().shape())
                                                : g.node(v.id).grad);
    }
  }

  auto eval = [&](const std::vector<Tensor>& points) {
    Graph g(/*grad_enabled=*/false);
    std::vector<Var> vars;
    vars.reserve(points.size());
    for (const Tensor& t : points) vars.push_back(g.value(t));
    return static_cast<double>(build(g, vars).value()[0]);
  };

  Rng rng(opts.seed);
  FdReport report;
  std::vector<Tensor> work = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const std::int64_t n = inputs[t].numel();
    std::vector<std::int64_t> coords;
    if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
      for (int c = 0; c < opts.max_coords_per_tensor; ++c) {
        coords.push_back(static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n))));
      }
    } else {
      for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
    }
    for (std::int64_t i : coords) {
      const float original = work[t][i];
      work[t][i] = original + static_cast<float>(opts.step);
      const double up = eval(work);
      work[t][i] = original - static_cast<float>(opts.step);
      const double down = eval(work);
      work[t][i] = original;
      const double numeric = (up - down) / (2.0 * opts.step);
      report.merge(grads[t][i], numeric, opts.denom_floor);
    }
  }
  return report;
}

// Finite differences over live Parameters. `loss_value` evaluates the scalar
// at the current parameter values; `compute_grads` must zero and repopulate
// every parameter gradient. Each tensor is checked along one random unit
// direction plus a few random coordinates.
inline FdReport check_parameter_gradients(const std::vector<Parameter*>& params,
                                          const std::function<double()>& loss_value,
                                          const std::function<void()>& compute_grads,
                                          const FdOptions& opts = {}) {
  compute_grads();
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Parameter* p : params) grads.push_back(p->grad);

  Rng rng(opts.seed);
  FdReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& value = params[t]->value;
    const std::int64_t n = value.numel();

    Tensor direction(value.shape());
    direction.fill_normal(rng, 0.0f, 1.0f);
    double dnorm = std::sqrt(detail::dot8(direction.data(), direction.data(), n));
    if (dnorm == 0.0) dnorm = 1.0;
    double analytic_dir = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      direction[i] = static_cast<float>(direction[i] / dnorm);
      analytic_dir += static_cast<double>(grads[t][i]) * direction[i];
    }
    const Tensor saved = value;
    for (std::int64_t i = 0; i < n; ++i) {
      value[i] = saved[i] + static_cast<float>(opts.step) * direction[i];
    }
    const double up = loss_value();
    for (std::int64_t i = 0; i < n; ++i) {
      value[i] = saved[i] - static_cast<float>(opts.step) * direction[i];
    }
    const double down = loss_value();
    value = saved;
    report.merge(analytic_dir, (up - down) / (2.0 * opts.step), opts.denom_floor);
  }
  return report;
}

// --- the reusable suite -------------------------------------------------------

struct OpGradReport {
  std::string op;
  double max_rel = 0.0;
  int instances = 0;
  int coords = 0;
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, float stddev = 1.0f) {
  Tensor t(std::move(shape));
  t.fill_normal(rng, 0.0f, stddev);
  return t;
}

// Random readout weights turn a tensor-valued op into a scalar without
// piling up the float32 rounding a plain sum accumulates.
inline std::function<Var(Graph&, Var)> mixer_readout(const Shape& shape, Rng& rng) {
  Tensor mixer = random_tensor(shape, rng);
  return [mixer](Graph& g, Var v) {
    return sum_all(elementwise_mul(v, g.value(mixer)));
  };
}

}  // namespace detail

inline Var detail_nll(Var logits, const std::vector<int>& labels) {
  return detail::nll_mean(log_softmax(logits), labels);
}
inline Var detail_smoothed_nll(Var logits, const std::vector<int>& labels) {
  return detail::smoothed_nll_mean(log_softmax(logits), labels, 0.1f);
}

// Finite-difference sweep over every primitive op, `instances` random small
// cases each, all coordinates checked.
inline std::vector<OpGradReport> gradcheck_all_ops(std::uint64_t seed, int instances) {
  Rng rng(seed);
  std::vector<OpGradReport> reports;

  auto run = [&](const char* name, auto&& make_case, FdOptions opts = {}) {
    OpGradReport rep;
    rep.op = name;
    for (int i = 0; i < instances; ++i) {
      auto [inputs, build] = make_case();
      const FdReport fd = check_op_gradients(inputs, build, opts);
      rep.max_rel = std::max(rep.max_rel, fd.max_rel);
      rep.coords += fd.coords_checked;
      ++rep.instances;
    }
    reports.push_back(std::move(rep));
  };

  auto with_step = [](double step) {
    FdOptions opts;
    opts.step = step;
    return opts;
  };

  using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;
  using Case = std::pair<std::vector<Tensor>, Builder>;

  run("conv2d", [&]() -> Case {
    const int n = 1 + static_cast<int>(rng.uniform_int(2));
    const int c = 1 + static_cast<int>(rng.uniform_int(2));
    const int o = 1 + static_cast<int>(rng.uniform_int(3));
    const int k = 1 + 2 * static_cast<int>(rng.uniform_int(2));  // 1 or 3
    const int h = k + static_cast<int>(rng.uniform_int(3));
    const int w = k + static_cast<int>(rng.uniform_int(3));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int pad = static_cast<int>(rng.uniform_int(2));
    std::vector<Tensor> inputs{detail::random_tensor({n, c, h, w}, rng),
                               detail::random_tensor({o, c, k, k}, rng, 0.6f),
                               detail::random_tensor({o}, rng)};
    const Shape out_shape{n, o, (h + 2 * pad - k) / stride + 1,
                          (w + 2 * pad - k) / stride + 1};
    auto readout = detail::mixer_readout(out_shape, rng);
    Builder build = [=](Graph& g, const std::vector<Var>& v) {
      return readout(g, conv2d(v[0], v[1], v[2], HW{stride, stride}, HW{pad, pad}));
    };
    return {std::move(inputs), std::move(build)};
  }, with_step(4e-2));  // linear in each argument; a large step only averages rounding

  run("avg_pool", [&]() -> Case {
    const int n = 1 + static_cast<int>(rng.uniform_int(2));
    const int c = 1 + static_cast<int>(rng.uniform_int(2));
    const int win = 1 + static_cast<int>(rng.uniform_int(3));
    const int tiles_h = 1 + static_cast<int>(rng.uniform_int(3));
    const int tiles_w = 1 + static_cast<int>(rng.uniform_int(2));
    const Shape in_shape{n, c, win * tiles_h, win * tiles_w};
    const Shape out_shape{n, c, tiles_h, tiles_w};
    std::vector<Tensor> inputs{detail::random_tensor(in_shape, rng)};
    auto readout = detail::mixer_readout(out_shape, rng);
    Builder build = [=](Graph& g, const std::vector<Var>& v) {
      return readout(g, pool2d(v[0], PoolMode::avg, HW{win, win}, HW{win, win}));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("max_pool", [&]() -> Case {
    const int n = 1 + static_cast<int>(rng.uniform_int(2));
    const int c = 1 + static_cast<int>(rng.uniform_int(2));
    const int win = 2;
    const int tiles_h = 1 + static_cast<int>(rng.uniform_int(3));
    const int tiles_w = 1 + static_cast<int>(rng.uniform_int(2));
    // separate each window's entries by rank so the argmax is stable within
    // the finite-difference step
    const int height = win * tiles_h, width = win * tiles_w;
    Tensor x(Shape{n, c, height, width});
    x.fill_normal(rng, 0.0f, 1.0f);
    for (int img = 0; img < n * c; ++img) {
      float* plane = x.data() + static_cast<std::int64_t>(img) * height * width;
      for (int th = 0; th < tiles_h; ++th) {
        for (int tw = 0; tw < tiles_w; ++tw) {
          float* cell[4] = {&plane[(2 * th) * width + 2 * tw],
                            &plane[(2 * th) * width + 2 * tw + 1],
                            &plane[(2 * th + 1) * width + 2 * tw],
                            &plane[(2 * th + 1) * width + 2 * tw + 1]};
          int rank[4];
          for (int a = 0; a < 4; ++a) {
            rank[a] = 0;
            for (int b = 0; b < 4; ++b) {
              if (*cell[b] < *cell[a] || (*cell[b] == *cell[a] && b < a)) ++rank[a];
            }
          }
          for (int a = 0; a < 4; ++a) {
            *cell[a] += 0.15f * static_cast<float>(rank[a]);
          }
        }
      }
    }
    const Shape out_shape{n, c, tiles_h, tiles_w};
    std::vector<Tensor> inputs{x};
    auto readout = detail::mixer_readout(out_shape, rng);
    Builder build = [=](Graph& g, const std::vector<Var>& v) {
      return readout(g, pool2d(v[0], PoolMode::max, HW{win, win}, HW{win, win}));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("global_avg_pool", [&]() -> Case {
    const int n = 1 + static_cast<int>(rng.uniform_int(2));
    const int c = 1 + static_cast<int>(rng.uniform_int(3));
    std::vector<Tensor> inputs{detail::random_tensor(
        {n, c, 1 + static_cast<int>(rng.uniform_int(4)),
         1 + static_cast<int>(rng.uniform_int(4))},
        rng)};
    auto readout = detail::mixer_readout(Shape{n, c, 1, 1}, rng);
    Builder build = [=](Graph& g, const std::vector<Var>& v) {
      return readout(g, global_avg_pool(v[0]));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("affine", [&]() -> Case {
    const int n = 1 + static_cast<int>(rng.uniform_int(3));
    const int d = 1 + static_cast<int>(rng.uniform_int(5));
    const int m = 1 + static_cast<int>(rng.uniform_int(4));
    std::vector<Tensor> inputs{detail::random_tensor({n, d}, rng),
                               detail::random_tensor({m, d}, rng),
                               detail::random_tensor({m}, rng)};
    Builder build = [](Graph&, const std::vector<Var>& v) {
      return sum_all(affine(v[0], v[1], v[2]));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("batch_norm", [&]() -> Case {
    const int n = 4 + static_cast<int>(rng.uniform_int(3));
    const int c = 1 + static_cast<int>(rng.uniform_int(3));
    const int h = 1 + static_cast<int>(rng.uniform_int(2));
    const int w = 1 + static_cast<int>(rng.uniform_int(2));
    // tiny batch variances make the curvature of 1/sigma too sharp for the step
    Tensor x(Shape{n, c, h, w});
    const std::int64_t spatial = static_cast<std::int64_t>(h) * w;
    for (int attempt = 0; attempt < 100; ++attempt) {
      x.fill_normal(rng, 0.0f, 1.0f);
      bool ok = true;
      for (int ch = 0; ch < c && ok; ++ch) {
        double s = 0.0, s2 = 0.0;
        for (int b = 0; b < n; ++b) {
          const float* src = x.data() + (static_cast<std::int64_t>(b) * c + ch) * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) {
            s += src[i];
            s2 += static_cast<double>(src[i]) * src[i];
          }
        }
        const double m = s / (n * spatial);
        if (s2 / (n * spatial) - m * m < 0.3) ok = false;
      }
      if (ok) break;
    }
    std::vector<Tensor> inputs{x, detail::random_tensor({c}, rng, 0.5f),
                               detail::random_tensor({c}, rng, 0.5f)};
    auto readout = detail::mixer_readout(Shape{n, c, h, w}, rng);
    Builder build = [readout](Graph& g, const std::vector<Var>& v) {
      Tensor rm(Shape{v[1].value().dim(0)}, 0.0f);
      Tensor rv(Shape{v[1].value().dim(0)}, 1.0f);
      return readout(g, batch_norm(v[0], v[1], v[2], rm, rv, BnMode::train));
    };
    return {std::move(inputs), std::move(build)};
  }, with_step(5e-3));

  run("relu", [&]() -> Case {
    std::vector<Tensor> inputs{detail::random_tensor(
        {2 + static_cast<int>(rng.uniform_int(3)), 3 + static_cast<int>(rng.uniform_int(4))}, rng)};
    // keep values away from the kink
    for (std::int64_t i = 0; i < inputs[0].numel(); ++i) {
      if (std::fabs(inputs[0][i]) < 0.1f) inputs[0][i] += 0.3f;
    }
    auto readout = detail::mixer_readout(inputs[0].shape(), rng);
    Builder build = [readout](Graph& g, const std::vector<Var>& v) {
      return readout(g, relu(v[0]));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("tanh", [&]() -> Case {
    std::vector<Tensor> inputs{detail::random_tensor(
        {2 + static_cast<int>(rng.uniform_int(3)), 3 + static_cast<int>(rng.uniform_int(4))}, rng)};
    auto readout = detail::mixer_readout(inputs[0].shape(), rng);
    Builder build = [readout](Graph& g, const std::vector<Var>& v) {
      return readout(g, tanh_op(v[0]));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("elementwise_mul", [&]() -> Case {
    const Shape shape{2 + static_cast<int>(rng.uniform_int(3)),
                      2 + static_cast<int>(rng.uniform_int(4))};
    std::vector<Tensor> inputs{detail::random_tensor(shape, rng),
                               detail::random_tensor(shape, rng)};
    Builder build = [](Graph&, const std::vector<Var>& v) {
      return sum_all(elementwise_mul(v[0], v[1]));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("elementwise_add", [&]() -> Case {
    const Shape shape{2 + static_cast<int>(rng.uniform_int(3)),
                      2 + static_cast<int>(rng.uniform_int(4))};
    std::vector<Tensor> inputs{detail::random_tensor(shape, rng),
                               detail::random_tensor(shape, rng)};
    auto readout = detail::mixer_readout(shape, rng);
    Builder build = [readout](Graph& g, const std::vector<Var>& v) {
      return readout(g, elementwise_add(v[0], v[1]));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("concat_channels", [&]() -> Case {
    const int n = 1 + static_cast<int>(rng.uniform_int(2));
    const int h = 1 + static_cast<int>(rng.uniform_int(3));
    const int w = 1 + static_cast<int>(rng.uniform_int(3));
    const int c1 = 1 + static_cast<int>(rng.uniform_int(3));
    const int c2 = 1 + static_cast<int>(rng.uniform_int(3));
    std::vector<Tensor> inputs{detail::random_tensor({n, c1, h, w}, rng),
                               detail::random_tensor({n, c2, h, w}, rng)};
    auto readout = detail::mixer_readout(Shape{n, c1 + c2, h, w}, rng);
    Builder build = [readout](Graph& g, const std::vector<Var>& v) {
      return readout(g, concat_channels({v[0], v[1]}));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("l2_normalize", [&]() -> Case {
    const Shape shape{2 + static_cast<int>(rng.uniform_int(3)),
                      3 + static_cast<int>(rng.uniform_int(5))};
    // larger norms keep the curvature of x / |x| mild relative to the step
    std::vector<Tensor> inputs{detail::random_tensor(shape, rng, 2.5f)};
    auto readout = detail::mixer_readout(shape, rng);
    Builder build = [readout](Graph& g, const std::vector<Var>& v) {
      return readout(g, l2_normalize(v[0]));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("log_softmax", [&]() -> Case {
    const Shape shape{2 + static_cast<int>(rng.uniform_int(3)),
                      3 + static_cast<int>(rng.uniform_int(5))};
    std::vector<Tensor> inputs{detail::random_tensor(shape, rng)};
    auto readout = detail::mixer_readout(shape, rng);
    Builder build = [readout](Graph& g, const std::vector<Var>& v) {
      return readout(g, log_softmax(v[0]));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("slice_height", [&]() -> Case {
    const int n = 1 + static_cast<int>(rng.uniform_int(2));
    const int c = 1 + static_cast<int>(rng.uniform_int(3));
    const int h = 4 + static_cast<int>(rng.uniform_int(4));
    const int w = 2 + static_cast<int>(rng.uniform_int(3));
    const int h0 = static_cast<int>(rng.uniform_int(2));
    const int h1 = h0 + 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - h0 - 1)));
    std::vector<Tensor> inputs{detail::random_tensor({n, c, h, w}, rng)};
    auto readout = detail::mixer_readout(Shape{n, c, h1 - h0, w}, rng);
    Builder build = [=](Graph& g, const std::vector<Var>& v) {
      return readout(g, slice_height(v[0], h0, h1));
    };
    return {std::move(inputs), std::move(build)};
  });

  run("batch_hard_triplet", [&]() -> Case {
    const int p = 2 + static_cast<int>(rng.uniform_int(2));
    const int k = 2 + static_cast<int>(rng.uniform_int(2));
    const int d = 3 + static_cast<int>(rng.uniform_int(4));
    std::vector<int> labels;
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < k; ++j) labels.push_back(i);
    }
    const TripletConfig cfg{0.3f, p, k};
    // resample until mining choices and hinge states are stable within the step
    Tensor features(Shape{p * k, d});
    for (int attempt = 0; attempt < 200; ++attempt) {
      features.fill_normal(rng, 0.0f, 1.5f);
      const int n = p * k;
      std::vector<float> dist(static_cast<std::size_t>(n) * n);
      bool ok = true;
      for (int i = 0; i < n && ok; ++i) {
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int t = 0; t < d; ++t) {
            s += std::pow(static_cast<double>(features.at(i, t)) - features.at(j, t), 2);
          }
          dist[static_cast<std::size_t>(i) * n + j] = static_cast<float>(std::sqrt(s));
        }
      }
      for (int a = 0; a < n && ok; ++a) {
        float best_pos = -1.0f, second_pos = -1.0f;
        float best_neg = 1e9f, second_neg = 1e9f;
        for (int j = 0; j < n; ++j) {
          if (j == a && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) continue;
          const float dv = dist[static_cast<std::size_t>(a) * n + j];
          if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
            if (dv > best_pos) { second_pos = best_pos; best_pos = dv; }
            else second_pos = std::max(second_pos, dv);
          } else {
            if (dv < best_neg) { second_neg = best_neg; best_neg = dv; }
            else second_neg = std::min(second_neg, dv);
          }
        }
        if (second_pos >= 0.0f && best_pos - second_pos < 0.2f) ok = false;
        if (second_neg < 1e8f && second_neg - best_neg < 0.2f) ok = false;
        if (std::fabs(cfg.margin + best_pos - best_neg) < 0.15f) ok = false;
      }
      if (ok) break;
    }
    std::vector<Tensor> inputs{features};
    Builder build = [labels, cfg](Graph&, const std::vector<Var>& v) {
      return batch_hard_triplet(v[0], labels, cfg);
    };
    return {std::move(inputs), std::move(build)};
  }, with_step(5e-3));

  run("softmax_losses", [&]() -> Case {
    const int n = 2 + static_cast<int>(rng.uniform_int(4));
    const int c = 3 + static_cast<int>(rng.uniform_int(4));
    std::vector<Tensor> inputs{detail::random_tensor({n, c}, rng)};
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c))));
    Builder build = [labels](Graph&, const std::vector<Var>& v) {
      Var plain = detail_nll(v[0], labels);
      Var smooth = detail_smoothed_nll(v[0], labels);
      return elementwise_add(plain, smooth);
    };
    return {std::move(inputs), std::move(build)};
  });

  return reports;
}

// A reduced-width network with every architectural component present, used
// for the end-to-end gradient check.
inline NetworkConfig gradcheck_network_config() {
  NetworkConfig cfg;
  cfg.scale_preset = ScalePreset::toy;
  cfg.input_height = 96;
  cfg.input_width = 32;
  cfg.stem_channels = 4;
  cfg.stage_channels = {16, 32, 64, 128};
  cfg.blocks_per_stage = {1, 1, 1, 1};
  cfg.strips = 6;
  cfg.global_dim = 32;
  cfg.local_dim = 16;
  cfg.camera_dim = 32;
  cfg.aux_dim = 32;
  cfg.num_identities = 2;
  cfg.num_cameras = 2;
  cfg.camera_loss_site = CameraLossSite::attention;
  cfg.attention_enabled = true;
  return cfg;
}

// End-to-end check of the combined objective (identity + both triplets +
// camera) against every parameter tensor of the reduced network.
//
// The loss surface of a fresh network is dense with relu and max-pool kinks
// and near-ties in the triplet mining, where finite differences at any fixed
// step are unreliable, so the check runs after a short optimization warm-up
// and probes each tensor along its own gradient direction. The numerical
// derivative is taken from the most stable adjacent pair of a step ladder
// (standard adaptive differencing; the analytic value is never consulted).
inline FdReport gradcheck_network_end_to_end(std::uint64_t seed,
                                             int warmup_steps = 48) {
  const NetworkConfig cfg = gradcheck_network_config();
  Network net(cfg, seed);

  Rng rng(seed ^ 0xe2eULL);
  const int batch = 4;  // P=2, K=2
  Tensor images(Shape{batch, 3, cfg.input_height, cfg.input_width});
  images.fill_normal(rng, 0.0f, 1.0f);
  const std::vector<int> ids{0, 0, 1, 1};
  const std::vector<int> cams{0, 1, 0, 1};
  // margin large enough that the hinge stays active after the warm-up
  const TripletConfig triplet{0.8f, 2, 2};
  const CameraLossConfig camera{0.1f, 2};
  const LossWeights weights;

  auto loss_of = [&](Graph& g) {
    ForwardOutputs out = net.forward_train(g, images);
    LossParts parts;
    parts.id = id_loss(out.id_logits, ids);
    parts.triplet_descriptor = batch_hard_triplet(out.descriptor, ids, triplet);
    parts.triplet_auxiliary = batch_hard_triplet(out.aux_triplet_feature, ids, triplet);
    parts.camera = camera_loss(out.camera_logits, cams, camera);
    return combined_loss(parts, weights);
  };
  auto loss_value = [&]() {
    Graph g(/*grad_enabled=*/false);
    return static_cast<double>(loss_of(g).value()[0]);
  };

  {
    OptimizerConfig opt_cfg;
    SgdOptimizer opt(net.parameters(), opt_cfg);
    for (int s = 0; s < warmup_steps; ++s) {
      net.zero_grad();
      Graph g;
      g.backward(loss_of(g));
      opt.step(0.01f, 0.05f);
    }
  }

  net.zero_grad();
  {
    Graph g;
    g.backward(loss_of(g));
  }

  FdReport report;
  constexpr double floor = 0.1;
  Rng dir_rng(seed ^ 0xd123ULL);

  // Ladder finite difference along one direction; the estimate comes from
  // the smallest-step pair that has settled, since larger steps can form
  // false plateaus around relu / max-pool / mining kinks.
  auto fd_along = [&](Parameter& p, const Tensor& direction) {
    const std::int64_t n = p.value.numel();
    const double ladder[] = {8e-3, 4e-3, 2e-3, 1e-3, 5e-4, 2.5e-4};
    constexpr int rungs = 6;
    const Tensor saved = p.value;
    double fd[rungs];
    for (int r = 0; r < rungs; ++r) {
      const double h = ladder[r];
      for (std::int64_t i = 0; i < n; ++i) {
        p.value[i] = saved[i] + static_cast<float>(h * direction[i]);
      }
      const double up = loss_value();
      for (std::int64_t i = 0; i < n; ++i) {
        p.value[i] = saved[i] - static_cast<float>(h * direction[i]);
      }
      const double down = loss_value();
      p.value = saved;
      fd[r] = (up - down) / (2.0 * h);
    }
    auto pair_score = [&](int r) {
      return std::fabs(fd[r] - fd[r + 1]) /
             std::max({std::fabs(fd[r]), std::fabs(fd[r + 1]), floor});
    };
    int best = -1;
    for (int r = rungs - 2; r >= 0; --r) {
      if (pair_score(r) < 2e-3) {
        best = r;
        break;
      }
    }
    if (best < 0) {
      best = 0;
      for (int r = 1; r + 1 < rungs; ++r) {
        if (pair_score(r) < pair_score(best)) best = r;
      }
    }
    return 0.5 * (fd[best] + fd[best + 1]);
  };

  auto rel_of = [&](double analytic, double numeric) {
    return std::fabs(analytic - numeric) /
           std::max({std::fabs(analytic), std::fabs(numeric), floor});
  };

  for (Parameter* p : net.parameters()) {
    const std::int64_t n = p->value.numel();
    const double grad_norm =
        std::sqrt(detail::dot8(p->grad.data(), p->grad.data(), n));
    if (grad_norm < 1e-6) continue;  // nothing reachable to compare against

    Tensor direction(p->value.shape());
    for (std::int64_t i = 0; i < n; ++i) {
      direction[i] = static_cast<float>(p->grad[i] / grad_norm);
    }
    double rel = rel_of(grad_norm, fd_along(*p, direction));
    // A direction whose step window straddles a kink cannot certify the
    // projection; an independent direction can. A systematically wrong
    // gradient field stays wrong in every direction.
    for (int retry = 0; retry < 2 && rel > 5e-3; ++retry) {
      direction.fill_normal(dir_rng, 0.0f, 1.0f);
      double dn = std::sqrt(detail::dot8(direction.data(), direction.data(), n));
      if (dn == 0.0) dn = 1.0;
      double analytic = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        direction[i] = static_cast<float>(direction[i] / dn);
        analytic += static_cast<double>(p->grad[i]) * direction[i];
      }
      rel = std::min(rel, rel_of(analytic, fd_along(*p, direction)));
    }
    report.max_rel = std::max(report.max_rel, rel);
    ++report.coords_checked;
  }
  return report;
}

}  // namespace vmrfa
