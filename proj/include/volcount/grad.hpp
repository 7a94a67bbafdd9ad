// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "volcount/core.hpp"
#include "volcount/model.hpp"
#include "volcount/synth.hpp"

namespace volcount {

// Canonical parameter order (checkpoints and flat vectors):
//   volume | sdf layer0..n (weights, biases) | rgb layers | density layers |
//   log_beta | conv1 (weights, biases) | conv2 | head (weights, bias)
// Matrices flatten column-major.

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
};

struct ParameterLayout {
  std::vector<TensorInfo> tensors;
  Eigen::Index total = 0;
};

namespace detail {

template <typename S, typename F>
void visit_model_tensors(Model<S>& m, F&& f) {
  f("volume", m.base_volume.values.data(), m.base_volume.values.size(),
    std::vector<int>{m.base_volume.channels, m.base_volume.dims.x(), m.base_volume.dims.y(),
                     m.base_volume.dims.z()});
  const char* names[3] = {"sdf", "rgb", "density"};
  MlpParams<S>* nets[3] = {&m.nets.sdf, &m.nets.rgb, &m.nets.density};
  for (int n = 0; n < 3; ++n)
    for (size_t l = 0; l < nets[n]->layers.size(); ++l) {
      auto& layer = nets[n]->layers[l];
      const std::string base = std::string(names[n]) + ".layer" + std::to_string(l);
      f(base + ".weight", layer.weights.data(), layer.weights.size(),
        std::vector<int>{static_cast<int>(layer.weights.rows()),
                         static_cast<int>(layer.weights.cols())});
      f(base + ".bias", layer.biases.data(), layer.biases.size(),
        std::vector<int>{static_cast<int>(layer.biases.size())});
    }
  f("log_beta", &m.nets.log_beta, Eigen::Index(1), std::vector<int>{1});
  ConvLayer<S>* convs[2] = {&m.encoder.conv1, &m.encoder.conv2};
  for (int c = 0; c < 2; ++c) {
    const std::string base = "encoder.conv" + std::to_string(c + 1);
    f(base + ".weight", convs[c]->weights.data(), convs[c]->weights.size(),
      std::vector<int>{static_cast<int>(convs[c]->weights.rows()),
                       static_cast<int>(convs[c]->weights.cols())});
    f(base + ".bias", convs[c]->biases.data(), convs[c]->biases.size(),
      std::vector<int>{static_cast<int>(convs[c]->biases.size())});
  }
  f("encoder.head.weight", m.encoder.head_weights.data(), m.encoder.head_weights.size(),
    std::vector<int>{1, static_cast<int>(m.encoder.head_weights.cols())});
  f("encoder.head.bias", m.encoder.head_bias.data(), Eigen::Index(1), std::vector<int>{1});
}

/// Same order as visit_model_tensors, over the gradient mirror.
template <typename S, typename F>
void visit_grad_tensors(GradModel<S>& g, F&& f) {
  f(g.volume.data(), g.volume.size());
  MlpGrad<S>* nets[3] = {&g.nets.sdf, &g.nets.rgb, &g.nets.density};
  for (int n = 0; n < 3; ++n)
    for (auto& layer : nets[n]->layers) {
      f(layer.weights.data(), layer.weights.size());
      f(layer.biases.data(), layer.biases.size());
    }
  f(&g.nets.log_beta, Eigen::Index(1));
  ConvLayer<S>* convs[2] = {&g.encoder.conv1, &g.encoder.conv2};
  for (int c = 0; c < 2; ++c) {
    f(convs[c]->weights.data(), convs[c]->weights.size());
    f(convs[c]->biases.data(), convs[c]->biases.size());
  }
  f(g.encoder.head_weights.data(), g.encoder.head_weights.size());
  f(g.encoder.head_bias.data(), Eigen::Index(1));
}

}  // namespace detail

template <typename S>
ParameterLayout parameter_layout(const Model<S>& m) {
  ParameterLayout layout;
  detail::visit_model_tensors(const_cast<Model<S>&>(m),
                              [&](const std::string& name, S*, Eigen::Index size,
                                  const std::vector<int>& shape) {
                                layout.tensors.push_back({name, shape, layout.total, size});
                                layout.total += size;
                              });
  return layout;
}

template <typename S>
VecX<S> flatten(const Model<S>& m) {
  const ParameterLayout layout = parameter_layout(m);
  VecX<S> theta(layout.total);
  Eigen::Index at = 0;
  detail::visit_model_tensors(
      const_cast<Model<S>&>(m),
      [&](const std::string&, S* data, Eigen::Index size, const std::vector<int>&) {
        theta.segment(at, size) = Eigen::Map<VecX<S>>(data, size);
        at += size;
      });
  return theta;
}

/// Writes a flat vector back into a model of matching shapes.
template <typename S>
void unflatten(const VecX<S>& theta, Model<S>& m) {
  Eigen::Index at = 0;
  detail::visit_model_tensors(
      m, [&](const std::string&, S* data, Eigen::Index size, const std::vector<int>&) {
        Eigen::Map<VecX<S>>(data, size) = theta.segment(at, size);
        at += size;
      });
  if (at != theta.size()) throw std::invalid_argument("unflatten: size mismatch");
}

template <typename S>
VecX<S> flatten_grads(const GradModel<S>& g, Eigen::Index total) {
  VecX<S> out(total);
  Eigen::Index at = 0;
  detail::visit_grad_tensors(const_cast<GradModel<S>&>(g), [&](S* data, Eigen::Index size) {
    out.segment(at, size) = Eigen::Map<VecX<S>>(data, size);
    at += size;
  });
  return out;
}

/// A scalar objective over a flat parameter vector, with an exact reverse
/// pass. value() must be deterministic in theta.
template <typename S>
class LossFunction {
 public:
  virtual ~LossFunction() = default;
  virtual S value(const VecX<S>& theta) const = 0;
  virtual S value_and_grad(const VecX<S>& theta, VecX<S>& grad) const = 0;
};

/// Exact reverse-mode derivative of the objective.
template <typename S>
VecX<S> grad(const LossFunction<S>& fn, const VecX<S>& theta) {
  VecX<S> g(theta.size());
  const S v = fn.value_and_grad(theta, g);
  if (!std::isfinite(double(v))) throw NonFiniteLossError("grad: non-finite loss value");
  return g;
}

/// Central differences (loss(theta + h e_i) - loss(theta - h e_i)) / 2h.
template <typename S>
VecX<S> finite_difference_grad(const LossFunction<S>& fn, const VecX<S>& theta, double h = 1e-4) {
  VecX<S> g(theta.size());
  VecX<S> probe = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + S(h);
    const S hi = fn.value(probe);
    probe[i] = theta[i] - S(h);
    const S lo = fn.value(probe);
    probe[i] = theta[i];
    if (!std::isfinite(double(hi)) || !std::isfinite(double(lo)))
      throw NonFiniteLossError("finite_difference_grad: non-finite loss value");
    g[i] = (hi - lo) / S(2 * h);
  }
  return g;
}

/// The full scene objective as a LossFunction over the flat parameters.
/// Stop-gradient targets can be frozen so finite differences and the reverse
/// pass differentiate the same function.
template <typename S>
class SceneObjective : public LossFunction<S> {
 public:
  SceneObjective(const Model<S>& prototype, const SceneSample<S>& scene, BatchConfig<S> cfg)
      : scratch_(prototype), scene_(scene), cfg_(cfg) {}

  void freeze_targets(const VecX<S>& theta) {
    frozen_.rdens.resize(0);
    unflatten(theta, scratch_);
    scene_loss<S>(scratch_, scene_, cfg_, nullptr, &frozen_);
  }

  ForwardDiagnostics diagnostics(const VecX<S>& theta) const {
    unflatten(theta, scratch_);
    ForwardDiagnostics diag;
    StopGradTargets<S> frozen = frozen_;
    scene_loss<S>(scratch_, scene_, cfg_, nullptr, &frozen, &diag);
    return diag;
  }

  S value(const VecX<S>& theta) const override {
    unflatten(theta, scratch_);
    StopGradTargets<S> frozen = frozen_;
    return scene_loss<S>(scratch_, scene_, cfg_, nullptr, frozen.rdens.size() ? &frozen : nullptr)
        .total;
  }

  S value_and_grad(const VecX<S>& theta, VecX<S>& grad_out) const override {
    unflatten(theta, scratch_);
    GradModel<S> grads = GradModel<S>::zeros_like(scratch_);
    StopGradTargets<S> frozen = frozen_;
    const auto report = scene_loss<S>(scratch_, scene_, cfg_, &grads,
                                      frozen.rdens.size() ? &frozen : nullptr);
    grad_out = flatten_grads(grads, theta.size());
    return report.total;
  }

 private:
  mutable Model<S> scratch_;
  SceneSample<S> scene_;
  BatchConfig<S> cfg_;
  StopGradTargets<S> frozen_;
};

struct GradcheckConfig {
  Vec3i volume_dims = Vec3i(8, 8, 8);
  int channels = 4;
  int hidden = 32;
  int rays_total = 4;
  int samples_per_ray = 8;
  int cameras = 2;
  int image_size = 16;
  int entities = 2;
  double tolerance = 1e-4;
  double fd_step = 1e-4;
  int max_resamples = 64;
  LossWeights<double> weights;
  // The check scene gets a ground plane and moderate blob widths: black
  // backgrounds leave conv weights with vanishing-but-nonzero gradients whose
  // finite differences are pure roundoff, and sharp blobs inflate the loss
  // magnitude (the noise scale) through the squared density targets.
  bool ground_plane = true;
  double sigma_blob = 0.12;
};

struct BlockReport {
  std::string name;
  double max_rel_err = 0;
  Eigen::Index argmax = 0;  // coordinate within the block
  double analytic = 0, numeric = 0;
};

struct GradReport {
  bool pass = false;
  double tolerance = 0;
  double max_rel_err = 0;
  int resamples = 0;
  std::uint64_t batch_seed = 0;
  double seconds = 0;
  std::vector<BlockReport> blocks;
};

/// Compares the reverse pass against per-coordinate central differences over
/// every parameter block on the full objective (all five terms), at double
/// precision. Batches whose opacities or encoder ReLU preactivations sit too
/// close to their kinks are resampled: a finite-difference step across a kink
/// measures a blended slope, not the subgradient the reverse pass defines.
inline GradReport gradcheck(const GradcheckConfig& config, std::uint64_t seed) {
  using S = double;
  const auto t0 = std::chrono::steady_clock::now();

  SynthConfig synth;
  synth.scenes = 1;
  synth.entities_min = synth.entities_max = config.entities;
  synth.cameras = config.cameras;
  synth.image_width = synth.image_height = config.image_size;
  synth.oracle_samples = 128;
  synth.density_dims = Vec3i(24, 24, 24);
  synth.ground_plane = config.ground_plane;
  synth.sigma_blob = config.sigma_blob;
  Rng scene_rng(mix_seed(seed, 0xdeac));
  const SceneSpec<S> scene = make_scene<S>(synth, scene_rng);
  const SceneSample<S> sample = make_scene_sample<S>(scene, synth, mix_seed(seed, 0xbeef));

  ModelConfig<S> mc;
  mc.volume_dims = config.volume_dims;
  mc.channels = config.channels;
  mc.hidden = config.hidden;
  Model<S> model = make_model(mc, sample.density_volume.bbox, mix_seed(seed, 0xcafe));

  BatchConfig<S> cfg;
  cfg.rays_per_view = std::max(1, config.rays_total / config.cameras);
  cfg.samples_per_ray = config.samples_per_ray;
  cfg.weights = LossWeights<S>{config.weights.dmap, config.weights.dvol, config.weights.rdens,
                               config.weights.depth, config.weights.rgb};
  cfg.labeled = true;

  GradReport report;
  report.tolerance = config.tolerance;

  // Generic parameter point: the standard init plus a small perturbation.
  // Both the ray seed and the perturbation re-roll on resampling; the encoder
  // preactivations depend on the parameters, not on which rays are drawn.
  const VecX<S> theta0 = flatten(model);
  VecX<S> theta = theta0;
  SceneObjective<S> objective(model, sample, cfg);
  for (int attempt = 0;; ++attempt) {
    cfg.seed = mix_seed(seed, 0xabcd, static_cast<std::uint64_t>(attempt));
    Rng perturb(mix_seed(seed, 0xfeed, static_cast<std::uint64_t>(attempt)));
    theta = theta0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += S(perturb.normal(0, 1e-3));
    // A finite-difference step crosses a branch point when h * |d pre / d
    // theta| exceeds the margin. Opacity ratios see the sdf output layer
    // (inputs ~25, times beta), so they need a much wider berth than conv
    // preactivations, whose inputs are image values <= 1.
    objective = SceneObjective<S>(model, sample, cfg);
    const ForwardDiagnostics diag = objective.diagnostics(theta);
    if (diag.min_alpha_boundary > 2e-2 && diag.min_relu_margin > 3e-4) break;
    if (attempt + 1 >= config.max_resamples)
      throw std::runtime_error("gradcheck: no kink-free batch found");
    ++report.resamples;
  }
  report.batch_seed = cfg.seed;
  objective.freeze_targets(theta);

  VecX<S> g_ad(theta.size());
  objective.value_and_grad(theta, g_ad);
  const VecX<S> g_fd = finite_difference_grad(objective, theta, config.fd_step);

  const ParameterLayout layout = parameter_layout(model);
  for (const auto& tensor : layout.tensors) {
    BlockReport block;
    block.name = tensor.name;
    for (Eigen::Index i = 0; i < tensor.size; ++i) {
      const double a = g_ad[tensor.offset + i];
      const double f = g_fd[tensor.offset + i];
      const double err = std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-8});
      if (err >= block.max_rel_err) {
        block.max_rel_err = err;
        block.argmax = i;
        block.analytic = a;
        block.numeric = f;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
    report.blocks.push_back(block);
  }
  report.pass = report.max_rel_err <= config.tolerance;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace volcount
