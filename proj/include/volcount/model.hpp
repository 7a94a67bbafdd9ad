// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <limits>
#include <vector>

#include "volcount/core.hpp"
#include "volcount/encoder.hpp"
#include "volcount/fields.hpp"
#include "volcount/geometry.hpp"
#include "volcount/image.hpp"
#include "volcount/losses.hpp"
#include "volcount/renderer.hpp"
#include "volcount/synth.hpp"
#include "volcount/volume.hpp"

namespace volcount {

template <typename S>
struct ModelConfig {
  Vec3i volume_dims = Vec3i(16, 16, 16);
  int channels = 8;
  int encoder_mid_channels = 8;
  int hidden = 64;
  int pe_frequencies = 0;
  S beta_init = S(10);
};

/// All learnable state: the base feature volume, the field nets, and the
/// encoder. The volume a scene is rendered from is base_volume plus the
/// encoder's lifted features, so both the volume and the encoder receive
/// gradients.
template <typename S>
struct Model {
  FeatureVolume<S> base_volume;
  FieldNets<S> nets;
  ConvNetParams<S> encoder;
};

template <typename S>
struct GradModel {
  MatX<S> volume;
  FieldNetsGrad<S> nets;
  ConvNetGrad<S> encoder;

  static GradModel zeros_like(const Model<S>& m) {
    return {MatX<S>::Zero(m.base_volume.values.rows(), m.base_volume.values.cols()),
            FieldNetsGrad<S>::zeros_like(m.nets), ConvNetGrad<S>::zeros_like(m.encoder)};
  }

  void set_zero() {
    volume.setZero();
    for (MlpGrad<S>* g : {&nets.sdf, &nets.rgb, &nets.density})
      for (auto& l : g->layers) {
        l.weights.setZero();
        l.biases.setZero();
      }
    nets.log_beta = S(0);
    encoder.conv1.weights.setZero();
    encoder.conv1.biases.setZero();
    encoder.conv2.weights.setZero();
    encoder.conv2.biases.setZero();
    encoder.head_weights.setZero();
    encoder.head_bias.setZero();
  }
};

template <typename S>
Model<S> make_model(const ModelConfig<S>& config, const BoundingBox<S>& bbox, std::uint64_t seed) {
  Model<S> m;
  Rng rng(seed);
  m.base_volume = FeatureVolume<S>::zeros(config.volume_dims, config.channels, bbox);
  Rng vol_rng = rng.child(11);
  for (Eigen::Index i = 0; i < m.base_volume.values.size(); ++i)
    m.base_volume.values.data()[i] = S(vol_rng.normal(0, 1e-2));
  Rng net_rng = rng.child(12);
  m.nets = make_field_nets<S>(config.channels, config.hidden, bbox, net_rng, config.beta_init,
                              config.pe_frequencies);
  Rng enc_rng = rng.child(13);
  m.encoder = make_conv_net<S>(config.encoder_mid_channels, config.channels, enc_rng);
  return m;
}

template <typename To, typename From>
Model<To> cast_model(const Model<From>& m) {
  Model<To> out;
  out.base_volume.dims = m.base_volume.dims;
  out.base_volume.channels = m.base_volume.channels;
  out.base_volume.bbox.min = m.base_volume.bbox.min.template cast<To>();
  out.base_volume.bbox.max = m.base_volume.bbox.max.template cast<To>();
  out.base_volume.values = m.base_volume.values.template cast<To>();
  for (int net = 0; net < 3; ++net) {
    const MlpParams<From>& src =
        net == 0 ? m.nets.sdf : (net == 1 ? m.nets.rgb : m.nets.density);
    MlpParams<To>& dst = net == 0 ? out.nets.sdf : (net == 1 ? out.nets.rgb : out.nets.density);
    dst.hidden = src.hidden;
    dst.output = src.output;
    for (const auto& l : src.layers)
      dst.layers.push_back(
          {l.weights.template cast<To>(), l.biases.template cast<To>()});
  }
  out.nets.log_beta = To(m.nets.log_beta);
  out.nets.pe_frequencies = m.nets.pe_frequencies;
  out.encoder.conv1 = {m.encoder.conv1.weights.template cast<To>(),
                       m.encoder.conv1.biases.template cast<To>()};
  out.encoder.conv2 = {m.encoder.conv2.weights.template cast<To>(),
                       m.encoder.conv2.biases.template cast<To>()};
  out.encoder.head_weights = m.encoder.head_weights.template cast<To>();
  out.encoder.head_bias = m.encoder.head_bias.template cast<To>();
  return out;
}

/// Ray budget and loss weighting for one scene evaluation.
template <typename S>
struct BatchConfig {
  int rays_per_view = 64;
  int samples_per_ray = 32;
  LossWeights<S> weights;
  bool labeled = true;  // when false, dmap/dvol are forced to weight 0
  std::uint64_t seed = 0;
};

/// Distances from the nondifferentiable branch points seen during a forward
/// pass. Gradient checks resample the batch when either margin is too small:
/// a finite-difference step across the opacity clamp or a ReLU kink measures
/// a blended slope instead of the one-sided derivative.
struct ForwardDiagnostics {
  double min_alpha_boundary = std::numeric_limits<double>::infinity();
  double min_relu_margin = std::numeric_limits<double>::infinity();
};

/// Constants the self-supervised density term compares against. Captured once
/// and reused so that finite differences and the reverse pass differentiate
/// the same function of the parameters (the targets are stop-gradient).
template <typename S>
struct StopGradTargets {
  VecX<S> rdens;
};

/// Full objective on one scene: forward (always) plus reverse accumulation
/// into `grads` when non-null. Deterministic for a fixed cfg.seed: the same
/// pixels and depth samples are drawn on every call.
///
/// `frozen` both captures and supplies the stop-gradient targets: when its
/// vector is empty it is filled from this forward pass; when non-empty its
/// values are used instead of the current encoder prediction.
template <typename S>
LossReport<S> scene_loss(const Model<S>& model, const SceneSample<S>& scene,
                         const BatchConfig<S>& cfg, GradModel<S>* grads,
                         StopGradTargets<S>* frozen = nullptr,
                         ForwardDiagnostics* diag = nullptr) {
  const size_t n_views = scene.cameras.size();
  const int m = cfg.samples_per_ray;
  LossWeights<S> w = cfg.weights;
  if (!cfg.labeled) {
    w.dmap = S(0);
    w.dvol = S(0);
  }

  // Encoder forward.
  std::vector<EncoderCache<S>> enc_caches(n_views);
  std::vector<Image<S>> features(n_views);
  std::vector<Image<S>> d_enc(n_views);
  for (size_t v = 0; v < n_views; ++v) {
    features[v] = extract_features(scene.images[v], model.encoder, &enc_caches[v]);
    d_enc[v] = predict_density_map(features[v], model.encoder, &enc_caches[v]);
  }
  if (diag) {
    for (const auto& c : enc_caches)
      diag->min_relu_margin =
          std::min(diag->min_relu_margin, double(c.pre1.data.cwiseAbs().minCoeff()));
  }

  // Lift and add the learnable base volume.
  LiftCache<S> lift_cache;
  FeatureVolume<S> vol =
      lift_to_volume(features, scene.cameras, model.base_volume.bbox, model.base_volume.dims,
                     model.base_volume.channels, grads ? &lift_cache : nullptr);
  vol.values += model.base_volume.values;

  // Ray batch, a fixed pixel and depth stream per (view, ray) pair.
  struct RayRecord {
    int view;
    S z_prior, d_enc_target;
    char depth_valid;
    Vec3<S> c_gt;
  };
  const int n_rays = static_cast<int>(n_views) * cfg.rays_per_view;
  std::vector<RayRecord> rays(static_cast<size_t>(n_rays));
  std::vector<RenderCache<S>> caches(static_cast<size_t>(n_rays));
  VecX<S> z_rend = VecX<S>::Zero(n_rays);
  VecX<S> d_rend = VecX<S>::Zero(n_rays);
  MatX<S> c_rend = MatX<S>::Zero(3, n_rays);
  VecX<S> z_prior = VecX<S>::Zero(n_rays);
  VecX<S> rdens_target = VecX<S>::Zero(n_rays);
  MatX<S> c_gt = MatX<S>::Zero(3, n_rays);
  std::vector<char> depth_valid(static_cast<size_t>(n_rays), 0);

  std::vector<S> d_samples_list, d_gt_samples_list;
  d_samples_list.reserve(static_cast<size_t>(n_rays) * static_cast<size_t>(m));
  d_gt_samples_list.reserve(static_cast<size_t>(n_rays) * static_cast<size_t>(m));

  int r = 0;
  for (size_t v = 0; v < n_views; ++v) {
    const auto& cam = scene.cameras[v];
    for (int k = 0; k < cfg.rays_per_view; ++k, ++r) {
      Rng ray_rng(mix_seed(cfg.seed, v, static_cast<std::uint64_t>(k)));
      const int px = static_cast<int>(ray_rng.index(static_cast<std::uint64_t>(cam.width)));
      const int py = static_cast<int>(ray_rng.index(static_cast<std::uint64_t>(cam.height)));
      const S u = S(px) + S(0.5);
      const S vv = S(py) + S(0.5);

      auto& rec = rays[static_cast<size_t>(r)];
      rec.view = static_cast<int>(v);
      rec.c_gt = scene.images[v].pixel(px, py);
      rec.z_prior = scene.depths[v].at(px, py);
      rec.depth_valid = scene.accums[v].at(px, py) >= S(0.5) ? 1 : 0;
      rec.d_enc_target = bilinear(d_enc[v], u / S(4) - S(0.5), vv / S(4) - S(0.5))[0];

      const auto out = render_pixel(vol, model.nets, cam, u, vv, m, ray_rng,
                                    caches[static_cast<size_t>(r)]);
      z_rend[r] = out.depth;
      d_rend[r] = out.density;
      c_rend.col(r) = out.color;
      z_prior[r] = rec.z_prior;
      c_gt.col(r) = rec.c_gt;
      depth_valid[static_cast<size_t>(r)] = rec.depth_valid;

      if (caches[static_cast<size_t>(r)].hit) {
        const auto& cache = caches[static_cast<size_t>(r)];
        for (int i = 0; i < m; ++i) {
          d_samples_list.push_back(cache.dens[i]);
          d_gt_samples_list.push_back(
              sample_trilinear(scene.density_volume, Vec3<S>(cache.samples.points.col(i)))[0]);
        }
        if (diag) {
          for (int i = 0; i + 1 < m; ++i) {
            const double raw = double((cache.delta[i] - cache.delta[i + 1]) /
                                      std::max(cache.delta[i], S(kDeltaGuard)));
            diag->min_alpha_boundary = std::min(diag->min_alpha_boundary, std::abs(raw));
          }
        }
      }
    }
  }

  // Stop-gradient targets for the rendered-density consistency term.
  if (frozen && frozen->rdens.size() == n_rays) {
    rdens_target = frozen->rdens;
  } else {
    for (int i = 0; i < n_rays; ++i) rdens_target[i] = rays[static_cast<size_t>(i)].d_enc_target;
    if (frozen) frozen->rdens = rdens_target;
  }

  const Eigen::Index n_samples = static_cast<Eigen::Index>(d_samples_list.size());
  VecX<S> d_samples = Eigen::Map<VecX<S>>(d_samples_list.data(), n_samples);
  VecX<S> d_gt_samples = Eigen::Map<VecX<S>>(d_gt_samples_list.data(), n_samples);

  const FslTerms<S> fsl = fsl_loss(d_enc, scene.density_maps, d_samples, d_gt_samples);
  const SslTerms<S> ssl =
      ssl_loss(d_rend, rdens_target, z_rend, z_prior, depth_valid, c_rend, c_gt);
  const LossReport<S> report = total_loss(fsl, ssl, w);

  if (!std::isfinite(double(report.total)))
    throw NonFiniteLossError("scene_loss: non-finite objective");
  if (!grads) return report;

  // ----- reverse pass -----
  std::vector<Image<S>> d_features(n_views);
  for (size_t v = 0; v < n_views; ++v)
    d_features[v] = Image<S>::zeros(features[v].width, features[v].height, features[v].channels);

  // dmap: mean over views of per-map MSE.
  if (w.dmap != S(0)) {
    for (size_t v = 0; v < n_views; ++v) {
      Image<S> dmap_grad = d_enc[v];
      dmap_grad.data =
          (d_enc[v].data - scene.density_maps[v].data) *
          (S(2) * w.dmap / (S(d_enc[v].data.size()) * S(n_views)));
      predict_density_map_backward(features[v], model.encoder, enc_caches[v], dmap_grad,
                                   grads->encoder, d_features[v]);
    }
  }

  // Per-ray upstream derivatives.
  MatX<S> vol_grad = MatX<S>::Zero(vol.channels, vol.node_count());
  Eigen::Index sample_at = 0;
  for (int i = 0; i < n_rays; ++i) {
    const auto& cache = caches[static_cast<size_t>(i)];
    if (!cache.hit) continue;
    RayUpstream<S> up;
    if (ssl.n_rays > 0) {
      up.d_density = w.rdens * S(2) * (d_rend[i] - rdens_target[i]) / S(ssl.n_rays);
      up.d_color = w.rgb * S(2) * (c_rend.col(i) - c_gt.col(i)) / S(3 * ssl.n_rays);
      if (depth_valid[static_cast<size_t>(i)] && ssl.n_depth_valid > 0)
        up.d_depth = w.depth * S(2) * (z_rend[i] - z_prior[i]) / S(ssl.n_depth_valid);
    }
    VecX<S> extra = VecX<S>::Zero(m);
    if (w.dvol != S(0) && n_samples > 0) {
      for (int s = 0; s < m; ++s)
        extra[s] = w.dvol * S(2) * (d_samples[sample_at + s] - d_gt_samples[sample_at + s]) /
                   S(n_samples);
    }
    sample_at += m;
    render_ray_backward(vol, model.nets, cache, up, extra, vol_grad, grads->nets);
  }

  // Volume gradient feeds both the base volume and the lifted features.
  grads->volume += vol_grad;
  lift_to_volume_backward(lift_cache, vol_grad, d_features);

  for (size_t v = 0; v < n_views; ++v)
    extract_features_backward(model.encoder, enc_caches[v], d_features[v], grads->encoder);

  return report;
}

/// The volume the renderer actually sees for a scene.
template <typename S>
FeatureVolume<S> lifted_volume(const Model<S>& model, const SceneSample<S>& scene) {
  std::vector<Image<S>> features(scene.cameras.size());
  for (size_t v = 0; v < scene.cameras.size(); ++v)
    features[v] = extract_features(scene.images[v], model.encoder);
  FeatureVolume<S> vol =
      lift_to_volume(features, scene.cameras, model.base_volume.bbox, model.base_volume.dims,
                     model.base_volume.channels, static_cast<LiftCache<S>*>(nullptr));
  vol.values += model.base_volume.values;
  return vol;
}

/// Renders every pixel of one view with the model (evaluation/export path).
template <typename S>
OracleView<S> render_view(const Model<S>& model, const SceneSample<S>& scene, int view,
                          int samples_per_ray, std::uint64_t seed) {
  const auto& cam = scene.cameras[static_cast<size_t>(view)];
  FeatureVolume<S> vol = lifted_volume(model, scene);
  OracleView<S> out;
  out.rgb = Image<S>::zeros(cam.width, cam.height, 3);
  out.depth = Image<S>::zeros(cam.width, cam.height, 1);
  out.accumulation = Image<S>::zeros(cam.width, cam.height, 1);
  RenderCache<S> cache;
  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(view),
                       static_cast<std::uint64_t>(px + cam.width * py)));
      const auto r = render_pixel(vol, model.nets, cam, S(px) + S(0.5), S(py) + S(0.5),
                                  samples_per_ray, rng, cache);
      out.rgb.pixel(px, py) = r.color;
      out.depth.at(px, py) = r.depth;
      out.accumulation.at(px, py) = r.accumulation;
    }
  return out;
}

}  // namespace volcount
