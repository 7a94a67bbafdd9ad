// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "volcount/core.hpp"
#include "volcount/fields.hpp"
#include "volcount/geometry.hpp"
#include "volcount/volume.hpp"

namespace volcount {

/// Per-ray composite. With M depth samples there are M-1 opacities, taken
/// from consecutive SDF pairs, and the composites use the first M-1 samples'
/// depth/color/density values. Sums are raw (no normalization by the weight
/// total).
template <typename S>
struct RenderOutput {
  S depth = S(0);
  Vec3<S> color = Vec3<S>::Zero();
  S density = S(0);
  VecX<S> alphas;
  VecX<S> weights;
  S accumulation = S(0);
};

/// Guard on the opacity denominator; delta(s) underflows toward 0 for very
/// negative s*beta and the max-clamp alone does not stop the division from
/// blowing up.
inline constexpr double kDeltaGuard = 1e-9;

template <typename S>
inline S alpha_from_deltas(S delta_k, S delta_k1) {
  const S raw = (delta_k - delta_k1) / std::max(delta_k, S(kDeltaGuard));
  return std::max(raw, S(0));
}

/// Opacity from a consecutive SDF pair: max((delta(s_k) - delta(s_{k+1})) / delta(s_k), 0).
template <typename S>
S alpha_from_sdf(S s_k, S s_k1, S beta) {
  return alpha_from_deltas(logistic_delta(s_k, beta), logistic_delta(s_k1, beta));
}

/// w_i = prod_{k<i}(1 - alpha_k) * alpha_i.
template <typename S>
VecX<S> occlusion_weights(const VecX<S>& alphas) {
  VecX<S> w(alphas.size());
  S trans = S(1);
  for (Eigen::Index i = 0; i < alphas.size(); ++i) {
    w[i] = trans * alphas[i];
    trans *= S(1) - alphas[i];
  }
  return w;
}

/// Raw weighted sum (scalar values).
template <typename S>
S composite(const VecX<S>& weights, const VecX<S>& values) {
  if (weights.size() != values.size())
    throw std::invalid_argument("composite: length mismatch");
  return weights.dot(values);
}

/// Raw weighted sum over columns (vector values, one column per sample).
template <typename S>
Vec3<S> composite(const VecX<S>& weights, const MatX<S>& values) {
  if (weights.size() != values.cols() || values.rows() != 3)
    throw std::invalid_argument("composite: shape mismatch");
  return values * weights;
}

/// Everything the backward pass needs from one rendered ray.
template <typename S>
struct RenderCache {
  bool hit = false;
  Vec3<S> view_dir = Vec3<S>::UnitZ();
  RaySamples<S> samples;
  std::vector<TrilinearStencil<S>> stencils;
  MatX<S> features;  // C x M
  MlpCache<S> sdf_cache, rgb_cache, dens_cache;
  VecX<S> sdf, dens;  // M
  MatX<S> rgb;        // 3 x M
  VecX<S> delta;      // M, delta(s_i)
  VecX<S> alphas, trans, weights;  // M-1; trans[i] = prod_{k<i}(1-alpha_k)
  S beta = S(1);
};

/// Composites cached per-sample field values along one ray.
template <typename S>
RenderOutput<S> composite_fields(const VecX<S>& depths, RenderCache<S>& cache) {
  const Eigen::Index m = depths.size();
  const Eigen::Index a = m - 1;
  cache.delta.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) cache.delta[i] = logistic_delta(cache.sdf[i], cache.beta);

  cache.alphas.resize(a);
  cache.trans.resize(a);
  S trans = S(1);
  for (Eigen::Index i = 0; i < a; ++i) {
    cache.trans[i] = trans;
    cache.alphas[i] = alpha_from_deltas(cache.delta[i], cache.delta[i + 1]);
    trans *= S(1) - cache.alphas[i];
  }
  cache.weights = occlusion_weights(cache.alphas);

  RenderOutput<S> out;
  out.alphas = cache.alphas;
  out.weights = cache.weights;
  out.depth = composite(cache.weights, VecX<S>(depths.head(a)));
  out.color = composite(cache.weights, MatX<S>(cache.rgb.leftCols(a)));
  out.density = composite(cache.weights, VecX<S>(cache.dens.head(a)));
  out.accumulation = cache.weights.sum();
  return out;
}

namespace detail {

/// Builds the MLP input block [encoded position; features] for all samples.
template <typename S>
MatX<S> field_input(const MatX<S>& points, const MatX<S>& features, int pe_frequencies) {
  const int pos = 3 + 6 * pe_frequencies;
  MatX<S> x(pos + features.rows(), points.cols());
  for (Eigen::Index i = 0; i < points.cols(); ++i)
    x.col(i).head(pos) = encode_position<S>(points.col(i), pe_frequencies);
  x.bottomRows(features.rows()) = features;
  return x;
}

}  // namespace detail

/// Samples the ray, looks up features, evaluates the three fields, and
/// composites. Fully differentiable w.r.t. the volume features and all net
/// parameters via render_ray_backward.
template <typename S>
RenderOutput<S> render_ray(const FeatureVolume<S>& vol, const FieldNets<S>& nets,
                           const Ray<S>& ray, int m, Rng& rng, RenderCache<S>& cache) {
  if (m < 2) throw std::invalid_argument("render_ray: M must be >= 2");
  cache.hit = true;
  cache.view_dir = ray.direction;
  cache.beta = nets.beta();
  cache.samples = sample_ray_depths(ray, m, rng);

  cache.stencils.resize(m);
  cache.features.resize(vol.channels, m);
  for (int i = 0; i < m; ++i) {
    cache.stencils[i] = trilinear_stencil(vol, Vec3<S>(cache.samples.points.col(i)));
    VecX<S> f = VecX<S>::Zero(vol.channels);
    for (int c = 0; c < 8; ++c)
      f += cache.stencils[i].weight[c] * vol.values.col(cache.stencils[i].node[c]);
    cache.features.col(i) = f;
  }

  const MatX<S> x = detail::field_input(cache.samples.points, cache.features, nets.pe_frequencies);
  MatX<S> x_rgb(x.rows() + 3, m);
  x_rgb.topRows(x.rows()) = x;
  x_rgb.bottomRows(3).colwise() = ray.direction;

  cache.sdf = mlp_forward(nets.sdf, x, &cache.sdf_cache).row(0);
  cache.rgb = mlp_forward(nets.rgb, x_rgb, &cache.rgb_cache);
  cache.dens = mlp_forward(nets.density, x, &cache.dens_cache).row(0);

  return composite_fields(cache.samples.depths, cache);
}

/// Overload without a caller-provided cache.
template <typename S>
RenderOutput<S> render_ray(const FeatureVolume<S>& vol, const FieldNets<S>& nets,
                           const Ray<S>& ray, int m, Rng& rng) {
  RenderCache<S> cache;
  return render_ray(vol, nets, ray, m, rng, cache);
}

/// Upstream derivatives of a scalar loss w.r.t. one ray's composited outputs.
template <typename S>
struct RayUpstream {
  S d_depth = S(0);
  Vec3<S> d_color = Vec3<S>::Zero();
  S d_density = S(0);
};

/// Reverse pass for one rendered ray. `extra_density_grad` (optional, length
/// M) adds dL/d(d_i) for per-sample density supervision that bypasses the
/// composite. Gradients accumulate into vol_grad (same shape as vol.values)
/// and net_grad. The max-clamp in the opacity uses subgradient 0 on the
/// clamped branch.
template <typename S>
void render_ray_backward(const FeatureVolume<S>& vol, const FieldNets<S>& nets,
                         const RenderCache<S>& cache, const RayUpstream<S>& up,
                         const VecX<S>& extra_density_grad, MatX<S>& vol_grad,
                         FieldNetsGrad<S>& net_grad) {
  if (!cache.hit) return;
  const Eigen::Index m = cache.sdf.size();
  const Eigen::Index a = m - 1;
  const S beta = cache.beta;

  // Composite -> per-sample values and alphas.
  VecX<S> d_alpha(a);
  S g_trans = S(0);  // dL/dT_{i+1} while walking i downward
  for (Eigen::Index i = a - 1; i >= 0; --i) {
    const S u = up.d_depth * cache.samples.depths[i] + up.d_color.dot(cache.rgb.col(i)) +
                up.d_density * cache.dens[i];
    d_alpha[i] = cache.trans[i] * (u - g_trans);
    g_trans = u * cache.alphas[i] + g_trans * (S(1) - cache.alphas[i]);
  }

  MatX<S> d_rgb = MatX<S>::Zero(3, m);
  VecX<S> d_dens = VecX<S>::Zero(m);
  for (Eigen::Index i = 0; i < a; ++i) {
    d_rgb.col(i) = cache.weights[i] * up.d_color;
    d_dens[i] = cache.weights[i] * up.d_density;
  }
  if (extra_density_grad.size() > 0) d_dens += extra_density_grad;

  // Alphas -> deltas -> SDF values and beta.
  VecX<S> d_delta = VecX<S>::Zero(m);
  for (Eigen::Index i = 0; i < a; ++i) {
    const S denom = std::max(cache.delta[i], S(kDeltaGuard));
    const S raw = (cache.delta[i] - cache.delta[i + 1]) / denom;
    if (raw <= S(0)) continue;  // clamped branch
    const S d_raw = d_alpha[i];
    if (cache.delta[i] > S(kDeltaGuard))
      d_delta[i] += d_raw * (S(1) - raw) / denom;
    else
      d_delta[i] += d_raw / denom;
    d_delta[i + 1] -= d_raw / denom;
  }

  VecX<S> d_sdf(m);
  S d_beta = S(0);
  for (Eigen::Index i = 0; i < m; ++i) {
    const S slope = cache.delta[i] * (S(1) - cache.delta[i]);
    d_sdf[i] = d_delta[i] * slope * beta;
    d_beta += d_delta[i] * slope * cache.sdf[i];
  }
  net_grad.log_beta += d_beta * beta;

  // Field nets -> inputs; collect the feature rows from each net's input grad.
  const int pos = 3 + 6 * nets.pe_frequencies;
  const int ch = vol.channels;
  const MatX<S> dx_sdf =
      mlp_backward(nets.sdf, cache.sdf_cache, MatX<S>(d_sdf.transpose()), net_grad.sdf);
  const MatX<S> dx_rgb = mlp_backward(nets.rgb, cache.rgb_cache, MatX<S>(d_rgb), net_grad.rgb);
  const MatX<S> dx_dens =
      mlp_backward(nets.density, cache.dens_cache, MatX<S>(d_dens.transpose()), net_grad.density);

  MatX<S> d_features = dx_sdf.middleRows(pos, ch) + dx_rgb.middleRows(pos, ch) +
                       dx_dens.middleRows(pos, ch);

  // Features -> volume nodes through the cached stencils.
  for (Eigen::Index i = 0; i < m; ++i)
    for (int c = 0; c < 8; ++c)
      vol_grad.col(cache.stencils[i].node[c]) += cache.stencils[i].weight[c] * d_features.col(i);
}

/// Ray through a pixel clipped against the volume bounds. Rays that miss the
/// box return a zero RenderOutput (cache.hit stays false).
template <typename S>
RenderOutput<S> render_pixel(const FeatureVolume<S>& vol, const FieldNets<S>& nets,
                             const CameraModel<S>& cam, S u, S v, int m, Rng& rng,
                             RenderCache<S>& cache) {
  Ray<S> ray = ray_for_pixel(cam, u, v);
  const auto clip = intersect(vol.bbox, ray.origin, ray.direction);
  cache.hit = false;
  if (!clip) return RenderOutput<S>{};
  ray.t_near = clip->first;
  ray.t_far = clip->second;
  return render_ray(vol, nets, ray, m, rng, cache);
}

}  // namespace volcount
