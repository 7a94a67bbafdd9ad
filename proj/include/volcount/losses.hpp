// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "volcount/core.hpp"
#include "volcount/image.hpp"

namespace volcount {

/// Term weights; the objective is the plain sum of terms when all are 1.
/// dmap/dvol are the supervised terms, rdens/depth/rgb the self-supervised
/// consistency terms.
template <typename S>
struct LossWeights {
  S dmap = S(1);
  S dvol = S(1);
  S rdens = S(1);
  S depth = S(1);
  S rgb = S(1);
};

/// Per-term values (unweighted) plus the weighted totals.
template <typename S>
struct LossReport {
  S dmap = S(0), dvol = S(0), rdens = S(0), depth = S(0), rgb = S(0);
  S fsl = S(0), ssl = S(0), total = S(0);
  int n_rays = 0;
  int n_depth_valid = 0;
  int n_volume_samples = 0;
};

/// Mean squared difference.
template <typename S>
S mse(const MatX<S>& a, const MatX<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("mse: shape mismatch");
  if (a.size() == 0) throw EmptyInputError("mse: empty input");
  return (a - b).squaredNorm() / S(a.size());
}

template <typename S>
S mse(const VecX<S>& a, const VecX<S>& b) {
  return mse(MatX<S>(a), MatX<S>(b));
}

/// MSE over the entries whose mask is nonzero; (0, 0) when none are.
template <typename S>
std::pair<S, int> masked_mse(const VecX<S>& a, const VecX<S>& b, const std::vector<char>& mask) {
  if (a.size() != b.size() || static_cast<size_t>(a.size()) != mask.size())
    throw std::invalid_argument("masked_mse: shape mismatch");
  S sum = S(0);
  int n = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const S d = a[i] - b[i];
    sum += d * d;
    ++n;
  }
  return {n > 0 ? sum / S(n) : S(0), n};
}

template <typename S>
struct FslTerms {
  S dmap = S(0);  // mean over views of MSE(encoder density map, GT map)
  S dvol = S(0);  // mean over ray samples of (d_i - d_gt_i)^2
  int n_volume_samples = 0;
};

template <typename S>
struct SslTerms {
  S rdens = S(0);  // MSE(rendered density, encoder prediction at the pixel)
  S depth = S(0);  // MSE(rendered depth, depth prior), valid-depth rays only
  S rgb = S(0);    // MSE(rendered color, image color at the pixel)
  int n_rays = 0;
  int n_depth_valid = 0;
};

/// Supervised terms: image-level density maps and sampled volume densities.
/// d_gt_samples must come from trilinear lookups of the GT density volume at
/// the same points as d_samples.
template <typename S>
FslTerms<S> fsl_loss(const std::vector<Image<S>>& d_enc, const std::vector<Image<S>>& d_gt,
                     const VecX<S>& d_samples, const VecX<S>& d_gt_samples) {
  if (d_enc.size() != d_gt.size()) throw std::invalid_argument("fsl_loss: view count mismatch");
  FslTerms<S> t;
  if (!d_enc.empty()) {
    S sum = S(0);
    for (size_t v = 0; v < d_enc.size(); ++v) sum += mse(d_enc[v].data, d_gt[v].data);
    t.dmap = sum / S(d_enc.size());
  }
  t.n_volume_samples = static_cast<int>(d_samples.size());
  if (t.n_volume_samples > 0) t.dvol = mse(d_samples, d_gt_samples);
  return t;
}

/// Self-supervised terms over a batch of sampled rays. The encoder density
/// targets are constants (stop-gradient); depth is compared only where the
/// prior's accumulation marked the pixel valid.
template <typename S>
SslTerms<S> ssl_loss(const VecX<S>& d_rend, const VecX<S>& d_enc_targets, const VecX<S>& z_rend,
                     const VecX<S>& z_prior, const std::vector<char>& depth_valid,
                     const MatX<S>& c_rend, const MatX<S>& c_gt) {
  SslTerms<S> t;
  t.n_rays = static_cast<int>(d_rend.size());
  if (t.n_rays == 0) return t;
  t.rdens = mse(d_rend, d_enc_targets);
  const auto depth = masked_mse(z_rend, z_prior, depth_valid);
  t.depth = depth.first;
  t.n_depth_valid = depth.second;
  t.rgb = mse(c_rend, c_gt);
  return t;
}

/// Assembles the weighted objective: total = fsl + ssl with
/// fsl = w.dmap * dmap + w.dvol * dvol and
/// ssl = w.rdens * rdens + w.depth * depth + w.rgb * rgb.
template <typename S>
LossReport<S> total_loss(const FslTerms<S>& f, const SslTerms<S>& s, const LossWeights<S>& w) {
  LossReport<S> r;
  r.dmap = f.dmap;
  r.dvol = f.dvol;
  r.rdens = s.rdens;
  r.depth = s.depth;
  r.rgb = s.rgb;
  r.fsl = w.dmap * f.dmap + w.dvol * f.dvol;
  r.ssl = w.rdens * s.rdens + w.depth * s.depth + w.rgb * s.rgb;
  r.total = r.fsl + r.ssl;
  r.n_rays = s.n_rays;
  r.n_depth_valid = s.n_depth_valid;
  r.n_volume_samples = f.n_volume_samples;
  return r;
}

}  // namespace volcount
