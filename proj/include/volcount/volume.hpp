// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>

#include "volcount/core.hpp"

namespace volcount {

template <typename S>
struct BoundingBox {
  Vec3<S> min = Vec3<S>::Zero();
  Vec3<S> max = Vec3<S>::Ones();

  Vec3<S> extent() const { return max - min; }
};

/// Slab intersection of a ray with the box. Returns the (t0, t1) parameter
/// interval clipped to t >= 0, or nullopt when the ray misses.
template <typename S>
std::optional<std::pair<S, S>> intersect(const BoundingBox<S>& box, const Vec3<S>& origin,
                                         const Vec3<S>& direction) {
  S t0 = S(0);
  S t1 = std::numeric_limits<S>::max();
  for (int a = 0; a < 3; ++a) {
    if (direction[a] == S(0)) {
      if (origin[a] < box.min[a] || origin[a] > box.max[a]) return std::nullopt;
      continue;
    }
    S lo = (box.min[a] - origin[a]) / direction[a];
    S hi = (box.max[a] - origin[a]) / direction[a];
    if (lo > hi) std::swap(lo, hi);
    t0 = std::max(t0, lo);
    t1 = std::min(t1, hi);
    if (t0 >= t1) return std::nullopt;
  }
  return std::make_pair(t0, t1);
}

/// Node-centered feature grid over `bbox`: node (i,j,k) sits at
/// bbox.min + (i,j,k) * cell with cell = extent / (dims - 1). Features are
/// stored one column per node, nodes ordered x-fastest:
/// node_index = i + dims.x * (j + dims.y * k).
template <typename S>
struct FeatureVolume {
  Vec3i dims = Vec3i(2, 2, 2);  // grid-node counts, each >= 2
  int channels = 1;
  BoundingBox<S> bbox;
  MatX<S> values;  // channels x (dims.x * dims.y * dims.z)

  int node_count() const { return dims.x() * dims.y() * dims.z(); }
  int node_index(int i, int j, int k) const { return i + dims.x() * (j + dims.y() * k); }
  Vec3<S> node_position(int i, int j, int k) const {
    const Vec3<S> cell = bbox.extent().cwiseQuotient((dims - Vec3i::Ones()).template cast<S>());
    return bbox.min + Vec3<S>(S(i) * cell.x(), S(j) * cell.y(), S(k) * cell.z());
  }

  static FeatureVolume zeros(const Vec3i& dims, int channels, const BoundingBox<S>& bbox) {
    FeatureVolume v;
    v.dims = dims;
    v.channels = channels;
    v.bbox = bbox;
    v.values = MatX<S>::Zero(channels, v.node_count());
    return v;
  }
};

/// Single-channel nonnegative volume, persons per unit volume.
template <typename S>
using DensityVolume = FeatureVolume<S>;

template <typename S>
struct GridCoords {
  Vec3<S> g;  // continuous grid coordinates, unclamped
  bool out_of_bounds;
};

/// Affine map of bbox onto [0, dims-1]^3. Out-of-box inputs are returned
/// unclamped with the flag set.
template <typename S>
GridCoords<S> world_to_grid(const FeatureVolume<S>& vol, const Vec3<S>& p) {
  GridCoords<S> out;
  out.out_of_bounds = false;
  for (int a = 0; a < 3; ++a) {
    const S extent = vol.bbox.max[a] - vol.bbox.min[a];
    out.g[a] = (p[a] - vol.bbox.min[a]) / extent * S(vol.dims[a] - 1);
    if (out.g[a] < S(0) || out.g[a] > S(vol.dims[a] - 1)) out.out_of_bounds = true;
  }
  return out;
}

/// The 8 enclosing nodes of a query and their trilinear weights. Queries
/// outside the box are clamped to the boundary (clamp-to-edge), so weights
/// are always nonnegative and sum to 1.
template <typename S>
struct TrilinearStencil {
  int node[8];
  S weight[8];
};

template <typename S>
TrilinearStencil<S> trilinear_stencil(const FeatureVolume<S>& vol, const Vec3<S>& p) {
  int base[3];
  S frac[3];
  const Vec3<S> g = world_to_grid(vol, p).g;
  for (int a = 0; a < 3; ++a) {
    const S clamped = std::clamp(g[a], S(0), S(vol.dims[a] - 1));
    int i0 = static_cast<int>(std::floor(clamped));
    i0 = std::min(i0, vol.dims[a] - 2);
    base[a] = i0;
    frac[a] = clamped - S(i0);
  }
  TrilinearStencil<S> st;
  int c = 0;
  for (int dk = 0; dk < 2; ++dk)
    for (int dj = 0; dj < 2; ++dj)
      for (int di = 0; di < 2; ++di, ++c) {
        st.node[c] = vol.node_index(base[0] + di, base[1] + dj, base[2] + dk);
        const S wx = di ? frac[0] : S(1) - frac[0];
        const S wy = dj ? frac[1] : S(1) - frac[1];
        const S wz = dk ? frac[2] : S(1) - frac[2];
        st.weight[c] = wx * wy * wz;
      }
  return st;
}

/// Trilinear blend of the 8 enclosing node features (clamp-to-edge).
template <typename S>
VecX<S> sample_trilinear(const FeatureVolume<S>& vol, const Vec3<S>& p) {
  const TrilinearStencil<S> st = trilinear_stencil(vol, p);
  VecX<S> f = VecX<S>::Zero(vol.channels);
  for (int c = 0; c < 8; ++c) f += st.weight[c] * vol.values.col(st.node[c]);
  return f;
}

/// Exact adjoint of sample_trilinear: each enclosing node receives `upstream`
/// scaled by its trilinear weight. `grad` has the same shape as vol.values.
template <typename S>
void sample_trilinear_backward(const FeatureVolume<S>& vol, const Vec3<S>& p,
                               const VecX<S>& upstream, MatX<S>& grad) {
  const TrilinearStencil<S> st = trilinear_stencil(vol, p);
  for (int c = 0; c < 8; ++c) grad.col(st.node[c]) += st.weight[c] * upstream;
}

}  // namespace volcount
