// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>

#include "volcount/core.hpp"

namespace volcount {

// Conventions used throughout:
//  - right-handed world frame; the camera looks down +z in its own frame,
//    +x right, +y down (image v grows downward);
//  - (u, v) are continuous image-plane coordinates; the integer pixel (i, j)
//    is sampled through its center (i + 0.5, j + 0.5).

/// Pinhole camera. `rotation` maps world to camera coordinates and
/// `translation` is the world origin expressed in the camera frame,
/// so p_cam = R * p_world + t.
template <typename S>
struct CameraModel {
  S fx = S(1), fy = S(1);
  S cx = S(0), cy = S(0);
  int width = 1, height = 1;
  Mat3<S> rotation = Mat3<S>::Identity();
  Vec3<S> translation = Vec3<S>::Zero();

  /// Camera center in world coordinates, -Rᵀt.
  Vec3<S> center() const { return -(rotation.transpose() * translation); }
};

/// Checks the CameraModel invariants: R orthonormal with det +1 (to 1e-9),
/// positive focal lengths, nonempty image.
template <typename S>
bool camera_valid(const CameraModel<S>& cam, S tol = S(1e-9)) {
  const Mat3<S> rtr = cam.rotation.transpose() * cam.rotation;
  if ((rtr - Mat3<S>::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  if (std::abs(cam.rotation.determinant() - S(1)) > tol) return false;
  return cam.fx > S(0) && cam.fy > S(0) && cam.width >= 1 && cam.height >= 1;
}

template <typename S>
struct Ray {
  Vec3<S> origin = Vec3<S>::Zero();
  Vec3<S> direction = Vec3<S>::UnitZ();  // unit norm
  S t_near = S(0);
  S t_far = S(1);
};

/// Stratified depths t_i (strictly ascending) and the points o + t_i d.
template <typename S>
struct RaySamples {
  VecX<S> depths;
  MatX<S> points;  // 3 x M, column i is the i-th sample point
};

template <typename S>
struct PixelProjection {
  S u, v;  // continuous image coordinates
  S z;     // camera-frame forward depth
};

/// Ray through continuous image coordinates (u, v). The origin is the camera
/// center; t_near/t_far are left at their defaults and are usually replaced by
/// a bounding-box clip before sampling.
template <typename S>
Ray<S> ray_for_pixel(const CameraModel<S>& cam, S u, S v) {
  Vec3<S> dir_cam((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, S(1));
  Ray<S> ray;
  ray.origin = cam.center();
  ray.direction = (cam.rotation.transpose() * dir_cam).normalized();
  return ray;
}

/// Pinhole projection. Returns nullopt when the point lies at or behind the
/// camera plane (z <= 1e-6).
template <typename S>
std::optional<PixelProjection<S>> project_point(const CameraModel<S>& cam, const Vec3<S>& p) {
  const Vec3<S> pc = cam.rotation * p + cam.translation;
  if (pc.z() <= S(1e-6)) return std::nullopt;
  return PixelProjection<S>{cam.fx * pc.x() / pc.z() + cam.cx,
                            cam.fy * pc.y() / pc.z() + cam.cy, pc.z()};
}

/// Stratified sampling of [t_near, t_far]: M equal bins, one uniform draw per
/// bin, so the output is ascending by construction.
template <typename S>
RaySamples<S> sample_ray_depths(const Ray<S>& ray, int m, Rng& rng) {
  if (m < 1) throw std::invalid_argument("sample_ray_depths: M must be >= 1");
  RaySamples<S> out;
  out.depths.resize(m);
  out.points.resize(3, m);
  const S span = (ray.t_far - ray.t_near) / S(m);
  for (int i = 0; i < m; ++i) {
    const S t = ray.t_near + span * (S(i) + S(rng.uniform()));
    out.depths[i] = t;
    out.points.col(i) = ray.origin + t * ray.direction;
  }
  return out;
}

}  // namespace volcount
