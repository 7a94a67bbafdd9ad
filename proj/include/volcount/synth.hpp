// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "volcount/core.hpp"
#include "volcount/geometry.hpp"
#include "volcount/image.hpp"
#include "volcount/volume.hpp"

namespace volcount {

/// One person: a capsule or sphere body, a head point carrying the unit
/// density blob, and a flat albedo.
template <typename S>
struct Entity {
  enum class Body { kSphere, kCapsule };
  Body body = Body::kSphere;
  Vec3<S> center = Vec3<S>::Zero();   // sphere center
  Vec3<S> axis_p0 = Vec3<S>::Zero();  // capsule segment endpoints
  Vec3<S> axis_p1 = Vec3<S>::Zero();
  S radius = S(0.1);
  S head_radius = S(0);  // extra head sphere at `head` when > 0
  Vec3<S> head = Vec3<S>::Zero();
  S sigma = S(0.1);  // density blob stddev, world units
  Vec3<S> albedo = Vec3<S>::Ones();
};

template <typename S>
struct SceneSpec {
  BoundingBox<S> bbox;
  std::vector<Entity<S>> entities;
  std::vector<CameraModel<S>> cameras;
  bool ground_plane = false;
  Vec3<S> ground_albedo = Vec3<S>::Constant(S(0.3));
};

namespace detail {

template <typename S>
S sphere_sdf(const Vec3<S>& p, const Vec3<S>& c, S r) {
  return (p - c).norm() - r;
}

template <typename S>
S capsule_sdf(const Vec3<S>& p, const Vec3<S>& a, const Vec3<S>& b, S r) {
  const Vec3<S> ab = b - a;
  const S t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), S(0), S(1));
  return (p - (a + t * ab)).norm() - r;
}

template <typename S>
S entity_sdf(const Entity<S>& e, const Vec3<S>& p) {
  S s = e.body == Entity<S>::Body::kSphere ? sphere_sdf(p, e.center, e.radius)
                                           : capsule_sdf(p, e.axis_p0, e.axis_p1, e.radius);
  if (e.head_radius > S(0)) s = std::min(s, sphere_sdf(p, e.head, e.head_radius));
  return s;
}

}  // namespace detail

/// Union SDF over all entities plus the optional ground plane at the bbox
/// floor. Empty scenes return a large positive distance.
template <typename S>
S analytic_sdf(const SceneSpec<S>& scene, const Vec3<S>& p) {
  S s = S(1e9);
  for (const auto& e : scene.entities) s = std::min(s, detail::entity_sdf(e, p));
  if (scene.ground_plane) s = std::min(s, p.z() - scene.bbox.min.z());
  return s;
}

/// Albedo of the closest surface; used by the oracle renderer as the
/// piecewise-constant color field.
template <typename S>
Vec3<S> analytic_albedo(const SceneSpec<S>& scene, const Vec3<S>& p) {
  S best = S(1e9);
  Vec3<S> albedo = Vec3<S>::Zero();
  for (const auto& e : scene.entities) {
    const S s = detail::entity_sdf(e, p);
    if (s < best) {
      best = s;
      albedo = e.albedo;
    }
  }
  if (scene.ground_plane && p.z() - scene.bbox.min.z() < best) albedo = scene.ground_albedo;
  return albedo;
}

/// Sum of unit-mass isotropic Gaussians at the head points, persons per unit
/// volume.
template <typename S>
S analytic_density(const SceneSpec<S>& scene, const Vec3<S>& p) {
  S d = S(0);
  for (const auto& e : scene.entities) {
    const S norm = std::pow(S(2) * S(M_PI) * e.sigma * e.sigma, S(-1.5));
    d += norm * std::exp(-(p - e.head).squaredNorm() / (S(2) * e.sigma * e.sigma));
  }
  return d;
}

/// Smallest positive ray parameter hitting the sphere, if any; closed-form
/// oracle for surface-consistency tests.
template <typename S>
std::optional<S> ray_sphere_intersection(const Vec3<S>& origin, const Vec3<S>& dir,
                                         const Vec3<S>& center, S radius) {
  const Vec3<S> oc = origin - center;
  const S b = oc.dot(dir);
  const S c = oc.squaredNorm() - radius * radius;
  const S disc = b * b - c;
  if (disc < S(0)) return std::nullopt;
  const S sq = std::sqrt(disc);
  const S t0 = -b - sq;
  if (t0 > S(0)) return t0;
  const S t1 = -b + sq;
  if (t1 > S(0)) return t1;
  return std::nullopt;
}

template <typename S>
struct OracleView {
  Image<S> rgb;           // 3 channels
  Image<S> depth;         // ray-parameter depth of the composite
  Image<S> accumulation;  // total occlusion weight per pixel
};

/// High-fidelity reference render over the analytic fields. This is its own
/// straight-loop compositing pass over the analytic SDF, deliberately not
/// routed through the learned-field renderer.
template <typename S>
OracleView<S> oracle_render_view(const SceneSpec<S>& scene, const CameraModel<S>& camera,
                                 int m_hi, S beta_hard, std::uint64_t seed) {
  OracleView<S> out;
  out.rgb = Image<S>::zeros(camera.width, camera.height, 3);
  out.depth = Image<S>::zeros(camera.width, camera.height, 1);
  out.accumulation = Image<S>::zeros(camera.width, camera.height, 1);

  const auto stable_sigmoid = [](S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    const S e = std::exp(x);
    return e / (S(1) + e);
  };

  std::vector<S> depths(static_cast<size_t>(m_hi));
  for (int py = 0; py < camera.height; ++py)
    for (int px = 0; px < camera.width; ++px) {
      const Ray<S> ray = ray_for_pixel(camera, S(px) + S(0.5), S(py) + S(0.5));
      const auto clip = intersect(scene.bbox, ray.origin, ray.direction);
      if (!clip) continue;  // black background

      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(px + camera.width * py)));
      const S span = (clip->second - clip->first) / S(m_hi);
      for (int i = 0; i < m_hi; ++i)
        depths[static_cast<size_t>(i)] = clip->first + span * (S(i) + S(rng.uniform()));

      S prev_delta = S(0);
      S transmittance = S(1);
      S z = S(0), accum = S(0);
      Vec3<S> color = Vec3<S>::Zero();
      for (int i = 0; i < m_hi; ++i) {
        const Vec3<S> p = ray.origin + depths[static_cast<size_t>(i)] * ray.direction;
        const S delta = stable_sigmoid(analytic_sdf(scene, p) * beta_hard);
        if (i > 0) {
          const S raw = (prev_delta - delta) / std::max(prev_delta, S(1e-9));
          const S alpha = std::max(raw, S(0));
          const S w = transmittance * alpha;
          // Composite uses the leading sample of each pair.
          const Vec3<S> prev_p =
              ray.origin + depths[static_cast<size_t>(i - 1)] * ray.direction;
          z += w * depths[static_cast<size_t>(i - 1)];
          color += w * analytic_albedo(scene, prev_p);
          accum += w;
          transmittance *= S(1) - alpha;
        }
        prev_delta = delta;
      }
      out.depth.at(px, py) = z;
      out.accumulation.at(px, py) = accum;
      out.rgb.pixel(px, py) = color;
    }
  return out;
}

/// GT 2D density map at quarter (feature) resolution: every in-frame,
/// in-front head is splatted as a discrete Gaussian renormalized to unit sum
/// within the frame. Returns the map and the number of in-frame heads.
template <typename S>
std::pair<Image<S>, int> gt_density_map_2d(const SceneSpec<S>& scene,
                                           const CameraModel<S>& camera, S sigma_px) {
  if (sigma_px <= S(0)) throw std::invalid_argument("gt_density_map_2d: sigma_px must be > 0");
  const int fw = camera.width / 4, fh = camera.height / 4;
  Image<S> map = Image<S>::zeros(fw, fh, 1);
  int in_frame = 0;
  const int radius = static_cast<int>(std::ceil(4 * sigma_px));
  for (const auto& e : scene.entities) {
    const auto proj = project_point(camera, e.head);
    if (!proj) continue;
    if (proj->u < S(0) || proj->u >= S(camera.width) || proj->v < S(0) ||
        proj->v >= S(camera.height))
      continue;
    ++in_frame;
    const S qx = proj->u / S(4) - S(0.5);
    const S qy = proj->v / S(4) - S(0.5);
    const int ax0 = std::max(0, static_cast<int>(std::floor(qx)) - radius);
    const int ax1 = std::min(fw - 1, static_cast<int>(std::ceil(qx)) + radius);
    const int ay0 = std::max(0, static_cast<int>(std::floor(qy)) - radius);
    const int ay1 = std::min(fh - 1, static_cast<int>(std::ceil(qy)) + radius);
    S total = S(0);
    for (int b = ay0; b <= ay1; ++b)
      for (int a = ax0; a <= ax1; ++a)
        total += std::exp(-((S(a) - qx) * (S(a) - qx) + (S(b) - qy) * (S(b) - qy)) /
                          (S(2) * sigma_px * sigma_px));
    if (total <= S(0)) continue;
    for (int b = ay0; b <= ay1; ++b)
      for (int a = ax0; a <= ax1; ++a)
        map.at(a, b) += std::exp(-((S(a) - qx) * (S(a) - qx) + (S(b) - qy) * (S(b) - qy)) /
                                 (S(2) * sigma_px * sigma_px)) /
                        total;
  }
  return {map, in_frame};
}

/// GT density volume: the analytic density sampled at grid nodes.
template <typename S>
DensityVolume<S> gt_density_volume(const SceneSpec<S>& scene, const Vec3i& dims) {
  if (dims.minCoeff() < 2) throw std::invalid_argument("gt_density_volume: dims must be >= 2");
  DensityVolume<S> vol = DensityVolume<S>::zeros(dims, 1, scene.bbox);
  for (int k = 0; k < dims.z(); ++k)
    for (int j = 0; j < dims.y(); ++j)
      for (int i = 0; i < dims.x(); ++i)
        vol.values(0, vol.node_index(i, j, k)) =
            analytic_density(scene, vol.node_position(i, j, k));
  return vol;
}

/// Composite trapezoidal integral of a single-channel volume over its bbox
/// (boundary nodes weighted 1/2 per axis).
template <typename S>
S integrate_density(const DensityVolume<S>& vol) {
  const Vec3<S> cell =
      vol.bbox.extent().cwiseQuotient((vol.dims - Vec3i::Ones()).template cast<S>());
  const S cell_volume = cell.prod();
  S total = S(0);
  for (int k = 0; k < vol.dims.z(); ++k)
    for (int j = 0; j < vol.dims.y(); ++j)
      for (int i = 0; i < vol.dims.x(); ++i) {
        S w = S(1);
        if (i == 0 || i == vol.dims.x() - 1) w *= S(0.5);
        if (j == 0 || j == vol.dims.y() - 1) w *= S(0.5);
        if (k == 0 || k == vol.dims.z() - 1) w *= S(0.5);
        total += w * vol.values(0, vol.node_index(i, j, k));
      }
  return total * cell_volume;
}

/// Camera at `position` looking at `target`, world +z treated as up, image v
/// growing downward.
template <typename S>
CameraModel<S> lookat_camera(const Vec3<S>& position, const Vec3<S>& target, S focal_px,
                             int width, int height) {
  const Vec3<S> forward = (target - position).normalized();
  Vec3<S> up = Vec3<S>::UnitZ();
  if (std::abs(forward.dot(up)) > S(0.999)) up = Vec3<S>::UnitY();
  const Vec3<S> x_cam = forward.cross(up).normalized();
  const Vec3<S> y_cam = forward.cross(x_cam);  // points down when up is +z

  CameraModel<S> cam;
  cam.fx = cam.fy = focal_px;
  cam.cx = S(width) / S(2);
  cam.cy = S(height) / S(2);
  cam.width = width;
  cam.height = height;
  cam.rotation.row(0) = x_cam.transpose();
  cam.rotation.row(1) = y_cam.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -(cam.rotation * position);
  return cam;
}

/// Scene-generation knobs; defaults give the desk-scale rig.
struct SynthConfig {
  int scenes = 3;
  int entities_min = 3;
  int entities_max = 12;
  int cameras = 4;
  int image_width = 32;
  int image_height = 32;
  double focal_px = 20.0;
  double camera_radius = 1.4;
  double camera_height = 0.55;
  double look_at_height = 0.25;
  Vec3<double> bbox_min = Vec3<double>::Zero();
  Vec3<double> bbox_max = Vec3<double>::Ones();
  bool ground_plane = false;
  int oracle_samples = 512;
  double beta_hard = 200.0;
  double sigma_px = 2.0;    // 2D splat stddev, feature cells
  double sigma_blob = 0.0;  // 0: auto, max(head radius, 2 GT volume cells)
  Vec3i density_dims = Vec3i(32, 32, 32);
};

/// All ground truth one scene supplies for training and evaluation.
template <typename S>
struct SceneSample {
  std::vector<CameraModel<S>> cameras;
  std::vector<Image<S>> images;        // RGB in [0,1]
  std::vector<Image<S>> depths;        // oracle composite depth (the depth prior)
  std::vector<Image<S>> accums;        // oracle accumulation (valid-depth mask source)
  std::vector<Image<S>> density_maps;  // quarter-res GT 2D density
  std::vector<int> view_counts;        // in-frame heads per view
  DensityVolume<S> density_volume;
  int count = 0;
};

/// Random crowd of capsule people with spherical heads inside the bbox,
/// plus the camera ring. Heads keep a >= 3.2 sigma margin from the bbox walls
/// so the blob mass stays inside (the density-volume integral must match the
/// count to 2%).
template <typename S>
SceneSpec<S> make_scene(const SynthConfig& config, Rng& rng) {
  SceneSpec<S> scene;
  scene.bbox.min = config.bbox_min.cast<S>();
  scene.bbox.max = config.bbox_max.cast<S>();
  scene.ground_plane = config.ground_plane;

  const Vec3<S> extent = scene.bbox.extent();
  const S cell =
      S((config.bbox_max - config.bbox_min).maxCoeff()) / S(config.density_dims.minCoeff() - 1);

  const int n = config.entities_min +
                static_cast<int>(rng.index(
                    static_cast<std::uint64_t>(config.entities_max - config.entities_min + 1)));
  std::vector<Vec3<S>> placed;
  for (int i = 0; i < n; ++i) {
    const S height = S(rng.uniform(0.40, 0.55)) * extent.z();
    const S body_r = height / S(8);
    const S head_r = S(0.11) * height;
    const S sigma = config.sigma_blob > 0 ? S(config.sigma_blob)
                                          : std::max(head_r, S(2) * cell);
    // Clamped so wide blobs still leave a nonempty placement band.
    const S margin = std::min(std::max(S(3.2) * sigma, body_r),
                              S(0.4) * std::min(extent.x(), extent.y()));

    Vec3<S> base;
    for (int attempt = 0; attempt < 100; ++attempt) {
      base = Vec3<S>(S(rng.uniform(scene.bbox.min.x() + margin, scene.bbox.max.x() - margin)),
                     S(rng.uniform(scene.bbox.min.y() + margin, scene.bbox.max.y() - margin)),
                     scene.bbox.min.z());
      bool ok = true;
      for (const auto& q : placed)
        if ((Vec2<S>(base.x(), base.y()) - Vec2<S>(q.x(), q.y())).norm() < S(0.07) * extent.x())
          ok = false;
      if (ok) break;
    }
    placed.push_back(base);

    Entity<S> e;
    e.body = Entity<S>::Body::kCapsule;
    e.radius = body_r;
    e.axis_p0 = base + Vec3<S>(0, 0, body_r);
    e.axis_p1 = base + Vec3<S>(0, 0, S(0.72) * height);
    e.head = base + Vec3<S>(0, 0, S(0.86) * height);
    e.head_radius = head_r;
    e.center = (e.axis_p0 + e.axis_p1) / S(2);
    e.sigma = sigma;
    e.albedo = Vec3<S>(S(rng.uniform(0.25, 1.0)), S(rng.uniform(0.25, 1.0)),
                       S(rng.uniform(0.25, 1.0)));
    scene.entities.push_back(e);
  }

  const Vec3<S> center = (scene.bbox.min + scene.bbox.max) / S(2);
  const Vec3<S> look_at(center.x(), center.y(),
                        scene.bbox.min.z() + S(config.look_at_height) * extent.z());
  for (int v = 0; v < config.cameras; ++v) {
    const S angle = S(2) * S(M_PI) * S(v) / S(config.cameras) + S(M_PI) / S(8);
    const Vec3<S> pos(center.x() + S(config.camera_radius) * std::cos(angle),
                      center.y() + S(config.camera_radius) * std::sin(angle),
                      scene.bbox.min.z() + S(config.camera_height) * extent.z());
    scene.cameras.push_back(lookat_camera<S>(pos, look_at, S(config.focal_px),
                                             config.image_width, config.image_height));
  }
  return scene;
}

/// Renders all per-view ground truth for a scene.
template <typename S>
SceneSample<S> make_scene_sample(const SceneSpec<S>& scene, const SynthConfig& config,
                                 std::uint64_t seed) {
  SceneSample<S> sample;
  sample.cameras = scene.cameras;
  sample.count = static_cast<int>(scene.entities.size());
  for (size_t v = 0; v < scene.cameras.size(); ++v) {
    const auto view = oracle_render_view(scene, scene.cameras[v], config.oracle_samples,
                                         S(config.beta_hard), mix_seed(seed, v));
    sample.images.push_back(view.rgb);
    sample.depths.push_back(view.depth);
    sample.accums.push_back(view.accumulation);
    auto [map, in_frame] = gt_density_map_2d(scene, scene.cameras[v], S(config.sigma_px));
    sample.density_maps.push_back(std::move(map));
    sample.view_counts.push_back(in_frame);
  }
  sample.density_volume = gt_density_volume(scene, config.density_dims);
  return sample;
}

}  // namespace volcount
