// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "volcount/core.hpp"
#include "volcount/geometry.hpp"
#include "volcount/image.hpp"
#include "volcount/volume.hpp"

namespace volcount {

// File formats, all little-endian:
//  - RGB images: binary PPM (P6, maxval 255), rows top-down.
//  - Scalar maps (depth, density, accumulation): grayscale PFM ("Pf"), scale
//    line -1.0, rows bottom-up per the PFM convention.
//  - Volumes: raw 32-bit floats in node order (x fastest, channels contiguous
//    per node) plus a JSON sidecar {dims, channels, bbox_min, bbox_max}.
//  - Cameras: JSON objects with keys fx, fy, cx, cy, width, height, rotation
//    (row-major 9 floats, world-to-camera), translation (3 floats); a camera
//    file holds either one object or an array of them.

/// Values are clamped to [0,1] and quantized to 8 bits.
void write_ppm(const std::filesystem::path& path, const Image<float>& image);
Image<float> read_ppm(const std::filesystem::path& path);

void write_pfm(const std::filesystem::path& path, const Image<float>& image);
Image<float> read_pfm(const std::filesystem::path& path);

void write_volume(const std::filesystem::path& raw_path, const std::filesystem::path& json_path,
                  const FeatureVolume<float>& volume);
FeatureVolume<float> read_volume(const std::filesystem::path& raw_path,
                                 const std::filesystem::path& json_path);

void write_cameras(const std::filesystem::path& path,
                   const std::vector<CameraModel<double>>& cameras);
/// Validates the camera invariants (orthonormal rotation, det +1, positive
/// focals) on load and throws IoError on violation.
std::vector<CameraModel<double>> read_cameras(const std::filesystem::path& path);

/// Flat little-endian float32 blobs (checkpoints, gradients).
void write_f32(const std::filesystem::path& path, const std::vector<float>& data);
std::vector<float> read_f32(const std::filesystem::path& path);

/// Writes via a temporary file in the same directory followed by a rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

template <typename To, typename From>
Image<To> cast_image(const Image<From>& im) {
  Image<To> out;
  out.width = im.width;
  out.height = im.height;
  out.channels = im.channels;
  out.data = im.data.template cast<To>();
  return out;
}

template <typename To, typename From>
FeatureVolume<To> cast_volume(const FeatureVolume<From>& v) {
  FeatureVolume<To> out;
  out.dims = v.dims;
  out.channels = v.channels;
  out.bbox.min = v.bbox.min.template cast<To>();
  out.bbox.max = v.bbox.max.template cast<To>();
  out.values = v.values.template cast<To>();
  return out;
}

template <typename To, typename From>
CameraModel<To> cast_camera(const CameraModel<From>& c) {
  CameraModel<To> out;
  out.fx = To(c.fx);
  out.fy = To(c.fy);
  out.cx = To(c.cx);
  out.cy = To(c.cy);
  out.width = c.width;
  out.height = c.height;
  out.rotation = c.rotation.template cast<To>();
  out.translation = c.translation.template cast<To>();
  return out;
}

}  // namespace volcount
