// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#include "volcount/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace volcount {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
  throw IoError(path.string() + ": " + what);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  return in;
}

json parse_json_file(const std::filesystem::path& path) {
  auto in = open_in(path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) fail(path, "invalid JSON");
  return j;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image<float>& image) {
  if (image.channels != 3) fail(path, "PPM requires 3 channels");
  auto out = open_out(path);
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(image.width) * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(x, y, c), 0.0f, 1.0f);
        row[3 * x + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) fail(path, "write failed");
}

Image<float> read_ppm(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) fail(path, "not a P6/255 PPM");
  in.get();  // single whitespace after header
  Image<float> image = Image<float>::zeros(w, h, 3);
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!in) fail(path, "truncated pixel data");
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) image.at(x, y, c) = float(row[3 * x + c]) / 255.0f;
  }
  return image;
}

void write_pfm(const std::filesystem::path& path, const Image<float>& image) {
  if (image.channels != 1) fail(path, "grayscale PFM requires 1 channel");
  auto out = open_out(path);
  out << "Pf\n" << image.width << " " << image.height << "\n-1.0\n";
  for (int y = image.height - 1; y >= 0; --y) {  // bottom-up
    std::vector<float> row(static_cast<size_t>(image.width));
    for (int x = 0; x < image.width; ++x) row[static_cast<size_t>(x)] = image.at(x, y);
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) fail(path, "write failed");
}

Image<float> read_pfm(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  in >> magic >> w >> h >> scale;
  if (magic != "Pf" || w <= 0 || h <= 0 || scale >= 0) fail(path, "not a little-endian Pf PFM");
  in.get();
  Image<float> image = Image<float>::zeros(w, h, 1);
  std::vector<float> row(static_cast<size_t>(w));
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) fail(path, "truncated pixel data");
    for (int x = 0; x < w; ++x) image.at(x, y) = row[static_cast<size_t>(x)];
  }
  return image;
}

void write_volume(const std::filesystem::path& raw_path, const std::filesystem::path& json_path,
                  const FeatureVolume<float>& volume) {
  {
    auto out = open_out(raw_path);
    out.write(reinterpret_cast<const char*>(volume.values.data()),
              static_cast<std::streamsize>(sizeof(float) * volume.values.size()));
    if (!out) fail(raw_path, "write failed");
  }
  json j;
  j["dims"] = {volume.dims.x(), volume.dims.y(), volume.dims.z()};
  j["channels"] = volume.channels;
  j["bbox_min"] = {volume.bbox.min.x(), volume.bbox.min.y(), volume.bbox.min.z()};
  j["bbox_max"] = {volume.bbox.max.x(), volume.bbox.max.y(), volume.bbox.max.z()};
  write_text_atomic(json_path, j.dump(2) + "\n");
}

FeatureVolume<float> read_volume(const std::filesystem::path& raw_path,
                                 const std::filesystem::path& json_path) {
  const json j = parse_json_file(json_path);
  FeatureVolume<float> volume;
  try {
    volume.dims = Vec3i(j.at("dims").at(0), j.at("dims").at(1), j.at("dims").at(2));
    volume.channels = j.at("channels");
    for (int a = 0; a < 3; ++a) {
      volume.bbox.min[a] = j.at("bbox_min").at(a);
      volume.bbox.max[a] = j.at("bbox_max").at(a);
    }
  } catch (const json::exception& e) {
    fail(json_path, e.what());
  }
  if (volume.dims.minCoeff() < 2 || volume.channels < 1) fail(json_path, "invalid volume header");
  const Eigen::Index n = volume.node_count();
  volume.values.resize(volume.channels, n);
  auto in = open_in(raw_path);
  in.read(reinterpret_cast<char*>(volume.values.data()),
          static_cast<std::streamsize>(sizeof(float) * volume.values.size()));
  if (!in || in.gcount() != static_cast<std::streamsize>(sizeof(float) * volume.values.size()))
    fail(raw_path, "truncated volume data");
  return volume;
}

namespace {

json camera_to_json(const CameraModel<double>& cam) {
  json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  std::vector<double> rot(9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot[static_cast<size_t>(3 * r + c)] = cam.rotation(r, c);
  j["rotation"] = rot;
  j["translation"] = {cam.translation.x(), cam.translation.y(), cam.translation.z()};
  return j;
}

CameraModel<double> camera_from_json(const json& j, const std::filesystem::path& path) {
  CameraModel<double> cam;
  try {
    cam.fx = j.at("fx");
    cam.fy = j.at("fy");
    cam.cx = j.at("cx");
    cam.cy = j.at("cy");
    cam.width = j.at("width");
    cam.height = j.at("height");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) cam.rotation(r, c) = j.at("rotation").at(3 * r + c);
    for (int a = 0; a < 3; ++a) cam.translation[a] = j.at("translation").at(a);
  } catch (const json::exception& e) {
    fail(path, e.what());
  }
  if (!camera_valid(cam)) fail(path, "camera violates model invariants");
  return cam;
}

}  // namespace

void write_cameras(const std::filesystem::path& path,
                   const std::vector<CameraModel<double>>& cameras) {
  json j = json::array();
  for (const auto& cam : cameras) j.push_back(camera_to_json(cam));
  write_text_atomic(path, j.dump(2) + "\n");
}

std::vector<CameraModel<double>> read_cameras(const std::filesystem::path& path) {
  const json j = parse_json_file(path);
  std::vector<CameraModel<double>> cams;
  if (j.is_array())
    for (const auto& item : j) cams.push_back(camera_from_json(item, path));
  else
    cams.push_back(camera_from_json(j, path));
  return cams;
}

void write_f32(const std::filesystem::path& path, const std::vector<float>& data) {
  auto out = open_out(path);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(sizeof(float) * data.size()));
  if (!out) fail(path, "write failed");
}

std::vector<float> read_f32(const std::filesystem::path& path) {
  auto in = open_in(path);
  in.seekg(0, std::ios::end);
  const std::streamsize bytes = in.tellg();
  in.seekg(0);
  if (bytes % sizeof(float) != 0) fail(path, "size is not a multiple of 4 bytes");
  std::vector<float> data(static_cast<size_t>(bytes) / sizeof(float));
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  if (!in) fail(path, "read failed");
  return data;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    auto out = open_out(tmp);
    out << text;
    if (!out) fail(tmp, "write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(path, "rename failed: " + ec.message());
}

}  // namespace volcount
