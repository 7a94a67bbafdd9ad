// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "volcount/encoder.hpp"

using namespace volcount;
using volcount_test::central_diff;
using volcount_test::rel_err;

namespace {

Image<double> random_image(int w, int h, int c, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Image<double> im = Image<double>::zeros(w, h, c);
  for (Eigen::Index i = 0; i < im.data.size(); ++i) im.data.data()[i] = rng.uniform(lo, hi);
  return im;
}

/// Camera at the origin looking down +z; with fx=fy=8, cx=cy=8 a 16x16 frame
/// covers x,y in [-z, z] at depth z.
CameraModel<double> forward_camera() {
  CameraModel<double> cam;
  cam.fx = cam.fy = 8.0;
  cam.cx = cam.cy = 8.0;
  cam.width = cam.height = 16;
  return cam;
}

}  // namespace

TEST_CASE("zero image with zero biases gives zero features") {
  Rng rng(1);
  auto params = make_conv_net<double>(8, 4, rng);
  params.conv1.biases.setZero();
  params.conv2.biases.setZero();
  const Image<double> image = Image<double>::zeros(16, 16, 3);
  const Image<double> f = extract_features(image, params);
  CHECK(f.data.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("feature map shape is a quarter of the input") {
  Rng rng(2);
  const auto params = make_conv_net<double>(8, 5, rng);
  const Image<double> image = random_image(32, 32, 3, rng);
  const Image<double> f = extract_features(image, params);
  CHECK(f.width == 8);
  CHECK(f.height == 8);
  CHECK(f.channels == 5);

  Image<double> bad = Image<double>::zeros(30, 32, 3);
  CHECK_THROWS_AS(extract_features(bad, params), std::invalid_argument);
}

TEST_CASE("translating the input by 4 px shifts features by one cell") {
  Rng rng(3);
  const auto params = make_conv_net<double>(8, 4, rng);
  Image<double> image = Image<double>::zeros(32, 32, 3);
  // A small random sprite away from the borders.
  for (int y = 10; y < 16; ++y)
    for (int x = 10; x < 16; ++x)
      for (int c = 0; c < 3; ++c) image.at(x, y, c) = rng.uniform(0.2, 1.0);

  Image<double> shifted = Image<double>::zeros(32, 32, 3);
  for (int y = 0; y < 28; ++y)
    for (int x = 0; x < 28; ++x)
      for (int c = 0; c < 3; ++c) shifted.at(x + 4, y + 4, c) = image.at(x, y, c);

  const Image<double> fa = extract_features(image, params);
  const Image<double> fb = extract_features(shifted, params);
  for (int y = 2; y < 6; ++y)
    for (int x = 2; x < 6; ++x)
      CHECK((Eigen::VectorXd(fb.pixel(x + 1, y + 1)) - Eigen::VectorXd(fa.pixel(x, y)))
                .cwiseAbs()
                .maxCoeff() <= 1e-12);
}

TEST_CASE("density head closed-form values") {
  Rng rng(4);
  auto params = make_conv_net<double>(8, 4, rng);
  SUBCASE("zero features and zero bias give ln 2 per cell") {
    params.head_bias[0] = 0.0;
    const Image<double> f = Image<double>::zeros(4, 4, 4);
    const Image<double> d = predict_density_map(f, params);
    for (Eigen::Index i = 0; i < d.data.size(); ++i)
      CHECK(d.data.data()[i] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("entries are nonnegative for random features") {
    const Image<double> f = random_image(4, 4, 4, rng, -3.0, 3.0);
    const Image<double> d = predict_density_map(f, params);
    CHECK(d.data.minCoeff() >= 0.0);
  }
  SUBCASE("a -20 bias drives the count to zero") {
    params.head_weights.setZero();
    params.head_bias[0] = -20.0;
    const Image<double> f = Image<double>::zeros(8, 8, 4);
    const Image<double> d = predict_density_map(f, params);
    CHECK(d.data.sum() <= 8 * 8 * 3e-9);
  }
}

TEST_CASE("lift_to_volume pooling rules") {
  BoundingBox<double> box;
  box.min = Vec3<double>(-0.4, -0.4, 1.2);
  box.max = Vec3<double>(0.4, 0.4, 1.8);  // fully inside the forward camera's frustum
  const Vec3i dims(3, 3, 3);

  SUBCASE("one view with a constant map fills every visible node") {
    Image<double> map = Image<double>::zeros(4, 4, 2);
    map.data.row(0).setConstant(0.7);
    map.data.row(1).setConstant(-0.3);
    const auto vol = lift_to_volume<double>({map}, {forward_camera()}, box, dims, 2);
    for (int n = 0; n < vol.node_count(); ++n) {
      CHECK(vol.values(0, n) == doctest::Approx(0.7).epsilon(1e-12));
      CHECK(vol.values(1, n) == doctest::Approx(-0.3).epsilon(1e-12));
    }
  }

  SUBCASE("nodes behind the only camera stay zero") {
    BoundingBox<double> behind;
    behind.min = Vec3<double>(-0.4, -0.4, -2.0);
    behind.max = Vec3<double>(0.4, 0.4, -1.0);
    Image<double> map = Image<double>::zeros(4, 4, 2);
    map.data.setConstant(1.0);
    const auto vol = lift_to_volume<double>({map}, {forward_camera()}, behind, dims, 2);
    CHECK(vol.values.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("two contributing views average") {
    Image<double> a = Image<double>::zeros(4, 4, 1);
    a.data.setConstant(1.0);
    Image<double> b = Image<double>::zeros(4, 4, 1);
    b.data.setConstant(2.0);
    const auto vol =
        lift_to_volume<double>({a, b}, {forward_camera(), forward_camera()}, box, dims, 1);
    for (int n = 0; n < vol.node_count(); ++n)
      CHECK(vol.values(0, n) == doctest::Approx(1.5).epsilon(1e-12));
  }

  SUBCASE("a camera that sees nothing leaves the volume unchanged") {
    Rng rng(7);
    Image<double> map = random_image(4, 4, 2, rng, -1.0, 1.0);
    auto blind_cam = forward_camera();
    blind_cam.rotation = Eigen::AngleAxisd(M_PI, Eigen::Vector3d::UnitX()).toRotationMatrix();
    Image<double> blind_map = random_image(4, 4, 2, rng, -1.0, 1.0);
    const auto vol1 = lift_to_volume<double>({map}, {forward_camera()}, box, dims, 2);
    const auto vol2 = lift_to_volume<double>({map, blind_map},
                                             {forward_camera(), blind_cam}, box, dims, 2);
    CHECK((vol1.values - vol2.values).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("encoder gradients match finite differences") {
  Rng rng(11);
  auto params = make_conv_net<double>(4, 3, rng);

  // The conv1 preactivations must stay away from the ReLU kink for the
  // finite differences to be meaningful; re-draw the image until they do.
  Image<double> image;
  bool found = false;
  for (int attempt = 0; attempt < 64 && !found; ++attempt) {
    image = random_image(16, 16, 3, rng);
    EncoderCache<double> cache;
    extract_features(image, params, &cache);
    found = cache.pre1.data.cwiseAbs().minCoeff() > 1e-3;
  }
  REQUIRE(found);

  // Random functionals over features and the density map.
  Rng coef(12);
  MatX<double> a = MatX<double>::Zero(3, 16);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = coef.normal();
  VecX<double> b = VecX<double>::Zero(16);
  for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = coef.normal();

  const auto eval = [&] {
    EncoderCache<double> cache;
    const Image<double> f = extract_features(image, params, &cache);
    const Image<double> d = predict_density_map(f, params, &cache);
    return double((f.data.array() * a.array()).sum() + (d.data * b).sum());
  };

  EncoderCache<double> cache;
  const Image<double> f = extract_features(image, params, &cache);
  const Image<double> d = predict_density_map(f, params, &cache);
  (void)d;
  auto grads = ConvNetGrad<double>::zeros_like(params);
  Image<double> dfeat = Image<double>::zeros(f.width, f.height, f.channels);
  dfeat.data = a;
  Image<double> ddens = Image<double>::zeros(4, 4, 1);
  ddens.data = b.transpose();
  predict_density_map_backward(f, params, cache, ddens, grads, dfeat);
  extract_features_backward(params, cache, dfeat, grads);

  const auto check_block = [&](MatX<double>& param, const MatX<double>& grad) {
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double fd = central_diff(param.data()[i], eval, 1e-4);
      CHECK(rel_err(grad.data()[i], fd) <= 1e-4);
    }
  };
  const auto check_vec = [&](VecX<double>& param, const VecX<double>& grad) {
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double fd = central_diff(param[i], eval, 1e-4);
      CHECK(rel_err(grad[i], fd) <= 1e-4);
    }
  };
  check_block(params.conv1.weights, grads.conv1.weights);
  check_vec(params.conv1.biases, grads.conv1.biases);
  check_block(params.conv2.weights, grads.conv2.weights);
  check_vec(params.conv2.biases, grads.conv2.biases);
  check_block(params.head_weights, grads.head_weights);
  check_vec(params.head_bias, grads.head_bias);
}

TEST_CASE("lift_to_volume adjoint matches finite differences") {
  BoundingBox<double> box;
  box.min = Vec3<double>(-0.4, -0.4, 1.2);
  box.max = Vec3<double>(0.4, 0.4, 1.8);
  const Vec3i dims(3, 3, 3);
  Rng rng(13);
  std::vector<Image<double>> maps = {random_image(4, 4, 2, rng, -1.0, 1.0),
                                     random_image(4, 4, 2, rng, -1.0, 1.0)};
  std::vector<CameraModel<double>> cams = {forward_camera(), forward_camera()};
  cams[1].cx = 7.4;  // slightly different sampling pattern

  MatX<double> upstream = MatX<double>::Zero(2, 27);
  for (Eigen::Index i = 0; i < upstream.size(); ++i) upstream.data()[i] = rng.normal();

  const auto eval = [&] {
    const auto vol = lift_to_volume<double>(maps, cams, box, dims, 2);
    return double((vol.values.array() * upstream.array()).sum());
  };

  LiftCache<double> cache;
  lift_to_volume<double>(maps, cams, box, dims, 2, &cache);
  std::vector<Image<double>> dmaps = {Image<double>::zeros(4, 4, 2), Image<double>::zeros(4, 4, 2)};
  lift_to_volume_backward(cache, upstream, dmaps);

  for (size_t v = 0; v < maps.size(); ++v)
    for (Eigen::Index i = 0; i < maps[v].data.size(); ++i) {
      const double fd = central_diff(maps[v].data.data()[i], eval, 1e-4);
      CHECK(rel_err(dmaps[v].data.data()[i], fd) <= 1e-6);
    }
}
