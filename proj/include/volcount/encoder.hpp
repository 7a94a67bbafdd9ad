// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <vector>

#include "volcount/core.hpp"
#include "volcount/geometry.hpp"
#include "volcount/image.hpp"
#include "volcount/volume.hpp"

namespace volcount {

/// 3x3 stride-2 convolution kernel stored as out_channels x (in_channels*9),
/// patch entries ordered c_in*9 + ky*3 + kx.
template <typename S>
struct ConvLayer {
  MatX<S> weights;
  VecX<S> biases;

  int out_channels() const { return static_cast<int>(weights.rows()); }
  int in_channels() const { return static_cast<int>(weights.cols()) / 9; }
};

/// Two stride-2 convolutions (3 -> mid -> C, ReLU between) and a 1x1
/// softplus density head on the C-channel feature map.
template <typename S>
struct ConvNetParams {
  ConvLayer<S> conv1;
  ConvLayer<S> conv2;
  MatX<S> head_weights;  // 1 x C
  VecX<S> head_bias;     // 1
};

template <typename S>
struct ConvNetGrad {
  ConvLayer<S> conv1, conv2;
  MatX<S> head_weights;
  VecX<S> head_bias;

  static ConvNetGrad zeros_like(const ConvNetParams<S>& p) {
    ConvNetGrad g;
    g.conv1 = {MatX<S>::Zero(p.conv1.weights.rows(), p.conv1.weights.cols()),
               VecX<S>::Zero(p.conv1.biases.size())};
    g.conv2 = {MatX<S>::Zero(p.conv2.weights.rows(), p.conv2.weights.cols()),
               VecX<S>::Zero(p.conv2.biases.size())};
    g.head_weights = MatX<S>::Zero(1, p.head_weights.cols());
    g.head_bias = VecX<S>::Zero(1);
    return g;
  }
};

/// Conv biases are drawn with magnitude bounded away from zero: constant
/// image regions land their ReLU preactivations exactly on the bias, and a
/// bias at the kink would break finite-difference gradient checks.
template <typename S>
ConvNetParams<S> make_conv_net(int mid_channels, int out_channels, Rng& rng) {
  const auto draw_bias = [&rng] {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return sign * rng.uniform(0.02, 0.08);
  };
  ConvNetParams<S> p;
  p.conv1.weights = MatX<S>::Zero(mid_channels, 3 * 9);
  p.conv1.biases = VecX<S>::Zero(mid_channels);
  for (Eigen::Index i = 0; i < p.conv1.weights.size(); ++i)
    p.conv1.weights.data()[i] = S(rng.normal(0, 0.1));
  for (int i = 0; i < mid_channels; ++i) p.conv1.biases[i] = S(draw_bias());

  p.conv2.weights = MatX<S>::Zero(out_channels, mid_channels * 9);
  p.conv2.biases = VecX<S>::Zero(out_channels);
  for (Eigen::Index i = 0; i < p.conv2.weights.size(); ++i)
    p.conv2.weights.data()[i] = S(rng.normal(0, 0.1));
  for (int i = 0; i < out_channels; ++i) p.conv2.biases[i] = S(draw_bias());

  p.head_weights = MatX<S>::Zero(1, out_channels);
  for (int i = 0; i < out_channels; ++i) p.head_weights(0, i) = S(rng.normal(0, 0.1));
  p.head_bias = VecX<S>::Constant(1, S(-2));  // start with a low density estimate
  return p;
}

namespace detail {

/// Zero-padded 3x3 stride-2 convolution; output is half the input size.
template <typename S>
Image<S> conv3x3_s2(const Image<S>& in, const ConvLayer<S>& layer) {
  const int out_w = in.width / 2, out_h = in.height / 2;
  const int cin = layer.in_channels();
  Image<S> out = Image<S>::zeros(out_w, out_h, layer.out_channels());
  VecX<S> patch(cin * 9);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      patch.setZero();
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = 2 * x - 1 + kx, iy = 2 * y - 1 + ky;
          if (ix < 0 || iy < 0 || ix >= in.width || iy >= in.height) continue;
          for (int c = 0; c < cin; ++c) patch[c * 9 + ky * 3 + kx] = in.at(ix, iy, c);
        }
      out.pixel(x, y) = layer.weights * patch + layer.biases;
    }
  return out;
}

/// Adjoint of conv3x3_s2; accumulates parameter gradients and, when `din` is
/// non-null, the input-image gradient.
template <typename S>
void conv3x3_s2_backward(const Image<S>& in, const ConvLayer<S>& layer, const Image<S>& dout,
                         ConvLayer<S>& grad, Image<S>* din) {
  const int cin = layer.in_channels();
  VecX<S> patch(cin * 9);
  for (int y = 0; y < dout.height; ++y)
    for (int x = 0; x < dout.width; ++x) {
      patch.setZero();
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = 2 * x - 1 + kx, iy = 2 * y - 1 + ky;
          if (ix < 0 || iy < 0 || ix >= in.width || iy >= in.height) continue;
          for (int c = 0; c < cin; ++c) patch[c * 9 + ky * 3 + kx] = in.at(ix, iy, c);
        }
      const auto d = dout.pixel(x, y);
      grad.weights.noalias() += d * patch.transpose();
      grad.biases += d;
      if (din) {
        const VecX<S> dpatch = layer.weights.transpose() * d;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = 2 * x - 1 + kx, iy = 2 * y - 1 + ky;
            if (ix < 0 || iy < 0 || ix >= in.width || iy >= in.height) continue;
            for (int c = 0; c < cin; ++c) din->at(ix, iy, c) += dpatch[c * 9 + ky * 3 + kx];
          }
      }
    }
}

}  // namespace detail

template <typename S>
struct EncoderCache {
  Image<S> input;
  Image<S> pre1;   // conv1 preactivations (the ReLU mask source)
  Image<S> post1;  // relu(pre1)
  Image<S> features;
  Image<S> head_pre;  // density head preactivations
};

/// H x W x 3 image in [0,1] to an H/4 x W/4 x C feature map.
template <typename S>
Image<S> extract_features(const Image<S>& image, const ConvNetParams<S>& params,
                          EncoderCache<S>* cache = nullptr) {
  if (image.width % 4 != 0 || image.height % 4 != 0)
    throw std::invalid_argument("extract_features: image dimensions must be divisible by 4");
  if (image.channels != 3)
    throw std::invalid_argument("extract_features: expected a 3-channel image");
  Image<S> pre1 = detail::conv3x3_s2(image, params.conv1);
  Image<S> post1 = pre1;
  post1.data = post1.data.cwiseMax(S(0));
  Image<S> features = detail::conv3x3_s2(post1, params.conv2);
  if (cache) {
    cache->input = image;
    cache->pre1 = std::move(pre1);
    cache->post1 = std::move(post1);
    cache->features = features;
  }
  return features;
}

/// 1x1 convolution + softplus over a feature map; entries are nonnegative and
/// their sum is the view's predicted count.
template <typename S>
Image<S> predict_density_map(const Image<S>& features, const ConvNetParams<S>& params,
                             EncoderCache<S>* cache = nullptr) {
  Image<S> out = Image<S>::zeros(features.width, features.height, 1);
  MatX<S> pre = params.head_weights * features.data;
  pre.array() += params.head_bias[0];
  out.data = pre.unaryExpr([](S v) { return softplus(v); });
  if (cache) {
    cache->head_pre = Image<S>{features.width, features.height, 1, pre};
  }
  return out;
}

/// Backward through the density head. Accumulates into `grad` and into
/// `dfeatures` (same shape as the feature map).
template <typename S>
void predict_density_map_backward(const Image<S>& features, const ConvNetParams<S>& params,
                                  const EncoderCache<S>& cache, const Image<S>& dout,
                                  ConvNetGrad<S>& grad, Image<S>& dfeatures) {
  const MatX<S> dpre =
      dout.data.array() * cache.head_pre.data.unaryExpr([](S v) { return softplus_grad(v); }).array();
  grad.head_weights.noalias() += dpre * features.data.transpose();
  grad.head_bias[0] += dpre.sum();
  dfeatures.data.noalias() += params.head_weights.transpose() * dpre;
}

/// Backward through both convolutions given the feature-map gradient.
template <typename S>
void extract_features_backward(const ConvNetParams<S>& params, const EncoderCache<S>& cache,
                               const Image<S>& dfeatures, ConvNetGrad<S>& grad) {
  Image<S> dpost1 = Image<S>::zeros(cache.post1.width, cache.post1.height, cache.post1.channels);
  detail::conv3x3_s2_backward(cache.post1, params.conv2, dfeatures, grad.conv2, &dpost1);
  // ReLU mask (subgradient 0 at the kink).
  Image<S> dpre1 = dpost1;
  dpre1.data = (cache.pre1.data.array() > S(0)).select(dpost1.data, MatX<S>::Zero(dpost1.data.rows(), dpost1.data.cols()));
  detail::conv3x3_s2_backward(cache.input, params.conv1, dpre1, grad.conv1,
                              static_cast<Image<S>*>(nullptr));
}

/// One contribution to a lifted volume node: a view whose projection of the
/// node landed in-frame and in front of the camera.
template <typename S>
struct LiftContribution {
  int view;
  BilinearStencil<S> stencil;
};

template <typename S>
struct LiftCache {
  std::vector<std::vector<LiftContribution<S>>> per_node;
};

/// Projection pooling: every volume node is projected into every view and the
/// in-frame, in-front bilinear samples are averaged. Nodes no view sees stay
/// zero. Feature-map sample coordinates place cell (a, b)'s center at full-res
/// pixel (4a + 2, 4b + 2).
template <typename S>
FeatureVolume<S> lift_to_volume(const std::vector<Image<S>>& feature_maps,
                                const std::vector<CameraModel<S>>& cameras,
                                const BoundingBox<S>& bbox, const Vec3i& dims, int channels,
                                LiftCache<S>* cache = nullptr) {
  if (feature_maps.size() != cameras.size())
    throw std::invalid_argument("lift_to_volume: one camera per feature map required");
  FeatureVolume<S> vol = FeatureVolume<S>::zeros(dims, channels, bbox);
  if (cache) {
    cache->per_node.assign(static_cast<size_t>(vol.node_count()), {});
  }
  for (int k = 0; k < dims.z(); ++k)
    for (int j = 0; j < dims.y(); ++j)
      for (int i = 0; i < dims.x(); ++i) {
        const int node = vol.node_index(i, j, k);
        const Vec3<S> p = vol.node_position(i, j, k);
        VecX<S> sum = VecX<S>::Zero(channels);
        int n_views = 0;
        for (size_t v = 0; v < cameras.size(); ++v) {
          const auto proj = project_point(cameras[v], p);
          if (!proj) continue;
          if (proj->u < S(0) || proj->u >= S(cameras[v].width) || proj->v < S(0) ||
              proj->v >= S(cameras[v].height))
            continue;
          const S qx = proj->u / S(4) - S(0.5);
          const S qy = proj->v / S(4) - S(0.5);
          const auto st = bilinear_stencil(feature_maps[v], qx, qy);
          for (int c = 0; c < 4; ++c)
            sum += st.weight[c] * feature_maps[v].data.col(st.cell[c]);
          ++n_views;
          if (cache) cache->per_node[static_cast<size_t>(node)].push_back({static_cast<int>(v), st});
        }
        if (n_views > 0) vol.values.col(node) = sum / S(n_views);
      }
  return vol;
}

/// Adjoint of lift_to_volume: scatters the volume gradient back into each
/// contributing view's feature-map gradient.
template <typename S>
void lift_to_volume_backward(const LiftCache<S>& cache, const MatX<S>& dvolume,
                             std::vector<Image<S>>& dfeature_maps) {
  for (size_t node = 0; node < cache.per_node.size(); ++node) {
    const auto& contribs = cache.per_node[node];
    if (contribs.empty()) continue;
    const S inv = S(1) / S(contribs.size());
    for (const auto& c : contribs)
      for (int corner = 0; corner < 4; ++corner)
        dfeature_maps[static_cast<size_t>(c.view)].data.col(c.stencil.cell[corner]) +=
            inv * c.stencil.weight[corner] * dvolume.col(static_cast<Eigen::Index>(node));
  }
}

}  // namespace volcount
