// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "volcount/core.hpp"
#include "volcount/volume.hpp"

namespace volcount {

enum class Activation { kLinear, kRelu, kSoftplus, kSigmoid };

template <typename S>
inline S apply_activation(Activation act, S x) {
  switch (act) {
    case Activation::kLinear: return x;
    case Activation::kRelu: return x > S(0) ? x : S(0);
    case Activation::kSoftplus: return softplus(x);
    case Activation::kSigmoid: return sigmoid(x);
  }
  return x;
}

/// Derivative in terms of the preactivation x. ReLU uses subgradient 0 at 0.
template <typename S>
inline S activation_grad(Activation act, S x) {
  switch (act) {
    case Activation::kLinear: return S(1);
    case Activation::kRelu: return x > S(0) ? S(1) : S(0);
    case Activation::kSoftplus: return sigmoid(x);
    case Activation::kSigmoid: {
      const S y = sigmoid(x);
      return y * (S(1) - y);
    }
  }
  return S(1);
}

template <typename S>
struct MlpLayer {
  MatX<S> weights;  // out x in
  VecX<S> biases;   // out
};

/// Affine layers with `hidden` activation between them and `output` applied
/// after the last layer. A single layer is a plain affine map plus the output
/// activation.
template <typename S>
struct MlpParams {
  std::vector<MlpLayer<S>> layers;
  Activation hidden = Activation::kSoftplus;
  Activation output = Activation::kLinear;

  int input_size() const { return static_cast<int>(layers.front().weights.cols()); }
  int output_size() const { return static_cast<int>(layers.back().weights.rows()); }
};

/// Preactivations kept from a forward pass; layer inputs are recomputed from
/// them during the backward pass.
template <typename S>
struct MlpCache {
  MatX<S> input;                 // in x N
  std::vector<MatX<S>> pre;      // per layer, out_l x N
  std::vector<MatX<S>> post;     // per layer, activation applied
};

template <typename S>
struct MlpGrad {
  std::vector<MlpLayer<S>> layers;  // same shapes as the parameters

  static MlpGrad zeros_like(const MlpParams<S>& p) {
    MlpGrad g;
    g.layers.reserve(p.layers.size());
    for (const auto& l : p.layers)
      g.layers.push_back({MatX<S>::Zero(l.weights.rows(), l.weights.cols()),
                          VecX<S>::Zero(l.biases.size())});
    return g;
  }
};

/// Batched forward over the columns of `x` (in x N). Pass a cache to enable a
/// later backward pass.
template <typename S>
MatX<S> mlp_forward(const MlpParams<S>& params, const MatX<S>& x, MlpCache<S>* cache = nullptr) {
  if (x.rows() != params.input_size())
    throw std::invalid_argument("mlp_forward: input size mismatch");
  if (cache) {
    cache->input = x;
    cache->pre.clear();
    cache->post.clear();
  }
  MatX<S> h = x;
  const int n_layers = static_cast<int>(params.layers.size());
  for (int l = 0; l < n_layers; ++l) {
    MatX<S> pre = (params.layers[l].weights * h).colwise() + params.layers[l].biases;
    const Activation act = (l + 1 == n_layers) ? params.output : params.hidden;
    h = pre.unaryExpr([act](S v) { return apply_activation(act, v); });
    if (cache) {
      cache->pre.push_back(std::move(pre));
      cache->post.push_back(h);
    }
  }
  return h;
}

template <typename S>
VecX<S> mlp_forward(const MlpParams<S>& params, const VecX<S>& x) {
  return mlp_forward(params, MatX<S>(x), static_cast<MlpCache<S>*>(nullptr)).col(0);
}

/// Reverse pass. `upstream` is dL/d(output), out x N. Parameter gradients are
/// accumulated into `grad`; the return value is dL/d(input).
template <typename S>
MatX<S> mlp_backward(const MlpParams<S>& params, const MlpCache<S>& cache,
                     const MatX<S>& upstream, MlpGrad<S>& grad) {
  const int n_layers = static_cast<int>(params.layers.size());
  MatX<S> d = upstream;
  for (int l = n_layers - 1; l >= 0; --l) {
    const Activation act = (l + 1 == n_layers) ? params.output : params.hidden;
    const MatX<S> dpre =
        d.array() * cache.pre[l].unaryExpr([act](S v) { return activation_grad(act, v); }).array();
    const MatX<S>& layer_in = (l == 0) ? cache.input : cache.post[l - 1];
    grad.layers[l].weights.noalias() += dpre * layer_in.transpose();
    grad.layers[l].biases += dpre.rowwise().sum();
    d.noalias() = params.layers[l].weights.transpose() * dpre;
  }
  return d;
}

/// The three field networks plus the shared compositing sharpness. beta is
/// kept as exp(log_beta) so it stays positive for any real parameter value.
template <typename S>
struct FieldNets {
  MlpParams<S> sdf;      // input pos+C -> 1, linear output
  MlpParams<S> rgb;      // input pos+C+3 -> 3, sigmoid output
  MlpParams<S> density;  // input pos+C -> 1, softplus output
  S log_beta = S(0);
  int pe_frequencies = 0;  // pos = 3 + 6 * pe_frequencies

  S beta() const { return std::exp(log_beta); }
};

template <typename S>
struct FieldNetsGrad {
  MlpGrad<S> sdf, rgb, density;
  S log_beta = S(0);

  static FieldNetsGrad zeros_like(const FieldNets<S>& nets) {
    return {MlpGrad<S>::zeros_like(nets.sdf), MlpGrad<S>::zeros_like(nets.rgb),
            MlpGrad<S>::zeros_like(nets.density), S(0)};
  }
};

template <typename S>
S phi_sdf(const FieldNets<S>& nets, const Vec3<S>& p, const VecX<S>& f) {
  VecX<S> x(3 + f.size());
  x << p, f;
  return mlp_forward(nets.sdf, x)[0];
}

template <typename S>
Vec3<S> phi_rgb(const FieldNets<S>& nets, const Vec3<S>& p, const VecX<S>& f, const Vec3<S>& d) {
  VecX<S> x(3 + f.size() + 3);
  x << p, f, d;
  return mlp_forward(nets.rgb, x).template head<3>();
}

template <typename S>
S phi_density(const FieldNets<S>& nets, const Vec3<S>& p, const VecX<S>& f) {
  VecX<S> x(3 + f.size());
  x << p, f;
  return mlp_forward(nets.density, x)[0];
}

/// delta(s) = 1 / (1 + exp(-s * beta)).
template <typename S>
S logistic_delta(S s, S beta) {
  return sigmoid(s * beta);
}

// ---------------------------------------------------------------------------
// Initialization

template <typename S>
MlpParams<S> make_mlp(int in, int hidden, int n_hidden, int out, Activation hidden_act,
                      Activation output_act) {
  MlpParams<S> p;
  p.hidden = hidden_act;
  p.output = output_act;
  int prev = in;
  for (int l = 0; l < n_hidden; ++l) {
    p.layers.push_back({MatX<S>::Zero(hidden, prev), VecX<S>::Zero(hidden)});
    prev = hidden;
  }
  p.layers.push_back({MatX<S>::Zero(out, prev), VecX<S>::Zero(out)});
  return p;
}

/// Small random weights (scale 1e-2), zero biases.
template <typename S>
void init_small_random(MlpParams<S>& p, Rng& rng, double scale = 1e-2) {
  for (auto& l : p.layers) {
    for (Eigen::Index i = 0; i < l.weights.size(); ++i)
      l.weights.data()[i] = S(rng.normal(0.0, scale));
    l.biases.setZero();
  }
}

/// Evenly spread unit directions (Fibonacci sphere).
template <typename S>
Vec3<S> fibonacci_direction(int i, int n) {
  const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
  const double z = 1.0 - 2.0 * (i + 0.5) / n;
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  const double phi = 2.0 * M_PI * i / golden;
  return Vec3<S>(S(r * std::cos(phi)), S(r * std::sin(phi)), S(z));
}

/// Geometric initialization of the SDF net: the zero-level set starts as a
/// sphere of radius r0 about `center`. Uses the identity
/// E_u[max(u.x, 0)] = |x|/4 over unit directions u. Layer 1 computes sharp
/// softplus ridges softplus(k1 u_j.(p-c)), layer 2 averages them into a
/// distance estimate scaled by k2 (nonnegative, so its softplus is near
/// linear), and the output layer rescales and subtracts r0. All
/// preactivations stay below ~30: large internal scales would wreck
/// finite-difference gradient checks through third-derivative blowup.
/// Feature columns carry only symmetry-breaking noise.
template <typename S>
void init_geometric_sdf(MlpParams<S>& p, const Vec3<S>& center, S r0, Rng& rng) {
  const int m = static_cast<int>(p.layers[0].weights.rows());
  const S k1 = S(30);
  const S k2 = S(20);

  auto& l0 = p.layers[0];
  l0.weights.setZero();
  for (int j = 0; j < m; ++j) {
    const Vec3<S> u = fibonacci_direction<S>(j, m);
    l0.weights.template block<1, 3>(j, 0) = k1 * u.transpose();
    l0.biases[j] = -k1 * u.dot(center);
  }
  for (int j = 0; j < m; ++j)
    for (int c = 3; c < l0.weights.cols(); ++c) l0.weights(j, c) = S(rng.normal(0.0, 1e-2));

  // Middle layers (if any beyond the averaging one) pass values through.
  for (size_t l = 1; l + 2 < p.layers.size(); ++l) {
    p.layers[l].weights = k1 * MatX<S>::Identity(p.layers[l].weights.rows(),
                                                 p.layers[l].weights.cols());
    p.layers[l].biases.setZero();
  }

  if (p.layers.size() >= 3) {
    auto& avg = p.layers[p.layers.size() - 2];
    const S base = S(4) * k2 / (S(avg.weights.cols()) * k1);
    for (Eigen::Index i = 0; i < avg.weights.size(); ++i)
      avg.weights.data()[i] = base * S(1.0 + 0.05 * rng.normal());
    avg.biases.setZero();
  }

  auto& last = p.layers.back();
  const S out_base = p.layers.size() >= 3 ? S(1) / (S(last.weights.cols()) * k2)
                                          : S(4) / (S(last.weights.cols()) * k1);
  for (Eigen::Index i = 0; i < last.weights.size(); ++i)
    last.weights.data()[i] = out_base * S(1.0 + 0.05 * rng.normal());
  last.biases.setConstant(-r0);
}

/// Builds the three field nets for a volume with C feature channels.
/// Hidden activations are softplus: the compositing gradient check compares
/// against central finite differences, which break down at ReLU kinks.
template <typename S>
FieldNets<S> make_field_nets(int channels, int hidden, const BoundingBox<S>& bbox, Rng& rng,
                             S beta_init = S(10), int pe_frequencies = 0) {
  const int pos = 3 + 6 * pe_frequencies;
  FieldNets<S> nets;
  nets.sdf = make_mlp<S>(pos + channels, hidden, 2, 1, Activation::kSoftplus, Activation::kLinear);
  nets.rgb =
      make_mlp<S>(pos + channels + 3, hidden, 2, 3, Activation::kSoftplus, Activation::kSigmoid);
  nets.density =
      make_mlp<S>(pos + channels, hidden, 2, 1, Activation::kSoftplus, Activation::kSoftplus);

  const Vec3<S> center = (bbox.min + bbox.max) / S(2);
  const S r0 = S(0.5) * bbox.extent().maxCoeff();
  Rng sdf_rng = rng.child(1);
  Rng rgb_rng = rng.child(2);
  Rng dens_rng = rng.child(3);
  init_geometric_sdf(nets.sdf, center, r0, sdf_rng);
  init_small_random(nets.rgb, rgb_rng);
  init_small_random(nets.density, dens_rng);
  nets.log_beta = std::log(beta_init);
  nets.pe_frequencies = pe_frequencies;
  return nets;
}

/// Optional sinusoidal position encoding: [p, sin(2^k pi p), cos(2^k pi p)].
/// With zero frequencies this is the identity.
template <typename S>
VecX<S> encode_position(const Vec3<S>& p, int frequencies) {
  VecX<S> out(3 + 6 * frequencies);
  out.template head<3>() = p;
  int at = 3;
  for (int k = 0; k < frequencies; ++k) {
    const S scale = S(M_PI) * S(1 << k);
    for (int a = 0; a < 3; ++a) out[at++] = std::sin(scale * p[a]);
    for (int a = 0; a < 3; ++a) out[at++] = std::cos(scale * p[a]);
  }
  return out;
}

}  // namespace volcount
