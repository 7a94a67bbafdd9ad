// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>

#include "volcount/core.hpp"

namespace volcount {

/// Dense image, one column per pixel (index x + width * y), channels down the
/// column. Works for RGB images, feature maps, and scalar maps alike.
template <typename S>
struct Image {
  int width = 0, height = 0, channels = 0;
  MatX<S> data;

  static Image zeros(int w, int h, int c) {
    Image im;
    im.width = w;
    im.height = h;
    im.channels = c;
    im.data = MatX<S>::Zero(c, w * h);
    return im;
  }

  int pixel_index(int x, int y) const { return x + width * y; }

  auto pixel(int x, int y) { return data.col(pixel_index(x, y)); }
  auto pixel(int x, int y) const { return data.col(pixel_index(x, y)); }

  S& at(int x, int y, int c = 0) { return data(c, pixel_index(x, y)); }
  S at(int x, int y, int c = 0) const { return data(c, pixel_index(x, y)); }
};

/// The four cells and weights touched by a bilinear sample at continuous cell
/// coordinates (integer coordinates hit cell values exactly), clamp-to-edge.
template <typename S>
struct BilinearStencil {
  int cell[4];
  S weight[4];
};

template <typename S>
BilinearStencil<S> bilinear_stencil(const Image<S>& im, S qx, S qy) {
  const S x = std::clamp(qx, S(0), S(im.width - 1));
  const S y = std::clamp(qy, S(0), S(im.height - 1));
  const int x0 = std::min(static_cast<int>(std::floor(x)), std::max(im.width - 2, 0));
  const int y0 = std::min(static_cast<int>(std::floor(y)), std::max(im.height - 2, 0));
  const int x1 = std::min(x0 + 1, im.width - 1);
  const int y1 = std::min(y0 + 1, im.height - 1);
  const S fx = x - S(x0);
  const S fy = y - S(y0);
  BilinearStencil<S> st;
  st.cell[0] = im.pixel_index(x0, y0);
  st.cell[1] = im.pixel_index(x1, y0);
  st.cell[2] = im.pixel_index(x0, y1);
  st.cell[3] = im.pixel_index(x1, y1);
  st.weight[0] = (S(1) - fx) * (S(1) - fy);
  st.weight[1] = fx * (S(1) - fy);
  st.weight[2] = (S(1) - fx) * fy;
  st.weight[3] = fx * fy;
  return st;
}

template <typename S>
VecX<S> bilinear(const Image<S>& im, S qx, S qy) {
  const BilinearStencil<S> st = bilinear_stencil(im, qx, qy);
  VecX<S> out = VecX<S>::Zero(im.channels);
  for (int i = 0; i < 4; ++i) out += st.weight[i] * im.data.col(st.cell[i]);
  return out;
}

}  // namespace volcount
