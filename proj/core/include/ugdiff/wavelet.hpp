#pragma once

#include <cmath>
#include <stdexcept>

#include "ugdiff/tensor.hpp"

namespace ugdiff {

// One-level 2-D Haar split of an RGB image, orthonormal normalization
// (each 2x2 block maps through an orthogonal matrix, so energy is
// preserved and the synthesis uses the same taps).
//
// Sub-band channel order of `highs`: LH_R, LH_G, LH_B, HL_R, HL_G, HL_B,
// HH_R, HH_G, HH_B. Odd extents are reflect-padded to even before the
// split; the pre-padding size is kept so synthesis can trim.
template <typename T>
struct WaveletPyramid {
  Tensor<T> ll;     // [3, H/2, W/2]
  Tensor<T> highs;  // [9, H/2, W/2]
  int orig_h = 0;
  int orig_w = 0;
};

namespace detail {

// Mirror index for reflect padding without edge duplication.
inline int reflect_index(int i, int n) {
  if (i < n) return i;
  return 2 * n - 2 - i;
}

}  // namespace detail

template <typename T>
WaveletPyramid<T> dwt2(const Tensor<T>& image) {
  check_shape(image.ndim() == 3 && image.dim(0) == 3, "dwt2 expects [3,H,W], got " +
                                                          shape_str(image.shape));
  const int h = image.dim(1), w = image.dim(2);
  if (h < 2 || w < 2) throw std::invalid_argument("dwt2: image extents must be >= 2");
  for (T v : image.data)
    if (!std::isfinite(static_cast<double>(v)))
      throw std::invalid_argument("dwt2: non-finite input sample");

  const int ph = h + (h & 1), pw = w + (w & 1);
  const int h2 = ph / 2, w2 = pw / 2;
  WaveletPyramid<T> pyr;
  pyr.ll = Tensor<T>({3, h2, w2});
  pyr.highs = Tensor<T>({9, h2, w2});
  pyr.orig_h = h;
  pyr.orig_w = w;

  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h2; ++y) {
      const int y0 = detail::reflect_index(2 * y, h);
      const int y1 = detail::reflect_index(2 * y + 1, h);
      for (int x = 0; x < w2; ++x) {
        const int x0 = detail::reflect_index(2 * x, w);
        const int x1 = detail::reflect_index(2 * x + 1, w);
        const T a = image.at(c, y0, x0);
        const T b = image.at(c, y0, x1);
        const T cc = image.at(c, y1, x0);
        const T d = image.at(c, y1, x1);
        pyr.ll.at(c, y, x) = (a + b + cc + d) * T(0.5);
        pyr.highs.at(c, y, x) = (a + b - cc - d) * T(0.5);      // LH
        pyr.highs.at(3 + c, y, x) = (a - b + cc - d) * T(0.5);  // HL
        pyr.highs.at(6 + c, y, x) = (a - b - cc + d) * T(0.5);  // HH
      }
    }
  }
  return pyr;
}

template <typename T>
Tensor<T> idwt2(const WaveletPyramid<T>& pyr) {
  const auto& ll = pyr.ll;
  const auto& hi = pyr.highs;
  check_shape(ll.ndim() == 3 && ll.dim(0) == 3 && hi.ndim() == 3 && hi.dim(0) == 9 &&
                  ll.dim(1) == hi.dim(1) && ll.dim(2) == hi.dim(2),
              "idwt2 sub-band shapes " + shape_str(ll.shape) + " vs " + shape_str(hi.shape));
  const int h2 = ll.dim(1), w2 = ll.dim(2);
  const int oh = pyr.orig_h, ow = pyr.orig_w;
  check_shape(oh >= 2 * h2 - 1 && oh <= 2 * h2 && ow >= 2 * w2 - 1 && ow <= 2 * w2,
              "idwt2 original size inconsistent with sub-band extents");

  Tensor<T> out({3, oh, ow});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h2; ++y) {
      for (int x = 0; x < w2; ++x) {
        const T s = ll.at(c, y, x);
        const T lh = hi.at(c, y, x);
        const T hl = hi.at(3 + c, y, x);
        const T hh = hi.at(6 + c, y, x);
        const T a = (s + lh + hl + hh) * T(0.5);
        const T b = (s + lh - hl - hh) * T(0.5);
        const T cc = (s - lh + hl - hh) * T(0.5);
        const T d = (s - lh - hl + hh) * T(0.5);
        const int y0 = 2 * y, y1 = 2 * y + 1, x0 = 2 * x, x1 = 2 * x + 1;
        if (y0 < oh && x0 < ow) out.at(c, y0, x0) = a;
        if (y0 < oh && x1 < ow) out.at(c, y0, x1) = b;
        if (y1 < oh && x0 < ow) out.at(c, y1, x0) = cc;
        if (y1 < oh && x1 < ow) out.at(c, y1, x1) = d;
      }
    }
  }
  return out;
}

}  // namespace ugdiff
