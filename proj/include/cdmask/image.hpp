// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdmask/tensor.hpp"

namespace cdmask {

/// 8-bit raster, row-major HxWxC with C in {1,3}.
struct ImageU8 {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> data;

  ImageU8() = default;
  ImageU8(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(size_t(h_) * w_ * c_, 0) {}

  uint8_t& at(int y, int x, int ch) { return data[(size_t(y) * w + x) * c + ch]; }
  uint8_t at(int y, int x, int ch) const { return data[(size_t(y) * w + x) * c + ch]; }
  bool same_size(const ImageU8& o) const { return h == o.h && w == o.w; }
};

/// Reads a PNG, converting to the requested channel count (1 or 3).
ImageU8 read_png(const std::string& path, int channels);

/// Writes an 8-bit gray or RGB PNG.
void write_png(const std::string& path, const ImageU8& img);

/// [0,255] -> per-channel (x/255 - 0.5) / 0.5, as a [C,H,W] float tensor.
template <typename T>
Tensor<T> image_to_chw(const ImageU8& img) {
  Tensor<T> out({img.c, img.h, img.w});
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        out.at(ch, y, x) =
            (static_cast<T>(img.at(y, x, ch)) / T(255) - T(0.5)) / T(0.5);
  return out;
}

/// Label binarization: Rec.601 luminance above 127 marks change.
Tensor<uint8_t> binarize_label(const ImageU8& label);

/// 0/1 mask to a 0/255 gray image.
ImageU8 mask_to_image(const Tensor<uint8_t>& mask);

ImageU8 flip_horizontal(const ImageU8& img);
ImageU8 flip_vertical(const ImageU8& img);

/// Separable Gaussian blur with reflected borders.
ImageU8 gaussian_blur(const ImageU8& img, double sigma);

/// Error visualization: white TP, black TN, red FP, green FN.
ImageU8 error_map(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt);

}  // namespace cdmask
