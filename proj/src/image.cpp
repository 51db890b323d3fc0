// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#include "cdmask/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace cdmask {

ImageU8 read_png(const std::string& path, int channels) {
  if (channels != 1 && channels != 3)
    throw std::invalid_argument("read_png: channels must be 1 or 3");
  png_image im;
  std::memset(&im, 0, sizeof(im));
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    throw std::runtime_error("read_png: cannot open " + path + ": " + im.message);
  im.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  ImageU8 out(static_cast<int>(im.height), static_cast<int>(im.width), channels);
  if (!png_image_finish_read(&im, nullptr, out.data.data(), 0, nullptr)) {
    png_image_free(&im);
    throw std::runtime_error("read_png: decode failed for " + path + ": " + im.message);
  }
  return out;
}

void write_png(const std::string& path, const ImageU8& img) {
  if (img.c != 1 && img.c != 3)
    throw std::invalid_argument("write_png: channels must be 1 or 3");
  png_image im;
  std::memset(&im, 0, sizeof(im));
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.w);
  im.height = static_cast<png_uint_32>(img.h);
  im.format = img.c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, img.data.data(), 0, nullptr))
    throw std::runtime_error("write_png: cannot write " + path + ": " + im.message);
}

Tensor<uint8_t> binarize_label(const ImageU8& label) {
  Tensor<uint8_t> out({label.h, label.w});
  for (int y = 0; y < label.h; ++y)
    for (int x = 0; x < label.w; ++x) {
      int lum;
      if (label.c == 1) {
        lum = label.at(y, x, 0);
      } else {
        lum = static_cast<int>(std::lround(0.299 * label.at(y, x, 0) +
                                           0.587 * label.at(y, x, 1) +
                                           0.114 * label.at(y, x, 2)));
      }
      out.at(y, x) = lum > 127 ? 1 : 0;
    }
  return out;
}

ImageU8 mask_to_image(const Tensor<uint8_t>& mask) {
  ImageU8 out(mask.dim(0), mask.dim(1), 1);
  for (int64_t i = 0; i < mask.numel(); ++i) out.data[i] = mask[i] ? 255 : 0;
  return out;
}

ImageU8 flip_horizontal(const ImageU8& img) {
  ImageU8 out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(y, img.w - 1 - x, ch);
  return out;
}

ImageU8 flip_vertical(const ImageU8& img) {
  ImageU8 out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(img.h - 1 - y, x, ch);
  return out;
}

ImageU8 gaussian_blur(const ImageU8& img, double sigma) {
  if (sigma <= 0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };

  std::vector<double> tmp(img.data.size());
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) {
        double acc = 0;
        for (int k = -radius; k <= radius; ++k)
          acc += kernel[k + radius] * img.at(y, reflect(x + k, img.w), ch);
        tmp[(size_t(y) * img.w + x) * img.c + ch] = acc;
      }
  ImageU8 out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) {
        double acc = 0;
        for (int k = -radius; k <= radius; ++k)
          acc += kernel[k + radius] * tmp[(size_t(reflect(y + k, img.h)) * img.w + x) * img.c + ch];
        out.at(y, x, ch) = static_cast<uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
      }
  return out;
}

ImageU8 error_map(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt) {
  check(pred.same_shape(gt), "error_map: shape mismatch");
  ImageU8 out(pred.dim(0), pred.dim(1), 3);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      const bool p = pred.at(y, x) != 0;
      const bool g = gt.at(y, x) != 0;
      uint8_t r = 0, gr = 0, b = 0;
      if (p && g) r = gr = b = 255;  // true positive
      else if (p && !g) r = 255;     // false positive
      else if (!p && g) gr = 255;    // false negative
      out.at(y, x, 0) = r;
      out.at(y, x, 1) = gr;
      out.at(y, x, 2) = b;
    }
  return out;
}

}  // namespace cdmask
