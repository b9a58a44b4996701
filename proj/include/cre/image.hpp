#pragma once

#include <cstddef>
#include <vector>

namespace cre {

/// H x W x C image of reals, row-major with interleaved channels (HWC).
/// Pixel values are expected in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  static Image zeros(std::size_t height, std::size_t width, std::size_t channels) {
    return Image{height, width, channels, std::vector<float>(height * width * channels, 0.0f)};
  }

  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }

  bool operator==(const Image&) const = default;
};

/// Bilinear resampling of the window [top, top+h) x [left, left+w) (in
/// source pixel units) onto an out_h x out_w grid, using pixel-center
/// alignment. Resizing a full image to its own size is the identity.
Image resize_region_bilinear(const Image& src, double top, double left, double h, double w,
                             std::size_t out_h, std::size_t out_w);

inline Image resize_bilinear(const Image& src, std::size_t out_h, std::size_t out_w) {
  return resize_region_bilinear(src, 0.0, 0.0, static_cast<double>(src.height),
                                static_cast<double>(src.width), out_h, out_w);
}

}  // namespace cre
