#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>

#include "cre/image.hpp"
#include "cre/rng.hpp"

namespace cre {

struct AugmentConfig {
  double scale_min = 0.2;  // crop area fraction range
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;  // crop aspect (w/h) range
  double ratio_max = 4.0 / 3.0;
  std::size_t out_h = 32;
  std::size_t out_w = 32;
  double flip_prob = 0.5;

  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

struct CropWindow {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool fallback = false;  // true when every sampled window was infeasible

  bool operator==(const CropWindow&) const = default;
};

/// Area fraction from [scale_min, scale_max], log-uniform aspect ratio,
/// up to 10 attempts before falling back to a center crop.
CropWindow sample_crop_window(std::size_t height, std::size_t width, const AugmentConfig& config,
                              Rng& rng);

Image random_resized_crop(const Image& image, const AugmentConfig& config, Rng& rng);

/// Mirror across the vertical axis.
Image hflip(const Image& image);

Image random_hflip(const Image& image, double p, Rng& rng);

/// Two independent crop+flip draws from the same stream.
std::pair<Image, Image> make_two_views(const Image& image, const AugmentConfig& config, Rng& rng);

/// Stream seed for image `index` at `epoch`; augmentation is a pure function
/// of (global seed, index, epoch).
inline std::uint64_t augmentation_seed(std::uint64_t seed, std::uint64_t index,
                                       std::uint64_t epoch) {
  return derive_seed({seed, 0xa5a5u, index, epoch});
}

}  // namespace cre
