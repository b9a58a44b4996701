#include "cre/augment.hpp"

#include <algorithm>
#include <cmath>

#include "cre/errors.hpp"

namespace cre {

void AugmentConfig::validate() const {
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
    throw ValidationError("augment: crop scale range must satisfy 0 < min <= max <= 1");
  }
  if (!(ratio_min > 0.0 && ratio_min <= ratio_max)) {
    throw ValidationError("augment: aspect ratio range must satisfy 0 < min <= max");
  }
  if (out_h == 0 || out_w == 0) throw ValidationError("augment: output size must be positive");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) {
    throw ValidationError("augment: flip probability must lie in [0, 1]");
  }
}

CropWindow sample_crop_window(std::size_t height, std::size_t width, const AugmentConfig& config,
                              Rng& rng) {
  const double area = static_cast<double>(height) * static_cast<double>(width);
  const double log_lo = std::log(config.ratio_min), log_hi = std::log(config.ratio_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(config.scale_min, config.scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<long long>(std::llround(std::sqrt(target * ratio)));
    const auto h = static_cast<long long>(std::llround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= static_cast<long long>(width) &&
        h <= static_cast<long long>(height)) {
      CropWindow win;
      win.height = static_cast<std::size_t>(h);
      win.width = static_cast<std::size_t>(w);
      win.top = rng.between(0, height - win.height);
      win.left = rng.between(0, width - win.width);
      return win;
    }
  }
  // Center crop, with the aspect ratio clamped into range.
  CropWindow win;
  win.fallback = true;
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  if (in_ratio < config.ratio_min) {
    win.width = width;
    win.height = std::min<std::size_t>(
        height, static_cast<std::size_t>(std::llround(static_cast<double>(width) / config.ratio_min)));
  } else if (in_ratio > config.ratio_max) {
    win.height = height;
    win.width = std::min<std::size_t>(
        width, static_cast<std::size_t>(std::llround(static_cast<double>(height) * config.ratio_max)));
  } else {
    win.height = height;
    win.width = width;
  }
  win.top = (height - win.height) / 2;
  win.left = (width - win.width) / 2;
  return win;
}

Image random_resized_crop(const Image& image, const AugmentConfig& config, Rng& rng) {
  const auto win = sample_crop_window(image.height, image.width, config, rng);
  return resize_region_bilinear(image, static_cast<double>(win.top), static_cast<double>(win.left),
                                static_cast<double>(win.height), static_cast<double>(win.width),
                                config.out_h, config.out_w);
}

Image hflip(const Image& image) {
  Image out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        out.at(y, x, c) = image.at(y, image.width - 1 - x, c);
      }
    }
  }
  return out;
}

Image random_hflip(const Image& image, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("flip probability must lie in [0, 1]");
  return rng.bernoulli(p) ? hflip(image) : image;
}

std::pair<Image, Image> make_two_views(const Image& image, const AugmentConfig& config, Rng& rng) {
  auto first = random_hflip(random_resized_crop(image, config, rng), config.flip_prob, rng);
  auto second = random_hflip(random_resized_crop(image, config, rng), config.flip_prob, rng);
  return {std::move(first), std::move(second)};
}

}  // namespace cre
