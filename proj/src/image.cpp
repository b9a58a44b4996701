#include "cre/image.hpp"

#include <algorithm>
#include <cmath>

#include "cre/errors.hpp"

namespace cre {

Image resize_region_bilinear(const Image& src, double top, double left, double h, double w,
                             std::size_t out_h, std::size_t out_w) {
  if (src.height == 0 || src.width == 0 || src.channels == 0) {
    throw GeometryError("cannot resize an empty image");
  }
  if (out_h == 0 || out_w == 0 || h <= 0.0 || w <= 0.0) {
    throw GeometryError("resize target and source window must be non-empty");
  }
  auto out = Image::zeros(out_h, out_w, src.channels);
  const double sy = h / static_cast<double>(out_h);
  const double sx = w / static_cast<double>(out_w);
  const auto max_y = static_cast<double>(src.height - 1);
  const auto max_x = static_cast<double>(src.width - 1);

  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp(top + (static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const auto y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp(left + (static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const auto x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double v = (1.0 - wy) * ((1.0 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                         wy * ((1.0 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace cre
