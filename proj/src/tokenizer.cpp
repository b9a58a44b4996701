#include "cre/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "cre/binary_io.hpp"
#include "cre/errors.hpp"
#include "cre/rng.hpp"

namespace cre {

namespace {

template <typename A, typename B>
double squared_distance(const A* a, const B* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += diff * diff;
  }
  return s;
}

void check_geometry(const PatchGeometry& g) {
  if (g.patch_h == 0 || g.patch_w == 0 || g.channels == 0) {
    throw GeometryError("patch geometry must have positive extents");
  }
}

}  // namespace

Codebook::Codebook(PatchGeometry geometry, std::size_t size, std::vector<float> centroids)
    : geometry_(geometry), size_(size), centroids_(std::move(centroids)) {
  check_geometry(geometry_);
  if (size_ == 0) throw ContractError("codebook must have at least one entry");
  if (centroids_.size() != size_ * geometry_.dim()) {
    throw DimensionError("codebook expects " + std::to_string(size_ * geometry_.dim()) +
                         " values, got " + std::to_string(centroids_.size()));
  }
}

std::span<const float> Codebook::centroid(std::size_t k) const {
  if (k >= size_) throw IndexError("codebook entry " + std::to_string(k) + " >= K=" + std::to_string(size_));
  return std::span<const float>(centroids_).subspan(k * dim(), dim());
}

int Codebook::nearest(std::span<const float> patch) const {
  const auto d = dim();
  if (patch.size() != d) {
    throw DimensionError("patch of " + std::to_string(patch.size()) + " values, codebook dim " +
                         std::to_string(d));
  }
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < size_; ++k) {
    const double dist = squared_distance(patch.data(), centroids_.data() + k * d, d);
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<int>(k);
    }
  }
  return best;
}

std::size_t Codebook::sequence_length(std::size_t height, std::size_t width) const {
  if (height % geometry_.patch_h != 0 || width % geometry_.patch_w != 0) {
    throw GeometryError("image " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible into " + std::to_string(geometry_.patch_h) + "x" +
                        std::to_string(geometry_.patch_w) + " patches");
  }
  return (height / geometry_.patch_h) * (width / geometry_.patch_w);
}

TokenSequence Codebook::tokenize(const Image& image) const {
  if (image.channels != geometry_.channels) {
    throw GeometryError("image has " + std::to_string(image.channels) +
                        " channels, codebook expects " + std::to_string(geometry_.channels));
  }
  const auto patches = extract_patches(image, geometry_);
  const auto d = dim();
  TokenSequence seq;
  seq.grid_h = image.height / geometry_.patch_h;
  seq.grid_w = image.width / geometry_.patch_w;
  seq.ids.resize(seq.grid_h * seq.grid_w);
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    seq.ids[i] = nearest(std::span<const float>(patches).subspan(i * d, d));
  }
  return seq;
}

std::vector<float> extract_patches(const Image& image, const PatchGeometry& geometry) {
  check_geometry(geometry);
  if (image.height == 0 || image.width == 0 || image.height % geometry.patch_h != 0 ||
      image.width % geometry.patch_w != 0) {
    throw GeometryError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                        " is not divisible into " + std::to_string(geometry.patch_h) + "x" +
                        std::to_string(geometry.patch_w) + " patches");
  }
  if (image.channels != geometry.channels) {
    throw GeometryError("image has " + std::to_string(image.channels) + " channels, expected " +
                        std::to_string(geometry.channels));
  }
  const auto gh = image.height / geometry.patch_h, gw = image.width / geometry.patch_w;
  const auto row_len = geometry.patch_w * geometry.channels;
  std::vector<float> out;
  out.reserve(gh * gw * geometry.dim());
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      for (std::size_t r = 0; r < geometry.patch_h; ++r) {
        const auto* row = &image.pixels[((py * geometry.patch_h + r) * image.width +
                                         px * geometry.patch_w) * image.channels];
        out.insert(out.end(), row, row + row_len);
      }
    }
  }
  return out;
}

std::vector<float> sample_patches(std::span<const Image> images, const PatchGeometry& geometry,
                                  std::size_t per_image, std::uint64_t seed) {
  const auto d = geometry.dim();
  std::vector<float> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto all = extract_patches(images[i], geometry);
    const auto n = all.size() / d;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto take = std::min(per_image, n);
    Rng rng(derive_seed({seed, i}));
    for (std::size_t j = 0; j < take; ++j) std::swap(order[j], order[j + rng.below(n - j)]);
    for (std::size_t j = 0; j < take; ++j) {
      out.insert(out.end(), all.begin() + order[j] * d, all.begin() + (order[j] + 1) * d);
    }
  }
  return out;
}

Codebook fit_codebook(std::span<const float> patches, PatchGeometry geometry, std::size_t size,
                      std::uint64_t seed, const KMeansOptions& options, KMeansReport* report) {
  check_geometry(geometry);
  const auto d = geometry.dim();
  if (size == 0) throw ContractError("codebook size K must be positive");
  if (patches.size() % d != 0) {
    throw DimensionError(std::to_string(patches.size()) + " values do not form patches of dim " +
                         std::to_string(d));
  }
  const auto n = patches.size() / d;
  if (n < size) {
    throw InsufficientDataError("k-means needs at least K=" + std::to_string(size) +
                                " patches, got " + std::to_string(n));
  }
  for (const auto v : patches) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("patch values must lie in [0, 1]");
  }
  const float* x = patches.data();

  // k-means++ seeding.
  Rng rng(seed);
  std::vector<double> centers(size * d);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  auto set_center = [&](std::size_t k, std::size_t point) {
    std::copy_n(x + point * d, d, centers.begin() + static_cast<std::ptrdiff_t>(k * d));
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x + i * d, centers.data() + k * d, d));
    }
  };
  set_center(0, rng.below(n));
  for (std::size_t k = 1; k < size; ++k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    if (!(total > 0.0)) {
      throw InsufficientDataError("fewer than K=" + std::to_string(size) + " distinct patches");
    }
    const double target = rng.uniform() * total;
    double cumulative = 0.0;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      cumulative += d2[i];
      pick = i;
      if (cumulative > target) break;
    }
    set_center(k, pick);
  }

  // Lloyd iterations.
  KMeansReport local;
  std::vector<std::size_t> assign(n);
  std::vector<double> dist(n);
  std::vector<double> sums(size * d);
  std::vector<std::size_t> counts(size);
  for (std::size_t iter = 0; iter < options.max_iterations; ++iter) {
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < size; ++k) {
        const double dd = squared_distance(x + i * d, centers.data() + k * d, d);
        if (dd < best_d) {
          best_d = dd;
          best = k;
        }
      }
      assign[i] = best;
      dist[i] = best_d;
      err += best_d;
    }
    local.error_history.push_back(err / static_cast<double>(n));

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i] * d + j] += x[i * d + j];
    }
    double shift = 0.0;
    std::vector<bool> taken(n, false);
    for (std::size_t k = 0; k < size; ++k) {
      std::vector<double> next(d);
      if (counts[k] == 0) {
        // Empty cluster: move it onto the worst-served point.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (!taken[i] && dist[i] > far_d) {
            far_d = dist[i];
            far = i;
          }
        }
        taken[far] = true;
        for (std::size_t j = 0; j < d; ++j) next[j] = x[far * d + j];
        ++local.reseeded_clusters;
      } else {
        for (std::size_t j = 0; j < d; ++j) {
          next[j] = sums[k * d + j] / static_cast<double>(counts[k]);
        }
      }
      shift = std::max(shift, std::sqrt(squared_distance(next.data(), centers.data() + k * d, d)));
      std::copy(next.begin(), next.end(), centers.begin() + static_cast<std::ptrdiff_t>(k * d));
    }
    local.iterations = iter + 1;
    if (shift < options.tolerance) {
      local.converged = true;
      break;
    }
  }

  std::vector<float> out(centers.size());
  std::transform(centers.begin(), centers.end(), out.begin(),
                 [](double v) { return static_cast<float>(v); });
  if (report) *report = std::move(local);
  return Codebook(geometry, size, std::move(out));
}

Image detokenize(const TokenSequence& tokens, const Codebook& codebook) {
  const auto& g = codebook.geometry();
  if (tokens.grid_h * tokens.grid_w != tokens.ids.size() || tokens.ids.empty()) {
    throw GeometryError("token grid " + std::to_string(tokens.grid_h) + "x" +
                        std::to_string(tokens.grid_w) + " does not hold " +
                        std::to_string(tokens.ids.size()) + " tokens");
  }
  auto img = Image::zeros(tokens.grid_h * g.patch_h, tokens.grid_w * g.patch_w, g.channels);
  const auto row_len = g.patch_w * g.channels;
  for (std::size_t t = 0; t < tokens.ids.size(); ++t) {
    const int id = tokens.ids[t];
    if (id < 0 || static_cast<std::size_t>(id) >= codebook.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside codebook of size " +
                       std::to_string(codebook.size()));
    }
    const auto c = codebook.centroid(static_cast<std::size_t>(id));
    const auto py = t / tokens.grid_w, px = t % tokens.grid_w;
    for (std::size_t r = 0; r < g.patch_h; ++r) {
      std::copy_n(c.begin() + r * row_len, row_len,
                  img.pixels.begin() +
                      ((py * g.patch_h + r) * img.width + px * g.patch_w) * g.channels);
    }
  }
  return img;
}

double quantization_error(std::span<const float> patches, const Codebook& codebook) {
  const auto d = codebook.dim();
  const auto n = patches.size() / d;
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = patches.subspan(i * d, d);
    const auto k = static_cast<std::size_t>(codebook.nearest(p));
    total += squared_distance(p.data(), codebook.centroid(k).data(), d);
  }
  return total / static_cast<double>(n);
}

void save_codebook(const std::filesystem::path& path, const Codebook& codebook) {
  const auto& g = codebook.geometry();
  bin::Writer w;
  w.bytes(std::string_view(kCodebookMagic, 4));
  w.u16(kCodebookVersion);
  w.u32(static_cast<std::uint32_t>(codebook.size()));
  w.u16(static_cast<std::uint16_t>(g.patch_h));
  w.u16(static_cast<std::uint16_t>(g.patch_w));
  w.u16(static_cast<std::uint16_t>(g.channels));
  for (const auto v : codebook.centroids()) w.f32(v);
  bin::write_file(path, w.buffer());
}

Codebook load_codebook(const std::filesystem::path& path) {
  bin::Reader r(bin::read_file(path), path.string());
  if (r.bytes(4) != std::string_view(kCodebookMagic, 4)) {
    throw FormatError(path.string() + ": not a codebook file (bad magic)");
  }
  const auto version = r.u16();
  if (version != kCodebookVersion) {
    throw FormatError(path.string() + ": unsupported codebook version " + std::to_string(version));
  }
  const auto k = r.u32();
  PatchGeometry g;
  g.patch_h = r.u16();
  g.patch_w = r.u16();
  g.channels = r.u16();
  if (k == 0 || g.dim() == 0) throw FormatError(path.string() + ": empty codebook header");
  const auto expected = static_cast<std::size_t>(k) * g.dim() * 4;
  if (r.remaining() != expected) {
    throw FormatError(path.string() + ": payload is " + std::to_string(r.remaining()) +
                      " bytes, header implies " + std::to_string(expected));
  }
  std::vector<float> c(static_cast<std::size_t>(k) * g.dim());
  for (auto& v : c) v = r.f32();
  return Codebook(g, k, std::move(c));
}

}  // namespace cre
