#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cre/image.hpp"

namespace cre {

struct PatchGeometry {
  std::size_t patch_h = 4;
  std::size_t patch_w = 4;
  std::size_t channels = 3;

  std::size_t dim() const { return patch_h * patch_w * channels; }
  bool operator==(const PatchGeometry&) const = default;
};

/// Discrete token ids for one image in raster (row-major) patch order.
struct TokenSequence {
  std::vector<int> ids;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t length() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Anything that turns an image into a fixed-length sequence of ids in
/// [0, vocabulary_size()). Downstream code only depends on this interface,
/// so a learned VQ model can replace the k-means codebook.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::size_t vocabulary_size() const = 0;
  virtual std::size_t sequence_length(std::size_t height, std::size_t width) const = 0;
  virtual TokenSequence tokenize(const Image& image) const = 0;
};

/// K x D matrix of patch centroids. Immutable once constructed.
class Codebook final : public Tokenizer {
 public:
  Codebook(PatchGeometry geometry, std::size_t size, std::vector<float> centroids);

  std::size_t size() const { return size_; }
  std::size_t dim() const { return geometry_.dim(); }
  const PatchGeometry& geometry() const { return geometry_; }
  std::span<const float> centroids() const { return centroids_; }
  std::span<const float> centroid(std::size_t k) const;

  /// Nearest centroid by Euclidean distance; ties go to the lowest id.
  int nearest(std::span<const float> patch) const;

  std::size_t vocabulary_size() const override { return size_; }
  std::size_t sequence_length(std::size_t height, std::size_t width) const override;
  TokenSequence tokenize(const Image& image) const override;

  bool operator==(const Codebook& o) const {
    return geometry_ == o.geometry_ && size_ == o.size_ && centroids_ == o.centroids_;
  }

 private:
  PatchGeometry geometry_;
  std::size_t size_;
  std::vector<float> centroids_;
};

struct KMeansOptions {
  std::size_t max_iterations = 100;
  double tolerance = 1e-4;  // max centroid shift (Euclidean) for convergence
};

struct KMeansReport {
  /// Mean squared patch-to-centroid distance after each assignment step.
  std::vector<double> error_history;
  std::size_t iterations = 0;
  bool converged = false;
  std::size_t reseeded_clusters = 0;
};

/// k-means with k-means++ seeding over N patch vectors stored row-wise in
/// `patches` (N * geometry.dim() values). Deterministic for a given seed.
/// Throws InsufficientDataError if there are fewer than K distinct patches.
Codebook fit_codebook(std::span<const float> patches, PatchGeometry geometry, std::size_t size,
                      std::uint64_t seed, const KMeansOptions& options = {},
                      KMeansReport* report = nullptr);

/// All patches of an image in raster order, each flattened as
/// (row, col, channel). Throws GeometryError on indivisible dimensions.
std::vector<float> extract_patches(const Image& image, const PatchGeometry& geometry);

/// Up to `per_image` patches drawn at random from each image.
std::vector<float> sample_patches(std::span<const Image> images, const PatchGeometry& geometry,
                                  std::size_t per_image, std::uint64_t seed);

Image detokenize(const TokenSequence& tokens, const Codebook& codebook);

/// Mean over patches of the squared distance to the nearest centroid.
double quantization_error(std::span<const float> patches, const Codebook& codebook);

inline constexpr char kCodebookMagic[4] = {'C', 'R', 'E', 'Q'};
inline constexpr std::uint16_t kCodebookVersion = 1;
inline constexpr std::size_t kCodebookHeaderBytes = 16;

void save_codebook(const std::filesystem::path& path, const Codebook& codebook);
Codebook load_codebook(const std::filesystem::path& path);

}  // namespace cre
