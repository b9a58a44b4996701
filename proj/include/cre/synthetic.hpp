#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cre/data.hpp"
#include "cre/image.hpp"

namespace cre {

/// Procedural two-colour textures in eight structural classes (stripes of
/// either orientation, checkers, dots, rings, grids, diamonds). Colours,
/// period and phase are drawn per image, and every class looks the same
/// under a horizontal flip and is recognisable at any crop zoom.
struct SyntheticOptions {
  std::size_t images = 512;
  std::size_t size = 32;
  double period_min = 6.0;   // pattern period in pixels
  double period_max = 12.0;
  double noise = 0.02;       // per-pixel Gaussian noise
  bool colour_by_class = false;  // first colour fixed by the class: linearly separable
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kSyntheticClasses = 8;

const std::vector<std::string>& synthetic_class_names();

struct SyntheticCorpus {
  std::vector<Image> images;
  std::vector<std::size_t> labels;  // image i has class i % kSyntheticClasses
};

SyntheticCorpus make_synthetic_corpus(const SyntheticOptions& options);

/// Writes root/<class>/<index>.ppm plus root/manifest.jsonl with an 8:2
/// per-class split, and returns the manifest.
DatasetManifest write_synthetic_corpus(const std::filesystem::path& root,
                                       const SyntheticOptions& options);

}  // namespace cre
