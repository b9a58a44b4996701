#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "cre/augment.hpp"
#include "cre/eval.hpp"
#include "cre/model.hpp"
#include "cre/tokenizer.hpp"
#include "cre/trainer.hpp"

namespace cre {

struct TokenizerSettings {
  std::size_t codebook_size = 64;
  std::size_t patch = 4;
  std::size_t patches_per_image = 16;
  std::size_t max_iterations = 100;
  double tolerance = 1e-4;

  PatchGeometry geometry() const { return {patch, patch, 3}; }
  KMeansOptions kmeans() const { return {max_iterations, tolerance}; }
  bool operator==(const TokenizerSettings&) const = default;
};

struct DataSettings {
  std::string manifest;         // relative paths resolve against the config file
  std::size_t image_size = 32;  // images are resized to image_size x image_size
  bool operator==(const DataSettings&) const = default;
};

/// Everything one run needs, serialized as a single JSON document with one
/// object per section. The top-level seed is the only seed; it is copied
/// into the sections that draw random numbers.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  std::string codebook;  // empty means <output_dir>/codebook.creq
  DataSettings data;
  TokenizerSettings tokenizer;
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
  ProbeConfig probe;
  FinetuneConfig finetune;

  /// Copies `seed` into the sections and checks every field and the
  /// cross-section agreements (vocabulary vs codebook, sequence length vs
  /// image and patch size). Throws ValidationError.
  void validate();
  std::filesystem::path codebook_path() const;
  std::string to_json() const;

  bool operator==(const RunConfig&) const = default;
};

/// Missing keys keep their defaults. Unknown keys and values of the wrong
/// type are rejected with ValidationError naming the dotted key; malformed
/// JSON throws ParseError.
RunConfig parse_run_config(std::string_view text);

/// As parse_run_config; a relative data.manifest resolves against the
/// directory of `path`.
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "section.key=value". The value is read as JSON when possible and
/// as a bare string otherwise. The key must already exist.
void apply_override(RunConfig& config, std::string_view assignment);

/// Applies several assignments, validating only the final result.
void apply_overrides(RunConfig& config, std::span<const std::string> assignments);

}  // namespace cre
