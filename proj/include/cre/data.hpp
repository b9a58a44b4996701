#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cre/image.hpp"

namespace cre {

enum class Split { kUnassigned, kPretrain, kTest };

std::string to_string(Split split);
/// "pretrain" or "test"; anything else throws ParseError.
Split parse_split(const std::string& text);

struct ImageRecord {
  std::string path;  // relative paths resolve against DatasetManifest::base_dir
  std::size_t label = 0;
  Split split = Split::kUnassigned;

  bool operator==(const ImageRecord&) const = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::vector<std::string> class_names;
  std::map<std::string, std::string> base_class;  // sub-class -> base class
  std::filesystem::path base_dir;

  std::size_t num_classes() const { return class_names.size(); }
  std::filesystem::path resolve(const ImageRecord& record) const;
  /// Index of `name`, appending it when new.
  std::size_t intern(const std::string& name);
  /// Throws ValidationError on duplicate paths or out-of-range labels.
  void validate() const;
  std::size_t count(Split split) const;
};

/// JSON Lines text, one {"path", "label", "split"?, "base_class"?} object
/// per line. Blank lines are skipped. Labels are interned in order of first
/// appearance.
DatasetManifest parse_manifest(const std::string& text, const std::string& source = "<manifest>");
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes paths relative to the manifest's own directory where possible.
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Within each class, shuffles by seed and sends the first ceil(ratio * n)
/// records to pretrain and the rest to test. Overwrites existing splits.
DatasetManifest split_by_class(const DatasetManifest& manifest, double ratio = 0.8,
                               std::uint64_t seed = 0);

/// Manifest over root/<class>/<image> with classes and files in sorted
/// order. Only .png, .ppm and .pgm files are picked up.
DatasetManifest make_manifest_from_directory(const std::filesystem::path& root);

/// Decodes binary PPM/PGM (P5/P6, maxval <= 255) or 8-bit PNG into floats
/// in [0,1], three channels. Throws DecodeError.
Image decode_image(const std::filesystem::path& path);

/// Decode, replicate gray to three channels, bilinear resize to
/// height x width.
Image load_image(const std::filesystem::path& path, std::size_t height, std::size_t width);

void write_ppm(const std::filesystem::path& path, const Image& image);

struct LoadedImages {
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> failures;  // "path: reason"

  double failure_rate() const;
};

/// Loads every record of `split` (all records when nullopt). Decode errors
/// are collected rather than thrown.
LoadedImages load_split(const DatasetManifest& manifest, std::optional<Split> split,
                        std::size_t height, std::size_t width);

/// Largest tolerated fraction of undecodable images in a split.
inline constexpr double kMaxDecodeFailureRate = 0.10;

}  // namespace cre
