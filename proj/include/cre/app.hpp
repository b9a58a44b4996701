#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cre/config.hpp"
#include "cre/data.hpp"
#include "cre/eval.hpp"
#include "cre/tokenizer.hpp"

namespace cre {

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 1,
  kExitRuntime = 2,
  kExitGradcheck = 3,
};

/// Loads one split of a manifest, reporting each undecodable file on `log`.
/// Throws ValidationError when more than kMaxDecodeFailureRate of the split
/// fails to decode or when nothing is left.
LoadedImages load_split_checked(const DatasetManifest& manifest, Split split,
                                std::size_t image_size, std::ostream& log);

/// Samples patches from `images` and fits the k-means codebook.
Codebook fit_tokenizer(std::span<const Image> images, const TokenizerSettings& settings,
                       std::uint64_t seed, KMeansReport* report = nullptr);

/// Entry point of the command-line tool; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cre
