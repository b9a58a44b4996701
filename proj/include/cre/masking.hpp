#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cre/tokenizer.hpp"

namespace cre {

inline constexpr double kDefaultMaskRatio = 0.55;

/// Boolean mask over a token sequence; true marks a hidden position.
struct MaskVector {
  std::vector<bool> flags;
  std::size_t count = 0;

  std::size_t length() const { return flags.size(); }
  bool operator==(const MaskVector&) const = default;
};

/// floor(length * ratio), guarded against representation error just below
/// an integer.
std::size_t masked_count(std::size_t length, double ratio);

/// Exactly masked_count(length, ratio) positions, uniformly without
/// replacement. Requires length >= 2 and 1 <= count < length.
MaskVector sample_mask(std::size_t length, double ratio, std::uint64_t seed);

/// A token sequence split by a mask. Positions are ascending.
struct MaskedTokens {
  std::vector<int> visible_ids;
  std::vector<std::size_t> visible_positions;
  std::vector<std::size_t> masked_positions;
  std::vector<int> masked_targets;  // original ids at masked_positions
  std::size_t length = 0;
};

MaskedTokens apply_mask(const TokenSequence& tokens, const MaskVector& mask);

/// Every position visible; the encoder input used for feature extraction.
MaskedTokens unmasked(const TokenSequence& tokens);

}  // namespace cre
