#include "cre/masking.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "cre/errors.hpp"
#include "cre/rng.hpp"

namespace cre {

std::size_t masked_count(std::size_t length, double ratio) {
  const double raw = static_cast<double>(length) * ratio;
  return static_cast<std::size_t>(std::floor(raw + 1e-9));
}

MaskVector sample_mask(std::size_t length, double ratio, std::uint64_t seed) {
  if (length < 2) throw ContractError("mask length must be at least 2, got " + std::to_string(length));
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ContractError("mask ratio must lie in (0, 1), got " + std::to_string(ratio));
  }
  const auto count = masked_count(length, ratio);
  if (count == 0) {
    throw ContractError("mask ratio " + std::to_string(ratio) + " hides no token of " +
                        std::to_string(length));
  }
  if (count >= length) throw ContractError("mask ratio hides every token");

  std::vector<std::size_t> order(length);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  MaskVector mask{std::vector<bool>(length, false), count};
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(order[i], order[i + rng.below(length - i)]);
    mask.flags[order[i]] = true;
  }
  return mask;
}

MaskedTokens apply_mask(const TokenSequence& tokens, const MaskVector& mask) {
  if (mask.length() != tokens.length()) {
    throw ContractError("mask of length " + std::to_string(mask.length()) +
                        " applied to sequence of length " + std::to_string(tokens.length()));
  }
  MaskedTokens out;
  out.length = tokens.length();
  for (std::size_t i = 0; i < tokens.length(); ++i) {
    if (mask.flags[i]) {
      out.masked_positions.push_back(i);
      out.masked_targets.push_back(tokens.ids[i]);
    } else {
      out.visible_positions.push_back(i);
      out.visible_ids.push_back(tokens.ids[i]);
    }
  }
  if (out.masked_positions.size() != mask.count) {
    throw ContractError("mask count field disagrees with its flags");
  }
  return out;
}

MaskedTokens unmasked(const TokenSequence& tokens) {
  MaskedTokens out;
  out.length = tokens.length();
  out.visible_ids = tokens.ids;
  out.visible_positions.resize(tokens.length());
  std::iota(out.visible_positions.begin(), out.visible_positions.end(), std::size_t{0});
  return out;
}

}  // namespace cre
