#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "cre/errors.hpp"
#include "cre/masking.hpp"
#include "cre/model.hpp"

using namespace cre;

namespace {

TokenSequence iota_tokens(std::size_t n) {
  TokenSequence t;
  t.ids.resize(n);
  std::iota(t.ids.begin(), t.ids.end(), 100);
  t.grid_h = 1;
  t.grid_w = n;
  return t;
}

}  // namespace

TEST_CASE("masked counts") {
  CHECK(masked_count(256, 0.55) == 140);
  CHECK(masked_count(64, 0.55) == 35);
  CHECK(masked_count(10, 0.3) == 3);
  CHECK(masked_count(100, 0.29) == 29);
  CHECK(sample_mask(256, 0.55, 0).count == 140);
  CHECK(sample_mask(64, 0.55, 0).count == 35);
}

TEST_CASE("degenerate masks are rejected") {
  CHECK_THROWS_AS(sample_mask(64, 0.01, 0), ContractError);
  CHECK_THROWS_AS(sample_mask(64, 0.0, 0), ContractError);
  CHECK_THROWS_AS(sample_mask(64, 1.0, 0), ContractError);
  CHECK_THROWS_AS(sample_mask(1, 0.5, 0), ContractError);
  CHECK_THROWS_AS(sample_mask(0, 0.5, 0), ContractError);
  CHECK_THROWS_AS(sample_mask(64, -0.2, 0), ContractError);
}

TEST_CASE("the mask holds exactly count true flags") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto m = sample_mask(64, 0.55, seed);
    CHECK(m.length() == 64);
    CHECK(static_cast<std::size_t>(std::count(m.flags.begin(), m.flags.end(), true)) == 35);
  }
}

TEST_CASE("a single masked position leaves L - 1 visible") {
  const auto tokens = iota_tokens(8);
  const auto m = sample_mask(8, 0.125, 3);
  REQUIRE(m.count == 1);
  const auto mt = apply_mask(tokens, m);
  CHECK(mt.visible_ids.size() == 7);
  CHECK(mt.masked_positions.size() == 1);
}

TEST_CASE("visible and masked positions partition the sequence") {
  const auto tokens = iota_tokens(64);
  const auto mt = apply_mask(tokens, sample_mask(64, 0.55, 11));
  CHECK(mt.visible_ids.size() == 29);
  CHECK(mt.masked_positions.size() == 35);
  CHECK(mt.length == 64);
  CHECK(std::is_sorted(mt.visible_positions.begin(), mt.visible_positions.end()));
  CHECK(std::is_sorted(mt.masked_positions.begin(), mt.masked_positions.end()));
  std::vector<std::size_t> all(mt.visible_positions);
  all.insert(all.end(), mt.masked_positions.begin(), mt.masked_positions.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expected(64);
  std::iota(expected.begin(), expected.end(), 0);
  CHECK(all == expected);
  for (std::size_t i = 0; i < mt.visible_ids.size(); ++i) {
    CHECK(mt.visible_ids[i] == tokens.ids[mt.visible_positions[i]]);
  }
  for (std::size_t i = 0; i < mt.masked_targets.size(); ++i) {
    CHECK(mt.masked_targets[i] == tokens.ids[mt.masked_positions[i]]);
  }
}

TEST_CASE("mask and token lengths must agree") {
  CHECK_THROWS_AS(apply_mask(iota_tokens(10), sample_mask(12, 0.5, 0)), ContractError);
}

TEST_CASE("the unmasked view keeps every token") {
  const auto tokens = iota_tokens(16);
  const auto mt = unmasked(tokens);
  CHECK(mt.visible_ids == tokens.ids);
  CHECK(mt.masked_positions.empty());
}

TEST_CASE("every position is masked equally often") {
  const std::size_t length = 64, trials = 10000;
  std::vector<std::size_t> hits(length, 0);
  for (std::uint64_t seed = 0; seed < trials; ++seed) {
    const auto m = sample_mask(length, 0.55, seed);
    for (std::size_t i = 0; i < length; ++i) hits[i] += m.flags[i] ? 1 : 0;
  }
  const double expected = 35.0 / 64.0;
  for (std::size_t i = 0; i < length; ++i) {
    CHECK(std::abs(static_cast<double>(hits[i]) / trials - expected) < 0.05);
  }
}

TEST_CASE("masks are a pure function of the seed") {
  CHECK(sample_mask(64, 0.55, 77) == sample_mask(64, 0.55, 77));
  CHECK_FALSE(sample_mask(64, 0.55, 77) == sample_mask(64, 0.55, 78));
}

TEST_CASE("batches require equal masked counts") {
  const auto a = apply_mask(iota_tokens(8), sample_mask(8, 0.5, 1));
  const auto b = apply_mask(iota_tokens(8), sample_mask(8, 0.25, 2));
  const std::vector<MaskedTokens> same{a, a};
  const auto batch = TokenBatch::from(same);
  CHECK(batch.batch == 2);
  CHECK(batch.visible == 4);
  CHECK(batch.masked == 4);
  const std::vector<MaskedTokens> mixed{a, b};
  CHECK_THROWS_AS(TokenBatch::from(mixed), ContractError);
}
