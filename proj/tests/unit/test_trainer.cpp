#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cre/errors.hpp"
#include "cre/trainer.hpp"
#include "helpers.hpp"
#include "tiny.hpp"

using namespace cre;
using cre::test::TempDir;

namespace {

ModelParameters<float> single(const std::string& name, std::vector<float> values) {
  ModelParameters<float> p;
  const auto n = values.size();
  p.add(name, TensorF({n}, std::move(values), true));
  return p;
}

bool same_weights(const ModelParameters<float>& a, const ModelParameters<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.entries()[i].tensor.data(), y = b.entries()[i].tensor.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

// The augmented token sequence behind a masked view, reassembled.
std::vector<int> full_sequence(const TokenBatch& b, std::size_t slot) {
  std::vector<int> ids(b.length, -1);
  for (std::size_t i = 0; i < b.visible; ++i) {
    ids[b.visible_positions[slot * b.visible + i]] = b.visible_ids[slot * b.visible + i];
  }
  for (std::size_t i = 0; i < b.masked; ++i) {
    ids[b.masked_positions[slot * b.masked + i]] = b.masked_targets[slot * b.masked + i];
  }
  return ids;
}

}  // namespace

TEST_CASE("learning rate scales with batch size") {
  TrainConfig c;
  c.base_lr = 1.5e-4;
  c.batch_size = 2048;
  CHECK(effective_lr(c) == doctest::Approx(1.2e-3).epsilon(1e-12));
  c.batch_size = 256;
  CHECK(effective_lr(c) == 1.5e-4);
  c.batch_size = 64;
  CHECK(effective_lr(c) == doctest::Approx(3.75e-5).epsilon(1e-12));
}

TEST_CASE("warmup then half-cosine") {
  TrainConfig c;
  c.base_lr = 1.5e-4;
  c.batch_size = 2048;
  c.warmup_epochs = 5;
  c.total_epochs = 100;
  const double peak = effective_lr(c);
  CHECK(lr_at(0.0, c) == 0.0);
  CHECK(lr_at(2.5, c) == doctest::Approx(peak / 2).epsilon(1e-12));
  CHECK(lr_at(5.0, c) == peak);
  CHECK(lr_at(100.0, c) == 0.0);
  CHECK(lr_at(52.5, c) == doctest::Approx(peak / 2).epsilon(1e-12));
  const double e = 30.0;
  CHECK(lr_at(e, c) ==
        doctest::Approx(0.5 * peak * (1 + std::cos(std::numbers::pi * (e - 5) / 95))).epsilon(1e-12));
  CHECK(warmup_cosine(2.0, 1.0, 0.0, 2.0) == doctest::Approx(1.0));
}

TEST_CASE("the schedule is continuous and non-increasing after warmup") {
  TrainConfig c;
  c.warmup_epochs = 5;
  c.total_epochs = 40;
  const double peak = effective_lr(c);
  CHECK(std::abs(lr_at(5.0 - 1e-9, c) - lr_at(5.0 + 1e-9, c)) < 1e-9 * peak);
  double prev = lr_at(5.0, c);
  for (double e = 5.0; e <= 40.0; e += 0.25) {
    const double now = lr_at(e, c);
    CHECK(now <= prev + 1e-18);
    CHECK(now >= 0.0);
    prev = now;
  }
}

TEST_CASE("one AdamW step by hand") {
  auto p = single("w", {0.5f});
  auto state = OptimizerState::for_parameters(p);
  p.at("w").mutable_grad()[0] = 1.0f;
  const AdamWConfig cfg{0.9, 0.95, 1e-8, 0.0};
  adamw_step(p, state, 0.1, cfg);
  // m = 0.1, v = 0.05, both bias-corrected to 1.
  const double expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8);
  CHECK(p.at("w").data()[0] == doctest::Approx(expected).epsilon(1e-7));
  CHECK(state.m[0][0] == doctest::Approx(0.1));
  CHECK(state.v[0][0] == doctest::Approx(0.05));
  CHECK(state.step == 1);
}

TEST_CASE("zero gradients without decay change nothing") {
  auto p = single("w.weight", {0.5f, -2.0f});
  auto state = OptimizerState::for_parameters(p);
  p.zero_grad();
  p.at("w.weight").mutable_grad();
  adamw_step(p, state, 0.1, {0.9, 0.95, 1e-8, 0.0});
  CHECK(p.at("w.weight").data()[0] == 0.5f);
  CHECK(p.at("w.weight").data()[1] == -2.0f);
}

TEST_CASE("zero gradients with decay shrink multiplicatively") {
  auto p = single("w.weight", {0.5f, -2.0f});
  auto state = OptimizerState::for_parameters(p);
  p.at("w.weight").mutable_grad();
  adamw_step(p, state, 0.1, {0.9, 0.95, 1e-8, 0.05});
  CHECK(p.at("w.weight").data()[0] == doctest::Approx(0.5 * (1 - 0.1 * 0.05)).epsilon(1e-7));
  CHECK(p.at("w.weight").data()[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.05)).epsilon(1e-7));

  auto bias = single("w.bias", {0.5f});
  auto bstate = OptimizerState::for_parameters(bias);
  bias.at("w.bias").mutable_grad();
  adamw_step(bias, bstate, 0.1, {0.9, 0.95, 1e-8, 0.05});
  CHECK(bias.at("w.bias").data()[0] == 0.5f);
}

TEST_CASE("decay exemptions") {
  CHECK(decay_policy("encoder.blocks.0.attn.qkv.weight") == DecayPolicy::kAll);
  CHECK(decay_policy("token_embed") == DecayPolicy::kAllButLastRow);
  CHECK(decay_policy("pos_embed") == DecayPolicy::kNone);
  CHECK(decay_policy("encoder.norm.gain") == DecayPolicy::kNone);
  CHECK(decay_policy("decoder.head.bias") == DecayPolicy::kNone);
}

TEST_CASE("a non-finite gradient aborts the step untouched") {
  ModelParameters<float> p;
  p.add("a.weight", TensorF({2}, {1.0f, 2.0f}, true));
  p.add("b.weight", TensorF({1}, {3.0f}, true));
  auto state = OptimizerState::for_parameters(p);
  p.at("a.weight").mutable_grad()[0] = 0.5f;
  p.at("b.weight").mutable_grad()[0] = std::nanf("");
  CHECK_THROWS_AS(adamw_step(p, state, 0.1, {}), NumericError);
  CHECK(p.at("a.weight").data()[0] == 1.0f);
  CHECK(state.step == 0);
  CHECK(state.m[0][0] == 0.0f);
}

TEST_CASE("epoch orders are permutations") {
  const auto a = epoch_order(50, 1, 0);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);
  CHECK(a == epoch_order(50, 1, 0));
  CHECK(a != epoch_order(50, 1, 1));
}

TEST_CASE("step counts") {
  TrainConfig c;
  c.batch_size = 64;
  c.total_epochs = 25;
  CHECK(steps_per_epoch(512, c) == 8);
  CHECK(total_steps(512, c) == 200);
  CHECK_THROWS_AS(steps_per_epoch(10, c), InsufficientDataError);
}

TEST_CASE("augmented views of an image do not depend on its batch mates") {
  const auto t = cre::test::make_tiny();
  const std::vector<std::size_t> alone{5}, together{2, 5, 9};
  const auto [a1, a2] = make_pretrain_batch(t.images, alone, 3, 1, t.codebook, t.train, t.augment);
  const auto [b1, b2] =
      make_pretrain_batch(t.images, together, 3, 1, t.codebook, t.train, t.augment);
  CHECK(full_sequence(a1, 0) == full_sequence(b1, 1));
  CHECK(full_sequence(a2, 0) == full_sequence(b2, 1));
  CHECK(a1.masked == masked_count(4, t.train.mask_ratio));
}

TEST_CASE("each logged step satisfies the combined-loss identity") {
  for (double lambda : {0.2, 0.0, 1.0}) {
    auto t = cre::test::make_tiny();
    t.train.lambda = lambda;
    auto params = init_parameters<float>(t.model, 0);
    auto state = OptimizerState::for_parameters(params);
    const auto r = pretrain(t.images, params, state, t.model, t.codebook, t.train, t.augment);
    REQUIRE(r.log.size() == 8);
    for (const auto& rec : r.log) {
      CHECK(std::abs(rec.combined - (rec.reconstruction + lambda * rec.contrastive)) < 1e-6);
      CHECK(rec.contrastive > 0.0);
    }
    CHECK(r.log[0].lr == 0.0);
    CHECK(r.log[4].lr == doctest::Approx(effective_lr(t.train)));
    CHECK(r.final_step == 8);
    CHECK(params.all_finite());
  }
}

TEST_CASE("pre-training is deterministic") {
  const auto t = cre::test::make_tiny();
  auto run = [&] {
    auto params = init_parameters<float>(t.model, 1);
    auto state = OptimizerState::for_parameters(params);
    auto r = pretrain(t.images, params, state, t.model, t.codebook, t.train, t.augment);
    return std::make_pair(r.log, std::move(params));
  };
  const auto [log_a, pa] = run();
  const auto [log_b, pb] = run();
  REQUIRE(log_a.size() == log_b.size());
  for (std::size_t i = 0; i < log_a.size(); ++i) {
    CHECK(std::abs(log_a[i].combined - log_b[i].combined) < 1e-6);
  }
  CHECK(same_weights(pa, pb));
}

TEST_CASE("checkpoints round trip bitwise") {
  TempDir dir("ckpt");
  const auto t = cre::test::make_tiny();
  auto params = init_parameters<float>(t.model, 2);
  auto state = OptimizerState::for_parameters(params);
  auto train = t.train;
  train.max_steps = 3;
  pretrain(t.images, params, state, t.model, t.codebook, train, t.augment);
  save_checkpoint(dir / "a.cre", params, state, "{\"x\": 1}");
  CHECK(std::filesystem::exists(dir / "a.cre.json"));

  auto loaded = init_parameters<float>(t.model, 99);
  auto loaded_state = OptimizerState::for_parameters(loaded);
  load_checkpoint(dir / "a.cre", loaded, &loaded_state);
  CHECK(same_weights(loaded, params));
  CHECK(loaded_state == state);
  save_checkpoint(dir / "b.cre", loaded, loaded_state);
  CHECK(cre::test::read_bytes(dir / "a.cre") == cre::test::read_bytes(dir / "b.cre"));
}

TEST_CASE("resumed training matches an uninterrupted run") {
  TempDir dir("resume");
  const auto t = cre::test::make_tiny();
  auto full = init_parameters<float>(t.model, 3);
  auto full_state = OptimizerState::for_parameters(full);
  const auto reference = pretrain(t.images, full, full_state, t.model, t.codebook, t.train, t.augment);

  auto part = init_parameters<float>(t.model, 3);
  auto part_state = OptimizerState::for_parameters(part);
  auto first = t.train;
  first.max_steps = 5;
  pretrain(t.images, part, part_state, t.model, t.codebook, first, t.augment);
  save_checkpoint(dir / "mid.cre", part, part_state);

  auto resumed = init_parameters<float>(t.model, 123);
  auto resumed_state = OptimizerState::for_parameters(resumed);
  load_checkpoint(dir / "mid.cre", resumed, &resumed_state);
  CHECK(resumed_state.step == 5);
  const auto rest = pretrain(t.images, resumed, resumed_state, t.model, t.codebook, t.train, t.augment);
  REQUIRE(rest.log.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(rest.log[i].step == reference.log[5 + i].step);
    CHECK(std::abs(rest.log[i].combined - reference.log[5 + i].combined) < 1e-6);
  }
  CHECK(same_weights(resumed, full));
}

TEST_CASE("a checkpoint for a different width is rejected without side effects") {
  TempDir dir("ckpt-width");
  const auto t = cre::test::make_tiny();
  auto params = init_parameters<float>(t.model, 4);
  save_checkpoint(dir / "w16.cre", params, OptimizerState::for_parameters(params));

  auto wide = t.model;
  wide.embed_dim = 32;
  auto target = init_parameters<float>(wide, 5);
  auto target_state = OptimizerState::for_parameters(target);
  const auto before = target.clone();
  try {
    load_checkpoint(dir / "w16.cre", target, &target_state);
    FAIL("expected a FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("token_embed") != std::string::npos);
  }
  CHECK(same_weights(target, before));
  CHECK(target_state.step == 0);
}

TEST_CASE("tensor files reject damage") {
  TempDir dir("tensors");
  const std::vector<NamedTensor> ts{{"a", {2, 2}, {1, 2, 3, 4}}, {"b", {3}, {5, 6, 7}}};
  write_tensor_file(dir / "t.bin", ts);
  CHECK(read_tensor_file(dir / "t.bin") == ts);
  const auto bytes = cre::test::read_bytes(dir / "t.bin");
  std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 1);
  CHECK_THROWS_AS(read_tensor_file(dir / "short.bin"), FormatError);
  auto bad = bytes;
  bad[1] = 'Z';
  std::ofstream(dir / "magic.bin", std::ios::binary) << bad;
  CHECK_THROWS_AS(read_tensor_file(dir / "magic.bin"), FormatError);
}

TEST_CASE("training settings are validated") {
  TrainConfig c;
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.warmup_epochs = c.total_epochs;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.lambda = -0.1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
