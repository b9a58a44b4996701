#include <doctest.h>

#include <fstream>
#include <json.hpp>

#include "cre/config.hpp"
#include "cre/errors.hpp"
#include "helpers.hpp"

using namespace cre;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("missing keys keep their defaults") {
  const auto c = parse_run_config("{}");
  RunConfig d;
  d.validate();
  CHECK(c == d);
  CHECK(c.model.vocab_size == 64);
  CHECK(c.train.lambda == 0.2);
  CHECK(c.train.mask_ratio == 0.55);
  CHECK(c.finetune.epochs == 15);
}

TEST_CASE("unknown keys are rejected by their dotted name") {
  CHECK(error_of(R"({"train": {"lamda": 0.1}})").find("train.lamda") != std::string::npos);
  CHECK(error_of(R"({"colour": 1})").find("colour") != std::string::npos);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"depth": 2}})"), ValidationError);
}

TEST_CASE("values of the wrong kind are rejected") {
  CHECK(error_of(R"({"train": {"batch_size": "big"}})").find("train.batch_size") !=
        std::string::npos);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch_size": -4}})"), ValidationError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch_size": 2.5}})"), ValidationError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": 3})"), ValidationError);
  CHECK_THROWS_AS(parse_run_config(R"({"finetune": {"augment": 1}})"), ValidationError);
  CHECK_NOTHROW(parse_run_config(R"({"train": {"base_lr": 1}})"));
}

TEST_CASE("malformed JSON is a parse error") {
  CHECK_THROWS_AS(parse_run_config("{\"seed\": "), ParseError);
}

TEST_CASE("section validation runs before any work") {
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"warmup_epochs": 200}})"), ValidationError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"num_heads": 3}})"), ValidationError);
  CHECK_THROWS_AS(parse_run_config(R"({"augment": {"flip_prob": 2}})"), ValidationError);
}

TEST_CASE("cross-section agreement") {
  CHECK(error_of(R"({"tokenizer": {"codebook_size": 32}})").find("vocab_size") !=
        std::string::npos);
  CHECK_NOTHROW(parse_run_config(R"({"tokenizer": {"codebook_size": 32}, "model": {"vocab_size": 32}})"));
  CHECK(error_of(R"({"data": {"image_size": 64}, "augment": {"out_h": 64, "out_w": 64}})")
            .find("seq_len") != std::string::npos);
  CHECK_NOTHROW(parse_run_config(
      R"({"data": {"image_size": 64}, "augment": {"out_h": 64, "out_w": 64}, "model": {"seq_len": 256}})"));
  CHECK_THROWS_AS(parse_run_config(R"({"data": {"image_size": 30}})"), ValidationError);
}

TEST_CASE("the seed reaches every section") {
  const auto c = parse_run_config(R"({"seed": 17})");
  CHECK(c.train.seed == 17);
  CHECK(c.probe.seed == 17);
  CHECK(c.finetune.seed == 17);
}

TEST_CASE("overrides") {
  auto c = parse_run_config("{}");
  apply_override(c, "train.lambda=0");
  CHECK(c.train.lambda == 0.0);
  apply_override(c, "output_dir=elsewhere");
  CHECK(c.output_dir == "elsewhere");
  apply_override(c, "finetune.freeze_encoder=true");
  CHECK(c.finetune.freeze_encoder);
  CHECK_THROWS_AS(apply_override(c, "train.nothing=1"), ValidationError);
  CHECK_THROWS_AS(apply_override(c, "train.lambda"), ValidationError);
  CHECK_THROWS_AS(apply_override(c, "train.lambda=-1"), ValidationError);
  CHECK_THROWS_AS(apply_override(c, "model.vocab_size=32"), ValidationError);
  CHECK(c.train.lambda == 0.0);
}

TEST_CASE("the echoed document reproduces the configuration") {
  auto c = parse_run_config(R"({"seed": 5, "train": {"max_steps": 7}, "probe": {"epochs": 3}})");
  const auto text = c.to_json();
  CHECK(parse_run_config(text) == c);
  const auto j = nlohmann::json::parse(text);
  CHECK(j["train"]["max_steps"] == 7);
  CHECK(j.contains("tokenizer"));
  CHECK_FALSE(j["train"].contains("seed"));
}

TEST_CASE("a relative manifest resolves against the config file") {
  cre::test::TempDir dir("cfg");
  std::filesystem::create_directories(dir / "sub");
  std::ofstream(dir / "sub" / "run.json") << R"({"data": {"manifest": "data/m.jsonl"}})";
  const auto c = load_run_config(dir / "sub" / "run.json");
  CHECK(std::filesystem::path(c.data.manifest) == dir / "sub" / "data" / "m.jsonl");
  CHECK(c.codebook_path() == std::filesystem::path("run") / "codebook.creq");
  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ValidationError);
}
