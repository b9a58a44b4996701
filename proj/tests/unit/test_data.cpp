#include <doctest.h>

#include <fstream>
#include <map>

#include "cre/data.hpp"
#include "cre/errors.hpp"
#include "helpers.hpp"

using namespace cre;
using cre::test::TempDir;

namespace {

void write_pgm(const std::filesystem::path& p, std::size_t h, std::size_t w, unsigned char v) {
  std::ofstream out(p, std::ios::binary);
  out << "P5\n" << w << " " << h << "\n255\n";
  out << std::string(h * w, static_cast<char>(v));
}

DatasetManifest classes_of(const std::vector<std::size_t>& sizes) {
  DatasetManifest m;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    const auto label = m.intern("c" + std::to_string(c));
    for (std::size_t i = 0; i < sizes[c]; ++i) {
      m.records.push_back({"c" + std::to_string(c) + "/" + std::to_string(i) + ".ppm", label,
                           Split::kUnassigned});
    }
  }
  return m;
}

std::map<std::size_t, std::pair<std::size_t, std::size_t>> split_counts(const DatasetManifest& m) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> out;
  for (const auto& r : m.records) {
    auto& [pre, test] = out[r.label];
    (r.split == Split::kPretrain ? pre : test) += 1;
  }
  return out;
}

}  // namespace

TEST_CASE("a three-line manifest") {
  const auto m = parse_manifest(
      "{\"path\": \"a.png\", \"label\": \"cat\"}\n"
      "{\"path\": \"b.png\", \"label\": \"dog\", \"split\": \"test\"}\n"
      "\n"
      "{\"path\": \"c.png\", \"label\": \"cat\", \"split\": \"pretrain\", \"base_class\": \"animal\"}\n");
  REQUIRE(m.records.size() == 3);
  CHECK(m.class_names == std::vector<std::string>{"cat", "dog"});
  CHECK(m.records[0].label == 0);
  CHECK(m.records[1].label == 1);
  CHECK(m.records[2].label == 0);
  CHECK(m.records[0].split == Split::kUnassigned);
  CHECK(m.records[1].split == Split::kTest);
  CHECK(m.base_class.at("cat") == "animal");
}

TEST_CASE("duplicate paths are rejected by name") {
  try {
    parse_manifest("{\"path\": \"x/a.png\", \"label\": \"a\"}\n{\"path\": \"x/a.png\", \"label\": \"b\"}\n");
    FAIL("expected a ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("x/a.png") != std::string::npos);
  }
}

TEST_CASE("an empty manifest is valid") {
  const auto m = parse_manifest("");
  CHECK(m.records.empty());
  CHECK_NOTHROW(m.validate());
}

TEST_CASE("malformed lines report their line number") {
  auto message_for = [](const std::string& text) {
    try {
      parse_manifest(text, "m.jsonl");
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message_for("{\"path\": \"a\", \"label\": \"x\"}\n{oops\n").find("m.jsonl:2") !=
        std::string::npos);
  CHECK(message_for("{\"label\": \"x\"}\n").find("m.jsonl:1") != std::string::npos);
  CHECK(message_for("{\"path\": \"a\", \"label\": \"x\", \"split\": \"val\"}\n").find(":1") !=
        std::string::npos);
  CHECK_FALSE(message_for("{\"path\": \"a\", \"label\": \"x\", \"colour\": 1}\n").empty());
}

TEST_CASE("per-class split sizes") {
  const auto m = split_by_class(classes_of({10, 5, 1}), 0.8, 0);
  const auto counts = split_counts(m);
  CHECK(counts.at(0) == std::pair<std::size_t, std::size_t>{8, 2});
  CHECK(counts.at(1) == std::pair<std::size_t, std::size_t>{4, 1});
  CHECK(counts.at(2) == std::pair<std::size_t, std::size_t>{1, 0});
}

TEST_CASE("splitting is deterministic and idempotent") {
  const auto base = classes_of({10, 7});
  const auto a = split_by_class(base, 0.8, 3);
  CHECK(a.records == split_by_class(base, 0.8, 3).records);
  CHECK(split_by_class(a, 0.8, 3).records == a.records);
}

TEST_CASE("the overall pretrain fraction is close to the ratio") {
  const auto m = split_by_class(classes_of({100, 250, 333, 40}), 0.8, 1);
  const double frac = static_cast<double>(m.count(Split::kPretrain)) / m.records.size();
  CHECK(std::abs(frac - 0.8) < 0.02);
}

TEST_CASE("manifests round trip through disk") {
  TempDir dir("manifest");
  auto m = split_by_class(classes_of({3, 2}), 0.8, 0);
  m.base_dir = dir.path();
  save_manifest(dir / "m.jsonl", m);
  const auto back = load_manifest(dir / "m.jsonl");
  CHECK(back.records == m.records);
  CHECK(back.class_names == m.class_names);
  CHECK(back.resolve(back.records[0]) == dir.path() / m.records[0].path);
}

TEST_CASE("solid gray decodes to 128 / 255 on three channels") {
  TempDir dir("gray");
  write_pgm(dir / "g.pgm", 6, 5, 128);
  const auto img = decode_image(dir / "g.pgm");
  CHECK(img.height == 6);
  CHECK(img.width == 5);
  CHECK(img.channels == 3);
  for (float v : img.pixels) CHECK(v == doctest::Approx(128.0 / 255.0).epsilon(1e-6));
  CHECK(img.pixels[0] == doctest::Approx(0.50196).epsilon(1e-5));

  const auto resized = load_image(dir / "g.pgm", 8, 12);
  CHECK(resized.height == 8);
  CHECK(resized.width == 12);
  CHECK(resized.channels == 3);
  for (float v : resized.pixels) CHECK(v == doctest::Approx(128.0 / 255.0).epsilon(1e-6));
}

TEST_CASE("colour images keep their channels through a PPM round trip") {
  TempDir dir("ppm");
  auto img = cre::test::random_image(7, 9, 3);
  for (auto& p : img.pixels) p = std::round(p * 255.0f) / 255.0f;
  write_ppm(dir / "c.ppm", img);
  const auto back = decode_image(dir / "c.ppm");
  REQUIRE(back.pixels.size() == img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    CHECK(back.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-6));
  }
}

TEST_CASE("undecodable files are collected, not thrown") {
  TempDir dir("bad");
  std::filesystem::create_directories(dir / "a");
  write_pgm(dir / "a/ok.pgm", 4, 4, 10);
  std::ofstream(dir / "a/bad.ppm") << "not an image";
  CHECK_THROWS_AS(decode_image(dir / "a/bad.ppm"), DecodeError);
  CHECK_THROWS_AS(decode_image(dir / "a/missing.png"), DecodeError);

  auto m = make_manifest_from_directory(dir.path());
  REQUIRE(m.records.size() == 2);
  const auto loaded = load_split(m, std::nullopt, 4, 4);
  CHECK(loaded.images.size() == 1);
  CHECK(loaded.failures.size() == 1);
  CHECK(loaded.failure_rate() == doctest::Approx(0.5));
}

TEST_CASE("directory manifests are sorted by class and file") {
  TempDir dir("tree");
  for (const char* c : {"zebra", "ant"}) {
    std::filesystem::create_directories(dir / c);
    write_pgm(dir / c / "2.pgm", 2, 2, 1);
    write_pgm(dir / c / "1.pgm", 2, 2, 1);
  }
  std::ofstream(dir / "ant" / "notes.txt") << "ignored";
  const auto m = make_manifest_from_directory(dir.path());
  CHECK(m.class_names == std::vector<std::string>{"ant", "zebra"});
  REQUIRE(m.records.size() == 4);
  CHECK(m.records[0].path == "ant/1.pgm");
  CHECK(m.records[3].path == "zebra/2.pgm");
  CHECK(m.records[3].label == 1);
}
