#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "cre/errors.hpp"
#include "cre/eval.hpp"
#include "helpers.hpp"
#include "tiny.hpp"

using namespace cre;

namespace {

struct Blobs {
  TensorF features;
  std::vector<std::size_t> labels;
};

// Class c is centred at 5 sigma * c along every axis.
Blobs blobs(std::size_t per_class, std::size_t classes, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Blobs b;
  std::vector<float> v;
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    const auto c = i % classes;
    b.labels.push_back(c);
    for (std::size_t d = 0; d < dim; ++d) {
      v.push_back(static_cast<float>(5.0 * static_cast<double>(c) + rng.normal()));
    }
  }
  b.features = TensorF({per_class * classes, dim}, std::move(v));
  return b;
}

bool bitwise_equal(const ModelParameters<float>& a, const ModelParameters<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.entries()[i].tensor.data(), y = b.entries()[i].tensor.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("perfect predictions") {
  const std::vector<std::size_t> y{0, 1, 2, 1};
  const auto m = compute_metrics(y, y, 3);
  CHECK(m.top1 == 1.0);
  CHECK(m.macro_f1 == 1.0);
}

TEST_CASE("all-one predictions on a balanced pair") {
  const std::vector<std::size_t> pred{1, 1, 1, 1}, labels{1, 1, 0, 0};
  const auto m = compute_metrics(pred, labels, 2);
  CHECK(m.top1 == 0.5);
  CHECK(m.per_class[1].f1 == doctest::Approx(2.0 / 3.0));
  CHECK(m.per_class[0].f1 == 0.0);
  CHECK(m.macro_f1 == doctest::Approx(1.0 / 3.0));
  CHECK(m.confusion[0][1] == 2);
}

TEST_CASE("a class with no samples and no predictions is flagged") {
  const std::vector<std::size_t> pred{0, 1}, labels{0, 1};
  const auto m = compute_metrics(pred, labels, 3);
  CHECK(m.per_class[2].empty);
  CHECK(m.per_class[2].f1 == 0.0);
  CHECK(m.macro_f1 == doctest::Approx(2.0 / 3.0));
  const auto j = nlohmann::json::parse(m.to_json());
  CHECK(j["per_class"][2]["empty"] == true);
  CHECK(j["top1"] == 1.0);
}

TEST_CASE("metric contract errors") {
  const std::vector<std::size_t> a{0, 1}, b{0};
  CHECK_THROWS_AS(compute_metrics(a, b, 2), ContractError);
  const std::vector<std::size_t> out_of_range{0, 5};
  CHECK_THROWS(compute_metrics(a, out_of_range, 2));
}

TEST_CASE("metrics are invariant to relabelling classes") {
  Rng rng(1);
  std::vector<std::size_t> pred(200), labels(200);
  for (std::size_t i = 0; i < 200; ++i) {
    labels[i] = rng.below(4);
    pred[i] = rng.bernoulli(0.6) ? labels[i] : rng.below(4);
  }
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<std::size_t> pp(200), pl(200);
  for (std::size_t i = 0; i < 200; ++i) {
    pp[i] = perm[pred[i]];
    pl[i] = perm[labels[i]];
  }
  const auto a = compute_metrics(pred, labels, 4), b = compute_metrics(pp, pl, 4);
  CHECK(a.top1 == b.top1);
  CHECK(a.macro_f1 == doctest::Approx(b.macro_f1).epsilon(1e-12));
  for (std::size_t c = 0; c < 4; ++c) CHECK(a.per_class[c].f1 == b.per_class[perm[c]].f1);

  std::size_t trace = 0, total = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      total += a.confusion[i][j];
      if (i == j) trace += a.confusion[i][j];
    }
  }
  CHECK(a.top1 == static_cast<double>(trace) / static_cast<double>(total));
}

TEST_CASE("separable blobs are probed perfectly") {
  const auto train = blobs(100, 2, 8, 1), test = blobs(50, 2, 8, 2);
  ProbeConfig pc;
  pc.epochs = 20;
  const auto r = linear_probe(train.features, train.labels, test.features, test.labels, 2, pc);
  CHECK(r.test.top1 >= 0.99);
  CHECK(r.train.top1 >= 0.99);
  CHECK(r.classes_missing_from_train.empty());
}

TEST_CASE("shuffled labels probe at chance") {
  const auto train = blobs(100, 4, 8, 3), test = blobs(100, 4, 8, 4);
  auto shuffled = test.labels;
  Rng rng(5);
  for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
  ProbeConfig pc;
  pc.epochs = 20;
  const auto r = linear_probe(train.features, train.labels, test.features, shuffled, 4, pc);
  CHECK(std::abs(r.test.top1 - 0.25) <= 0.05);
}

TEST_CASE("a class missing from training is still scored") {
  const auto train = blobs(30, 2, 4, 6);
  const auto test = blobs(30, 3, 4, 7);
  ProbeConfig pc;
  pc.epochs = 5;
  const auto r = linear_probe(train.features, train.labels, test.features, test.labels, 3, pc);
  CHECK(r.classes_missing_from_train == std::vector<std::size_t>{2});
  CHECK(r.test.per_class.size() == 3);
  CHECK(r.test.per_class[2].recall == 0.0);
}

TEST_CASE("split-based probe uses only assigned rows") {
  const auto all = blobs(40, 2, 4, 8);
  std::vector<Split> split(80, Split::kPretrain);
  for (std::size_t i = 60; i < 80; ++i) split[i] = Split::kTest;
  split[0] = Split::kUnassigned;
  ProbeConfig pc;
  pc.epochs = 5;
  const auto r = linear_probe(all.features, all.labels, split, 2, pc);
  CHECK(r.train.samples == 59);
  CHECK(r.test.samples == 20);
}

TEST_CASE("feature extraction") {
  const auto t = cre::test::make_tiny();
  const auto params = init_parameters<float>(t.model, 0);
  const auto before = params.clone();
  std::vector<Image> imgs{t.images[0], t.images[3], t.images[0]};
  const auto f = extract_features(imgs, params, t.model, t.codebook, 2);
  CHECK(f.shape() == Shape{3, 16});
  const auto d = f.data();
  CHECK(std::equal(d.begin(), d.begin() + 16, d.begin() + 32));
  CHECK_FALSE(std::equal(d.begin(), d.begin() + 16, d.begin() + 16));
  CHECK(bitwise_equal(params, before));
}

TEST_CASE("brief training changes the features") {
  const auto t = cre::test::make_tiny();
  auto params = init_parameters<float>(t.model, 0);
  const auto f0 = extract_features(t.images, params, t.model, t.codebook);
  auto state = OptimizerState::for_parameters(params);
  pretrain(t.images, params, state, t.model, t.codebook, t.train, t.augment);
  const auto f1 = extract_features(t.images, params, t.model, t.codebook);
  double diff = 0.0;
  for (std::size_t i = 0; i < f0.numel(); ++i) diff += std::abs(f0.data()[i] - f1.data()[i]);
  CHECK(diff / static_cast<double>(f0.numel()) > 0.0);
}

TEST_CASE("probing leaves the encoder untouched") {
  const auto t = cre::test::make_tiny(32);
  const auto params = init_parameters<float>(t.model, 1);
  const auto before = params.clone();
  const auto f = extract_features(t.images, params, t.model, t.codebook);
  ProbeConfig pc;
  pc.epochs = 3;
  std::vector<Split> split(32, Split::kPretrain);
  for (std::size_t i = 24; i < 32; ++i) split[i] = Split::kTest;
  (void)linear_probe(f, t.labels, split, 8, pc);
  CHECK(bitwise_equal(params, before));
}

TEST_CASE("a frozen, unaugmented fine-tune is the linear probe") {
  const auto t = cre::test::make_tiny(32);
  const auto params = init_parameters<float>(t.model, 2);
  const std::span<const Image> all(t.images);
  const std::span<const std::size_t> labels(t.labels);

  FinetuneConfig fc;
  fc.freeze_encoder = true;
  fc.augment = false;
  fc.epochs = 4;
  fc.warmup_epochs = 1;
  fc.weight_decay = 0.0;
  const auto ft = finetune(all.first(24), labels.first(24), all.subspan(24), labels.subspan(24), 8,
                           params, t.model, t.codebook, fc, t.augment);

  ProbeConfig pc;
  pc.epochs = 4;
  pc.warmup_epochs = 1;
  pc.weight_decay = 0.0;
  const auto train_f = extract_features(all.first(24), params, t.model, t.codebook);
  const auto test_f = extract_features(all.subspan(24), params, t.model, t.codebook);
  const auto pr = linear_probe(train_f, labels.first(24), test_f, labels.subspan(24), 8, pc);

  REQUIRE(ft.epoch_loss.size() == pr.epoch_loss.size());
  for (std::size_t i = 0; i < ft.epoch_loss.size(); ++i) {
    CHECK(ft.epoch_loss[i] == doctest::Approx(pr.epoch_loss[i]).epsilon(1e-4));
  }
  CHECK(ft.test.top1 == pr.test.top1);
  for (std::size_t i = 0; i < ft.encoder.size(); ++i) {
    const auto& name = ft.encoder.entries()[i].name;
    const auto x = ft.encoder.entries()[i].tensor.data(), y = params.at(name).data();
    CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
}

TEST_CASE("full fine-tuning updates the encoder copy only") {
  const auto t = cre::test::make_tiny(32);
  const auto params = init_parameters<float>(t.model, 3);
  const auto before = params.clone();
  FinetuneConfig fc;
  fc.epochs = 15;
  fc.batch_size = 8;
  CHECK_NOTHROW(fc.validate());
  fc.epochs = 2;
  const std::span<const Image> all(t.images);
  const std::span<const std::size_t> labels(t.labels);
  const auto ft = finetune(all.first(24), labels.first(24), all.subspan(24), labels.subspan(24), 8,
                           params, t.model, t.codebook, fc, t.augment);
  CHECK(bitwise_equal(params, before));
  CHECK_FALSE(std::equal(ft.encoder.at("pos_embed").data().begin(),
                         ft.encoder.at("pos_embed").data().end(),
                         params.at("pos_embed").data().begin()));
  CHECK(ft.test.samples == 8);
}
