#include "cre/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <json.hpp>
#include <sstream>

#include "cre/errors.hpp"
#include "cre/masking.hpp"
#include "cre/ops.hpp"
#include "cre/rng.hpp"
#include "cre/trainer.hpp"

namespace cre {

// ---------------------------------------------------------------- metrics

Metrics compute_metrics(std::span<const std::size_t> predictions,
                        std::span<const std::size_t> labels, std::size_t num_classes) {
  if (predictions.size() != labels.size()) {
    throw ContractError(std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(labels.size()) + " labels");
  }
  if (num_classes == 0) throw ContractError("metrics need at least one class");
  Metrics m;
  m.samples = labels.size();
  m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes || predictions[i] >= num_classes) {
      throw IndexError("class index out of range at sample " + std::to_string(i));
    }
    ++m.confusion[labels[i]][predictions[i]];
  }
  std::size_t correct = 0;
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    ClassMetrics cm;
    const auto tp = m.confusion[c][c];
    correct += tp;
    for (std::size_t k = 0; k < num_classes; ++k) {
      cm.support += m.confusion[c][k];
      cm.predicted += m.confusion[k][c];
    }
    cm.precision = cm.predicted ? static_cast<double>(tp) / static_cast<double>(cm.predicted) : 0.0;
    cm.recall = cm.support ? static_cast<double>(tp) / static_cast<double>(cm.support) : 0.0;
    cm.f1 = cm.precision + cm.recall > 0.0
                ? 2.0 * cm.precision * cm.recall / (cm.precision + cm.recall)
                : 0.0;
    cm.empty = cm.support == 0 && cm.predicted == 0;
    f1_sum += cm.f1;
    m.per_class.push_back(cm);
  }
  m.top1 = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  m.macro_f1 = f1_sum / static_cast<double>(num_classes);
  return m;
}

namespace {

std::string class_label(std::span<const std::string> names, std::size_t c) {
  return c < names.size() ? names[c] : std::to_string(c);
}

}  // namespace

std::string Metrics::to_json(std::span<const std::string> class_names) const {
  nlohmann::ordered_json j;
  j["top1"] = top1;
  j["macro_f1"] = macro_f1;
  j["samples"] = samples;
  auto per = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& cm = per_class[c];
    nlohmann::ordered_json e;
    e["class"] = class_label(class_names, c);
    e["precision"] = cm.precision;
    e["recall"] = cm.recall;
    e["f1"] = cm.f1;
    e["support"] = cm.support;
    e["predicted"] = cm.predicted;
    e["empty"] = cm.empty;
    per.push_back(e);
  }
  j["per_class"] = per;
  j["confusion"] = confusion;
  return j.dump(2);
}

std::string Metrics::to_table(std::span<const std::string> class_names) const {
  std::size_t width = 5;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    width = std::max(width, class_label(class_names, c).size());
  }
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s %9s %9s %9s %8s\n", static_cast<int>(width), "class",
                "precision", "recall", "f1", "support");
  out << buf;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& cm = per_class[c];
    std::snprintf(buf, sizeof buf, "%-*s %9.4f %9.4f %9.4f %8zu%s\n", static_cast<int>(width),
                  class_label(class_names, c).c_str(), cm.precision, cm.recall, cm.f1, cm.support,
                  cm.empty ? "  (empty)" : "");
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "top-1 accuracy %.4f  macro-F1 %.4f  (%zu samples)\n", top1,
                macro_f1, samples);
  out << buf;
  return out.str();
}

// ---------------------------------------------------------------- features

namespace {

TokenBatch unmasked_batch(std::span<const Image> images, const Tokenizer& tokenizer,
                          std::span<const std::size_t> indices) {
  std::vector<MaskedTokens> samples;
  samples.reserve(indices.size());
  for (const auto i : indices) samples.push_back(unmasked(tokenizer.tokenize(images[i])));
  return TokenBatch::from(samples);
}

void check_tokenizer(const ModelConfig& config, const Tokenizer& tokenizer, const Image& sample) {
  if (tokenizer.vocabulary_size() != config.vocab_size) {
    throw ContractError("tokenizer vocabulary " + std::to_string(tokenizer.vocabulary_size()) +
                        " differs from model vocab_size " + std::to_string(config.vocab_size));
  }
  const auto len = tokenizer.sequence_length(sample.height, sample.width);
  if (len != config.seq_len) {
    throw ContractError("images tokenize to " + std::to_string(len) + " tokens, model seq_len is " +
                        std::to_string(config.seq_len));
  }
}

}  // namespace

Tensor<float> extract_features(std::span<const Image> images, const ModelParameters<float>& params,
                               const ModelConfig& config, const Tokenizer& tokenizer,
                               std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("feature batch size must be positive");
  const auto E = config.embed_dim;
  std::vector<float> out(images.size() * E);
  if (images.empty()) return Tensor<float>({0, E}, {});
  check_tokenizer(config, tokenizer, images[0]);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const auto end = std::min(images.size(), start + batch_size);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const auto batch = unmasked_batch(images, tokenizer, idx);
    Tape<float> tape(false);
    const auto pooled = pooled_feature(tape, encode(tape, params, config, batch), batch.batch);
    std::copy(pooled.data().begin(), pooled.data().end(), out.begin() + start * E);
  }
  return Tensor<float>({images.size(), E}, std::move(out));
}

// ---------------------------------------------------------------- classifier

Tensor<float> ClassifierHead::forward(Tape<float>& tape, const Tensor<float>& features) const {
  auto x = features;
  if (norm_scale.defined()) x = linear(tape, x, norm_scale, norm_shift);
  for (std::size_t i = 0;; ++i) {
    const auto prefix = "head.hidden." + std::to_string(i);
    if (!params.contains(prefix + ".weight")) break;
    x = gelu(tape, linear(tape, x, params.at(prefix + ".weight"), params.at(prefix + ".bias")));
  }
  return linear(tape, x, params.at("head.weight"), params.at("head.bias"));
}

std::vector<std::size_t> ClassifierHead::predict(const Tensor<float>& features) const {
  if (features.dim(0) == 0) return {};
  Tape<float> tape(false);
  const auto logits = forward(tape, features);
  const auto rows = logits.dim(0), cols = logits.dim(1);
  const auto v = logits.data();
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* row = v.data() + r * cols;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
  }
  return out;
}

namespace {

ModelParameters<float> init_head_params(std::size_t in, std::size_t classes,
                                        std::size_t hidden_layers, std::size_t hidden_dim,
                                        std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x68656164u}));
  ModelParameters<float> head;
  auto weight = [&](std::size_t rows, std::size_t cols) {
    std::vector<float> w(rows * cols);
    for (auto& v : w) v = static_cast<float>(rng.truncated_normal(0.01));
    return Tensor<float>({rows, cols}, std::move(w));
  };
  const auto width = hidden_dim ? hidden_dim : in;
  std::size_t d = in;
  for (std::size_t i = 0; i < hidden_layers; ++i) {
    const auto prefix = "head.hidden." + std::to_string(i);
    head.add(prefix + ".weight", weight(d, width));
    head.add(prefix + ".bias", Tensor<float>::zeros({width}));
    d = width;
  }
  head.add("head.weight", weight(d, classes));
  head.add("head.bias", Tensor<float>::zeros({classes}));
  return head;
}

// Per-feature mean and standard deviation of the rows, folded into a
// constant affine map.
void fit_standardization(ClassifierHead& head, const Tensor<float>& features) {
  const auto n = features.dim(0), e = features.dim(1);
  const auto v = features.data();
  std::vector<float> scale(e * e, 0.0f), shift(e);
  for (std::size_t c = 0; c < e; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += v[r * e + c];
    mean /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) sq += (v[r * e + c] - mean) * (v[r * e + c] - mean);
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(n) + 1e-6);
    scale[c * e + c] = static_cast<float>(inv);
    shift[c] = static_cast<float>(-mean * inv);
  }
  head.norm_scale = Tensor<float>({e, e}, std::move(scale));
  head.norm_shift = Tensor<float>({e}, std::move(shift));
}

Metrics score(const ClassifierHead& head, const Tensor<float>& features,
              std::span<const std::size_t> labels, std::size_t classes) {
  return compute_metrics(head.predict(features), labels, classes);
}

struct LoopSettings {
  double lr;
  std::size_t epochs;
  std::size_t batch_size;
  double warmup_epochs;
  double weight_decay;
  std::uint64_t seed;
};

using FeatureFn =
    std::function<Tensor<float>(Tape<float>&, std::span<const std::size_t>, std::size_t epoch)>;

// Minibatch AdamW over `trainable` (which includes the head) with a
// per-step warmup-cosine learning rate.
std::vector<double> train_classifier(ModelParameters<float>& trainable,
                                     const ClassifierHead& head, const FeatureFn& features,
                                     std::span<const std::size_t> labels,
                                     const LoopSettings& s) {
  const auto n = labels.size();
  if (n == 0) throw InsufficientDataError("no training samples for the classifier");
  const std::size_t steps = (n + s.batch_size - 1) / s.batch_size;
  auto state = OptimizerState::for_parameters(trainable);
  AdamWConfig adam;
  adam.beta1 = 0.9;
  adam.beta2 = 0.999;
  adam.weight_decay = s.weight_decay;
  trainable.set_requires_grad(true);
  std::vector<double> epoch_loss;
  std::vector<int> targets;
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    const auto order = epoch_order(n, s.seed, epoch);
    double total = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto begin = step * s.batch_size;
      const auto idx = std::span<const std::size_t>(order).subspan(
          begin, std::min(s.batch_size, n - begin));
      targets.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) targets[i] = static_cast<int>(labels[idx[i]]);
      trainable.zero_grad();
      Tape<float> tape;
      const auto logits = head.forward(tape, features(tape, idx, epoch));
      const auto loss = softmax_cross_entropy(tape, logits, std::span<const int>(targets));
      tape.backward(loss);
      const double e = static_cast<double>(epoch) +
                       static_cast<double>(step) / static_cast<double>(steps);
      adamw_step(trainable, state, warmup_cosine(s.lr, e, s.warmup_epochs,
                                                 static_cast<double>(s.epochs)),
                 adam);
      total += static_cast<double>(loss.item());
    }
    epoch_loss.push_back(total / static_cast<double>(steps));
  }
  trainable.set_requires_grad(false);
  for (auto& e : trainable.entries()) e.tensor.clear_grad();
  return epoch_loss;
}

void check_labels(std::span<const std::size_t> labels, std::size_t classes) {
  for (const auto l : labels) {
    if (l >= classes) {
      throw IndexError("label " + std::to_string(l) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
  }
}

std::vector<std::size_t> missing_classes(std::span<const std::size_t> labels, std::size_t classes) {
  std::vector<bool> seen(classes, false);
  for (const auto l : labels) seen[l] = true;
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes; ++c) {
    if (!seen[c]) out.push_back(c);
  }
  return out;
}

}  // namespace

void ProbeConfig::validate() const {
  if (!(lr > 0.0)) throw ValidationError("probe: lr must be positive");
  if (epochs == 0) throw ValidationError("probe: epochs must be positive");
  if (batch_size == 0) throw ValidationError("probe: batch_size must be positive");
  if (!(warmup_epochs >= 0.0 && warmup_epochs < static_cast<double>(epochs))) {
    throw ValidationError("probe: warmup_epochs must lie in [0, epochs)");
  }
  if (!(weight_decay >= 0.0)) throw ValidationError("probe: weight_decay must be non-negative");
}

void FinetuneConfig::validate() const {
  if (!(lr > 0.0)) throw ValidationError("finetune: lr must be positive");
  if (epochs == 0) throw ValidationError("finetune: epochs must be positive");
  if (batch_size == 0) throw ValidationError("finetune: batch_size must be positive");
  if (!(warmup_epochs >= 0.0 && warmup_epochs < static_cast<double>(epochs))) {
    throw ValidationError("finetune: warmup_epochs must lie in [0, epochs)");
  }
  if (!(weight_decay >= 0.0)) throw ValidationError("finetune: weight_decay must be non-negative");
}

ProbeResult linear_probe(const Tensor<float>& train_features,
                         std::span<const std::size_t> train_labels,
                         const Tensor<float>& test_features,
                         std::span<const std::size_t> test_labels, std::size_t num_classes,
                         const ProbeConfig& config) {
  config.validate();
  if (num_classes == 0) throw ContractError("probe needs at least one class");
  if (train_features.rank() != 2 || test_features.rank() != 2 ||
      train_features.dim(1) != test_features.dim(1) ||
      train_features.dim(0) != train_labels.size() || test_features.dim(0) != test_labels.size()) {
    throw DimensionError("probe features " + shape_to_string(train_features.shape()) + " / " +
                         shape_to_string(test_features.shape()) + " do not match " +
                         std::to_string(train_labels.size()) + " / " +
                         std::to_string(test_labels.size()) + " labels");
  }
  check_labels(train_labels, num_classes);
  check_labels(test_labels, num_classes);

  ProbeResult result;
  result.classes_missing_from_train = missing_classes(train_labels, num_classes);
  result.head.params = init_head_params(train_features.dim(1), num_classes, config.hidden_layers,
                                        config.hidden_dim, config.seed);
  if (config.standardize) fit_standardization(result.head, train_features);
  const auto frozen = train_features.clone();
  frozen.node_ptr()->requires_grad = false;
  const FeatureFn rows = [&](Tape<float>& tape, std::span<const std::size_t> idx, std::size_t) {
    return gather_rows(tape, frozen, idx);
  };
  result.epoch_loss = train_classifier(
      result.head.params, result.head, rows, train_labels,
      {config.lr, config.epochs, config.batch_size, config.warmup_epochs, config.weight_decay,
       config.seed});
  result.train = score(result.head, train_features, train_labels, num_classes);
  result.test = score(result.head, test_features, test_labels, num_classes);
  return result;
}

ProbeResult linear_probe(const Tensor<float>& features, std::span<const std::size_t> labels,
                         std::span<const Split> split, std::size_t num_classes,
                         const ProbeConfig& config) {
  if (features.rank() != 2 || features.dim(0) != labels.size() || split.size() != labels.size()) {
    throw DimensionError("features " + shape_to_string(features.shape()) + ", " +
                         std::to_string(labels.size()) + " labels and " +
                         std::to_string(split.size()) + " split tags do not agree");
  }
  std::vector<std::size_t> train_rows, test_rows, train_labels, test_labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (split[i] == Split::kPretrain) {
      train_rows.push_back(i);
      train_labels.push_back(labels[i]);
    } else if (split[i] == Split::kTest) {
      test_rows.push_back(i);
      test_labels.push_back(labels[i]);
    }
  }
  Tape<float> tape(false);
  return linear_probe(gather_rows(tape, features, std::span<const std::size_t>(train_rows)),
                      train_labels,
                      gather_rows(tape, features, std::span<const std::size_t>(test_rows)),
                      test_labels, num_classes, config);
}

FinetuneResult finetune(std::span<const Image> train_images,
                        std::span<const std::size_t> train_labels,
                        std::span<const Image> test_images,
                        std::span<const std::size_t> test_labels, std::size_t num_classes,
                        const ModelParameters<float>& params, const ModelConfig& model,
                        const Tokenizer& tokenizer, const FinetuneConfig& config,
                        const AugmentConfig& augment) {
  config.validate();
  model.validate();
  if (config.augment) augment.validate();
  if (num_classes == 0) throw ContractError("fine-tuning needs at least one class");
  if (train_images.size() != train_labels.size() || test_images.size() != test_labels.size()) {
    throw ContractError("image and label counts differ");
  }
  if (train_images.empty()) throw InsufficientDataError("fine-tuning split is empty");
  check_labels(train_labels, num_classes);
  check_labels(test_labels, num_classes);
  check_tokenizer(model, tokenizer, train_images[0]);

  FinetuneResult result;
  for (const auto& e : params.entries()) {
    if (is_encoder_parameter(e.name)) result.encoder.add(e.name, e.tensor.clone());
  }
  result.encoder.set_requires_grad(false);
  result.head.params = init_head_params(model.embed_dim, num_classes, 0, 0, config.seed);
  if (config.standardize) {
    fit_standardization(result.head,
                        extract_features(train_images, result.encoder, model, tokenizer));
  }

  ModelParameters<float> trainable;
  if (!config.freeze_encoder) {
    for (auto& e : result.encoder.entries()) trainable.add(e.name, e.tensor);
  }
  for (auto& e : result.head.params.entries()) trainable.add(e.name, e.tensor);

  const FeatureFn features = [&](Tape<float>& tape, std::span<const std::size_t> idx,
                                 std::size_t epoch) {
    std::vector<MaskedTokens> samples;
    for (const auto i : idx) {
      if (config.augment) {
        Rng rng(augmentation_seed(config.seed, i, epoch));
        const auto view =
            random_hflip(random_resized_crop(train_images[i], augment, rng), augment.flip_prob, rng);
        samples.push_back(unmasked(tokenizer.tokenize(view)));
      } else {
        samples.push_back(unmasked(tokenizer.tokenize(train_images[i])));
      }
    }
    const auto batch = TokenBatch::from(samples);
    return pooled_feature(tape, encode(tape, result.encoder, model, batch), batch.batch);
  };
  result.epoch_loss = train_classifier(
      trainable, result.head, features, train_labels,
      {config.lr, config.epochs, config.batch_size, config.warmup_epochs, config.weight_decay,
       config.seed});
  result.encoder.set_requires_grad(false);

  result.train = score(result.head, extract_features(train_images, result.encoder, model, tokenizer),
                       train_labels, num_classes);
  result.test = score(result.head, extract_features(test_images, result.encoder, model, tokenizer),
                      test_labels, num_classes);
  return result;
}

}  // namespace cre
