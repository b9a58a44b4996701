#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cre/augment.hpp"
#include "cre/data.hpp"
#include "cre/image.hpp"
#include "cre/model.hpp"
#include "cre/tokenizer.hpp"

namespace cre {

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;    // true samples of this class
  std::size_t predicted = 0;  // samples predicted as this class
  bool empty = false;         // no true and no predicted samples; F1 reported as 0
};

struct Metrics {
  double top1 = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t samples = 0;

  /// {top1, macro_f1, per_class: [...], confusion: [[...]]}
  std::string to_json(std::span<const std::string> class_names = {}) const;
  std::string to_table(std::span<const std::string> class_names = {}) const;
};

/// Precision/recall/F1 per class with 0/0 taken as 0, macro-F1 as the
/// unweighted mean over all C classes.
Metrics compute_metrics(std::span<const std::size_t> predictions,
                        std::span<const std::size_t> labels, std::size_t num_classes);

/// Tokenize, encode the full unmasked sequence, average over positions.
/// Returns [N x embed_dim]. Does not record gradients or touch `params`.
Tensor<float> extract_features(std::span<const Image> images, const ModelParameters<float>& params,
                               const ModelConfig& config, const Tokenizer& tokenizer,
                               std::size_t batch_size = 64);

/// Classifier on pooled features: optional fixed standardization (per
/// feature, from training statistics), optional hidden GELU layers, then an
/// affine layer to class logits.
struct ClassifierHead {
  Tensor<float> norm_scale;  // [E x E] diagonal 1/std, constant; undefined when off
  Tensor<float> norm_shift;  // [E] -mean/std, constant
  ModelParameters<float> params;

  Tensor<float> forward(Tape<float>& tape, const Tensor<float>& features) const;
  std::vector<std::size_t> predict(const Tensor<float>& features) const;
};

struct ProbeConfig {
  double lr = 1e-3;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double warmup_epochs = 0.0;
  double weight_decay = 0.0;
  std::size_t hidden_layers = 0;  // 0 is the linear probe
  std::size_t hidden_dim = 0;     // 0 means the feature width
  bool standardize = true;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ProbeConfig&) const = default;
};

struct ProbeResult {
  Metrics test;
  Metrics train;
  ClassifierHead head;
  std::vector<std::size_t> classes_missing_from_train;
  std::vector<double> epoch_loss;  // mean training loss per epoch
};

/// Trains a classifier on frozen features of the training rows and scores
/// it on the test rows.
ProbeResult linear_probe(const Tensor<float>& train_features,
                         std::span<const std::size_t> train_labels,
                         const Tensor<float>& test_features,
                         std::span<const std::size_t> test_labels, std::size_t num_classes,
                         const ProbeConfig& config);

/// Same, with rows assigned by `split` (unassigned rows are ignored).
ProbeResult linear_probe(const Tensor<float>& features, std::span<const std::size_t> labels,
                         std::span<const Split> split, std::size_t num_classes,
                         const ProbeConfig& config);

struct FinetuneConfig {
  double lr = 1e-3;
  std::size_t epochs = 15;
  std::size_t batch_size = 16;
  double warmup_epochs = 1.0;
  double weight_decay = 0.05;
  bool freeze_encoder = false;  // train the head only
  bool augment = true;
  bool standardize = true;  // statistics of the initial training features
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const FinetuneConfig&) const = default;
};

struct FinetuneResult {
  Metrics test;
  Metrics train;
  ModelParameters<float> encoder;  // updated copy; unchanged when frozen
  ClassifierHead head;
  std::vector<double> epoch_loss;
};

/// Attaches a linear head to the pooled encoder output and trains the
/// encoder and head with AdamW and the warmup-cosine schedule. With
/// freeze_encoder and no augmentation this is the linear probe.
FinetuneResult finetune(std::span<const Image> train_images,
                        std::span<const std::size_t> train_labels,
                        std::span<const Image> test_images,
                        std::span<const std::size_t> test_labels, std::size_t num_classes,
                        const ModelParameters<float>& params, const ModelConfig& model,
                        const Tokenizer& tokenizer, const FinetuneConfig& config,
                        const AugmentConfig& augment = {});

}  // namespace cre
