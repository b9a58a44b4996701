#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cre/augment.hpp"
#include "cre/image.hpp"
#include "cre/model.hpp"
#include "cre/objectives.hpp"
#include "cre/tokenizer.hpp"

namespace cre {

struct TrainConfig {
  double base_lr = 1.5e-4;  // scaled by batch_size / 256
  std::size_t batch_size = 64;
  double total_epochs = 100;
  double warmup_epochs = 5;
  double lambda = kDefaultLambda;
  double mask_ratio = kDefaultMaskRatio;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 disables periodic checkpoints
  std::size_t max_steps = 0;         // absolute step at which to stop early; 0 = full schedule

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

double effective_lr(const TrainConfig& config);

/// Linear warmup from 0 to `peak` over `warmup` epochs, then half-cosine
/// decay to 0 at `total`.
double warmup_cosine(double peak, double epoch, double warmup, double total);

/// Linear warmup from 0 to effective_lr over warmup_epochs, then half-cosine
/// decay to 0 at total_epochs. `epoch` may be fractional.
double lr_at(double epoch, const TrainConfig& config);

enum class DecayPolicy {
  kNone,
  kAll,
  kAllButLastRow,  // token table: the trailing mask-token row is not decayed
};

/// Weight decay applies to weight matrices and token embeddings only; norms,
/// biases, positional embeddings and the mask token are exempt.
DecayPolicy decay_policy(const std::string& name);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;

  static AdamWConfig from(const TrainConfig& c) {
    return {c.beta1, c.beta2, c.eps, c.weight_decay};
  }
};

/// First and second moments per parameter tensor, in parameter order.
struct OptimizerState {
  std::vector<std::string> names;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t step = 0;

  template <typename Real>
  static OptimizerState for_parameters(const ModelParameters<Real>& params);
  bool operator==(const OptimizerState&) const = default;
};

/// One decoupled-weight-decay Adam update with bias correction using the
/// gradients stored on the parameters. Tensors without a gradient buffer
/// are left alone. A non-finite gradient aborts the step before anything is
/// modified (NumericError naming the tensor).
template <typename Real>
void adamw_step(ModelParameters<Real>& params, OptimizerState& state, double lr,
                const AdamWConfig& config);

/// One pre-training update on prepared views: combined loss, backward,
/// AdamW. Float in training; the double instantiation serves exactness checks.
template <typename Real>
LossBreakdown pretrain_step(ModelParameters<Real>& params, OptimizerState& state,
                            const ModelConfig& model, const TokenBatch& view1,
                            const TokenBatch& view2, double lambda, double lr,
                            const AdamWConfig& config);

struct StepRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double reconstruction = 0.0;
  double contrastive = 0.0;
  double combined = 0.0;
  double lr = 0.0;
};

std::string to_json_line(const StepRecord& record);

struct PretrainHooks {
  std::function<void(const StepRecord&)> on_step;
  /// Called after every `checkpoint_every` steps with the completed step count.
  std::function<void(std::uint64_t)> on_checkpoint;
};

struct PretrainResult {
  std::vector<StepRecord> log;
  std::uint64_t final_step = 0;
};

std::size_t steps_per_epoch(std::size_t image_count, const TrainConfig& config);
std::uint64_t total_steps(std::size_t image_count, const TrainConfig& config);

/// Seed of the mask drawn for sample `slot` of `step`, view 0 or 1.
std::uint64_t mask_seed(std::uint64_t seed, std::uint64_t step, std::size_t slot, int view);

/// Builds both masked views for the images at `indices` of the batch at
/// `step` (augment, tokenize, mask). Pure function of its arguments.
std::pair<TokenBatch, TokenBatch> make_pretrain_batch(std::span<const Image> images,
                                                      std::span<const std::size_t> indices,
                                                      std::uint64_t step, std::size_t epoch,
                                                      const Tokenizer& tokenizer,
                                                      const TrainConfig& train,
                                                      const AugmentConfig& augment);

/// Image order for one epoch.
std::vector<std::size_t> epoch_order(std::size_t image_count, std::uint64_t seed,
                                     std::size_t epoch);

/// Continues training from `state.step` until the schedule ends (or
/// train.max_steps). Each step: two views per image, tokenize, mask both,
/// combined loss, backward, AdamW.
PretrainResult pretrain(std::span<const Image> images, ModelParameters<float>& params,
                        OptimizerState& state, const ModelConfig& model,
                        const Tokenizer& tokenizer, const TrainConfig& train,
                        const AugmentConfig& augment, const PretrainHooks& hooks = {});

// Checkpoints: magic "CRE1", u16 version, u32 tensor count, then per tensor
// u16 name length, UTF-8 name, u8 rank, u64 dims, f32 little-endian payload.

inline constexpr char kCheckpointMagic[4] = {'C', 'R', 'E', '1'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

void write_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path);

/// Parameters, optimizer moments and step. A non-empty `config_json` is
/// written next to the checkpoint as `<path>.json`.
void save_checkpoint(const std::filesystem::path& path, const ModelParameters<float>& params,
                     const OptimizerState& state, std::string_view config_json = {});

/// Loads into existing parameters whose names and shapes must match the
/// file exactly. On any mismatch nothing is modified and FormatError names
/// the offending tensor. `state` may be null to load weights only.
void load_checkpoint(const std::filesystem::path& path, ModelParameters<float>& params,
                     OptimizerState* state);

}  // namespace cre
