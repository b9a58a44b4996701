#include "cre/trainer.hpp"

#include <cmath>
#include <json.hpp>
#include <numbers>
#include <numeric>
#include <unordered_map>

#include "cre/binary_io.hpp"
#include "cre/errors.hpp"
#include "cre/masking.hpp"
#include "cre/rng.hpp"

namespace cre {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("train config: " + msg); };
  if (!(base_lr > 0.0)) fail("base_lr must be positive");
  if (batch_size < 2) fail("batch_size must be at least 2 (InfoNCE needs a negative)");
  if (!(total_epochs > 0.0)) fail("total_epochs must be positive");
  if (!(warmup_epochs >= 0.0 && warmup_epochs < total_epochs)) {
    fail("warmup_epochs must lie in [0, total_epochs)");
  }
  if (!(lambda >= 0.0)) fail("lambda must be non-negative");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must lie in (0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
}

double effective_lr(const TrainConfig& config) {
  return config.base_lr * static_cast<double>(config.batch_size) / 256.0;
}

double warmup_cosine(double peak, double epoch, double warmup, double total) {
  if (epoch < warmup) return peak * epoch / warmup;
  const double progress = (epoch - warmup) / (total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

double lr_at(double epoch, const TrainConfig& config) {
  return warmup_cosine(effective_lr(config), epoch, config.warmup_epochs, config.total_epochs);
}

DecayPolicy decay_policy(const std::string& name) {
  if (name == "token_embed") return DecayPolicy::kAllButLastRow;
  const auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".weight") ? DecayPolicy::kAll : DecayPolicy::kNone;
}

template <typename Real>
OptimizerState OptimizerState::for_parameters(const ModelParameters<Real>& params) {
  OptimizerState s;
  for (const auto& e : params.entries()) {
    s.names.push_back(e.name);
    s.m.emplace_back(e.tensor.numel(), 0.0f);
    s.v.emplace_back(e.tensor.numel(), 0.0f);
  }
  return s;
}

template <typename Real>
void adamw_step(ModelParameters<Real>& params, OptimizerState& state, double lr,
                const AdamWConfig& config) {
  const auto entries = params.entries();
  if (state.names.size() != entries.size()) {
    throw ContractError("optimizer state tracks " + std::to_string(state.names.size()) +
                        " tensors, parameters have " + std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (state.names[i] != e.name || state.m[i].size() != e.tensor.numel()) {
      throw ContractError("optimizer state does not match parameter " + e.name);
    }
    if (!e.tensor.has_grad()) continue;
    const auto g = e.tensor.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("non-finite gradient in " + e.name + " at index " + std::to_string(j) +
                           " (step " + std::to_string(state.step + 1) + "); update skipped");
      }
    }
  }

  const auto t = ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.tensor.has_grad()) continue;
    const auto g = e.tensor.grad();
    auto p = e.tensor.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto policy = decay_policy(e.name);
    const std::size_t cols = e.tensor.rank() == 2 ? e.tensor.dim(1) : p.size();
    const std::size_t decay_end = policy == DecayPolicy::kAll            ? p.size()
                                  : policy == DecayPolicy::kAllButLastRow ? p.size() - cols
                                                                          : 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
      const double vj = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      double pj = p[j];
      if (j < decay_end) pj *= 1.0 - lr * config.weight_decay;
      pj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + config.eps);
      p[j] = static_cast<Real>(pj);
    }
  }
}

template <typename Real>
LossBreakdown pretrain_step(ModelParameters<Real>& params, OptimizerState& state,
                            const ModelConfig& model, const TokenBatch& view1,
                            const TokenBatch& view2, double lambda, double lr,
                            const AdamWConfig& config) {
  params.set_requires_grad(true);
  params.zero_grad();
  Tape<Real> tape;
  const auto losses = cre_losses(tape, params, model, view1, view2, lambda);
  tape.backward(losses.combined);
  adamw_step(params, state, lr, config);
  return losses.breakdown(lambda);
}

template OptimizerState OptimizerState::for_parameters(const ModelParameters<float>&);
template OptimizerState OptimizerState::for_parameters(const ModelParameters<double>&);
template void adamw_step(ModelParameters<float>&, OptimizerState&, double, const AdamWConfig&);
template void adamw_step(ModelParameters<double>&, OptimizerState&, double, const AdamWConfig&);
template LossBreakdown pretrain_step(ModelParameters<float>&, OptimizerState&, const ModelConfig&,
                                     const TokenBatch&, const TokenBatch&, double, double,
                                     const AdamWConfig&);
template LossBreakdown pretrain_step(ModelParameters<double>&, OptimizerState&, const ModelConfig&,
                                     const TokenBatch&, const TokenBatch&, double, double,
                                     const AdamWConfig&);

std::string to_json_line(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["reconstruction"] = r.reconstruction;
  j["contrastive"] = r.contrastive;
  j["combined"] = r.combined;
  j["lr"] = r.lr;
  return j.dump();
}

std::size_t steps_per_epoch(std::size_t image_count, const TrainConfig& config) {
  if (image_count < config.batch_size) {
    throw InsufficientDataError("pre-training needs at least batch_size=" +
                                std::to_string(config.batch_size) + " images, got " +
                                std::to_string(image_count));
  }
  return image_count / config.batch_size;
}

std::uint64_t total_steps(std::size_t image_count, const TrainConfig& config) {
  const auto spe = static_cast<double>(steps_per_epoch(image_count, config));
  return static_cast<std::uint64_t>(std::llround(config.total_epochs * spe));
}

std::uint64_t mask_seed(std::uint64_t seed, std::uint64_t step, std::size_t slot, int view) {
  return derive_seed({seed, 0x6d61736bu, step, slot, static_cast<std::uint64_t>(view)});
}

std::vector<std::size_t> epoch_order(std::size_t image_count, std::uint64_t seed,
                                     std::size_t epoch) {
  std::vector<std::size_t> order(image_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed({seed, 0x65706f63u, epoch}));
  for (std::size_t i = image_count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::pair<TokenBatch, TokenBatch> make_pretrain_batch(std::span<const Image> images,
                                                      std::span<const std::size_t> indices,
                                                      std::uint64_t step, std::size_t epoch,
                                                      const Tokenizer& tokenizer,
                                                      const TrainConfig& train,
                                                      const AugmentConfig& augment) {
  std::vector<MaskedTokens> first, second;
  for (std::size_t slot = 0; slot < indices.size(); ++slot) {
    const auto idx = indices[slot];
    Rng rng(augmentation_seed(train.seed, idx, epoch));
    const auto [view1, view2] = make_two_views(images[idx], augment, rng);
    const auto tok1 = tokenizer.tokenize(view1);
    const auto tok2 = tokenizer.tokenize(view2);
    first.push_back(apply_mask(
        tok1, sample_mask(tok1.length(), train.mask_ratio, mask_seed(train.seed, step, slot, 0))));
    second.push_back(apply_mask(
        tok2, sample_mask(tok2.length(), train.mask_ratio, mask_seed(train.seed, step, slot, 1))));
  }
  return {TokenBatch::from(first), TokenBatch::from(second)};
}

PretrainResult pretrain(std::span<const Image> images, ModelParameters<float>& params,
                        OptimizerState& state, const ModelConfig& model,
                        const Tokenizer& tokenizer, const TrainConfig& train,
                        const AugmentConfig& augment, const PretrainHooks& hooks) {
  model.validate();
  train.validate();
  augment.validate();
  if (images.empty()) throw InsufficientDataError("pre-training split is empty");
  if (tokenizer.vocabulary_size() != model.vocab_size) {
    throw ContractError("tokenizer vocabulary " + std::to_string(tokenizer.vocabulary_size()) +
                        " differs from model vocab_size " + std::to_string(model.vocab_size));
  }
  if (tokenizer.sequence_length(augment.out_h, augment.out_w) != model.seq_len) {
    throw ContractError("augmented views tokenize to " +
                        std::to_string(tokenizer.sequence_length(augment.out_h, augment.out_w)) +
                        " tokens, model seq_len is " + std::to_string(model.seq_len));
  }
  const auto spe = steps_per_epoch(images.size(), train);
  auto end = total_steps(images.size(), train);
  if (train.max_steps > 0) end = std::min<std::uint64_t>(end, train.max_steps);
  const auto adam = AdamWConfig::from(train);

  PretrainResult result;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order;
  while (state.step < end) {
    const auto step = state.step;
    const auto epoch = static_cast<std::size_t>(step / spe);
    const auto within = static_cast<std::size_t>(step % spe);
    if (epoch != cached_epoch) {
      order = epoch_order(images.size(), train.seed, epoch);
      cached_epoch = epoch;
    }
    const auto indices = std::span<const std::size_t>(order).subspan(within * train.batch_size,
                                                                     train.batch_size);
    const auto [view1, view2] =
        make_pretrain_batch(images, indices, step, epoch, tokenizer, train, augment);

    const double lr = lr_at(static_cast<double>(step) / static_cast<double>(spe), train);
    const auto b = pretrain_step(params, state, model, view1, view2, train.lambda, lr, adam);
    if (!params.all_finite()) {
      throw NumericError("parameters became non-finite at step " + std::to_string(step));
    }

    StepRecord rec{epoch, step, b.reconstruction, b.contrastive, b.combined, lr};
    result.log.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (hooks.on_checkpoint && train.checkpoint_every > 0 &&
        state.step % train.checkpoint_every == 0) {
      hooks.on_checkpoint(state.step);
    }
  }
  result.final_step = state.step;
  return result;
}

void write_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  bin::Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long: " + t.name);
    if (t.shape.size() > 0xff) throw FormatError("tensor rank too large: " + t.name);
    if (shape_numel(t.shape) != t.values.size()) {
      throw FormatError("tensor " + t.name + " payload does not match its shape");
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (const auto d : t.shape) w.u64(d);
    for (const auto v : t.values) w.f32(v);
  }
  bin::write_file(path, w.buffer());
}

std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path) {
  bin::Reader r(bin::read_file(path), path.string());
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u16());
    const auto rank = r.u8();
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<std::size_t>(r.u64()));
    const auto n = shape_numel(t.shape);
    if (n > r.remaining() / 4) {
      throw FormatError(path.string() + ": tensor " + t.name + " payload is truncated");
    }
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32();
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after last tensor");
  return out;
}

namespace {
constexpr std::string_view kMomentPrefix1 = "optim.m.";
constexpr std::string_view kMomentPrefix2 = "optim.v.";
constexpr std::string_view kStepName = "optim.step";
constexpr std::uint64_t kMaxExactStep = 1ULL << 24;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParameters<float>& params,
                     const OptimizerState& state, std::string_view config_json) {
  std::vector<NamedTensor> tensors;
  for (const auto& e : params.entries()) {
    tensors.push_back({e.name, e.tensor.shape(), {e.tensor.data().begin(), e.tensor.data().end()}});
  }
  if (!state.names.empty()) {
    if (state.names.size() != params.size()) {
      throw ContractError("optimizer state does not match parameters");
    }
    for (std::size_t i = 0; i < state.names.size(); ++i) {
      const auto& shape = params.entries()[i].tensor.shape();
      tensors.push_back({std::string(kMomentPrefix1) + state.names[i], shape, state.m[i]});
      tensors.push_back({std::string(kMomentPrefix2) + state.names[i], shape, state.v[i]});
    }
  }
  if (state.step >= kMaxExactStep) throw FormatError("step counter too large to store exactly");
  tensors.push_back({std::string(kStepName), {1}, {static_cast<float>(state.step)}});
  write_tensor_file(path, tensors);
  if (!config_json.empty()) {
    const std::string text(config_json);
    bin::write_file(path.string() + ".json", std::vector<char>(text.begin(), text.end()));
  }
}

void load_checkpoint(const std::filesystem::path& path, ModelParameters<float>& params,
                     OptimizerState* state) {
  const auto tensors = read_tensor_file(path);
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name.emplace(t.name, &t);

  auto find = [&](const std::string& name, const Shape& shape) -> const NamedTensor& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(path.string() + ": missing tensor " + name);
    if (it->second->shape != shape) {
      throw FormatError(path.string() + ": tensor " + name + " has shape " +
                        shape_to_string(it->second->shape) + ", expected " + shape_to_string(shape));
    }
    return *it->second;
  };

  // Validate everything before touching the destination.
  std::vector<const NamedTensor*> weights, m, v;
  for (const auto& e : params.entries()) {
    weights.push_back(&find(e.name, e.tensor.shape()));
    if (state) {
      m.push_back(&find(std::string(kMomentPrefix1) + e.name, e.tensor.shape()));
      v.push_back(&find(std::string(kMomentPrefix2) + e.name, e.tensor.shape()));
    }
  }
  const auto* step = &find(std::string(kStepName), {1});
  std::size_t expected = params.size() + 1 + (state ? 2 * params.size() : 0);
  if (!state) {
    for (const auto& t : tensors) {
      if (t.name.rfind("optim.", 0) == 0 && t.name != kStepName) ++expected;
    }
  }
  if (tensors.size() != expected) {
    throw FormatError(path.string() + ": holds " + std::to_string(tensors.size()) +
                      " tensors, expected " + std::to_string(expected));
  }

  auto entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto dst = entries[i].tensor.mutable_data();
    std::copy(weights[i]->values.begin(), weights[i]->values.end(), dst.begin());
  }
  if (state) {
    OptimizerState s;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      s.names.push_back(entries[i].name);
      s.m.push_back(m[i]->values);
      s.v.push_back(v[i]->values);
    }
    s.step = static_cast<std::uint64_t>(step->values[0]);
    *state = std::move(s);
  }
}

}  // namespace cre
