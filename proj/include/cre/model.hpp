#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cre/masking.hpp"
#include "cre/tensor.hpp"

namespace cre {

/// Shape of the encoder-decoder. Desk-scale defaults; ViT-B scale is
/// embed_dim 768, 12 encoder blocks, 12 heads.
struct ModelConfig {
  std::size_t vocab_size = 64;  // K; token id K is the mask token
  std::size_t seq_len = 64;     // L
  std::size_t embed_dim = 64;
  std::size_t encoder_depth = 4;
  std::size_t decoder_depth = 2;
  std::size_t num_heads = 4;
  double mlp_ratio = 4.0;
  std::size_t contrastive_dim = 32;
  double temperature = 0.2;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const;
  std::size_t mask_token_id() const { return vocab_size; }
  /// Throws ValidationError describing the first violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Named, ordered collection of learnable tensors.
template <typename Real>
class ModelParameters {
 public:
  struct Entry {
    std::string name;
    Tensor<Real> tensor;
  };

  void add(std::string name, Tensor<Real> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<Real>& at(const std::string& name);
  const Tensor<Real>& at(const std::string& name) const;

  std::span<Entry> entries() { return entries_; }
  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// Total number of scalars.
  std::size_t scalar_count() const;

  void set_requires_grad(bool value);
  void zero_grad();
  bool all_finite() const;

  /// Deep copy, optionally converting precision.
  template <typename Other>
  ModelParameters<Other> cast() const {
    ModelParameters<Other> out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.template cast<Other>());
    return out;
  }
  ModelParameters clone() const { return cast<Real>(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Truncated-normal (sigma 0.02, cut at 2 sigma) weights and embeddings,
/// zero biases, unit layer-norm gains. Deterministic per seed.
template <typename Real>
ModelParameters<Real> init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Masked views of a batch of images. All samples must hide the same
/// number of positions so that the encoder input is rectangular.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;          // L
  std::size_t visible = 0;         // V per sample
  std::size_t masked = 0;          // L - V per sample
  std::vector<int> visible_ids;    // batch * visible
  std::vector<std::size_t> visible_positions;
  std::vector<std::size_t> masked_positions;  // batch * masked
  std::vector<int> masked_targets;

  static TokenBatch from(std::span<const MaskedTokens> samples);
};

/// Encoder over visible tokens: embedding + positional embedding at the
/// original positions, pre-norm blocks attending within each sample, final
/// layer norm. Returns [batch*visible x embed_dim].
template <typename Real>
Tensor<Real> encode(Tape<Real>& tape, const ModelParameters<Real>& params,
                    const ModelConfig& config, const TokenBatch& batch);

/// Rebuilds each length-L sequence (encoder output at visible positions,
/// mask token + positional embedding at masked positions), runs the
/// decoder and projects to vocabulary logits. Returns [batch*L x K].
template <typename Real>
Tensor<Real> fill_and_decode(Tape<Real>& tape, const ModelParameters<Real>& params,
                             const ModelConfig& config, const Tensor<Real>& latents,
                             const TokenBatch& batch);

/// Global average of the encoder output per sample: [batch x embed_dim].
template <typename Real>
Tensor<Real> pooled_feature(Tape<Real>& tape, const Tensor<Real>& latents, std::size_t batch);

/// Pooled feature through the two-layer projection head, l2-normalized:
/// [batch x contrastive_dim].
template <typename Real>
Tensor<Real> contrastive_feature(Tape<Real>& tape, const ModelParameters<Real>& params,
                                 const Tensor<Real>& latents, std::size_t batch);

/// Names of the tensors that the encoder path reads.
bool is_encoder_parameter(const std::string& name);

extern template class ModelParameters<float>;
extern template class ModelParameters<double>;

}  // namespace cre
