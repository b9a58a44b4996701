#include "cre/model.hpp"

#include <string>

#include "cre/errors.hpp"
#include "cre/ops.hpp"
#include "cre/rng.hpp"

namespace cre {

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(static_cast<double>(embed_dim) * mlp_ratio));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("model config: " + msg); };
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (seq_len < 2) fail("seq_len must be at least 2");
  if (embed_dim < 1) fail("embed_dim must be positive");
  if (num_heads < 1) fail("num_heads must be positive");
  if (embed_dim % num_heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
         std::to_string(num_heads));
  }
  if (encoder_depth < 1) fail("encoder_depth must be at least 1");
  if (decoder_depth < 1) fail("decoder_depth must be at least 1");
  if (!(mlp_ratio > 0.0) || mlp_hidden() < 1) fail("mlp_ratio must give a positive hidden width");
  if (contrastive_dim < 1) fail("contrastive_dim must be positive");
  if (!(temperature > 0.0)) fail("temperature must be positive");
}

template <typename Real>
void ModelParameters<Real>::add(std::string name, Tensor<Real> tensor) {
  if (contains(name)) throw ContractError("duplicate parameter name " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{std::move(name), std::move(tensor)});
}

template <typename Real>
Tensor<Real>& ModelParameters<Real>::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("no parameter named " + name);
  return entries_[it->second].tensor;
}

template <typename Real>
const Tensor<Real>& ModelParameters<Real>::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("no parameter named " + name);
  return entries_[it->second].tensor;
}

template <typename Real>
std::size_t ModelParameters<Real>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <typename Real>
void ModelParameters<Real>::set_requires_grad(bool value) {
  for (auto& e : entries_) e.tensor.set_requires_grad(value);
}

template <typename Real>
void ModelParameters<Real>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename Real>
bool ModelParameters<Real>::all_finite() const {
  for (const auto& e : entries_) {
    for (const auto v : e.tensor.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

namespace {

template <typename Real>
class Initializer {
 public:
  Initializer(ModelParameters<Real>& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  void normal(const std::string& name, Shape shape) {
    Buffer<Real> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<Real>(rng_.truncated_normal(0.02));
    params_.add(name, Tensor<Real>(std::move(shape), std::move(v), true));
  }
  void constant(const std::string& name, std::size_t n, Real value) {
    params_.add(name, Tensor<Real>::full({n}, value, true));
  }
  void linear(const std::string& prefix, std::size_t in, std::size_t out) {
    normal(prefix + ".weight", {in, out});
    constant(prefix + ".bias", out, Real(0));
  }
  void norm(const std::string& prefix, std::size_t d) {
    constant(prefix + ".gain", d, Real(1));
    constant(prefix + ".bias", d, Real(0));
  }
  void block(const std::string& prefix, std::size_t d, std::size_t hidden) {
    norm(prefix + ".norm1", d);
    // Query and value biases only; a key bias cannot change attention.
    normal(prefix + ".attn.qkv.weight", {d, 3 * d});
    constant(prefix + ".attn.q_bias", d, Real(0));
    constant(prefix + ".attn.v_bias", d, Real(0));
    linear(prefix + ".attn.proj", d, d);
    norm(prefix + ".norm2", d);
    linear(prefix + ".mlp.fc1", d, hidden);
    linear(prefix + ".mlp.fc2", hidden, d);
  }

 private:
  ModelParameters<Real>& params_;
  Rng rng_;
};

template <typename Real>
Tensor<Real> transformer_block(Tape<Real>& tape, const ModelParameters<Real>& p,
                               const std::string& prefix, const Tensor<Real>& x,
                               std::size_t batch, std::size_t heads) {
  auto h = layer_norm(tape, x, p.at(prefix + ".norm1.gain"), p.at(prefix + ".norm1.bias"));
  const auto d = x.dim(1);
  const std::vector<Tensor<Real>> bias_parts{reshape(tape, p.at(prefix + ".attn.q_bias"), {1, d}),
                                             Tensor<Real>::zeros({1, d}),
                                             reshape(tape, p.at(prefix + ".attn.v_bias"), {1, d})};
  const auto qkv_bias =
      reshape(tape, concat_cols(tape, std::span<const Tensor<Real>>(bias_parts)), {3 * d});
  h = linear(tape, h, p.at(prefix + ".attn.qkv.weight"), qkv_bias);
  h = multi_head_attention(tape, h, batch, heads);
  h = linear(tape, h, p.at(prefix + ".attn.proj.weight"), p.at(prefix + ".attn.proj.bias"));
  const auto mid = add(tape, x, h);
  h = layer_norm(tape, mid, p.at(prefix + ".norm2.gain"), p.at(prefix + ".norm2.bias"));
  h = gelu(tape, linear(tape, h, p.at(prefix + ".mlp.fc1.weight"), p.at(prefix + ".mlp.fc1.bias")));
  h = linear(tape, h, p.at(prefix + ".mlp.fc2.weight"), p.at(prefix + ".mlp.fc2.bias"));
  return add(tape, mid, h);
}

}  // namespace

template <typename Real>
ModelParameters<Real> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParameters<Real> params;
  Initializer<Real> init(params, seed);
  const auto d = config.embed_dim, hidden = config.mlp_hidden();
  init.normal("token_embed", {config.vocab_size + 1, d});
  init.normal("pos_embed", {config.seq_len, d});
  for (std::size_t i = 0; i < config.encoder_depth; ++i) {
    init.block("encoder.blocks." + std::to_string(i), d, hidden);
  }
  init.norm("encoder.norm", d);
  for (std::size_t i = 0; i < config.decoder_depth; ++i) {
    init.block("decoder.blocks." + std::to_string(i), d, hidden);
  }
  init.norm("decoder.norm", d);
  init.linear("decoder.head", d, config.vocab_size);
  init.linear("contrastive.fc1", d, d);
  init.linear("contrastive.fc2", d, config.contrastive_dim);
  return params;
}

TokenBatch TokenBatch::from(std::span<const MaskedTokens> samples) {
  if (samples.empty()) throw ContractError("empty token batch");
  TokenBatch b;
  b.batch = samples.size();
  b.length = samples[0].length;
  b.visible = samples[0].visible_ids.size();
  b.masked = samples[0].masked_positions.size();
  for (const auto& s : samples) {
    if (s.length != b.length || s.visible_ids.size() != b.visible ||
        s.masked_positions.size() != b.masked) {
      throw ContractError("token batch samples differ in length or mask count");
    }
    b.visible_ids.insert(b.visible_ids.end(), s.visible_ids.begin(), s.visible_ids.end());
    b.visible_positions.insert(b.visible_positions.end(), s.visible_positions.begin(),
                               s.visible_positions.end());
    b.masked_positions.insert(b.masked_positions.end(), s.masked_positions.begin(),
                              s.masked_positions.end());
    b.masked_targets.insert(b.masked_targets.end(), s.masked_targets.begin(),
                            s.masked_targets.end());
  }
  return b;
}

template <typename Real>
Tensor<Real> encode(Tape<Real>& tape, const ModelParameters<Real>& params,
                    const ModelConfig& config, const TokenBatch& batch) {
  if (batch.visible == 0) throw ContractError("encoder input has no visible tokens");
  if (batch.visible_ids.size() != batch.batch * batch.visible ||
      batch.visible_positions.size() != batch.visible_ids.size()) {
    throw ContractError("token batch visible arrays are inconsistent");
  }
  for (std::size_t i = 0; i < batch.visible_ids.size(); ++i) {
    const int id = batch.visible_ids[i];
    if (id == static_cast<int>(config.mask_token_id())) {
      throw ContractError("mask token id reached the encoder");
    }
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
    }
    if (batch.visible_positions[i] >= config.seq_len) {
      throw IndexError("position " + std::to_string(batch.visible_positions[i]) +
                       " outside sequence length " + std::to_string(config.seq_len));
    }
  }
  auto x = add(tape, embedding(tape, params.at("token_embed"), std::span<const int>(batch.visible_ids)),
               gather_rows(tape, params.at("pos_embed"),
                           std::span<const std::size_t>(batch.visible_positions)));
  for (std::size_t i = 0; i < config.encoder_depth; ++i) {
    x = transformer_block(tape, params, "encoder.blocks." + std::to_string(i), x, batch.batch,
                          config.num_heads);
  }
  return layer_norm(tape, x, params.at("encoder.norm.gain"), params.at("encoder.norm.bias"));
}

template <typename Real>
Tensor<Real> fill_and_decode(Tape<Real>& tape, const ModelParameters<Real>& params,
                             const ModelConfig& config, const Tensor<Real>& latents,
                             const TokenBatch& batch) {
  const auto B = batch.batch, V = batch.visible, M = batch.masked, L = config.seq_len;
  if (V + M != L || batch.length != L) {
    throw ContractError("visible (" + std::to_string(V) + ") + masked (" + std::to_string(M) +
                        ") positions do not cover sequence length " + std::to_string(L));
  }
  if (latents.rank() != 2 || latents.dim(0) != B * V || latents.dim(1) != config.embed_dim) {
    throw DimensionError("decoder expects latents [" + std::to_string(B * V) + "x" +
                         std::to_string(config.embed_dim) + "], got " +
                         shape_to_string(latents.shape()));
  }
  if (batch.masked_positions.size() != B * M) {
    throw ContractError("token batch masked arrays are inconsistent");
  }

  // Row of the (latents ++ mask rows) stack that lands at each position.
  std::vector<std::size_t> index(B * L);
  std::vector<bool> seen(L);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(seen.begin(), seen.end(), false);
    auto place = [&](std::size_t pos, std::size_t row) {
      if (pos >= L || seen[pos]) {
        throw ContractError("position " + std::to_string(pos) + " collides or is out of range");
      }
      seen[pos] = true;
      index[b * L + pos] = row;
    };
    for (std::size_t j = 0; j < V; ++j) place(batch.visible_positions[b * V + j], b * V + j);
    for (std::size_t j = 0; j < M; ++j) place(batch.masked_positions[b * M + j], B * V + b * M + j);
  }

  Tensor<Real> stacked = latents;
  if (M > 0) {
    const std::vector<int> mask_ids(B * M, static_cast<int>(config.mask_token_id()));
    const auto mask_rows =
        add(tape, embedding(tape, params.at("token_embed"), std::span<const int>(mask_ids)),
            gather_rows(tape, params.at("pos_embed"),
                        std::span<const std::size_t>(batch.masked_positions)));
    const std::vector<Tensor<Real>> parts{latents, mask_rows};
    stacked = concat_rows(tape, std::span<const Tensor<Real>>(parts));
  }
  auto x = gather_rows(tape, stacked, std::span<const std::size_t>(index));
  for (std::size_t i = 0; i < config.decoder_depth; ++i) {
    x = transformer_block(tape, params, "decoder.blocks." + std::to_string(i), x, B,
                          config.num_heads);
  }
  x = layer_norm(tape, x, params.at("decoder.norm.gain"), params.at("decoder.norm.bias"));
  return linear(tape, x, params.at("decoder.head.weight"), params.at("decoder.head.bias"));
}

template <typename Real>
Tensor<Real> pooled_feature(Tape<Real>& tape, const Tensor<Real>& latents, std::size_t batch) {
  if (latents.rank() != 2 || latents.dim(0) == 0) {
    throw ContractError("feature pooling needs at least one visible token");
  }
  return mean_rows_grouped(tape, latents, batch);
}

template <typename Real>
Tensor<Real> contrastive_feature(Tape<Real>& tape, const ModelParameters<Real>& params,
                                 const Tensor<Real>& latents, std::size_t batch) {
  auto h = pooled_feature(tape, latents, batch);
  h = gelu(tape, linear(tape, h, params.at("contrastive.fc1.weight"), params.at("contrastive.fc1.bias")));
  h = linear(tape, h, params.at("contrastive.fc2.weight"), params.at("contrastive.fc2.bias"));
  return l2_normalize(tape, h);
}

bool is_encoder_parameter(const std::string& name) {
  return name == "token_embed" || name == "pos_embed" || name.rfind("encoder.", 0) == 0;
}

template class ModelParameters<float>;
template class ModelParameters<double>;

#define CRE_INSTANTIATE_MODEL(Real)                                                            \
  template ModelParameters<Real> init_parameters<Real>(const ModelConfig&, std::uint64_t);     \
  template Tensor<Real> encode(Tape<Real>&, const ModelParameters<Real>&, const ModelConfig&,  \
                               const TokenBatch&);                                             \
  template Tensor<Real> fill_and_decode(Tape<Real>&, const ModelParameters<Real>&,             \
                                        const ModelConfig&, const Tensor<Real>&,               \
                                        const TokenBatch&);                                    \
  template Tensor<Real> pooled_feature(Tape<Real>&, const Tensor<Real>&, std::size_t);         \
  template Tensor<Real> contrastive_feature(Tape<Real>&, const ModelParameters<Real>&,         \
                                            const Tensor<Real>&, std::size_t);

CRE_INSTANTIATE_MODEL(float)
CRE_INSTANTIATE_MODEL(double)

#undef CRE_INSTANTIATE_MODEL

}  // namespace cre
