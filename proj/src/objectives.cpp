#include "cre/objectives.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cre/errors.hpp"
#include "cre/ops.hpp"

namespace cre {

template <typename Real>
Tensor<Real> reconstruction_loss(Tape<Real>& tape, const Tensor<Real>& logits,
                                 std::span<const int> targets,
                                 std::span<const std::size_t> masked_rows) {
  if (masked_rows.empty()) throw ContractError("reconstruction loss over an empty mask");
  if (targets.size() != masked_rows.size()) {
    throw ContractError(std::to_string(targets.size()) + " targets for " +
                        std::to_string(masked_rows.size()) + " masked rows");
  }
  const auto picked = gather_rows(tape, logits, masked_rows);
  return softmax_cross_entropy(tape, picked, targets);
}

template <typename Real>
Tensor<Real> reconstruction_loss(Tape<Real>& tape, const Tensor<Real>& logits,
                                 const TokenSequence& tokens, const MaskVector& mask) {
  if (logits.rank() != 2 || logits.dim(0) != tokens.length() || mask.length() != tokens.length()) {
    throw ContractError("logits " + shape_to_string(logits.shape()) + ", " +
                        std::to_string(tokens.length()) + " tokens and mask of length " +
                        std::to_string(mask.length()) + " do not agree");
  }
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t i = 0; i < mask.length(); ++i) {
    if (mask.flags[i]) {
      rows.push_back(i);
      targets.push_back(tokens.ids[i]);
    }
  }
  return reconstruction_loss(tape, logits, std::span<const int>(targets),
                             std::span<const std::size_t>(rows));
}

template <typename Real>
Tensor<Real> reconstruction_loss(Tape<Real>& tape, const Tensor<Real>& logits,
                                 const TokenBatch& batch) {
  if (logits.rank() != 2 || logits.dim(0) != batch.batch * batch.length) {
    throw ContractError("logits " + shape_to_string(logits.shape()) + " do not cover " +
                        std::to_string(batch.batch) + " sequences of length " +
                        std::to_string(batch.length));
  }
  std::vector<std::size_t> rows(batch.masked_positions.size());
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t j = 0; j < batch.masked; ++j) {
      rows[b * batch.masked + j] = b * batch.length + batch.masked_positions[b * batch.masked + j];
    }
  }
  return reconstruction_loss(tape, logits, std::span<const int>(batch.masked_targets),
                             std::span<const std::size_t>(rows));
}

template <typename Real>
Tensor<Real> infonce_loss(Tape<Real>& tape, const Tensor<Real>& z, double temperature) {
  if (!(temperature > 0.0)) {
    throw ContractError("InfoNCE temperature must be positive, got " + std::to_string(temperature));
  }
  if (z.rank() != 2 || z.dim(0) < 2 || z.dim(0) % 2 != 0) {
    throw ContractError("InfoNCE expects 2B feature rows, got " + shape_to_string(z.shape()));
  }
  const auto n = z.dim(0), d = z.dim(1);
  const auto v = z.data();
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += static_cast<double>(v[r * d + c]) * v[r * d + c];
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-4) {
      throw ContractError("InfoNCE row " + std::to_string(r) + " is not unit-norm");
    }
  }
  auto sim = scale(tape, matmul(tape, z, transpose(tape, z)), static_cast<Real>(1.0 / temperature));
  sim = fill_diagonal(tape, sim, -std::numeric_limits<Real>::infinity());
  std::vector<int> partner(n);
  for (std::size_t a = 0; a < n; ++a) partner[a] = static_cast<int>(a ^ 1u);
  return softmax_cross_entropy(tape, sim, std::span<const int>(partner));
}

template <typename Real>
Tensor<Real> combine_losses(Tape<Real>& tape, const Tensor<Real>& reconstruction,
                            const Tensor<Real>& contrastive, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("lambda must be non-negative");
  return add(tape, reconstruction, scale(tape, contrastive, static_cast<Real>(lambda)));
}

LossBreakdown combined_loss(double reconstruction, double contrastive, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("lambda must be non-negative");
  return {reconstruction, contrastive, reconstruction + lambda * contrastive, lambda};
}

template <typename Real>
CreLosses<Real> cre_losses(Tape<Real>& tape, const ModelParameters<Real>& params,
                           const ModelConfig& config, const TokenBatch& view1,
                           const TokenBatch& view2, double lambda) {
  if (view1.batch != view2.batch) throw ContractError("views have different batch sizes");
  const auto B = view1.batch;

  const auto latent1 = encode(tape, params, config, view1);
  const auto latent2 = encode(tape, params, config, view2);
  const auto rec1 = reconstruction_loss(tape, fill_and_decode(tape, params, config, latent1, view1), view1);
  const auto rec2 = reconstruction_loss(tape, fill_and_decode(tape, params, config, latent2, view2), view2);
  const auto reconstruction = scale(tape, add(tape, rec1, rec2), Real(0.5));

  const std::vector<Tensor<Real>> z{contrastive_feature(tape, params, latent1, B),
                                    contrastive_feature(tape, params, latent2, B)};
  std::vector<std::size_t> interleave(2 * B);
  for (std::size_t i = 0; i < B; ++i) {
    interleave[2 * i] = i;
    interleave[2 * i + 1] = B + i;
  }
  const auto paired = gather_rows(tape, concat_rows(tape, std::span<const Tensor<Real>>(z)),
                                  std::span<const std::size_t>(interleave));
  const auto contrastive = infonce_loss(tape, paired, config.temperature);
  const auto combined = combine_losses(tape, reconstruction, contrastive, lambda);
  return {reconstruction, contrastive, combined};
}

#define CRE_INSTANTIATE_OBJECTIVES(Real)                                                         \
  template Tensor<Real> reconstruction_loss(Tape<Real>&, const Tensor<Real>&,                    \
                                            std::span<const int>, std::span<const std::size_t>); \
  template Tensor<Real> reconstruction_loss(Tape<Real>&, const Tensor<Real>&,                    \
                                            const TokenSequence&, const MaskVector&);            \
  template Tensor<Real> reconstruction_loss(Tape<Real>&, const Tensor<Real>&, const TokenBatch&); \
  template Tensor<Real> infonce_loss(Tape<Real>&, const Tensor<Real>&, double);                  \
  template Tensor<Real> combine_losses(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&,    \
                                       double);                                                  \
  template CreLosses<Real> cre_losses(Tape<Real>&, const ModelParameters<Real>&,                 \
                                      const ModelConfig&, const TokenBatch&, const TokenBatch&,  \
                                      double);

CRE_INSTANTIATE_OBJECTIVES(float)
CRE_INSTANTIATE_OBJECTIVES(double)

#undef CRE_INSTANTIATE_OBJECTIVES

}  // namespace cre
