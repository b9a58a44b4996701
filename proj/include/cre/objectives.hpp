#pragma once

#include <cstddef>
#include <span>

#include "cre/model.hpp"
#include "cre/tensor.hpp"

namespace cre {

inline constexpr double kDefaultLambda = 0.2;

struct LossBreakdown {
  double reconstruction = 0.0;
  double contrastive = 0.0;
  double combined = 0.0;
  double lambda = kDefaultLambda;
};

/// Mean cross-entropy over the rows listed in `masked_rows`; every other
/// row of `logits` is ignored. `targets[i]` is the token at masked_rows[i].
template <typename Real>
Tensor<Real> reconstruction_loss(Tape<Real>& tape, const Tensor<Real>& logits,
                                 std::span<const int> targets,
                                 std::span<const std::size_t> masked_rows);

/// Single view: logits [L x K], the original tokens and the mask.
template <typename Real>
Tensor<Real> reconstruction_loss(Tape<Real>& tape, const Tensor<Real>& logits,
                                 const TokenSequence& tokens, const MaskVector& mask);

/// Batched view: logits [batch*L x K] as produced by fill_and_decode.
template <typename Real>
Tensor<Real> reconstruction_loss(Tape<Real>& tape, const Tensor<Real>& logits,
                                 const TokenBatch& batch);

/// NT-Xent over 2B unit rows where rows 2i and 2i+1 (0-based) are the two
/// views of image i. The anchor itself is excluded from each denominator;
/// the result is the mean over all 2B anchors.
template <typename Real>
Tensor<Real> infonce_loss(Tape<Real>& tape, const Tensor<Real>& z, double temperature);

/// reconstruction + lambda * contrastive, on the tape.
template <typename Real>
Tensor<Real> combine_losses(Tape<Real>& tape, const Tensor<Real>& reconstruction,
                            const Tensor<Real>& contrastive, double lambda);

LossBreakdown combined_loss(double reconstruction, double contrastive, double lambda);

/// All three losses of one pre-training step.
template <typename Real>
struct CreLosses {
  Tensor<Real> reconstruction;
  Tensor<Real> contrastive;
  Tensor<Real> combined;

  LossBreakdown breakdown(double lambda) const {
    return {static_cast<double>(reconstruction.item()), static_cast<double>(contrastive.item()),
            static_cast<double>(combined.item()), lambda};
  }
};

/// Full forward pass for two independently masked views of the same batch
/// of images: reconstruction averaged over both views, InfoNCE over the
/// interleaved contrastive features, combined with weight lambda.
template <typename Real>
CreLosses<Real> cre_losses(Tape<Real>& tape, const ModelParameters<Real>& params,
                           const ModelConfig& config, const TokenBatch& view1,
                           const TokenBatch& view2, double lambda);

}  // namespace cre
