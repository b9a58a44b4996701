#pragma once

#include "cre/augment.hpp"
#include "cre/model.hpp"
#include "cre/synthetic.hpp"
#include "cre/tokenizer.hpp"
#include "cre/trainer.hpp"

namespace cre::test {

// A few-second pre-training setup: 8x8 images, 4x4 patches (L=4), K=8.
struct Tiny {
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  Codebook codebook;
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
};

inline Tiny make_tiny(std::size_t images = 16, std::uint64_t seed = 0) {
  SyntheticOptions so;
  so.images = images;
  so.size = 8;
  so.period_min = 3.0;
  so.period_max = 5.0;
  so.seed = seed;
  auto corpus = make_synthetic_corpus(so);

  const PatchGeometry geom{4, 4, 3};
  auto cb = fit_codebook(sample_patches(corpus.images, geom, 4, seed), geom, 8, seed);

  ModelConfig m;
  m.vocab_size = 8;
  m.seq_len = 4;
  m.embed_dim = 16;
  m.encoder_depth = 1;
  m.decoder_depth = 1;
  m.num_heads = 2;
  m.contrastive_dim = 8;

  TrainConfig t;
  t.base_lr = 0.05;
  t.batch_size = 4;
  t.total_epochs = 2;
  t.warmup_epochs = 1;
  t.seed = seed;

  AugmentConfig a;
  a.out_h = 8;
  a.out_w = 8;
  return Tiny{std::move(corpus.images), std::move(corpus.labels), std::move(cb), m, t, a};
}

}  // namespace cre::test
