#include "cre/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cre/errors.hpp"
#include "cre/masking.hpp"
#include "cre/model.hpp"
#include "cre/objectives.hpp"
#include "cre/ops.hpp"
#include "cre/rng.hpp"

namespace cre {

namespace {

template <typename Real>
double evaluate(const LossFn<Real>& f) {
  Tape<Real> tape(false);
  const auto out = f(tape);
  if (out.numel() != 1) {
    throw ContractError("finite_diff_check: f returned shape " + shape_to_string(out.shape()));
  }
  return static_cast<double>(out.item());
}

template <typename Real>
double central_difference(const LossFn<Real>& f, Real& x, double h) {
  const Real original = x;
  auto at = [&](double offset) {
    x = static_cast<Real>(static_cast<double>(original) + offset);
    return evaluate(f);
  };
  double d;
  if constexpr (std::is_same_v<Real, double>) {
    const double p1 = at(h), m1 = at(-h), p2 = at(2 * h), m2 = at(-2 * h);
    d = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
  } else {
    x = static_cast<Real>(static_cast<double>(original) + h);
    const double xp = x;
    const double fp = evaluate(f);
    x = static_cast<Real>(static_cast<double>(original) - h);
    const double xm = x;
    const double fm = evaluate(f);
    d = (fp - fm) / (xp - xm);
  }
  x = original;
  return d;
}

}  // namespace

template <typename Real>
GradCheckResult finite_diff_check(const LossFn<Real>& f, std::span<Tensor<Real>> params,
                                  double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  Tape<Real> tape;
  const auto loss = f(tape);
  if (loss.numel() != 1) {
    throw ContractError("finite_diff_check: f returned shape " + shape_to_string(loss.shape()));
  }
  const double baseline = static_cast<double>(loss.item());
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    std::vector<double> g(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.begin());
    analytic.push_back(std::move(g));
    p.clear_grad();
  }

  const double again = evaluate(f), third = evaluate(f);
  if (again != baseline || third != baseline) {
    throw ContractError("finite_diff_check: f is not deterministic (" + std::to_string(baseline) +
                        " vs " + std::to_string(again) + ")");
  }

  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double numeric = central_difference(f, values[i], h);
      const double a = analytic[t][i];
      const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
      if (++result.evaluated == 1 || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.tensor = t;
        result.element = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

template GradCheckResult finite_diff_check(const LossFn<float>&, std::span<Tensor<float>>, double);
template GradCheckResult finite_diff_check(const LossFn<double>&, std::span<Tensor<double>>,
                                           double);

namespace {

using T = Tensor<double>;

T random_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return T(std::move(shape), std::move(v));
}

// Contracts a non-scalar output with fixed random weights so every output
// element contributes a distinct amount to the checked scalar.
T weighted_sum(Tape<double>& tape, const T& out, const T& weights) {
  return sum(tape, multiply(tape, out, weights));
}

struct OpCase {
  std::string name;
  // Builds inputs and the loss from a seeded stream.
  std::function<double(Rng&, double)> run;
};

double check(const LossFn<double>& f, std::vector<T>& inputs, double h) {
  return finite_diff_check<double>(f, std::span<T>(inputs), h).max_rel_error;
}

// Checks a unary op whose output has shape `out_shape`.
double unary(Rng& rng, double h, Shape in_shape, Shape out_shape,
             std::function<T(Tape<double>&, const T&)> op, double stddev = 1.0) {
  std::vector<T> in{random_tensor(rng, std::move(in_shape), stddev)};
  const auto w = random_tensor(rng, std::move(out_shape));
  return check([&](Tape<double>& tape) { return weighted_sum(tape, op(tape, in[0]), w); }, in, h);
}

double binary(Rng& rng, double h, Shape a_shape, Shape b_shape, Shape out_shape,
              std::function<T(Tape<double>&, const T&, const T&)> op) {
  std::vector<T> in{random_tensor(rng, std::move(a_shape)), random_tensor(rng, std::move(b_shape))};
  const auto w = random_tensor(rng, std::move(out_shape));
  return check([&](Tape<double>& tape) { return weighted_sum(tape, op(tape, in[0], in[1]), w); },
               in, h);
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  cases.push_back({"matmul", [](Rng& r, double h) {
                     return binary(r, h, {3, 4}, {4, 2}, {3, 2},
                                   [](auto& t, auto& a, auto& b) { return matmul(t, a, b); });
                   }});
  cases.push_back({"linear", [](Rng& r, double h) {
                     std::vector<T> in{random_tensor(r, {5, 4}), random_tensor(r, {4, 3}),
                                       random_tensor(r, {3})};
                     const auto w = random_tensor(r, {5, 3});
                     return check(
                         [&](Tape<double>& t) {
                           return weighted_sum(t, linear(t, in[0], in[1], in[2]), w);
                         },
                         in, h);
                   }});
  cases.push_back({"add", [](Rng& r, double h) {
                     return binary(r, h, {3, 4}, {3, 4}, {3, 4},
                                   [](auto& t, auto& a, auto& b) { return add(t, a, b); });
                   }});
  cases.push_back({"multiply", [](Rng& r, double h) {
                     return binary(r, h, {3, 4}, {3, 4}, {3, 4},
                                   [](auto& t, auto& a, auto& b) { return multiply(t, a, b); });
                   }});
  cases.push_back({"scale", [](Rng& r, double h) {
                     return unary(r, h, {2, 5}, {2, 5},
                                  [](auto& t, auto& a) { return scale(t, a, -1.75); });
                   }});
  cases.push_back({"add_bias", [](Rng& r, double h) {
                     return binary(r, h, {4, 3}, {3}, {4, 3},
                                   [](auto& t, auto& a, auto& b) { return add_bias(t, a, b); });
                   }});
  cases.push_back({"gelu", [](Rng& r, double h) {
                     return unary(r, h, {3, 5}, {3, 5}, [](auto& t, auto& a) { return gelu(t, a); });
                   }});
  cases.push_back({"sum", [](Rng& r, double h) {
                     return unary(r, h, {3, 4}, {1}, [](auto& t, auto& a) { return sum(t, a); });
                   }});
  cases.push_back({"mean", [](Rng& r, double h) {
                     return unary(r, h, {3, 4}, {1}, [](auto& t, auto& a) { return mean(t, a); });
                   }});
  cases.push_back({"transpose", [](Rng& r, double h) {
                     return unary(r, h, {3, 4}, {4, 3},
                                  [](auto& t, auto& a) { return transpose(t, a); });
                   }});
  cases.push_back({"reshape", [](Rng& r, double h) {
                     return unary(r, h, {3, 4}, {2, 6},
                                  [](auto& t, auto& a) { return reshape(t, a, {2, 6}); });
                   }});
  cases.push_back({"concat_rows", [](Rng& r, double h) {
                     return binary(r, h, {2, 3}, {4, 3}, {6, 3}, [](auto& t, auto& a, auto& b) {
                       const std::vector<T> parts{a, b};
                       return concat_rows(t, std::span<const T>(parts));
                     });
                   }});
  cases.push_back({"concat_cols", [](Rng& r, double h) {
                     return binary(r, h, {3, 2}, {3, 4}, {3, 6}, [](auto& t, auto& a, auto& b) {
                       const std::vector<T> parts{a, b};
                       return concat_cols(t, std::span<const T>(parts));
                     });
                   }});
  cases.push_back({"slice_rows", [](Rng& r, double h) {
                     return unary(r, h, {5, 3}, {2, 3},
                                  [](auto& t, auto& a) { return slice_rows(t, a, 1, 3); });
                   }});
  cases.push_back({"slice_cols", [](Rng& r, double h) {
                     return unary(r, h, {3, 5}, {3, 3},
                                  [](auto& t, auto& a) { return slice_cols(t, a, 2, 5); });
                   }});
  cases.push_back({"gather_rows", [](Rng& r, double h) {
                     return unary(r, h, {4, 3}, {5, 3}, [](auto& t, auto& a) {
                       const std::vector<std::size_t> idx{2, 0, 2, 3, 2};
                       return gather_rows(t, a, std::span<const std::size_t>(idx));
                     });
                   }});
  cases.push_back({"embedding", [](Rng& r, double h) {
                     return unary(r, h, {6, 4}, {5, 4}, [](auto& t, auto& a) {
                       const std::vector<int> ids{5, 1, 1, 0, 3};
                       return embedding(t, a, std::span<const int>(ids));
                     });
                   }});
  cases.push_back({"mean_rows_grouped", [](Rng& r, double h) {
                     return unary(r, h, {6, 3}, {2, 3},
                                  [](auto& t, auto& a) { return mean_rows_grouped(t, a, 2); });
                   }});
  cases.push_back({"softmax", [](Rng& r, double h) {
                     return unary(r, h, {3, 5}, {3, 5},
                                  [](auto& t, auto& a) { return softmax(t, a); });
                   }});
  cases.push_back({"softmax_cross_entropy", [](Rng& r, double h) {
                     const std::vector<int> targets{static_cast<int>(r.below(5)),
                                                    static_cast<int>(r.below(5)),
                                                    static_cast<int>(r.below(5))};
                     std::vector<T> in{random_tensor(r, {3, 5}, 2.0)};
                     return check(
                         [&](Tape<double>& t) {
                           return softmax_cross_entropy(t, in[0], std::span<const int>(targets));
                         },
                         in, h);
                   }});
  cases.push_back({"layer_norm", [](Rng& r, double h) {
                     std::vector<T> in{random_tensor(r, {3, 6}), random_tensor(r, {6}),
                                       random_tensor(r, {6})};
                     const auto w = random_tensor(r, {3, 6});
                     return check(
                         [&](Tape<double>& t) {
                           return weighted_sum(t, layer_norm(t, in[0], in[1], in[2]), w);
                         },
                         in, h);
                   }});
  cases.push_back({"l2_normalize", [](Rng& r, double h) {
                     return unary(r, h, {4, 5}, {4, 5},
                                  [](auto& t, auto& a) { return l2_normalize(t, a); });
                   }});
  cases.push_back({"fill_diagonal", [](Rng& r, double h) {
                     return unary(r, h, {4, 4}, {4, 4},
                                  [](auto& t, auto& a) { return fill_diagonal(t, a, -3.0); });
                   }});
  cases.push_back({"scaled_dot_product_attention", [](Rng& r, double h) {
                     std::vector<T> in{random_tensor(r, {4, 3}), random_tensor(r, {4, 3}),
                                       random_tensor(r, {4, 3})};
                     const auto w = random_tensor(r, {4, 3});
                     return check(
                         [&](Tape<double>& t) {
                           return weighted_sum(
                               t, scaled_dot_product_attention(t, in[0], in[1], in[2]), w);
                         },
                         in, h);
                   }});
  cases.push_back({"multi_head_attention", [](Rng& r, double h) {
                     return unary(r, h, {6, 12}, {6, 4}, [](auto& t, auto& a) {
                       return multi_head_attention(t, a, 2, 2);
                     });
                   }});
  cases.push_back({"composite", [](Rng& r, double h) {
                     // matmul -> gelu -> layer_norm -> cross-entropy
                     std::vector<T> in{random_tensor(r, {3, 4}), random_tensor(r, {4, 5}),
                                       random_tensor(r, {5}), random_tensor(r, {5})};
                     const std::vector<int> targets{static_cast<int>(r.below(5)),
                                                    static_cast<int>(r.below(5)),
                                                    static_cast<int>(r.below(5))};
                     return check(
                         [&](Tape<double>& t) {
                           const auto y = layer_norm(t, gelu(t, matmul(t, in[0], in[1])), in[2],
                                                     in[3]);
                           return softmax_cross_entropy(t, y, std::span<const int>(targets));
                         },
                         in, h);
                   }});
  cases.push_back({"infonce", [](Rng& r, double h) {
                     std::vector<T> in{random_tensor(r, {4, 3})};
                     return check(
                         [&](Tape<double>& t) {
                           return infonce_loss(t, l2_normalize(t, in[0]), 0.5);
                         },
                         in, h);
                   }});
  return cases;
}

std::vector<int> random_ids(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<int> ids(n);
  for (auto& id : ids) id = static_cast<int>(rng.below(k));
  return ids;
}

TokenBatch random_view(Rng& rng, const ModelConfig& config, std::size_t batch, std::uint64_t seed,
                       double ratio) {
  std::vector<MaskedTokens> samples;
  for (std::size_t b = 0; b < batch; ++b) {
    TokenSequence seq{random_ids(rng, config.seq_len, config.vocab_size), 1, config.seq_len};
    samples.push_back(apply_mask(seq, sample_mask(config.seq_len, ratio, derive_seed({seed, b}))));
  }
  return TokenBatch::from(samples);
}

}  // namespace

ModelConfig micro_model_config() {
  ModelConfig c;
  c.vocab_size = 8;
  c.seq_len = 4;
  c.embed_dim = 8;
  c.encoder_depth = 1;
  c.decoder_depth = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  c.contrastive_dim = 4;
  c.temperature = 0.2;
  return c;
}

double micro_model_check(std::uint64_t seed, double h) {
  const auto config = micro_model_config();
  Rng rng(seed);
  auto params = init_parameters<double>(config, seed);
  // Widen the initial distribution so every path carries a gradient well
  // above the finite-difference noise floor.
  for (auto& e : params.entries()) {
    const bool gain = e.name.ends_with(".gain");
    for (auto& v : e.tensor.mutable_data()) v = gain ? 1.0 + 0.2 * rng.normal() : 0.5 * rng.normal();
  }
  const auto view1 = random_view(rng, config, 2, derive_seed({seed, 1}), kDefaultMaskRatio);
  const auto view2 = random_view(rng, config, 2, derive_seed({seed, 2}), kDefaultMaskRatio);
  std::vector<T> tensors;
  for (auto& e : params.entries()) tensors.push_back(e.tensor);
  const LossFn<double> f = [&](Tape<double>& tape) {
    return cre_losses(tape, params, config, view1, view2, kDefaultLambda).combined;
  };
  return finite_diff_check<double>(f, std::span<T>(tensors), h).max_rel_error;
}

std::vector<GradCheckEntry> run_gradcheck_suite(const GradCheckSuiteOptions& options) {
  std::vector<GradCheckEntry> out;
  const auto cases = op_cases();
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& op = cases[c];
    GradCheckEntry e{op.name, 0.0, options.op_tolerance, options.seeds, false};
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(derive_seed({options.base_seed, c, s}));
      e.max_rel_error = std::max(e.max_rel_error, op.run(rng, options.h));
    }
    e.passed = e.max_rel_error < e.tolerance;
    out.push_back(e);
  }
  const std::size_t model_seeds = std::min<std::size_t>(options.seeds, 3);
  GradCheckEntry model{"cre_micro_model", 0.0, options.model_tolerance, model_seeds, false};
  for (std::size_t s = 0; s < model_seeds; ++s) {
    model.max_rel_error =
        std::max(model.max_rel_error, micro_model_check(derive_seed({options.base_seed, 77, s}), options.h));
  }
  model.passed = model.max_rel_error < model.tolerance;
  out.push_back(model);
  return out;
}

bool all_passed(std::span<const GradCheckEntry> entries) {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

}  // namespace cre
