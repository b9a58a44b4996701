#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cre/model.hpp"
#include "cre/tensor.hpp"

namespace cre {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t tensor = 0;   // index into params of the worst element
  std::size_t element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t evaluated = 0;  // number of scalars checked
};

template <typename Real>
using LossFn = std::function<Tensor<Real>(Tape<Real>&)>;

/// Compares the tape gradient of the scalar `f` with respect to every
/// element of `params` against central differences, returning the worst
/// |a - n| / (|a| + |n| + 1e-8). In double precision the difference uses a
/// fourth-order stencil; in float a two-point stencil over the rounded step.
/// `f` must read the current contents of `params`; it is evaluated with a
/// non-recording tape for the perturbed points. Throws ContractError when
/// two evaluations at the same point disagree.
template <typename Real>
GradCheckResult finite_diff_check(const LossFn<Real>& f, std::span<Tensor<Real>> params,
                                  double h = 1e-3);

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t seeds = 0;
  bool passed = false;
};

struct GradCheckSuiteOptions {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 0;
  double op_tolerance = 1e-5;
  double model_tolerance = 1e-4;
  double h = 1e-3;
};

/// Every differentiable op on random small inputs (double precision, one
/// entry per op, worst case over seeds) followed by the full combined loss
/// on a micro encoder-decoder (L=4, K=8, width 8, one encoder and one
/// decoder block, two images).
std::vector<GradCheckEntry> run_gradcheck_suite(const GradCheckSuiteOptions& options = {});

/// The micro encoder-decoder used by the suite.
ModelConfig micro_model_config();

/// Worst relative error of the combined loss gradient over every micro-model
/// parameter for one random draw of weights and masked views.
double micro_model_check(std::uint64_t seed, double h = 1e-3);

bool all_passed(std::span<const GradCheckEntry> entries);

extern template GradCheckResult finite_diff_check(const LossFn<float>&, std::span<Tensor<float>>,
                                                  double);
extern template GradCheckResult finite_diff_check(const LossFn<double>&,
                                                  std::span<Tensor<double>>, double);

}  // namespace cre
