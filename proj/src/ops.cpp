#include "cre/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "cre/errors.hpp"

namespace cre {

namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using ConstMap = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using MutMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstStrided = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using MutStrided = Eigen::Map<RowMat<Real>, 0, Eigen::OuterStride<>>;

template <typename Real>
using NodePtr = std::shared_ptr<detail::TensorNode<Real>>;

std::string describe(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
         shape_to_string(b);
}

template <typename Real>
void require_rank(const char* op, const Tensor<Real>& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_to_string(x.shape()));
  }
}

template <typename Real>
std::size_t last_dim(const Tensor<Real>& x) {
  return x.shape().empty() ? 1 : x.shape().back();
}

}  // namespace

template <typename Real>
Tensor<Real> matmul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError(describe("matmul", a.shape(), b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<Real> out(m * n);
  MutMap<Real>(out.data(), m, n).noalias() =
      ConstMap<Real>(a.data().data(), m, k) * ConstMap<Real>(b.data().data(), k, n);
  Tensor<Real> result({m, n}, std::move(out));
  if (tape.tracks({&a, &b})) {
    NodePtr<Real> an = a.node_ptr(), bn = b.node_ptr(), on = result.node_ptr();
    tape.record("matmul", {an, bn}, on, [an, bn, on, m, k, n] {
      ConstMap<Real> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        MutMap<Real>(an->grad.data(), m, k).noalias() +=
            g * ConstMap<Real>(bn->data.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        MutMap<Real>(bn->grad.data(), k, n).noalias() +=
            ConstMap<Real>(an->data.data(), m, k).transpose() * g;
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) throw DimensionError(describe("add", a.shape(), b.shape()));
  Buffer<Real> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Tensor<Real> result(a.shape(), std::move(out));
  if (tape.tracks({&a, &b})) {
    NodePtr<Real> an = a.node_ptr(), bn = b.node_ptr(), on = result.node_ptr();
    tape.record("add", {an, bn}, on, [an, bn, on] {
      for (auto* in : {an.get(), bn.get()}) {
        if (!in->requires_grad) continue;
        for (std::size_t i = 0; i < on->grad.size(); ++i) in->grad[i] += on->grad[i];
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> multiply(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) throw DimensionError(describe("multiply", a.shape(), b.shape()));
  Buffer<Real> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Tensor<Real> result(a.shape(), std::move(out));
  if (tape.tracks({&a, &b})) {
    NodePtr<Real> an = a.node_ptr(), bn = b.node_ptr(), on = result.node_ptr();
    tape.record("multiply", {an, bn}, on, [an, bn, on] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->data[i];
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> scale(Tape<Real>& tape, const Tensor<Real>& a, std::type_identity_t<Real> factor) {
  Buffer<Real> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  Tensor<Real> result(a.shape(), std::move(out));
  if (tape.tracks({&a})) {
    NodePtr<Real> an = a.node_ptr(), on = result.node_ptr();
    tape.record("scale", {an}, on, [an, on, factor] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * factor;
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> add_bias(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& bias) {
  const auto d = last_dim(x);
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError(describe("add_bias", x.shape(), bias.shape()));
  }
  Buffer<Real> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  const auto rows = out.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    Real* row = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) row[c] += b[c];
  }
  Tensor<Real> result(x.shape(), std::move(out));
  if (tape.tracks({&x, &bias})) {
    NodePtr<Real> xn = x.node_ptr(), bn = bias.node_ptr(), on = result.node_ptr();
    tape.record("add_bias", {xn, bn}, on, [xn, bn, on, d, rows] {
      const auto& g = on->grad;
      if (xn->requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
      }
      if (bn->requires_grad) {
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* row = g.data() + r * d;
          for (std::size_t c = 0; c < d; ++c) bn->grad[c] += row[c];
        }
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> linear(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& weight,
                    const Tensor<Real>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0)) {
    throw DimensionError(describe("linear", x.shape(), weight.shape()));
  }
  const auto m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError(describe("linear", weight.shape(), bias.shape()));
  }
  Buffer<Real> out(m * n);
  MutMap<Real> o(out.data(), m, n);
  o.noalias() = ConstMap<Real>(x.data().data(), m, k) * ConstMap<Real>(weight.data().data(), k, n);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(bias.data().data(), n);
  Tensor<Real> result({m, n}, std::move(out));
  if (tape.tracks({&x, &weight, &bias})) {
    NodePtr<Real> xn = x.node_ptr(), wn = weight.node_ptr(), bn = bias.node_ptr(),
                  on = result.node_ptr();
    tape.record("linear", {xn, wn, bn}, on, [xn, wn, bn, on, m, k, n] {
      ConstMap<Real> g(on->grad.data(), m, n);
      if (xn->requires_grad) {
        MutMap<Real>(xn->grad.data(), m, k).noalias() +=
            g * ConstMap<Real>(wn->data.data(), k, n).transpose();
      }
      if (wn->requires_grad) {
        MutMap<Real>(wn->grad.data(), k, n).noalias() +=
            ConstMap<Real>(xn->data.data(), m, k).transpose() * g;
      }
      if (bn->requires_grad) {
        Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(bn->grad.data(), n) +=
            g.colwise().sum();
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> gelu(Tape<Real>& tape, const Tensor<Real>& x) {
  const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  const auto in = x.data();
  const bool track = tape.tracks({&x});
  const Real inv_sqrt2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<Real>;
  Buffer<Real> out(in.size()), slope(track ? in.size() : 0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const Real v = in[i];
    const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
    out[i] = v * cdf;
    if (track) slope[i] = cdf + v * inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
  }
  Tensor<Real> result(x.shape(), std::move(out));
  if (track) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("gelu", {xn}, on, [xn, on, slope = std::move(slope)] {
      for (std::size_t i = 0; i < slope.size(); ++i) xn->grad[i] += on->grad[i] * slope[i];
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> sum(Tape<Real>& tape, const Tensor<Real>& x) {
  Real total = 0;
  for (const auto v : x.data()) total += v;
  auto result = Tensor<Real>::scalar(total);
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("sum", {xn}, on, [xn, on] {
      for (auto& g : xn->grad) g += on->grad[0];
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> mean(Tape<Real>& tape, const Tensor<Real>& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  Real total = 0;
  for (const auto v : x.data()) total += v;
  const Real inv = Real(1) / static_cast<Real>(x.numel());
  auto result = Tensor<Real>::scalar(total * inv);
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("mean", {xn}, on, [xn, on, inv] {
      for (auto& g : xn->grad) g += on->grad[0] * inv;
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> transpose(Tape<Real>& tape, const Tensor<Real>& x) {
  require_rank("transpose", x, 2);
  const auto r = x.dim(0), c = x.dim(1);
  Buffer<Real> out(r * c);
  MutMap<Real>(out.data(), c, r) = ConstMap<Real>(x.data().data(), r, c).transpose();
  Tensor<Real> result({c, r}, std::move(out));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("transpose", {xn}, on, [xn, on, r, c] {
      MutMap<Real>(xn->grad.data(), r, c) += ConstMap<Real>(on->grad.data(), c, r).transpose();
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> reshape(Tape<Real>& tape, const Tensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError(describe("reshape", x.shape(), shape));
  }
  Tensor<Real> result(std::move(shape), Buffer<Real>(x.data().begin(), x.data().end()));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("reshape", {xn}, on, [xn, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> concat_rows(Tape<Real>& tape, std::span<const Tensor<Real>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const auto cols = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.dim(1) != cols) throw DimensionError(describe("concat_rows", parts[0].shape(), p.shape()));
    rows += p.dim(0);
  }
  Buffer<Real> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<Real> result({rows, cols}, std::move(out));
  if (tape.tracks(parts)) {
    std::vector<NodePtr<Real>> ins;
    for (const auto& p : parts) ins.push_back(p.node_ptr());
    NodePtr<Real> on = result.node_ptr();
    tape.record("concat_rows", ins, on, [ins, on] {
      std::size_t offset = 0;
      for (const auto& in : ins) {
        const auto n = in->data.size();
        if (in->requires_grad) {
          for (std::size_t i = 0; i < n; ++i) in->grad[i] += on->grad[offset + i];
        }
        offset += n;
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> concat_cols(Tape<Real>& tape, std::span<const Tensor<Real>> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const auto rows = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.dim(0) != rows) throw DimensionError(describe("concat_cols", parts[0].shape(), p.shape()));
    cols += p.dim(1);
  }
  Buffer<Real> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(1);
    const auto src = p.data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src.begin() + r * w, w, out.begin() + r * cols + offset);
    }
    offset += w;
  }
  Tensor<Real> result({rows, cols}, std::move(out));
  if (tape.tracks(parts)) {
    std::vector<NodePtr<Real>> ins;
    for (const auto& p : parts) ins.push_back(p.node_ptr());
    NodePtr<Real> on = result.node_ptr();
    tape.record("concat_cols", ins, on, [ins, on, rows, cols] {
      std::size_t off = 0;
      for (const auto& in : ins) {
        const auto w = in->shape[1];
        if (in->requires_grad) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < w; ++c) in->grad[r * w + c] += on->grad[r * cols + off + c];
          }
        }
        off += w;
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> slice_rows(Tape<Real>& tape, const Tensor<Real>& x, std::size_t begin,
                        std::size_t end) {
  require_rank("slice_rows", x, 2);
  if (begin >= end || end > x.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for shape " + shape_to_string(x.shape()));
  }
  const auto cols = x.dim(1);
  const auto src = x.data();
  Tensor<Real> result({end - begin, cols},
                      Buffer<Real>(src.begin() + begin * cols, src.begin() + end * cols));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("slice_rows", {xn}, on, [xn, on, begin, cols] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[begin * cols + i] += on->grad[i];
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> slice_cols(Tape<Real>& tape, const Tensor<Real>& x, std::size_t begin,
                        std::size_t end) {
  require_rank("slice_cols", x, 2);
  if (begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for shape " + shape_to_string(x.shape()));
  }
  const auto rows = x.dim(0), cols = x.dim(1), w = end - begin;
  const auto src = x.data();
  Buffer<Real> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(src.begin() + r * cols + begin, w, out.begin() + r * w);
  }
  Tensor<Real> result({rows, w}, std::move(out));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("slice_cols", {xn}, on, [xn, on, rows, cols, begin, w] {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) xn->grad[r * cols + begin + c] += on->grad[r * w + c];
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> gather_rows(Tape<Real>& tape, const Tensor<Real>& x,
                         std::span<const std::size_t> index) {
  require_rank("gather_rows", x, 2);
  const auto rows = x.dim(0), cols = x.dim(1);
  Buffer<Real> out(index.size() * cols);
  const auto src = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw IndexError("gather_rows: row " + std::to_string(index[i]) + " out of range for " +
                       shape_to_string(x.shape()));
    }
    std::copy_n(src.begin() + index[i] * cols, cols, out.begin() + i * cols);
  }
  Tensor<Real> result({index.size(), cols}, std::move(out));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record("gather_rows", {xn}, on, [xn, on, idx = std::move(idx), cols] {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t c = 0; c < cols; ++c) xn->grad[idx[i] * cols + c] += on->grad[i * cols + c];
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> embedding(Tape<Real>& tape, const Tensor<Real>& table, std::span<const int> ids) {
  require_rank("embedding", table, 2);
  std::vector<std::size_t> index(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                       shape_to_string(table.shape()));
    }
    index[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(tape, table, std::span<const std::size_t>(index));
}

template <typename Real>
Tensor<Real> mean_rows_grouped(Tape<Real>& tape, const Tensor<Real>& x, std::size_t groups) {
  require_rank("mean_rows_grouped", x, 2);
  if (groups == 0 || x.dim(0) == 0 || x.dim(0) % groups != 0) {
    throw DimensionError("mean_rows_grouped: " + std::to_string(x.dim(0)) +
                         " rows cannot be split into " + std::to_string(groups) + " groups");
  }
  const auto per = x.dim(0) / groups, cols = x.dim(1);
  const Real inv = Real(1) / static_cast<Real>(per);
  const auto src = x.data();
  Buffer<Real> out(groups * cols, Real(0));
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t r = 0; r < per; ++r) {
      const auto* row = src.data() + (g * per + r) * cols;
      for (std::size_t c = 0; c < cols; ++c) out[g * cols + c] += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[g * cols + c] *= inv;
  }
  Tensor<Real> result({groups, cols}, std::move(out));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("mean_rows_grouped", {xn}, on, [xn, on, groups, per, cols, inv] {
      for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t r = 0; r < per; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            xn->grad[(g * per + r) * cols + c] += on->grad[g * cols + c] * inv;
          }
        }
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> softmax(Tape<Real>& tape, const Tensor<Real>& x) {
  require_rank("softmax", x, 2);
  const auto rows = x.dim(0), cols = x.dim(1);
  const auto src = x.data();
  Buffer<Real> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* in = src.data() + r * cols;
    auto* o = out.data() + r * cols;
    const Real mx = *std::max_element(in, in + cols);
    Real denom = 0;
    for (std::size_t c = 0; c < cols; ++c) denom += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= denom;
  }
  Tensor<Real> result({rows, cols}, std::move(out));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("softmax", {xn}, on, [xn, on, rows, cols] {
      for (std::size_t r = 0; r < rows; ++r) {
        const auto* y = on->data.data() + r * cols;
        const auto* g = on->grad.data() + r * cols;
        Real dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) xn->grad[r * cols + c] += y[c] * (g[c] - dot);
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> softmax_cross_entropy(Tape<Real>& tape, const Tensor<Real>& logits,
                                   std::span<const int> targets) {
  require_rank("softmax_cross_entropy", logits, 2);
  const auto rows = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_to_string(logits.shape()));
  }
  if (rows == 0) throw ContractError("softmax_cross_entropy: empty batch");
  for (const auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
  }
  const auto src = logits.data();
  Buffer<Real> probs(rows * classes);
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* in = src.data() + r * classes;
    auto* p = probs.data() + r * classes;
    const Real mx = *std::max_element(in, in + classes);
    Real denom = 0;
    for (std::size_t c = 0; c < classes; ++c) denom += (p[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < classes; ++c) p[c] /= denom;
    total += std::log(denom) - (in[targets[r]] - mx);
  }
  const Real inv = Real(1) / static_cast<Real>(rows);
  auto result = Tensor<Real>::scalar(total * inv);
  if (tape.tracks({&logits})) {
    NodePtr<Real> xn = logits.node_ptr(), on = result.node_ptr();
    std::vector<int> tgt(targets.begin(), targets.end());
    tape.record("softmax_cross_entropy", {xn}, on,
                [xn, on, probs = std::move(probs), tgt = std::move(tgt), classes, inv] {
                  const Real g = on->grad[0] * inv;
                  for (std::size_t r = 0; r < tgt.size(); ++r) {
                    for (std::size_t c = 0; c < classes; ++c) {
                      const Real onehot = static_cast<int>(c) == tgt[r] ? Real(1) : Real(0);
                      xn->grad[r * classes + c] += g * (probs[r * classes + c] - onehot);
                    }
                  }
                });
  }
  return result;
}

template <typename Real>
Tensor<Real> layer_norm(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias) {
  const auto d = last_dim(x);
  if (gain.rank() != 1 || gain.dim(0) != d) {
    throw DimensionError(describe("layer_norm", x.shape(), gain.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError(describe("layer_norm", x.shape(), bias.shape()));
  }
  const auto rows = x.numel() / d;
  const auto src = x.data();
  const auto gw = gain.data(), bw = bias.data();
  Buffer<Real> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* in = src.data() + r * d;
    Real mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<Real>(d);
    const Real is = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const Real h = (in[c] - mu) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gw[c] + bw[c];
    }
  }
  Tensor<Real> result(x.shape(), std::move(out));
  if (tape.tracks({&x, &gain, &bias})) {
    NodePtr<Real> xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(),
                  on = result.node_ptr();
    tape.record("layer_norm", {xn, gn, bn}, on,
                [xn, gn, bn, on, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
                  Buffer<Real> dh(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const auto* g = on->grad.data() + r * d;
                    const auto* h = xhat.data() + r * d;
                    if (gn->requires_grad) {
                      for (std::size_t c = 0; c < d; ++c) gn->grad[c] += g[c] * h[c];
                    }
                    if (bn->requires_grad) {
                      for (std::size_t c = 0; c < d; ++c) bn->grad[c] += g[c];
                    }
                    if (!xn->requires_grad) continue;
                    Real mean_dh = 0, mean_dh_h = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                      dh[c] = g[c] * gn->data[c];
                      mean_dh += dh[c];
                      mean_dh_h += dh[c] * h[c];
                    }
                    mean_dh /= static_cast<Real>(d);
                    mean_dh_h /= static_cast<Real>(d);
                    for (std::size_t c = 0; c < d; ++c) {
                      xn->grad[r * d + c] += inv_std[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                    }
                  }
                });
  }
  return result;
}

template <typename Real>
Tensor<Real> l2_normalize(Tape<Real>& tape, const Tensor<Real>& x) {
  require_rank("l2_normalize", x, 2);
  const auto rows = x.dim(0), cols = x.dim(1);
  const auto src = x.data();
  Buffer<Real> out(rows * cols), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real sq = 0;
    for (std::size_t c = 0; c < cols; ++c) sq += src[r * cols + c] * src[r * cols + c];
    const Real n = std::sqrt(sq);
    if (!(static_cast<double>(n) >= kMinRowNorm)) {
      throw DegenerateFeatureError("l2_normalize: row " + std::to_string(r) +
                                   " has norm below 1e-12");
    }
    norms[r] = n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = src[r * cols + c] / n;
  }
  Tensor<Real> result({rows, cols}, std::move(out));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("l2_normalize", {xn}, on, [xn, on, norms = std::move(norms), rows, cols] {
      for (std::size_t r = 0; r < rows; ++r) {
        const auto* y = on->data.data() + r * cols;
        const auto* g = on->grad.data() + r * cols;
        Real dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
        for (std::size_t c = 0; c < cols; ++c) {
          xn->grad[r * cols + c] += (g[c] - y[c] * dot) / norms[r];
        }
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> fill_diagonal(Tape<Real>& tape, const Tensor<Real>& x,
                           std::type_identity_t<Real> value) {
  require_rank("fill_diagonal", x, 2);
  const auto n = x.dim(0);
  if (x.dim(1) != n) throw DimensionError("fill_diagonal: non-square " + shape_to_string(x.shape()));
  Buffer<Real> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = value;
  Tensor<Real> result(x.shape(), std::move(out));
  if (tape.tracks({&x})) {
    NodePtr<Real> xn = x.node_ptr(), on = result.node_ptr();
    tape.record("fill_diagonal", {xn}, on, [xn, on, n] {
      for (std::size_t i = 0; i < n * n; ++i) {
        if (i % (n + 1) != 0) xn->grad[i] += on->grad[i];
      }
    });
  }
  return result;
}

template <typename Real>
Tensor<Real> scaled_dot_product_attention(Tape<Real>& tape, const Tensor<Real>& q,
                                          const Tensor<Real>& k, const Tensor<Real>& v) {
  require_rank("scaled_dot_product_attention", q, 2);
  if (k.rank() != 2 || q.dim(1) != k.dim(1)) {
    throw DimensionError(describe("scaled_dot_product_attention", q.shape(), k.shape()));
  }
  const Real factor = Real(1) / std::sqrt(static_cast<Real>(q.dim(1)));
  const auto scores = scale(tape, matmul(tape, q, transpose(tape, k)), factor);
  return matmul(tape, softmax(tape, scores), v);
}

template <typename Real>
Tensor<Real> multi_head_attention(Tape<Real>& tape, const Tensor<Real>& qkv, std::size_t batch,
                                  std::size_t heads) {
  require_rank("multi_head_attention", qkv, 2);
  const auto rows = qkv.dim(0), width = qkv.dim(1);
  if (batch == 0 || rows % batch != 0 || width % 3 != 0 || heads == 0 ||
      (width / 3) % heads != 0) {
    throw DimensionError("multi_head_attention: shape " + shape_to_string(qkv.shape()) +
                         " incompatible with batch " + std::to_string(batch) + " and " +
                         std::to_string(heads) + " heads");
  }
  const auto n = rows / batch, embed = width / 3, hd = embed / heads;
  const Real factor = Real(1) / std::sqrt(static_cast<Real>(hd));
  const auto* src = qkv.data().data();
  Buffer<Real> out(rows * embed);
  Buffer<Real> probs(batch * heads * n * n);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(width));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(embed));

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto* base = src + b * n * width + h * hd;
      ConstStrided<Real> Q(base, n, hd, in_stride);
      ConstStrided<Real> K(base + embed, n, hd, in_stride);
      ConstStrided<Real> V(base + 2 * embed, n, hd, in_stride);
      MutMap<Real> P(probs.data() + (b * heads + h) * n * n, n, n);
      P.noalias() = (Q * K.transpose()) * factor;
      for (Eigen::Index r = 0; r < P.rows(); ++r) {
        auto row = P.row(r);
        const Real mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      MutStrided<Real>(out.data() + b * n * embed + h * hd, n, hd, out_stride).noalias() = P * V;
    }
  }

  Tensor<Real> result({rows, embed}, std::move(out));
  if (tape.tracks({&qkv})) {
    NodePtr<Real> xn = qkv.node_ptr(), on = result.node_ptr();
    tape.record("multi_head_attention", {xn}, on,
                [xn, on, probs = std::move(probs), batch, heads, n, embed, hd, width, factor] {
                  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(width));
                  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(embed));
                  RowMat<Real> dP(n, n), dS(n, n);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t h = 0; h < heads; ++h) {
                      const auto off = b * n * width + h * hd;
                      ConstStrided<Real> Q(xn->data.data() + off, n, hd, in_stride);
                      ConstStrided<Real> K(xn->data.data() + off + embed, n, hd, in_stride);
                      ConstStrided<Real> V(xn->data.data() + off + 2 * embed, n, hd, in_stride);
                      MutStrided<Real> dQ(xn->grad.data() + off, n, hd, in_stride);
                      MutStrided<Real> dK(xn->grad.data() + off + embed, n, hd, in_stride);
                      MutStrided<Real> dV(xn->grad.data() + off + 2 * embed, n, hd, in_stride);
                      ConstStrided<Real> dO(on->grad.data() + b * n * embed + h * hd, n, hd,
                                            out_stride);
                      ConstMap<Real> P(probs.data() + (b * heads + h) * n * n, n, n);
                      dV.noalias() += P.transpose() * dO;
                      dP.noalias() = dO * V.transpose();
                      for (Eigen::Index r = 0; r < dP.rows(); ++r) {
                        const Real dot = dP.row(r).dot(P.row(r));
                        dS.row(r) = P.row(r).array() * (dP.row(r).array() - dot) * factor;
                      }
                      dQ.noalias() += dS * K;
                      dK.noalias() += dS.transpose() * Q;
                    }
                  }
                });
  }
  return result;
}

#define CRE_INSTANTIATE_OPS(Real)                                                              \
  template Tensor<Real> matmul(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&);         \
  template Tensor<Real> add(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&);            \
  template Tensor<Real> multiply(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&);       \
  template Tensor<Real> scale(Tape<Real>&, const Tensor<Real>&, Real);                         \
  template Tensor<Real> add_bias(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&);       \
  template Tensor<Real> gelu(Tape<Real>&, const Tensor<Real>&);                                \
  template Tensor<Real> sum(Tape<Real>&, const Tensor<Real>&);                                 \
  template Tensor<Real> mean(Tape<Real>&, const Tensor<Real>&);                                \
  template Tensor<Real> transpose(Tape<Real>&, const Tensor<Real>&);                           \
  template Tensor<Real> reshape(Tape<Real>&, const Tensor<Real>&, Shape);                      \
  template Tensor<Real> concat_rows(Tape<Real>&, std::span<const Tensor<Real>>);               \
  template Tensor<Real> concat_cols(Tape<Real>&, std::span<const Tensor<Real>>);               \
  template Tensor<Real> slice_rows(Tape<Real>&, const Tensor<Real>&, std::size_t, std::size_t); \
  template Tensor<Real> slice_cols(Tape<Real>&, const Tensor<Real>&, std::size_t, std::size_t); \
  template Tensor<Real> gather_rows(Tape<Real>&, const Tensor<Real>&,                          \
                                    std::span<const std::size_t>);                             \
  template Tensor<Real> embedding(Tape<Real>&, const Tensor<Real>&, std::span<const int>);     \
  template Tensor<Real> mean_rows_grouped(Tape<Real>&, const Tensor<Real>&, std::size_t);      \
  template Tensor<Real> softmax(Tape<Real>&, const Tensor<Real>&);                             \
  template Tensor<Real> softmax_cross_entropy(Tape<Real>&, const Tensor<Real>&,                \
                                              std::span<const int>);                           \
  template Tensor<Real> layer_norm(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&,      \
                                   const Tensor<Real>&);                                       \
  template Tensor<Real> linear(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&,            \
                               const Tensor<Real>&);                                            \
  template Tensor<Real> l2_normalize(Tape<Real>&, const Tensor<Real>&);                        \
  template Tensor<Real> fill_diagonal(Tape<Real>&, const Tensor<Real>&, Real);                 \
  template Tensor<Real> scaled_dot_product_attention(Tape<Real>&, const Tensor<Real>&,         \
                                                     const Tensor<Real>&, const Tensor<Real>&); \
  template Tensor<Real> multi_head_attention(Tape<Real>&, const Tensor<Real>&, std::size_t,    \
                                             std::size_t);

CRE_INSTANTIATE_OPS(float)
CRE_INSTANTIATE_OPS(double)

#undef CRE_INSTANTIATE_OPS

}  // namespace cre
