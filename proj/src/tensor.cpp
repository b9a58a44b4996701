#include "cre/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "cre/errors.hpp"

namespace cre {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (const auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Buffer<Real> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::full(Shape shape, Real value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer<Real>(n, value), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::scalar(Real value, bool requires_grad) {
  return Tensor(Shape{1}, Buffer<Real>{value}, requires_grad);
}

template <typename Real>
typename Tensor<Real>::Node& Tensor<Real>::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

template <typename Real>
const Shape& Tensor<Real>::shape() const {
  return node().shape;
}

template <typename Real>
std::size_t Tensor<Real>::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) {
    throw DimensionError("dimension " + std::to_string(i) + " out of range for shape " +
                         shape_to_string(s));
  }
  return s[i];
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) {
    throw ContractError("item() on non-scalar tensor of shape " + shape_to_string(shape()));
  }
  return node().data[0];
}

template <typename Real>
std::span<Real> Tensor<Real>::mutable_grad() {
  node().ensure_grad();
  return node().grad;
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  auto& n = node();
  n.grad.assign(n.data.size(), Real(0));
}

template <typename Real>
Tensor<Real> Tensor<Real>::clone() const {
  Tensor out(shape(), node().data, requires_grad());
  out.node_->grad = node().grad;
  return out;
}

template <typename Real>
bool Tape<Real>::tracks(std::initializer_list<const Tensor<Real>*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<Real>* t) { return t->requires_grad(); });
}

template <typename Real>
bool Tape<Real>::tracks(std::span<const Tensor<Real>> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<Real>& t) { return t.requires_grad(); });
}

template <typename Real>
void Tape<Real>::record(std::string_view op, std::vector<NodePtr> inputs, NodePtr output,
                        std::function<void()> backward_fn) {
  if (consumed_) throw ReuseError("cannot record '" + std::string(op) + "' on a consumed tape");
  output->requires_grad = true;
  entries_.push_back(Entry{std::string(op), std::move(inputs), std::move(output),
                           std::move(backward_fn)});
}

template <typename Real>
void Tape<Real>::backward(const Tensor<Real>& loss) {
  if (consumed_) throw ReuseError("tape has already been consumed by a backward pass");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_to_string(loss.shape()));
  }
  consumed_ = true;

  for (auto& e : entries_) {
    e.output->ensure_grad();
    for (auto& in : e.inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
  }
  auto& root = *loss.node_ptr();
  root.ensure_grad();
  root.grad[0] += Real(1);

  const auto& fault = debug::injected_gradient_fault();
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!fault.empty() && it->op == fault) {
      auto& g = it->output->grad;
      for (auto& v : g) v *= Real(2);
      it->backward_fn();
      for (auto& v : g) v /= Real(2);
    } else {
      it->backward_fn();
    }
  }
  // The closures hold the graph alive; drop it now that it is spent.
  entries_.clear();
}

namespace debug {

namespace {
std::string& fault_slot() {
  static std::string op;
  return op;
}
}  // namespace

void inject_gradient_fault(std::string op) { fault_slot() = std::move(op); }
const std::string& injected_gradient_fault() { return fault_slot(); }

}  // namespace debug

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace cre
