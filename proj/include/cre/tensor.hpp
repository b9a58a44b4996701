#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cre {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Cache-line aligned allocation. Vectorized kernels peel a different
/// number of leading elements depending on the address, which changes the
/// summation order; a fixed alignment keeps results bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename Real>
using Buffer = std::vector<Real, AlignedAllocator<Real>>;

namespace detail {

template <typename Real>
struct TensorNode {
  Shape shape;
  Buffer<Real> data;
  Buffer<Real> grad;  // empty until first needed
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Real is float for training and double for gradient checks.
template <typename Real>
class Tensor {
 public:
  using Node = detail::TensorNode<Real>;

  Tensor() = default;
  Tensor(Shape shape, Buffer<Real> data, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<Real>& data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<Real>(data.begin(), data.end()), requires_grad) {}
  Tensor(Shape shape, std::initializer_list<Real> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<Real>(data), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return node().data.size(); }

  std::span<const Real> data() const { return node().data; }
  /// Direct write access; reserved for initializers and optimizers.
  std::span<Real> mutable_data() { return node().data; }
  Real item() const;

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool value) { node().requires_grad = value; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const Real> grad() const { return node().grad; }
  std::span<Real> mutable_grad();
  void zero_grad();
  void clear_grad() { node().grad.clear(); }

  Tensor clone() const;

  template <typename Other>
  Tensor<Other> cast() const {
    Buffer<Other> out(numel());
    const auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Other>(src[i]);
    return Tensor<Other>(shape(), std::move(out), requires_grad());
  }

  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  Node& node() const;

  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations. Backward replays the
/// record in exact reverse order, once.
template <typename Real>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::TensorNode<Real>>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }
  const std::string& op_name(std::size_t i) const { return entries_[i].op; }

  /// True when an op over these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor<Real>*> inputs) const;
  bool tracks(std::span<const Tensor<Real>> inputs) const;

  void record(std::string_view op, std::vector<NodePtr> inputs, NodePtr output,
              std::function<void()> backward_fn);

  /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  /// recorded input that requires them.
  void backward(const Tensor<Real>& loss);

 private:
  struct Entry {
    std::string op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backward_fn;
  };

  std::vector<Entry> entries_;
  bool recording_;
  bool consumed_ = false;
};

namespace debug {

/// Fault injection for exercising the gradient checker: every backward rule
/// recorded under `op` sees its incoming gradient doubled. Empty disables.
void inject_gradient_fault(std::string op);
const std::string& injected_gradient_fault();

}  // namespace debug

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cre
