#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l2v/error.hpp"

namespace l2v {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "no gradient"
  bool requires_grad = false;
  // Set for values recorded on a tape; null for leaves.
  const Tape<T>* tape = nullptr;
  std::uint64_t generation = 0;
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. A tensor that was produced by a recorded op is an interior
/// node; every other tensor is a leaf.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Storage = detail::TensorStorage<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<Storage>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_string(shape) + " does not match " +
                       std::to_string(data.size()) + " elements");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<T> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  static Tensor from_storage(std::shared_ptr<Storage> storage) {
    Tensor t;
    t.impl_ = std::move(storage);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : impl_->shape[0]; }
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<const T> data() const { return impl_->data; }
  /// Raw write access. Only optimizers and gradient checkers should use this.
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(impl_->data).subspan(r * cols(), cols());
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!is_leaf()) throw Error("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = flag;
    if (!flag) impl_->grad.clear();
  }
  bool is_leaf() const { return impl_->tape == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }
  void zero_grad() {
    if (impl_->requires_grad) impl_->grad.assign(impl_->data.size(), T(0));
  }
  void clear_grad() { impl_->grad.clear(); }

  /// Deep copy as a fresh leaf with the same requires_grad flag.
  Tensor clone() const { return Tensor(shape(), impl_->data, impl_->requires_grad && is_leaf()); }
  /// Deep copy as a leaf that does not require grad.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(shape(), std::move(out), impl_->requires_grad && is_leaf());
  }

  Storage* storage() const noexcept { return impl_.get(); }
  const std::shared_ptr<Storage>& shared_storage() const noexcept { return impl_; }

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  std::shared_ptr<Storage> impl_;
};

/// Ordered record of differentiable operations. Ops append nodes while the
/// tape is active on the current thread; backward() replays them in reverse
/// creation order (a valid reverse topological order) and then clears the
/// tape. A tape is single-threaded.
template <class T>
class Tape {
 public:
  using Storage = detail::TensorStorage<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    if (active_ == this) active_ = nullptr;
  }

  /// RAII activation on the calling thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active_) { active_ = &tape; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    ~Scope() { active_ = previous_; }

   private:
    Tape* previous_;
  };

  [[nodiscard]] Scope activate() { return Scope(*this); }

  static Tape* active() noexcept { return active_; }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t generation() const noexcept { return generation_; }
  /// Number of nodes whose backward ran during the last backward().
  std::size_t last_visits() const noexcept { return last_visits_; }

  /// Appends a node. `backward` reads the output's grad and accumulates into
  /// the grads of inputs that require them.
  void record(const std::shared_ptr<Storage>& output,
              std::vector<std::shared_ptr<Storage>> inputs,
              std::function<void()> backward, std::string_view op) {
    for (const auto& in : inputs) {
      if (in->tape != nullptr && (in->tape != this || in->generation != generation_)) {
        throw DetachedTensorError(std::string(op) +
                                  ": input was produced on a tape that is no longer live");
      }
    }
    output->requires_grad = true;
    output->tape = this;
    output->generation = generation_;
    nodes_.push_back(Node{output, std::move(inputs), std::move(backward), std::string(op)});
  }

  /// Populates grads of every requires_grad leaf reachable from `loss`, then
  /// clears the tape. Leaves referenced by the tape but not reached receive a
  /// zero grad. Leaf grads accumulate across calls; zero them between steps.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ShapeError("backward requires a scalar loss");
    }
    Storage* root = loss.storage();
    if (root->tape != this || root->generation != generation_) {
      throw DetachedTensorError(
          "loss is not on this tape (detached tensor, or double-backward over a consumed tape)");
    }
    root->grad.assign(1, T(1));
    last_visits_ = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
      ++last_visits_;
    }
    for (const auto& node : nodes_) {
      for (const auto& in : node.inputs) {
        if (in->tape != nullptr || !in->requires_grad) continue;
        if (in->grad.empty()) {
          in->grad.assign(in->data.size(), T(0));
          continue;
        }
        for (T g : in->grad) {
          if (!std::isfinite(g)) throw NumericFault("non-finite gradient after backward");
        }
      }
    }
    clear();
  }

  /// Drops every node. Tensors recorded before the clear become detached.
  void clear() {
    nodes_.clear();
    ++generation_;
  }

 private:
  struct Node {
    std::shared_ptr<Storage> output;
    std::vector<std::shared_ptr<Storage>> inputs;
    std::function<void()> backward;
    std::string op;
  };

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 1;
  std::size_t last_visits_ = 0;
  static inline thread_local Tape* active_ = nullptr;
};

}  // namespace l2v
