#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pargan/errors.hpp"

namespace pargan {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor;
template <typename T>
class Tape;

namespace detail {

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  // False once the tensor is the output of a recorded op.
  bool is_leaf = true;
  std::shared_ptr<TensorImpl> grad;
  std::uint64_t id = next_tensor_id();
};

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

}  // namespace detail

/// Dense row-major tensor. Copies share storage; ops never mutate their
/// inputs, so a tensor handed out by an op is effectively immutable.
/// Parameters are the exception: optimizers update them in place between
/// steps, when no tape references them.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : impl_(std::make_shared<detail::TensorImpl<T>>()) { impl_->data.assign(1, T{0}); }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    for (auto e : shape) {
      if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel_of(shape) != static_cast<std::int64_t>(data.size())) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(const Shape& shape) { return full(shape, T{0}); }
  static Tensor ones(const Shape& shape) { return full(shape, T{1}); }
  static Tensor full(const Shape& shape, T value) {
    return Tensor(shape, std::vector<T>(static_cast<std::size_t>(numel_of(shape)), value));
  }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  template <typename Rng>
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor(shape, std::move(v));
  }

  template <typename Rng>
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor(shape, std::move(v));
  }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
  bool is_scalar() const { return impl_->data.size() == 1; }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }
  T operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  T item() const {
    if (!is_scalar()) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->is_leaf; }
  std::uint64_t id() const { return impl_->id; }

  std::optional<Tensor> grad() const {
    if (!impl_->grad) return std::nullopt;
    return Tensor(impl_->grad);
  }
  void zero_grad() { impl_->grad.reset(); }
  void accumulate_grad(const Tensor& g) {
    if (g.shape() != shape()) {
      throw DimensionError("gradient shape " + shape_str(g.shape()) + " != tensor shape " +
                           shape_str(shape()));
    }
    if (!impl_->grad) {
      impl_->grad = std::make_shared<detail::TensorImpl<T>>(*g.impl_);
      impl_->grad->id = detail::next_tensor_id();
      impl_->grad->grad.reset();
      impl_->grad->requires_grad = false;
      impl_->grad->is_leaf = true;
      return;
    }
    auto& acc = impl_->grad->data;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g.impl_->data[i];
  }

  /// Fresh leaf holding a copy of the values; no gradient history.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(shape(), std::move(v));
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  template <typename U>
  friend class Tape;
  template <typename U>
  friend Tensor<U> make_result(Shape shape, std::vector<U> data);

  std::shared_ptr<detail::TensorImpl<T>> impl_;

 public:
  // Tape bookkeeping; not part of the user-facing surface.
  void mark_recorded_() {
    impl_->requires_grad = true;
    impl_->is_leaf = false;
  }
};

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data) {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor<T>(std::move(impl));
}

/// Ordered record of differentiable ops. Constructing a tape makes it the
/// active tape of the calling thread until it is destroyed; ops whose inputs
/// require gradients append entries to it. Entries are appended in execution
/// order, so every input is produced before its consumer.
template <typename T>
class Tape {
 public:
  using Grads = std::vector<std::optional<Tensor<T>>>;
  // Receives dLoss/dOutput and which inputs need gradients.
  using BackwardFn = std::function<Grads(const Tensor<T>&, const std::vector<bool>&)>;

  struct Entry {
    std::string_view op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };

  Tape() : previous_(detail::active_tape<T>()) { detail::active_tape<T>() = this; }
  ~Tape() { detail::active_tape<T>() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape<T>(); }

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  void clear() { entries_.clear(); }

  void push(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
            BackwardFn backward) {
    output.mark_recorded_();
    entries_.push_back(Entry{op, std::move(inputs), output, std::move(backward)});
  }

 private:
  // deque keeps references stable while backward appends entries.
  std::deque<Entry> entries_;
  Tape* previous_;
};

/// Suspends recording on this thread for its lifetime.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::active_tape<T>()) { detail::active_tape<T>() = nullptr; }
  ~NoGradGuard() { detail::active_tape<T>() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>* saved_;
};

namespace detail {

template <typename T>
Tensor<T> record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> out,
                 typename Tape<T>::BackwardFn backward) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  tape->push(op, std::move(inputs), out, std::move(backward));
  return out;
}

// For ops whose backward is expressed through their own output.
template <typename T, typename Make>
Tensor<T> record_with_output(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> out,
                             Make make_backward) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  out.mark_recorded_();
  tape->push(op, std::move(inputs), out, make_backward(out));
  return out;
}

}  // namespace detail

/// Throws NonFiniteError if any value is NaN or infinite.
template <typename T>
const Tensor<T>& check_finite(const Tensor<T>& t, std::string_view what = "tensor") {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(static_cast<double>(t[i]))) {
      throw NonFiniteError(std::string(what) + " has non-finite value at flat index " +
                           std::to_string(i));
    }
  }
  return t;
}

}  // namespace pargan
