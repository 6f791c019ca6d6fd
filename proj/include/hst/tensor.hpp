#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copying it aliases the same storage, the same
// way a framework tensor would. Ops executed while a Tape is active (see
// TapeScope) append their adjoint rule to that tape whenever any input
// requires a gradient; Tape::backward replays those rules in reverse order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include "hst/errors.hpp"

namespace hst {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "float32 or float64 only");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

// Allocator whose value-initialization is a no-op, so freshly sized op
// outputs are not zero-filled before being overwritten.
template <class U>
struct default_init_allocator : std::allocator<U> {
  template <class V>
  struct rebind {
    using other = default_init_allocator<V>;
  };
  using std::allocator<U>::allocator;
  template <class V>
  void construct(V* p) noexcept(std::is_nothrow_default_constructible_v<V>) {
    ::new (static_cast<void*>(p)) V;
  }
  template <class V, class... Args>
  void construct(V* p, Args&&... args) {
    ::new (static_cast<void*>(p)) V(std::forward<Args>(args)...);
  }
};

template <class T>
using Buffer = std::vector<T, default_init_allocator<T>>;

struct uninitialized_t {};
inline constexpr uninitialized_t uninitialized{};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Live/peak byte accounting for tensor storage, per thread.
struct MemoryStats {
  std::size_t live = 0;
  std::size_t peak = 0;
};

inline MemoryStats& memory_stats() {
  thread_local MemoryStats stats;
  return stats;
}

inline void reset_peak_memory() { memory_stats().peak = memory_stats().live; }

// Analytic FLOP accumulator. Contraction ops add 2 per multiply-accumulate,
// softmax adds 3 per element; everything else is free.
class FlopCounter {
 public:
  void add(std::uint64_t n) { total_ += n; }
  std::uint64_t total() const { return total_; }
  void reset() { total_ = 0; }

 private:
  std::uint64_t total_ = 0;
};

inline FlopCounter*& active_flop_counter() {
  thread_local FlopCounter* counter = nullptr;
  return counter;
}

inline void count_flops(std::uint64_t n) {
  if (auto* c = active_flop_counter()) c->add(n);
}

class FlopScope {
 public:
  explicit FlopScope(FlopCounter& c) : prev_(active_flop_counter()) { active_flop_counter() = &c; }
  ~FlopScope() { active_flop_counter() = prev_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* prev_;
};

template <class T>
class Tensor {
  struct Storage {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;

    Storage(Shape s, Buffer<T> d) : shape(std::move(s)), data(std::move(d)) { track(+1, data.size()); }
    ~Storage() {
      track(-1, data.size());
      track(-1, grad.size());
    }
    Storage(const Storage&) = delete;
    Storage& operator=(const Storage&) = delete;

    static void track(int sign, std::size_t n) {
      auto& m = memory_stats();
      const std::size_t bytes = n * sizeof(T);
      if (sign > 0) {
        m.live += bytes;
        m.peak = std::max(m.peak, m.live);
      } else {
        m.live -= std::min(m.live, bytes);
      }
    }
  };

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) {
    check_extents(shape);
    const std::size_t n = numel_of(shape);
    s_ = std::make_shared<Storage>(std::move(shape), Buffer<T>(n, fill));
  }

  /// Contents are indeterminate; for op outputs that overwrite every element.
  Tensor(Shape shape, uninitialized_t) {
    check_extents(shape);
    const std::size_t n = numel_of(shape);
    s_ = std::make_shared<Storage>(std::move(shape), Buffer<T>(n));
  }

  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), std::span<const T>(data)) {}

  Tensor(Shape shape, std::span<const T> data) {
    check_extents(shape);
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    s_ = std::make_shared<Storage>(std::move(shape), Buffer<T>(data.begin(), data.end()));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(s_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }

  /// Clearing the flag also releases any gradient buffer.
  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (!on) drop_grad();
  }

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }

  /// Gradient buffer, allocated as zeros on first use. Const because the
  /// handle is shallow: adjoint rules accumulate through const captures.
  std::span<T> grad_buffer() const {
    if (s_->grad.empty()) {
      s_->grad.assign(s_->data.size(), T(0));
      Storage::track(+1, s_->grad.size());
    }
    return s_->grad;
  }

  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }

  void drop_grad() {
    Storage::track(-1, s_->grad.size());
    s_->grad.clear();
    s_->grad.shrink_to_fit();
  }

  /// Deep copy of the values only.
  Tensor clone() const { return Tensor(shape(), data()); }

  bool is_same(const Tensor& o) const { return s_ == o.s_; }

 private:
  static void check_extents(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }

  std::shared_ptr<Storage> s_;
};

/// Ordered record of adjoint rules for executed ops.
template <class T>
class Tape {
 public:
  void record(std::function<void()> adjoint) { entries_.push_back(std::move(adjoint)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and runs adjoints in reverse execution order.
  void backward(Tensor<T> loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad()) return;
    loss.grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> entries_;
};

template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target for the current thread while alive.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Suspends recording, e.g. for evaluation passes inside a training scope.
template <class T>
class NoGradScope {
 public:
  NoGradScope() : prev_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace hst
