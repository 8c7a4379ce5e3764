#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pvc {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& shape);

/// Dense row-major array with an optional gradient accumulator.
///
/// A Tensor is a shared handle: copies alias the same storage, and ops
/// never mutate their inputs. Use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }
  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }
  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<T> grad() {
    ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    const_cast<Tensor*>(this)->ensure_grad();
    return node_->grad;
  }
  void ensure_grad() {
    if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), T(0));
  }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    Tensor t(shape(), node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }
  Tensor detach() const { return Tensor(shape(), node_->data); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Records backward closures for ops whose inputs require gradients.
///
/// Constructing a tape installs it as the active tape of the calling thread;
/// destruction restores the previous one. Without an active tape no op records
/// anything, which is the inference path.
template <typename T>
class GradTape {
 public:
  GradTape() : previous_(active_) { active_ = this; }
  ~GradTape() { active_ = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  void record(std::function<void()> backward) { entries_.push_back(std::move(backward)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse recording order.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

 private:
  static inline thread_local GradTape* active_ = nullptr;
  GradTape* previous_;
  std::vector<std::function<void()>> entries_;
};

/// Streams a signature of every piecewise-linear branch decision (ReLU sign,
/// max argmax) taken while it is active. Two forward passes with equal
/// signatures took the same linear piece.
class KinkMonitor {
 public:
  KinkMonitor() : previous_(active_) { active_ = this; }
  ~KinkMonitor() { active_ = previous_; }
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  static KinkMonitor* active() { return active_; }
  void mix(std::uint64_t v) {
    hash_ ^= v + 0x9e3779b97f4a7c15ULL + (hash_ << 6) + (hash_ >> 2);
  }
  std::uint64_t signature() const { return hash_; }

 private:
  static inline thread_local KinkMonitor* active_ = nullptr;
  KinkMonitor* previous_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

namespace detail {

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (GradTape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Adds `delta` into the gradient of `node`, allocating it on first use.
template <typename T>
void accumulate(typename Tensor<T>::Node& node, std::span<const T> delta) {
  if (node.grad.size() != node.data.size()) node.grad.assign(node.data.size(), T(0));
  for (std::size_t i = 0; i < delta.size(); ++i) node.grad[i] += delta[i];
}

}  // namespace detail

namespace debug {

/// Deliberate faults for mutation testing of the gradient checker.
enum class Fault { none, conv3d_backward_sign };

void set_fault(Fault fault);
Fault active_fault();

}  // namespace debug

}  // namespace pvc
