#pragma once

// Dense double-precision tensors with a reverse-mode computation record.
//
// A Tensor is a shared handle to a node holding shape, values and an
// accumulated gradient. Operations executed while a ComputationRecord is
// active on the current thread (see Recording) append one entry per
// primitive, and ComputationRecord::backward replays them in reverse.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tqn {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> adjoint;  // scratch for the sweep in progress
  bool requires_grad = false;
  std::uint64_t sweep = 0;
};

using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_sweep_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> values() const { return node_->value; }
  // Direct mutation is meant for leaves (parameters, inputs); mutating a
  // recorded intermediate invalidates the record.
  std::span<double> mutable_values() { return node_->value; }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " values");
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(size(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Fresh leaf with copied values and no history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  const detail::NodePtr& node() const { return node_; }

 private:
  detail::NodePtr node_;
};

// Ordered list of executed primitives supporting one reverse sweep at a time.
// Sweeps accumulate into Tensor::grad additively; intermediate adjoints are
// scratch, so replaying a sweep adds exactly the same contribution again.
class ComputationRecord {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::vector<detail::NodePtr> nodes, BackwardFn backward) {
    entries_.push_back(Entry{std::move(nodes), std::move(backward)});
  }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!loss.requires_grad()) throw std::logic_error("backward: loss has no recorded history");
    const auto id = detail::next_sweep_id();
    std::vector<detail::Node*> touched;
    auto touch = [&](detail::Node* n) {
      if (!n->requires_grad || n->sweep == id) return;
      n->sweep = id;
      n->adjoint.assign(n->value.size(), 0.0);
      touched.push_back(n);
    };
    for (auto& e : entries_) {
      for (auto& n : e.nodes) touch(n.get());
    }
    touch(loss.node().get());
    loss.node()->adjoint[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    for (auto* n : touched) {
      for (double g : n->adjoint) {
        if (!std::isfinite(g)) throw NumericError("backward: non-finite gradient");
      }
      if (n->grad.empty()) {
        n->grad = std::move(n->adjoint);
      } else {
        for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->adjoint[i];
      }
      n->adjoint = {};
    }
  }

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::vector<detail::NodePtr> nodes;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
};

namespace detail {
inline ComputationRecord*& active_record() {
  thread_local ComputationRecord* current = nullptr;
  return current;
}
}  // namespace detail

// Installs a record as the active one for this thread for the guard's lifetime.
// Passing nullptr suspends recording.
class Recording {
 public:
  explicit Recording(ComputationRecord* record) : previous_(detail::active_record()) {
    detail::active_record() = record;
  }
  ~Recording() { detail::active_record() = previous_; }
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  ComputationRecord* previous_;
};

class NoRecording : public Recording {
 public:
  NoRecording() : Recording(nullptr) {}
};

inline void require_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(where) + ": non-finite value");
  }
}

}  // namespace tqn
