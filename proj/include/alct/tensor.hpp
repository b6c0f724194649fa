#pragma once

// Minimal reverse-mode autodiff over row-major matrices. A Var is a shared
// node holding a value and (lazily) its gradient; ops record backward closures
// on a Tape which replays them in reverse.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace alct {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;

  Matrix<T>& grad_buffer() {
    if (grad.size() == 0) grad = Matrix<T>::Zero(value.rows(), value.cols());
    return grad;
  }
  bool has_grad() const { return grad.size() != 0; }
  void zero_grad() { grad.resize(0, 0); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> make_var(Matrix<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

/// Constant copy of a variable's value; gradients never flow through it.
template <class T>
Var<T> detach(const Var<T>& v) {
  return make_var<T>(v->value, false);
}

template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  template <class... Vs>
  bool needs_grad(const Vs&... vars) const {
    return recording_ && (false || ... || (vars && vars->requires_grad));
  }

  void record(std::function<void()> fn) {
    if (recording_) ops_.push_back(std::move(fn));
  }

  /// Seeds d(root)/d(root) = 1 and replays every recorded op in reverse.
  void backward(const Var<T>& root) {
    root->grad_buffer().setOnes();
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() { ops_.clear(); }
  std::size_t size() const { return ops_.size(); }

 private:
  bool recording_;
  std::vector<std::function<void()>> ops_;
};

}  // namespace alct
