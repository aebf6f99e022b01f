// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/common.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace mmae {

class Tape;

namespace detail {
struct Node {
  std::vector<int> shape;
  Arr value;   // flat, row-major
  Arr grad;    // size 0 until first touched
  bool requires_grad = false;
  Tape* tape = nullptr;  // tape of the producing op; null for leaves and constants

  long numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() == 0) grad = Arr::Zero(value.size());
  }
};
}  // namespace detail

// Dense n-d array of doubles. Value-semantics handle over a shared node;
// immutable after creation except for the grad buffer (and leaf values,
// which the optimizer updates between tapes).
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_flat(std::vector<int> shape, Arr values, bool requires_grad = false);
  static Tensor from_matrix(const RowMat& m, bool requires_grad = false);
  static Tensor from_vector(const Vec& v, bool requires_grad = false);
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  long numel() const { return n_->numel(); }

  const Arr& value() const { return n_->value; }
  Arr& data() { return n_->value; }  // leaf mutation only (init, optimizer)
  double item() const;

  bool requires_grad() const { return n_->requires_grad; }
  const Arr& grad() const;
  Arr& grad_mut() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool has_grad() const { return n_->grad.size() != 0; }
  void zero_grad() {
    if (n_->grad.size() != 0) n_->grad.setZero();
  }

  // 2-D Eigen views over the flat storage.
  Eigen::Map<const RowMat> mat() const;
  Eigen::Map<RowMat> mat_mut();
  Eigen::Map<const RowMat> grad_as_mat() const;

  std::shared_ptr<detail::Node> node() const { return n_; }

 private:
  std::shared_ptr<detail::Node> n_;
};

// Ordered record of differentiable ops. Ops append themselves during the
// forward pass (topological order by construction); backward replays the
// record in reverse, accumulating into grads additively. One tape per
// thread of execution; nesting scopes is a contract error.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Tensor out, std::function<void()> backward_fn);
  std::size_t size() const { return entries_.size(); }

  // Seeds d(loss)=1 and replays. Intermediate grads are reset per call, so
  // calling twice doubles leaf grads.
  void backward(const Tensor& loss);

  static Tape* current();

  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
  };

 private:
  struct Entry {
    std::shared_ptr<detail::Node> out;
    std::function<void()> back;
  };
  std::vector<Entry> entries_;
};

// Disables recording within the enclosing scope (finite-difference probes,
// evaluation loops).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Eager NaN/Inf detection after every op. On by default; turning it off
// skips the per-op scan.
void set_finite_checks(bool on);
bool finite_checks();

}  // namespace mmae
