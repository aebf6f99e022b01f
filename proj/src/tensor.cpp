// SPDX-License-Identifier: Apache-2.0
#include "mmae/tensor.hpp"

namespace mmae {

namespace {
thread_local Tape* g_current_tape = nullptr;
thread_local int g_no_grad_depth = 0;
bool g_finite_checks = true;
}  // namespace

Tensor Tensor::from_flat(std::vector<int> shape, Arr values, bool requires_grad) {
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
  }
  if (numel_of(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  Tensor t;
  t.n_ = std::make_shared<detail::Node>();
  t.n_->shape = std::move(shape);
  t.n_->value = std::move(values);
  t.n_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_matrix(const RowMat& m, bool requires_grad) {
  Arr flat = Eigen::Map<const Arr>(m.data(), m.size());
  return from_flat({static_cast<int>(m.rows()), static_cast<int>(m.cols())}, std::move(flat),
                   requires_grad);
}

Tensor Tensor::from_vector(const Vec& v, bool requires_grad) {
  return from_flat({static_cast<int>(v.size())}, v.array(), requires_grad);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Arr z = Arr::Zero(numel_of(shape));
  return from_flat(std::move(shape), std::move(z), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double fill, bool requires_grad) {
  Arr z = Arr::Constant(numel_of(shape), fill);
  return from_flat(std::move(shape), std::move(z), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_flat({1}, Arr::Constant(1, v), requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
  return n_->value(0);
}

const Arr& Tensor::grad() const {
  n_->ensure_grad();
  return n_->grad;
}

Eigen::Map<const RowMat> Tensor::mat() const {
  if (rank() != 2) throw ShapeError("mat() on rank-" + std::to_string(rank()) + " tensor");
  return {n_->value.data(), dim(0), dim(1)};
}

Eigen::Map<RowMat> Tensor::mat_mut() {
  if (rank() != 2) throw ShapeError("mat_mut() on rank-" + std::to_string(rank()) + " tensor");
  return {n_->value.data(), dim(0), dim(1)};
}

Eigen::Map<const RowMat> Tensor::grad_as_mat() const {
  if (rank() != 2) throw ShapeError("grad_as_mat() on rank-" + std::to_string(rank()) + " tensor");
  n_->ensure_grad();
  return {n_->grad.data(), dim(0), dim(1)};
}

void Tape::record(Tensor out, std::function<void()> backward_fn) {
  out.node()->tape = this;
  entries_.push_back({out.node(), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  if (loss.node()->tape != this) {
    throw ContractError("loss was not produced through this tape");
  }
  for (auto& e : entries_) {
    if (e.out->grad.size() != 0) e.out->grad.setZero();
  }
  loss.node()->ensure_grad();
  loss.node()->grad(0) = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.size() == 0) continue;  // no gradient reached this op
    it->back();
  }
}

Tape* Tape::current() { return g_current_tape; }

Tape::Scope::Scope(Tape& t) {
  if (g_current_tape != nullptr) throw ContractError("nested tape scopes on one thread");
  g_current_tape = &t;
}

Tape::Scope::~Scope() { g_current_tape = nullptr; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

}  // namespace mmae
