// SPDX-License-Identifier: Apache-2.0
#include "mmae/tensor_ops.hpp"

#include <cmath>

namespace mmae {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;
using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;

void accum(const NodePtr& n, const Arr& g) {
  if (!n->requires_grad) return;
  n->ensure_grad();
  n->grad += g;
}

void accum_mat(const NodePtr& n, const RowMat& g) {
  if (!n->requires_grad) return;
  n->ensure_grad();
  Eigen::Map<RowMat>(n->grad.data(), g.rows(), g.cols()) += g;
}

Eigen::Map<const RowMat> as_mat(const NodePtr& n) {
  return {n->value.data(), n->shape[0], n->shape[1]};
}

bool wants_grad(std::initializer_list<const Tensor*> ins) {
  if (!grad_enabled() || Tape::current() == nullptr) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Registers the op on the current tape (when tracking) and runs the eager
// finite check.
Tensor attach(const char* name, Tensor out, std::initializer_list<const Tensor*> ins,
              std::function<void(detail::Node&)> back) {
  if (finite_checks() && !out.value().allFinite()) {
    throw NumericalFault(std::string(name) + " produced NaN/Inf");
  }
  if (wants_grad(ins)) {
    out.node()->requires_grad = true;
    Tape::current()->record(out, [on = out.node(), f = std::move(back)]() { f(*on); });
  }
  return out;
}

void check_same_shape(const char* name, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
double norm_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014327; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::from_flat(a.shape(), a.value() + b.value());
  return attach("add", out, {&a, &b}, [an = a.node(), bn = b.node()](detail::Node& o) {
    accum(an, o.grad);
    accum(bn, o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = Tensor::from_flat(a.shape(), a.value() - b.value());
  return attach("sub", out, {&a, &b}, [an = a.node(), bn = b.node()](detail::Node& o) {
    accum(an, o.grad);
    accum(bn, -o.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::from_flat(a.shape(), a.value() * b.value());
  return attach("mul", out, {&a, &b}, [an = a.node(), bn = b.node()](detail::Node& o) {
    accum(an, o.grad * bn->value);
    accum(bn, o.grad * an->value);
  });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::from_flat(a.shape(), a.value() * s);
  return attach("scale", out, {&a}, [an = a.node(), s](detail::Node& o) {
    accum(an, o.grad * s);
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.numel() != m.dim(1)) {
    throw ShapeError("add_rowvec: " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
  }
  RowMat out = m.mat();
  out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(v.value().data(), v.numel());
  Tensor t = Tensor::from_flat(m.shape(), Eigen::Map<const Arr>(out.data(), out.size()));
  return attach("add_rowvec", t, {&m, &v}, [mn = m.node(), vn = v.node()](detail::Node& o) {
    accum(mn, o.grad);
    if (vn->requires_grad) {
      Eigen::Map<const RowMat> g(o.grad.data(), o.shape[0], o.shape[1]);
      Vec colsum = g.colwise().sum().transpose();
      accum(vn, Eigen::Map<const Arr>(colsum.data(), colsum.size()));
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  RowMat c = a.mat() * b.mat();
  Tensor out = Tensor::from_matrix(c);
  return attach("matmul", out, {&a, &b}, [an = a.node(), bn = b.node()](detail::Node& o) {
    Eigen::Map<const RowMat> dc(o.grad.data(), o.shape[0], o.shape[1]);
    if (an->requires_grad) accum_mat(an, dc * as_mat(bn).transpose());
    if (bn->requires_grad) accum_mat(bn, as_mat(an).transpose() * dc);
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-" + std::to_string(a.rank()));
  RowMat t = a.mat().transpose();
  Tensor out = Tensor::from_matrix(t);
  return attach("transpose", out, {&a}, [an = a.node()](detail::Node& o) {
    Eigen::Map<const RowMat> g(o.grad.data(), o.shape[0], o.shape[1]);
    accum_mat(an, g.transpose());
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: bad axis");
  if (r == 1) {
    // Single row case: reuse the 2-D path.
    Arr v = x.value();
    double m = v.maxCoeff();
    Arr e = (v - m).exp();
    Arr y = e / e.sum();
    Tensor out = Tensor::from_flat(x.shape(), std::move(y));
    return attach("softmax", out, {&x}, [xn = x.node()](detail::Node& o) {
      const Arr& y = o.value;
      double dot = (o.grad * y).sum();
      accum(xn, (o.grad - dot) * y);
    });
  }
  if (r != 2) throw ShapeError("softmax: rank-" + std::to_string(r) + " unsupported");
  RowMat v = x.mat();
  RowMat y(v.rows(), v.cols());
  if (axis == 1) {
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      RowArr row = v.row(i).array();
      RowArr e = (row - row.maxCoeff()).exp();
      y.row(i) = (e / e.sum()).matrix();
    }
  } else {
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      Arr col = v.col(j).array();
      Arr e = (col - col.maxCoeff()).exp();
      y.col(j) = (e / e.sum()).matrix();
    }
  }
  Tensor out = Tensor::from_matrix(y);
  return attach("softmax", out, {&x}, [xn = x.node(), axis](detail::Node& o) {
    Eigen::Map<const RowMat> y(o.value.data(), o.shape[0], o.shape[1]);
    Eigen::Map<const RowMat> dy(o.grad.data(), o.shape[0], o.shape[1]);
    RowMat dx(y.rows(), y.cols());
    if (axis == 1) {
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        double dot = (dy.row(i).array() * y.row(i).array()).sum();
        dx.row(i) = ((dy.row(i).array() - dot) * y.row(i).array()).matrix();
      }
    } else {
      for (Eigen::Index j = 0; j < y.cols(); ++j) {
        double dot = (dy.col(j).array() * y.col(j).array()).sum();
        dx.col(j) = ((dy.col(j).array() - dot) * y.col(j).array()).matrix();
      }
    }
    accum_mat(xn, dx);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 2) throw ShapeError("layer_norm: rank-2 input required");
  const int d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine params must have length " + std::to_string(d));
  }
  if (eps <= 0) throw ContractError("layer_norm: eps must be positive");
  RowMat v = x.mat();
  const Eigen::Index n = v.rows();
  RowMat xhat(n, d);
  Vec inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mu = v.row(i).mean();
    RowArr centered = v.row(i).array() - mu;
    double var = centered.square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(i) = is;
    xhat.row(i) = (centered * is).matrix();
  }
  Eigen::Map<const Eigen::RowVectorXd> g(gamma.value().data(), d);
  Eigen::Map<const Eigen::RowVectorXd> b(beta.value().data(), d);
  RowMat y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
  Tensor out = Tensor::from_matrix(y);
  return attach("layer_norm", out,
                {&x, &gamma, &beta},
                [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat, inv_std](detail::Node& o) {
                  const Eigen::Index n = xhat.rows(), d = xhat.cols();
                  Eigen::Map<const RowMat> dy(o.grad.data(), n, d);
                  Eigen::Map<const Eigen::RowVectorXd> g(gn->value.data(), d);
                  if (xn->requires_grad) {
                    RowMat dx(n, d);
                    for (Eigen::Index i = 0; i < n; ++i) {
                      RowArr gy = dy.row(i).array() * g.array();
                      double m1 = gy.mean();
                      double m2 = (gy * xhat.row(i).array()).mean();
                      dx.row(i) = ((gy - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
                    }
                    accum_mat(xn, dx);
                  }
                  if (gn->requires_grad) {
                    Vec dgamma = (dy.array() * xhat.array()).colwise().sum().transpose();
                    accum(gn, Eigen::Map<const Arr>(dgamma.data(), d));
                  }
                  if (bn->requires_grad) {
                    Vec dbeta = dy.colwise().sum().transpose();
                    accum(bn, Eigen::Map<const Arr>(dbeta.data(), d));
                  }
                });
}

Tensor gelu(const Tensor& x) {
  Arr v = x.value();
  Arr y(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) y(i) = v(i) * norm_cdf(v(i));
  Tensor out = Tensor::from_flat(x.shape(), std::move(y));
  return attach("gelu", out, {&x}, [xn = x.node()](detail::Node& o) {
    if (!xn->requires_grad) return;
    const Arr& v = xn->value;
    Arr d(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      d(i) = norm_cdf(v(i)) + v(i) * norm_pdf(v(i));
    }
    accum(xn, o.grad * d);
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw ShapeError("gather_rows: rank-2 input required");
  const int n = x.dim(0), d = x.dim(1);
  for (int i : idx) {
    if (i < 0 || i >= n) {
      throw IndexError("gather_rows: index " + std::to_string(i) + " out of [0," +
                       std::to_string(n) + ")");
    }
  }
  RowMat y(static_cast<Eigen::Index>(idx.size()), d);
  auto xm = x.mat();
  for (size_t i = 0; i < idx.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = xm.row(idx[i]);
  Tensor out = Tensor::from_matrix(y);
  return attach("gather_rows", out, {&x}, [xn = x.node(), idx](detail::Node& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    Eigen::Map<RowMat> dx(xn->grad.data(), xn->shape[0], xn->shape[1]);
    Eigen::Map<const RowMat> dy(o.grad.data(), o.shape[0], o.shape[1]);
    for (size_t i = 0; i < idx.size(); ++i) {
      dx.row(idx[i]) += dy.row(static_cast<Eigen::Index>(i));
    }
  });
}

Tensor slice_cols(const Tensor& x, int start, int count) {
  if (x.rank() != 2) throw ShapeError("slice_cols: rank-2 input required");
  if (start < 0 || count < 0 || start + count > x.dim(1)) {
    throw IndexError("slice_cols: [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of width " + std::to_string(x.dim(1)));
  }
  RowMat y = x.mat().middleCols(start, count);
  Tensor out = Tensor::from_matrix(y);
  return attach("slice_cols", out, {&x}, [xn = x.node(), start, count](detail::Node& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    Eigen::Map<RowMat> dx(xn->grad.data(), xn->shape[0], xn->shape[1]);
    Eigen::Map<const RowMat> dy(o.grad.data(), o.shape[0], o.shape[1]);
    dx.middleCols(start, count) += dy;
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const int d = parts[0].dim(1);
  int n = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(1) != d) throw ShapeError("concat_rows: column mismatch");
    n += p.dim(0);
  }
  RowMat y(n, d);
  int at = 0;
  for (const Tensor& p : parts) {
    y.middleRows(at, p.dim(0)) = p.mat();
    at += p.dim(0);
  }
  Tensor out = Tensor::from_matrix(y);
  std::vector<NodePtr> nodes;
  std::vector<int> counts;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    counts.push_back(p.dim(0));
  }
  bool track = false;
  for (const Tensor& p : parts) track = track || p.requires_grad();
  // initializer_list cannot be built dynamically; inline the attach logic.
  if (finite_checks() && !out.value().allFinite()) {
    throw NumericalFault("concat_rows produced NaN/Inf");
  }
  if (grad_enabled() && Tape::current() != nullptr && track) {
    out.node()->requires_grad = true;
    Tape::current()->record(out, [on = out.node(), nodes, counts]() {
      Eigen::Map<const RowMat> dy(on->grad.data(), on->shape[0], on->shape[1]);
      int at = 0;
      for (size_t i = 0; i < nodes.size(); ++i) {
        accum_mat(nodes[i], dy.middleRows(at, counts[i]));
        at += counts[i];
      }
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const int n = parts[0].dim(0);
  int d = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != n) throw ShapeError("concat_cols: row mismatch");
    d += p.dim(1);
  }
  RowMat y(n, d);
  int at = 0;
  for (const Tensor& p : parts) {
    y.middleCols(at, p.dim(1)) = p.mat();
    at += p.dim(1);
  }
  Tensor out = Tensor::from_matrix(y);
  std::vector<NodePtr> nodes;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.dim(1));
  }
  bool track = false;
  for (const Tensor& p : parts) track = track || p.requires_grad();
  if (finite_checks() && !out.value().allFinite()) {
    throw NumericalFault("concat_cols produced NaN/Inf");
  }
  if (grad_enabled() && Tape::current() != nullptr && track) {
    out.node()->requires_grad = true;
    Tape::current()->record(out, [on = out.node(), nodes, widths]() {
      Eigen::Map<const RowMat> dy(on->grad.data(), on->shape[0], on->shape[1]);
      int at = 0;
      for (size_t i = 0; i < nodes.size(); ++i) {
        accum_mat(nodes[i], dy.middleCols(at, widths[i]));
        at += widths[i];
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = Tensor::scalar(x.value().sum());
  return attach("sum_all", out, {&x}, [xn = x.node()](detail::Node& o) {
    accum(xn, Arr::Constant(xn->value.size(), o.grad(0)));
  });
}

Tensor mean_all(const Tensor& x) {
  Tensor out = Tensor::scalar(x.value().mean());
  return attach("mean_all", out, {&x}, [xn = x.node()](detail::Node& o) {
    accum(xn, Arr::Constant(xn->value.size(), o.grad(0) / static_cast<double>(xn->value.size())));
  });
}

Tensor mean_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("mean_rows: rank-2 input required");
  RowMat y = x.mat().colwise().mean();
  Tensor out = Tensor::from_matrix(y);
  return attach("mean_rows", out, {&x}, [xn = x.node()](detail::Node& o) {
    if (!xn->requires_grad) return;
    const int n = xn->shape[0];
    Eigen::Map<const RowMat> dy(o.grad.data(), 1, o.shape[1]);
    RowMat dx = dy.replicate(n, 1) / static_cast<double>(n);
    accum_mat(xn, dx);
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: rank-2 logits required");
  const int b = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= c) throw IndexError("cross_entropy: label " + std::to_string(y));
  }
  auto lm = logits.mat();
  RowMat probs(b, c);
  double loss = 0.0;
  for (int i = 0; i < b; ++i) {
    RowArr row = lm.row(i).array();
    double m = row.maxCoeff();
    RowArr e = (row - m).exp();
    double z = e.sum();
    probs.row(i) = (e / z).matrix();
    loss += m + std::log(z) - lm(i, labels[static_cast<size_t>(i)]);
  }
  Tensor out = Tensor::scalar(loss / b);
  return attach("cross_entropy", out, {&logits},
                [ln = logits.node(), probs, labels](detail::Node& o) {
                  if (!ln->requires_grad) return;
                  RowMat d = probs;
                  for (Eigen::Index i = 0; i < d.rows(); ++i) {
                    d(i, labels[static_cast<size_t>(i)]) -= 1.0;
                  }
                  d *= o.grad(0) / static_cast<double>(d.rows());
                  accum_mat(ln, d);
                });
}

}  // namespace mmae
