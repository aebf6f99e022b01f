// SPDX-License-Identifier: Apache-2.0
#include "mmae/stain.hpp"

#include "mmae/rng.hpp"

#include <algorithm>
#include <cmath>

namespace mmae {

namespace {

double snmf_objective(const Eigen::Matrix3Xd& v, const Eigen::Matrix3Xd& w,
                      const Eigen::MatrixXd& h, double lambda) {
  return 0.5 * (v - w * h).squaredNorm() + lambda * h.sum();  // h >= 0, so sum == l1
}

// One full sweep of exact per-coordinate minimization, vectorized across the
// independent per-pixel problems.
void coordinate_sweep(const Eigen::MatrixXd& gram, const Eigen::MatrixXd& wtv,
                      double lambda, Eigen::MatrixXd& h) {
  const int r = static_cast<int>(h.rows());
  for (int j = 0; j < r; ++j) {
    const double diag = std::max(gram(j, j), 1e-12);
    h.row(j) = (h.row(j) + (wtv.row(j) - gram.row(j) * h - Eigen::RowVectorXd::Constant(
                                                               h.cols(), lambda)) /
                               diag)
                   .cwiseMax(0.0);
  }
}

Eigen::MatrixXd encode_with_gram(const Eigen::MatrixXd& gram, const Eigen::MatrixXd& wtv,
                                 double lambda, int max_sweeps, double tol,
                                 Eigen::MatrixXd h0) {
  Eigen::MatrixXd h = std::move(h0);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    Eigen::MatrixXd prev = h;
    coordinate_sweep(gram, wtv, lambda, h);
    const double delta = (h - prev).cwiseAbs().maxCoeff();
    const double scale = std::max(1.0, h.cwiseAbs().maxCoeff());
    if (delta <= tol * scale) break;
  }
  return h;
}

// Labels the column with the larger red-to-green absorbance ratio as
// hematoxylin; lexicographic tie-break keeps repeated fits bit-stable.
void canonicalize_columns(Eigen::Matrix3Xd& w, Eigen::MatrixXd& h) {
  if (w.cols() != 2) return;
  const double lhs = w(0, 0) * w(1, 1);  // cross-multiplied red/green ratios
  const double rhs = w(0, 1) * w(1, 0);
  bool swap = lhs < rhs;
  if (lhs == rhs) {
    swap = std::lexicographical_compare(w.col(1).data(), w.col(1).data() + 3, w.col(0).data(),
                                        w.col(0).data() + 3);
  }
  if (swap) {
    w.col(0).swap(w.col(1));
    h.row(0).swap(h.row(1));
  }
}

}  // namespace

Eigen::Vector3d canonical_hematoxylin() {
  return Eigen::Vector3d(0.65, 0.70, 0.29).normalized();
}

Eigen::Vector3d canonical_eosin() { return Eigen::Vector3d(0.07, 0.99, 0.11).normalized(); }

Eigen::Matrix3Xd od_from_intensity(const Eigen::Matrix3Xd& intensity, double i0) {
  if (i0 <= 0) throw ContractError("od_from_intensity: i0 must be positive");
  return (intensity.cwiseMax(1.0).cwiseMin(i0).array() / i0).log().matrix() * -1.0;
}

OpticalDensity to_optical_density(const ImageU8& img, double i0) {
  Eigen::Matrix3Xd intensity(3, img.num_pixels());
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const long p = static_cast<long>(y) * img.width + x;
      for (int c = 0; c < 3; ++c) intensity(c, p) = img.at(x, y, c);
    }
  }
  return {od_from_intensity(intensity, i0), i0};
}

Eigen::MatrixXd sparse_encode(const Eigen::Matrix3Xd& v, const Eigen::Matrix3Xd& w,
                              double lambda, int max_sweeps, double tol) {
  const Eigen::MatrixXd gram = w.transpose() * w;
  const Eigen::MatrixXd wtv = w.transpose() * v;
  return encode_with_gram(gram, wtv, lambda, max_sweeps, tol,
                          Eigen::MatrixXd::Zero(w.cols(), v.cols()));
}

SnmfResult snmf_fit(const OpticalDensity& od, const SnmfOptions& opts) {
  const Eigen::Matrix3Xd& v = od.v;
  if (opts.rank < 1) throw ContractError("snmf_fit: rank must be >= 1");
  if (opts.lambda < 0) throw ContractError("snmf_fit: lambda must be >= 0");
  if (v.cols() < opts.rank) throw ContractError("snmf_fit: fewer pixels than stains");
  if (v.maxCoeff() <= 0.0) throw DegenerateError("snmf_fit: blank image (all-zero density)");

  // Foreground selection.
  std::vector<int> fg;
  for (Eigen::Index p = 0; p < v.cols(); ++p) {
    if (v.col(p).sum() >= opts.background_od_threshold) fg.push_back(static_cast<int>(p));
  }
  if (static_cast<int>(fg.size()) < opts.rank) {
    throw DegenerateError("snmf_fit: no foreground pixels above threshold");
  }
  Eigen::Matrix3Xd vf(3, static_cast<Eigen::Index>(fg.size()));
  for (size_t i = 0; i < fg.size(); ++i) vf.col(static_cast<Eigen::Index>(i)) = v.col(fg[i]);

  // Canonical H&E initialization plus seeded noise; extra columns random.
  Rng rng = Rng(opts.seed).derive(0x57a1'0000);
  Eigen::Matrix3Xd w(3, opts.rank);
  for (int j = 0; j < opts.rank; ++j) {
    Eigen::Vector3d base;
    if (j == 0) {
      base = canonical_hematoxylin();
    } else if (j == 1) {
      base = canonical_eosin();
    } else {
      base = Eigen::Vector3d(rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0),
                             rng.uniform(0.2, 1.0));
    }
    for (int c = 0; c < 3; ++c) base(c) = std::max(base(c) + rng.normal() * opts.init_noise, 0.0);
    const double norm = base.norm();
    w.col(j) = norm > 0 ? (base / norm).eval() : Eigen::Vector3d(1, 0, 0);
  }

  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(opts.rank, vf.cols());
  SnmfResult result;
  result.objective.reserve(static_cast<size_t>(opts.max_iters) + 1);
  double prev_obj = snmf_objective(vf, w, h, opts.lambda);
  result.objective.push_back(prev_obj);

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    // H-step: coordinate descent on the nonnegative lasso, warm-started.
    const Eigen::MatrixXd gram = w.transpose() * w;
    const Eigen::MatrixXd wtv = w.transpose() * vf;
    h = encode_with_gram(gram, wtv, opts.lambda, 50, 1e-12, std::move(h));

    // W-step: per-column exact minimizer over the nonneg unit sphere.
    const Eigen::MatrixXd hht = h * h.transpose();
    const Eigen::MatrixXd vht = vf * h.transpose();
    for (int j = 0; j < opts.rank; ++j) {
      if (hht(j, j) <= 0.0) continue;  // unused stain, keep direction
      Eigen::Vector3d b = vht.col(j) - w * hht.col(j) + w.col(j) * hht(j, j);
      Eigen::Vector3d wj = b.cwiseMax(0.0);
      const double norm = wj.norm();
      if (norm > 0) w.col(j) = wj / norm;
    }

    const double obj = snmf_objective(vf, w, h, opts.lambda);
    result.objective.push_back(obj);
    result.iterations = iter + 1;
    // Alternation is non-increasing by construction; a negative drop can
    // only be float noise, so it also counts as converged.
    const double rel_drop = (prev_obj - obj) / std::max(prev_obj, 1e-30);
    if (rel_drop < opts.tol) {
      result.converged = true;
      break;
    }
    prev_obj = obj;
  }

  // Encode every pixel (background included) against the fitted dictionary.
  Eigen::MatrixXd h_full = sparse_encode(v, w, opts.lambda);
  canonicalize_columns(w, h_full);
  result.model = {w, std::move(h_full), opts.lambda};
  return result;
}

StainChannels recover_stain_channels(const Eigen::MatrixXd& h, int width, int height,
                                     double i0) {
  if (h.rows() != 2) {
    throw ContractError("recover_stain_channels: need exactly 2 stain rows, got " +
                        std::to_string(h.rows()));
  }
  if (h.cols() != static_cast<long>(width) * height) {
    throw ShapeError("recover_stain_channels: pixel count mismatch");
  }
  StainChannels out{ImageU8(width, height), ImageU8(width, height)};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const long p = static_cast<long>(y) * width + x;
      const std::uint8_t ih = quantize_u8(i0 * std::exp(-h(0, p)));
      const std::uint8_t ie = quantize_u8(i0 * std::exp(-h(1, p)));
      for (int c = 0; c < 3; ++c) {
        out.h_channel.at(x, y, c) = ih;
        out.e_channel.at(x, y, c) = ie;
      }
    }
  }
  return out;
}

StainTriplet separate_stains(const ImageU8& rgb, const SnmfOptions& opts, StainModel* fitted) {
  SnmfOptions o = opts;
  o.rank = 2;
  SnmfResult fit = snmf_fit(to_optical_density(rgb, 255.0), o);
  StainChannels ch = recover_stain_channels(fit.model.h, rgb.width, rgb.height, 255.0);
  if (fitted != nullptr) *fitted = fit.model;
  return {rgb, std::move(ch.h_channel), std::move(ch.e_channel)};
}

}  // namespace mmae
