// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/common.hpp"
#include "mmae/image.hpp"

#include <cstdint>
#include <vector>

namespace mmae {

// Absorbance per Beer-Lambert: V = log(I0 / I), one column per pixel.
struct OpticalDensity {
  Eigen::Matrix3Xd v;
  double i0 = 255.0;
};

// Stain color matrix W (3 x r, unit-norm nonneg columns; column 0 is
// hematoxylin, column 1 eosin) and concentration matrix H (r x n).
struct StainModel {
  Eigen::Matrix3Xd w;
  Eigen::MatrixXd h;
  double lambda = 0.1;
};

struct SnmfOptions {
  int rank = 2;
  double lambda = 0.1;
  int max_iters = 200;
  double tol = 1e-6;
  // Pixels with total OD below this carry no stain signal and are excluded
  // from the fit (still encoded afterwards).
  double background_od_threshold = 0.15;
  std::uint64_t seed = 0;
  double init_noise = 0.02;
};

struct SnmfResult {
  StainModel model;
  bool converged = false;
  int iterations = 0;
  // Objective 0.5*||V - WH||_F^2 + lambda*sum_j ||H(j,:)||_1 on the fitted
  // (foreground) pixels, recorded after every alternating iteration.
  std::vector<double> objective;
};

// Elementwise log(i0 / clamp(I, 1, i0)).
Eigen::Matrix3Xd od_from_intensity(const Eigen::Matrix3Xd& intensity, double i0);

OpticalDensity to_optical_density(const ImageU8& img, double i0 = 255.0);

// Alternating minimization: H by nonnegative coordinate descent on the
// lasso subproblem, W columns by their exact nonneg unit-norm minimizer
// (projected gradient with step 1/||H(j,:)||^2 followed by renormalization).
// Both halves never increase the objective.
SnmfResult snmf_fit(const OpticalDensity& od, const SnmfOptions& opts = {});

// H >= 0 minimizing 0.5*||V - WH||_F^2 + lambda*||H||_1 for fixed W.
// lambda = 0 reduces to nonnegative least squares.
Eigen::MatrixXd sparse_encode(const Eigen::Matrix3Xd& v, const Eigen::Matrix3Xd& w,
                              double lambda, int max_sweeps = 500, double tol = 1e-10);

// I_h = i0 * exp(-H[0,:]), I_e = i0 * exp(-H[1,:]) rendered as grayscale
// replicated to RGB. H must have exactly two rows matching width*height.
struct StainChannels {
  ImageU8 h_channel;
  ImageU8 e_channel;
};
StainChannels recover_stain_channels(const Eigen::MatrixXd& h, int width, int height,
                                     double i0 = 255.0);

// Full pipeline for one image: OD transform, SNMF fit, channel recovery.
StainTriplet separate_stains(const ImageU8& rgb, const SnmfOptions& opts = {},
                             StainModel* fitted = nullptr);

// Published canonical H&E absorbance directions used for solver
// initialization (not ground truth).
Eigen::Vector3d canonical_hematoxylin();
Eigen::Vector3d canonical_eosin();

}  // namespace mmae
