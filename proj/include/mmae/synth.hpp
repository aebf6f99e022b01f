// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/dataset.hpp"
#include "mmae/stain.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mmae {

// Per-class tissue character: nucleus placement plus background washes, all
// as uniform ranges sampled per image.
struct ClassSpec {
  std::string name;
  double density_min = 2.0;  // expected nuclei per 1000 pixels
  double density_max = 4.0;
  double radius_min = 1.5;  // px
  double radius_max = 2.5;
  double nucleus_hema_min = 0.7;  // hematoxylin added at a nucleus center
  double nucleus_hema_max = 1.1;
  double wash_hema_min = 0.08;  // uniform background concentrations
  double wash_hema_max = 0.15;
  double wash_eosin_min = 0.25;
  double wash_eosin_max = 0.45;
};

struct SynthSpec {
  int num_classes = 4;
  int image_size = 32;
  int per_class = 100;
  std::vector<ClassSpec> classes;  // defaulted when empty
  Eigen::Matrix<double, 3, 2> w_true;
  double noise_std = 1.0;  // additive Gaussian on 0..255 intensities
  std::uint64_t seed = 0;

  SynthSpec();
  void validate() const;
};

// Four stock tissue characters: dense small nuclei, sparse large nuclei,
// stroma-heavy (high eosin, few nuclei), mucus-like (low total density).
std::vector<ClassSpec> default_class_specs();

// Renders RGB as I0 * exp(-W* H*) + noise; H and E channels come straight
// from the ground-truth concentration rows, so the generator doubles as the
// oracle for stain separation. Deterministic per seed.
Dataset synth_generate(const SynthSpec& spec);

// Ground-truth concentration cap; keeps intensities above the range where
// 8-bit quantization would dominate the optical density.
inline constexpr double kMaxConcentration = 3.0;

}  // namespace mmae
