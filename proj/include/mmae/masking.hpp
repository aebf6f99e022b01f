// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/rng.hpp"
#include "mmae/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace mmae {

// Fixed modality order used everywhere a sequence is assembled.
enum class Modality { rgb = 0, h = 1, e = 2 };
inline constexpr std::array<Modality, 3> kModalityOrder = {Modality::rgb, Modality::h,
                                                           Modality::e};
const char* modality_name(Modality m);

// Non-overlapping square patch grid: stride equals patch size.
struct PatchGrid {
  int image_size = 0;
  int patch_size = 0;

  static PatchGrid make(int image_size, int patch_size);
  int stride() const { return patch_size; }
  int grid_side() const { return image_size / patch_size; }
  int num_positions() const { return grid_side() * grid_side(); }
};

struct DirichletAlphas {
  double rgb = 8.0;
  double h = 1.0;
  double e = 1.0;
};

// Per-modality visible patch positions. Sorted, deterministic per seed.
struct MaskPlan {
  std::array<std::vector<int>, 3> visible;
  int num_modalities = 1;
  int num_positions = 0;
  int budget = 0;
  std::uint64_t seed = 0;

  const std::vector<int>& visible_for(Modality m) const {
    return visible[static_cast<size_t>(m)];
  }
  // Complement of the visible set, ascending.
  std::vector<int> masked_for(Modality m) const;
};

// Round((1 - mask_ratio) * M): the visible-token budget for a ratio. The
// count is a pure function of (M, ratio) and never varies with the seed.
int visible_count(int num_positions, double mask_ratio);

// image: [C x H x W] with H = W = grid.image_size. Row i of the result is
// patch i (row-major grid order) flattened channel-major; exact inverse of
// unpatchify.
Tensor patchify(const Tensor& image, const PatchGrid& grid);
Tensor unpatchify(const Tensor& tokens, const PatchGrid& grid, int channels = 3);

// Single-modality plan: visible positions drawn uniformly without
// replacement.
MaskPlan mae_mask_plan(const PatchGrid& grid, double mask_ratio, std::uint64_t seed);

// Splits `budget` tokens across the three modalities by a Dir(alpha) draw,
// rounded by largest remainder so the counts always sum to budget.
std::array<int, 3> dirichlet_counts(const DirichletAlphas& alphas, int budget, Rng& rng);

// Mask-one: one shared permutation of the position space, split by counts;
// every position is visible in at most one modality.
MaskPlan mask_one_plan(const PatchGrid& grid, const std::array<int, 3>& counts, Rng& rng);

// Mask-all: each modality samples independently; cross-modality duplicates
// allowed.
MaskPlan mask_all_plan(const PatchGrid& grid, const std::array<int, 3>& counts, Rng& rng);

// Text record (modality name + sorted indices per line) for the `maskplan`
// subcommand and figures.
std::string mask_plan_to_text(const MaskPlan& plan);

}  // namespace mmae
