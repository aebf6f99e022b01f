// SPDX-License-Identifier: Apache-2.0
#include "mmae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mmae {

namespace {

constexpr std::uint64_t kMaeStream = 0x6d61'6531;   // "mae1"
constexpr std::uint64_t kMaskOneStream = 0x6d6f'6e65;  // "mone"
constexpr std::uint64_t kMaskAllStream = 0x6d61'6c6c;  // "mall"

std::vector<int> sorted_head(std::vector<int> perm, int count) {
  perm.resize(static_cast<size_t>(count));
  std::sort(perm.begin(), perm.end());
  return perm;
}

}  // namespace

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::rgb: return "rgb";
    case Modality::h: return "h";
    case Modality::e: return "e";
  }
  return "?";
}

PatchGrid PatchGrid::make(int image_size, int patch_size) {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw ShapeError("patch grid: image size " + std::to_string(image_size) +
                     " not divisible by patch size " + std::to_string(patch_size));
  }
  return {image_size, patch_size};
}

std::vector<int> MaskPlan::masked_for(Modality m) const {
  std::vector<bool> seen(static_cast<size_t>(num_positions), false);
  for (int p : visible_for(m)) seen[static_cast<size_t>(p)] = true;
  std::vector<int> out;
  out.reserve(static_cast<size_t>(num_positions) - visible_for(m).size());
  for (int p = 0; p < num_positions; ++p) {
    if (!seen[static_cast<size_t>(p)]) out.push_back(p);
  }
  return out;
}

int visible_count(int num_positions, double mask_ratio) {
  return static_cast<int>(std::lround((1.0 - mask_ratio) * num_positions));
}

Tensor patchify(const Tensor& image, const PatchGrid& grid) {
  if (image.rank() != 3) throw ShapeError("patchify: want [C x H x W]");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h != grid.image_size || w != grid.image_size) {
    throw ShapeError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " does not match grid size " + std::to_string(grid.image_size));
  }
  const int p = grid.patch_size, gs = grid.grid_side();
  const int m = grid.num_positions(), tok = p * p * c;
  const Arr& src = image.value();
  Arr dst(static_cast<long>(m) * tok);
  for (int gy = 0; gy < gs; ++gy) {
    for (int gx = 0; gx < gs; ++gx) {
      const long row = static_cast<long>(gy) * gs + gx;
      for (int ch = 0; ch < c; ++ch) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            dst(row * tok + static_cast<long>(ch) * p * p + static_cast<long>(py) * p + px) =
                src(static_cast<long>(ch) * h * w + static_cast<long>(gy * p + py) * w +
                    (gx * p + px));
          }
        }
      }
    }
  }
  return Tensor::from_flat({m, tok}, std::move(dst));
}

Tensor unpatchify(const Tensor& tokens, const PatchGrid& grid, int channels) {
  const int p = grid.patch_size, gs = grid.grid_side();
  const int m = grid.num_positions(), tok = p * p * channels;
  if (tokens.rank() != 2 || tokens.dim(0) != m || tokens.dim(1) != tok) {
    throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match grid");
  }
  const int hw = grid.image_size;
  const Arr& src = tokens.value();
  Arr dst(static_cast<long>(channels) * hw * hw);
  for (int gy = 0; gy < gs; ++gy) {
    for (int gx = 0; gx < gs; ++gx) {
      const long row = static_cast<long>(gy) * gs + gx;
      for (int ch = 0; ch < channels; ++ch) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            dst(static_cast<long>(ch) * hw * hw + static_cast<long>(gy * p + py) * hw +
                (gx * p + px)) =
                src(row * tok + static_cast<long>(ch) * p * p + static_cast<long>(py) * p + px);
          }
        }
      }
    }
  }
  return Tensor::from_flat({channels, hw, hw}, std::move(dst));
}

MaskPlan mae_mask_plan(const PatchGrid& grid, double mask_ratio, std::uint64_t seed) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
    throw ContractError("mae_mask_plan: mask ratio must lie in (0, 1)");
  }
  const int m = grid.num_positions();
  const int keep = visible_count(m, mask_ratio);
  if (keep <= 0 || keep >= m) {
    throw DegenerateError("mae_mask_plan: ratio " + std::to_string(mask_ratio) + " leaves " +
                          std::to_string(keep) + " of " + std::to_string(m) + " visible");
  }
  Rng rng = Rng(seed).derive(kMaeStream);
  MaskPlan plan;
  plan.num_modalities = 1;
  plan.num_positions = m;
  plan.budget = keep;
  plan.seed = seed;
  plan.visible[0] = sorted_head(rng.permutation(m), keep);
  return plan;
}

std::array<int, 3> dirichlet_counts(const DirichletAlphas& alphas, int budget, Rng& rng) {
  if (!(alphas.rgb > 0 && alphas.h > 0 && alphas.e > 0)) {
    throw ContractError("dirichlet_counts: concentration parameters must be positive");
  }
  if (budget < 0) throw ContractError("dirichlet_counts: negative budget");
  std::vector<double> p = rng.dirichlet({alphas.rgb, alphas.h, alphas.e});
  std::array<int, 3> counts{};
  std::array<double, 3> frac{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double raw = p[static_cast<size_t>(i)] * budget;
    counts[static_cast<size_t>(i)] = static_cast<int>(std::floor(raw));
    frac[static_cast<size_t>(i)] = raw - std::floor(raw);
    assigned += counts[static_cast<size_t>(i)];
  }
  // Largest remainder; ties go to the lower index.
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return frac[static_cast<size_t>(a)] > frac[static_cast<size_t>(b)]; });
  for (int k = 0; k < budget - assigned; ++k) {
    ++counts[static_cast<size_t>(order[static_cast<size_t>(k)])];
  }
  return counts;
}

MaskPlan mask_one_plan(const PatchGrid& grid, const std::array<int, 3>& counts, Rng& rng) {
  const int m = grid.num_positions();
  int budget = 0;
  for (int c : counts) {
    if (c < 0) throw ContractError("mask_one_plan: negative count");
    budget += c;
  }
  if (budget > m) {
    throw CapacityError("mask_one_plan: budget " + std::to_string(budget) +
                        " exceeds position space " + std::to_string(m));
  }
  Rng stream = rng.derive(kMaskOneStream, rng.next_u64());
  std::vector<int> perm = stream.permutation(m);
  MaskPlan plan;
  plan.num_modalities = 3;
  plan.num_positions = m;
  plan.budget = budget;
  plan.seed = rng.key();
  int at = 0;
  for (size_t mod = 0; mod < 3; ++mod) {
    std::vector<int> vis(perm.begin() + at, perm.begin() + at + counts[mod]);
    std::sort(vis.begin(), vis.end());
    plan.visible[mod] = std::move(vis);
    at += counts[mod];
  }
  return plan;
}

MaskPlan mask_all_plan(const PatchGrid& grid, const std::array<int, 3>& counts, Rng& rng) {
  const int m = grid.num_positions();
  MaskPlan plan;
  plan.num_modalities = 3;
  plan.num_positions = m;
  plan.seed = rng.key();
  Rng stream = rng.derive(kMaskAllStream, rng.next_u64());
  for (size_t mod = 0; mod < 3; ++mod) {
    if (counts[mod] < 0 || counts[mod] > m) {
      throw CapacityError("mask_all_plan: count " + std::to_string(counts[mod]) +
                          " exceeds position space " + std::to_string(m));
    }
    plan.visible[mod] = sorted_head(stream.permutation(m), counts[mod]);
    plan.budget += counts[mod];
  }
  return plan;
}

std::string mask_plan_to_text(const MaskPlan& plan) {
  std::ostringstream out;
  out << "positions " << plan.num_positions << "\n";
  out << "budget " << plan.budget << "\n";
  out << "seed " << plan.seed << "\n";
  for (size_t mod = 0; mod < static_cast<size_t>(plan.num_modalities); ++mod) {
    out << modality_name(static_cast<Modality>(mod));
    for (int p : plan.visible[mod]) out << ' ' << p;
    out << "\n";
  }
  return out.str();
}

}  // namespace mmae
