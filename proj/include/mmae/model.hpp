// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/masking.hpp"
#include "mmae/tensor.hpp"
#include "mmae/tensor_ops.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmae {

struct EncoderConfig {
  int depth = 12;
  int heads = 6;
  int head_dim = 64;
  int mlp_ratio = 4;
  int num_global_tokens = 1;
  int image_size = 224;
  int patch_size = 16;
  int modalities = 1;  // 1 = single stream, 3 = rgb + h + e

  int embed_dim() const { return heads * head_dim; }
  int patch_dim() const { return patch_size * patch_size * 3; }
  PatchGrid grid() const { return PatchGrid::make(image_size, patch_size); }
  void validate() const;
};

struct DecoderConfig {
  int depth = 2;
  int heads = 3;
  int embed_dim = 192;
  bool has_cross_attention = false;

  int head_dim() const { return embed_dim / heads; }
  void validate() const;
};

struct ModelConfig {
  EncoderConfig enc;
  DecoderConfig dec;
  int num_classes = 8;
  void validate() const;
};

// Named parameter collection. Dotted names are unique and iteration order is
// fixed, so optimizer sweeps and checkpoints are deterministic.
class ModelParams {
 public:
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::pair<std::string, Tensor>>& entries() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return params_; }

  void zero_grads();
  long total_parameters() const;
  ModelParams clone() const;

 private:
  void insert(const std::string& name, Tensor t);
  std::vector<std::pair<std::string, Tensor>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Fixed 2-D sinusoidal table [grid_side^2 x dim]: first half of the channels
// encodes the row coordinate, second half the column. Not learned.
RowMat sincos_pos_embed_2d(int grid_side, int dim);

// Attention probabilities of one encoder block, one [N x N] matrix per head.
struct AttnCapture {
  int layer = 0;
  std::vector<RowMat> head_probs;
};

// Per-modality visible tokens projected and position-embedded, global tokens
// prepended: the encoder input sequence [G + budget x D].
Tensor assemble_encoder_input(const std::array<Tensor, 3>& tokens_per_modality,
                              const MaskPlan& plan, const ModelParams& params,
                              const EncoderConfig& cfg);

// Full encoder: assemble, depth pre-norm blocks, final norm.
Tensor encode(const std::array<Tensor, 3>& tokens_per_modality, const MaskPlan& plan,
              const ModelParams& params, const EncoderConfig& cfg,
              AttnCapture* capture = nullptr);

// Mask-free single-modality forward used by fine-tuning, kNN, embeddings and
// attention maps.
Tensor encode_full(const Tensor& tokens_rgb, const ModelParams& params,
                   const EncoderConfig& cfg, AttnCapture* capture = nullptr);

// MAE decoder: mask tokens at hidden positions, self-attention only.
// Returns predicted pixels for the masked positions, [num_masked x P^2*3].
Tensor decode_mae(const Tensor& latents, const MaskPlan& plan, const ModelParams& params,
                  const EncoderConfig& enc_cfg, const DecoderConfig& dec_cfg);

// MMAE decoder: one cross-attention layer over the complete encoder output,
// then self-attention blocks. Reconstructs RGB only; returns predictions for
// every position not visible as an RGB token, in ascending position order.
Tensor decode_mmae(const Tensor& latents, const MaskPlan& plan, const ModelParams& params,
                   const EncoderConfig& enc_cfg, const DecoderConfig& dec_cfg);

// Positions decode_mmae predicts: ascending complement of the RGB-visible
// set (H/E-only positions and fully hidden ones).
std::vector<int> mmae_target_positions(const MaskPlan& plan);

// Mean squared error over masked patches. With norm_pix each target patch is
// standardized by its own mean/variance (eps 1e-6) first.
Tensor reconstruction_loss(const Tensor& pred, const RowMat& target_pixels, bool norm_pix);
RowMat normalize_patch_targets(const RowMat& targets, double eps = 1e-6);

// Mask-free RGB encoder forward, mean over all encoded tokens (global
// included), layer norm, linear head. Returns [1 x num_classes] logits.
Tensor finetune_forward(const Tensor& tokens_rgb, const ModelParams& params,
                        const EncoderConfig& cfg);

// Global-token embedding (first sequence row after the final norm).
Vec embed_image(const Tensor& tokens_rgb, const ModelParams& params, const EncoderConfig& cfg);

// Per-head global-token attention heatmaps for one encoder layer: the
// global-to-patch softmax row reshaped to the grid, upsampled (nearest) to
// image size, with values at or below the given quantile zeroed. Values lie
// in [0, 1]. raw_grid, when given, receives the unthresholded grid maps.
std::vector<RowMat> attention_maps(const Tensor& tokens_rgb, const ModelParams& params,
                                   const EncoderConfig& cfg, int layer,
                                   double threshold_quantile,
                                   std::vector<RowMat>* raw_grid = nullptr);

}  // namespace mmae
