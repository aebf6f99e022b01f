// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/checkpoint.hpp"
#include "mmae/dataset.hpp"
#include "mmae/masking.hpp"
#include "mmae/model.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mmae {

struct TrainConfig {
  enum class Mode { pretrain, finetune };

  double base_lr = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 1600;
  int warmup_epochs = 40;
  double warmup_start_lr = 1e-6;
  int batch_size = 312;
  std::uint64_t seed = 0;

  double mask_ratio = 0.75;
  int budget = -1;  // MMAE visible-token budget; -1 derives it from mask_ratio
  DirichletAlphas alphas{8.0, 1.0, 1.0};
  bool norm_pix = true;

  double crop_scale_min = 0.8;
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;

  Mode mode = Mode::pretrain;
  double grad_clip = 5.0;
  bool freeze_encoder = false;
  int folds = 5;

  void validate() const;
};

// First/second moments per parameter, in ModelParams iteration order.
// `trainable` gates both the moment update and the weight decay.
struct AdamWState {
  std::vector<Arr> m;
  std::vector<Arr> v;
  std::vector<bool> trainable;
  long step = 0;

  static AdamWState init(const ModelParams& params,
                         const std::function<bool(const std::string&)>& trainable_pred = {});
};

// Decoupled weight decay (param -= lr*wd*param), then the Adam moment update
// with bias correction.
void adamw_step(ModelParams& params, AdamWState& state, double lr, double weight_decay,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Linear ramp warmup_start_lr -> base_lr over the warmup steps, then a half
// cosine down to exactly zero at total_steps.
double lr_at(long step, long total_steps, const TrainConfig& cfg);

// Scales every gradient so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_grad_norm(ModelParams& params, double max_norm);

struct AugmentTrace {
  int crop_x = 0;
  int crop_y = 0;
  int crop_side = 0;
  bool flip = false;
};

// One geometric draw (random resized crop + optional horizontal flip)
// applied identically to RGB, H and E.
StainTriplet augment(const StainTriplet& triplet, const TrainConfig& cfg, int out_size,
                     Rng& rng, AugmentTrace* trace = nullptr);

struct PretrainOptions {
  std::string checkpoint_dir;    // empty: no checkpoints
  int checkpoint_every = 0;      // epochs; 0 writes only final.ckpt
  int stop_after_epochs = -1;    // stop early (schedule still spans cfg.epochs)
  const Checkpoint* resume = nullptr;
  std::string config_snapshot;   // embedded in written checkpoints
};

struct PretrainResult {
  ModelParams params;
  AdamWState opt;
  std::vector<double> epoch_loss;  // mean per-sample loss, one entry per epoch run
  long steps_done = 0;
};

// Per step: augment, patchify, draw a mask plan, encode, decode,
// reconstruction loss, backward, AdamW with the cosine schedule. MAE when
// cfg.enc.modalities == 1, MMAE (mask-one + cross-attention decode) when 3.
// A NaN loss aborts with a numerical fault after writing last_good.ckpt.
PretrainResult pretrain(const Dataset& data, const ModelConfig& cfg, const TrainConfig& tcfg,
                        const PretrainOptions& opts = {});

struct EvalReport {
  double accuracy = 0.0;
  std::vector<double> per_fold;      // test accuracy per fold
  std::vector<double> per_fold_val;  // validation-fold accuracy per fold
  int k = 0;
  int num_labeled = 0;
};

// K-fold cross validation over the labeled subset: fine-tune encoder + head
// on k-1 folds, validate on the held-out fold, then score the test split.
EvalReport finetune(const ModelParams& pretrained, const Dataset& labeled, const Dataset& test,
                    const ModelConfig& cfg, const TrainConfig& tcfg);

// Plain classifier accuracy of params on a dataset (RGB, mask-free).
double evaluate_accuracy(const ModelParams& params, const Dataset& data,
                         const EncoderConfig& cfg);

// Cosine-similarity majority vote over k neighbors; vote ties break by
// summed similarity, then by class index.
std::vector<int> knn_predict(const RowMat& train_embeddings, const std::vector<int>& train_labels,
                             const RowMat& test_embeddings, int k, int num_classes);

EvalReport knn_eval(const ModelParams& params, const Dataset& train, const Dataset& test, int k,
                    const EncoderConfig& cfg);

// Global-token embeddings, one row per item.
RowMat embed_dataset(const ModelParams& params, const Dataset& data, const EncoderConfig& cfg);

void write_loss_curve_csv(const std::string& path, const std::vector<double>& epoch_loss);
void write_eval_report_csv(const std::string& path, const EvalReport& report);

// Checkpoint bridging. Parameters are stored as p.<name>, optimizer moments
// as opt.m.<name> / opt.v.<name>.
Checkpoint make_checkpoint(const ModelParams& params, const AdamWState* opt, std::uint64_t seed,
                           std::uint64_t step, std::uint64_t epoch,
                           const std::string& config_snapshot);
void load_params(const Checkpoint& ckpt, ModelParams& into);
void load_opt_state(const Checkpoint& ckpt, const ModelParams& params, AdamWState& into);

}  // namespace mmae
