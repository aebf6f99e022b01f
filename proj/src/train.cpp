// SPDX-License-Identifier: Apache-2.0
#include "mmae/train.hpp"

#include "mmae/image.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace mmae {

namespace {

constexpr std::uint64_t kAugStream = 0xa0931;
constexpr std::uint64_t kMaskStream = 0x3a5c1;
constexpr std::uint64_t kShuffleStream = 0x54f1e;
constexpr std::uint64_t kFoldStream = 0xf01d5;

bool finite(double x) { return std::isfinite(x); }

}  // namespace

void TrainConfig::validate() const {
  if (base_lr <= 0 || warmup_start_lr <= 0) throw ConfigError("learning rates must be positive");
  if (weight_decay < 0) throw ConfigError("negative weight decay");
  if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) {
    throw ConfigError("betas must lie in (0, 1)");
  }
  if (epochs < 1) throw ConfigError("need at least one epoch");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("warmup epochs must be < epochs");
  }
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(crop_scale_min > 0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
    throw ConfigError("crop scale range must be within (0, 1]");
  }
  if (flip_prob < 0 || flip_prob > 1) throw ConfigError("flip probability must lie in [0, 1]");
  if (grad_clip <= 0) throw ConfigError("gradient clip must be positive");
  if (folds < 2) throw ConfigError("cross validation needs at least 2 folds");
  if (mode == Mode::pretrain && !(mask_ratio > 0 && mask_ratio < 1) && budget <= 0) {
    throw ConfigError("pretraining needs a mask ratio in (0,1) or an explicit budget");
  }
}

AdamWState AdamWState::init(const ModelParams& params,
                            const std::function<bool(const std::string&)>& trainable_pred) {
  AdamWState st;
  for (const auto& [name, t] : params.entries()) {
    st.m.push_back(Arr::Zero(t.numel()));
    st.v.push_back(Arr::Zero(t.numel()));
    st.trainable.push_back(trainable_pred ? trainable_pred(name) : true);
  }
  return st;
}

void adamw_step(ModelParams& params, AdamWState& state, double lr, double weight_decay,
                double beta1, double beta2, double eps) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size()) {
    throw ContractError("optimizer state does not match the parameter table");
  }
  if (lr <= 0) throw ContractError("adamw_step: lr must be positive");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < entries.size(); ++i) {
    if (!state.trainable[i]) continue;
    Tensor& p = entries[i].second;
    const Arr& g = p.grad();
    if (g.size() != p.numel()) throw ContractError("gradient/parameter shape mismatch");
    Arr& m = state.m[i];
    Arr& v = state.v[i];
    // Decoupled decay first, then the moment update.
    p.data() -= lr * weight_decay * p.data();
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.square();
    p.data() -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

double lr_at(long step, long total_steps, const TrainConfig& cfg) {
  if (step < 0 || step > total_steps) throw ContractError("lr_at: step out of range");
  const long warmup =
      std::llround(static_cast<double>(total_steps) * cfg.warmup_epochs / cfg.epochs);
  if (step < warmup) {
    return cfg.warmup_start_lr +
           (cfg.base_lr - cfg.warmup_start_lr) * static_cast<double>(step) / warmup;
  }
  if (total_steps == warmup) return cfg.base_lr;
  const double progress = static_cast<double>(step - warmup) / (total_steps - warmup);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double clip_global_grad_norm(ModelParams& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params.entries()) {
    if (t.has_grad()) sq += t.grad().square().sum();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double factor = max_norm / norm;
    for (auto& [name, t] : params.entries()) {
      if (t.has_grad()) t.grad_mut() *= factor;
    }
  }
  return norm;
}

namespace {

double bilinear_sample(const ImageU8& src, double x, double y, int c) {
  const int x0 = std::max(0, std::min(src.width - 1, static_cast<int>(std::floor(x))));
  const int y0 = std::max(0, std::min(src.height - 1, static_cast<int>(std::floor(y))));
  const int x1 = std::min(src.width - 1, x0 + 1);
  const int y1 = std::min(src.height - 1, y0 + 1);
  const double fx = std::min(1.0, std::max(0.0, x - x0));
  const double fy = std::min(1.0, std::max(0.0, y - y0));
  const double top = src.at(x0, y0, c) * (1 - fx) + src.at(x1, y0, c) * fx;
  const double bot = src.at(x0, y1, c) * (1 - fx) + src.at(x1, y1, c) * fx;
  return top * (1 - fy) + bot * fy;
}

ImageU8 crop_resize_flip(const ImageU8& src, const AugmentTrace& t, int out_size) {
  ImageU8 out(out_size, out_size);
  if (t.crop_side == out_size) {
    for (int y = 0; y < out_size; ++y) {
      for (int x = 0; x < out_size; ++x) {
        const int sx = t.crop_x + (t.flip ? out_size - 1 - x : x);
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = src.at(sx, t.crop_y + y, c);
      }
    }
    return out;
  }
  const double scale = static_cast<double>(t.crop_side) / out_size;
  for (int y = 0; y < out_size; ++y) {
    for (int x = 0; x < out_size; ++x) {
      const int ox = t.flip ? out_size - 1 - x : x;
      const double sx = t.crop_x + (ox + 0.5) * scale - 0.5;
      const double sy = t.crop_y + (y + 0.5) * scale - 0.5;
      for (int c = 0; c < 3; ++c) {
        out.at(x, y, c) = quantize_u8(bilinear_sample(src, sx, sy, c));
      }
    }
  }
  return out;
}

}  // namespace

StainTriplet augment(const StainTriplet& triplet, const TrainConfig& cfg, int out_size,
                     Rng& rng, AugmentTrace* trace) {
  const ImageU8& rgb = triplet.rgb;
  const bool has_stains =
      triplet.h_channel.num_pixels() > 0 && triplet.e_channel.num_pixels() > 0;
  if (has_stains && (triplet.h_channel.width != rgb.width || triplet.e_channel.width != rgb.width ||
                     triplet.h_channel.height != rgb.height ||
                     triplet.e_channel.height != rgb.height)) {
    throw ContractError("augment: modality images differ in size");
  }
  const int base = std::min(rgb.width, rgb.height);
  const double area = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
  AugmentTrace t;
  t.crop_side = std::max(1, std::min(base, static_cast<int>(std::lround(std::sqrt(area) * base))));
  t.crop_x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(rgb.width - t.crop_side + 1)));
  t.crop_y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(rgb.height - t.crop_side + 1)));
  t.flip = rng.uniform() < cfg.flip_prob;
  if (trace != nullptr) *trace = t;

  StainTriplet out;
  out.rgb = crop_resize_flip(rgb, t, out_size);
  if (has_stains) {
    out.h_channel = crop_resize_flip(triplet.h_channel, t, out_size);
    out.e_channel = crop_resize_flip(triplet.e_channel, t, out_size);
  }
  return out;
}

namespace {

RowMat gather_target_rows(const Tensor& tokens, const std::vector<int>& positions) {
  RowMat out(static_cast<Eigen::Index>(positions.size()), tokens.dim(1));
  auto tm = tokens.mat();
  for (size_t i = 0; i < positions.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = tm.row(positions[i]);
  }
  return out;
}

Dataset subset(const Dataset& ds, const std::vector<int>& idx) {
  Dataset out;
  out.class_names = ds.class_names;
  out.split_tag = ds.split_tag;
  for (int i : idx) out.items.push_back(ds.items[static_cast<size_t>(i)]);
  return out;
}

void save_training_checkpoint(const std::string& dir, const std::string& file,
                              const ModelParams& params, const AdamWState& opt,
                              std::uint64_t seed, long step, long epoch,
                              const std::string& snapshot) {
  std::filesystem::create_directories(dir);
  save_checkpoint((std::filesystem::path(dir) / file).string(),
                  make_checkpoint(params, &opt, seed, static_cast<std::uint64_t>(step),
                                  static_cast<std::uint64_t>(epoch), snapshot));
}

}  // namespace

PretrainResult pretrain(const Dataset& data, const ModelConfig& cfg, const TrainConfig& tcfg,
                        const PretrainOptions& opts) {
  cfg.validate();
  tcfg.validate();
  if (data.items.empty()) throw ContractError("pretrain: empty dataset");
  const bool mmae = cfg.enc.modalities == 3;
  const PatchGrid grid = cfg.enc.grid();
  const int m = grid.num_positions();
  const int budget = tcfg.budget > 0 ? tcfg.budget : visible_count(m, tcfg.mask_ratio);
  // Budget must stay below M: at budget = M a Dirichlet draw can hand every
  // position to RGB, leaving nothing to reconstruct.
  if (mmae && (budget < 1 || budget >= m)) {
    throw ConfigError("visible-token budget " + std::to_string(budget) +
                      " outside [1, " + std::to_string(m - 1) + "]");
  }
  if (mmae) {
    for (const DataItem& item : data.items) {
      if (item.images.h_channel.num_pixels() == 0 || item.images.e_channel.num_pixels() == 0) {
        throw ContractError("pretrain: MMAE needs H and E channels for every image");
      }
    }
  }

  PretrainResult result{ModelParams::init(cfg, tcfg.seed), AdamWState{}, {}, 0};
  result.opt = AdamWState::init(result.params);
  long start_epoch = 0;
  if (opts.resume != nullptr) {
    load_params(*opts.resume, result.params);
    load_opt_state(*opts.resume, result.params, result.opt);
    start_epoch = static_cast<long>(opts.resume->epoch);
    result.steps_done = static_cast<long>(opts.resume->step);
    if (start_epoch >= tcfg.epochs) throw ConfigError("resume checkpoint is already complete");
  }

  const long n = data.size();
  const long steps_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
  const long total_steps = steps_per_epoch * tcfg.epochs;
  const long end_epoch =
      opts.stop_after_epochs > 0
          ? std::min<long>(tcfg.epochs, start_epoch + opts.stop_after_epochs)
          : tcfg.epochs;

  Rng master(tcfg.seed);
  ModelParams last_good = result.params.clone();
  AdamWState last_good_opt = result.opt;
  long last_good_epoch = start_epoch;

  auto save_last_good = [&] {
    if (!opts.checkpoint_dir.empty()) {
      save_training_checkpoint(opts.checkpoint_dir, "last_good.ckpt", last_good, last_good_opt,
                               tcfg.seed, last_good_epoch * steps_per_epoch, last_good_epoch,
                               opts.config_snapshot);
    }
  };

  for (long epoch = start_epoch; epoch < end_epoch; ++epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);
    Rng shuffle_rng = master.derive(kShuffleStream, static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    long loss_count = 0;
    for (long step = 0; step < steps_per_epoch; ++step) {
      const long lo = step * tcfg.batch_size;
      const long hi = std::min<long>(n, lo + tcfg.batch_size);
      const long batch_n = hi - lo;
      const double lr =
          lr_at(epoch * steps_per_epoch + step, total_steps, tcfg);

      Tape tape;
      try {
        Tape::Scope scope(tape);
        for (long bi = lo; bi < hi; ++bi) {
          const DataItem& item = data.items[static_cast<size_t>(order[static_cast<size_t>(bi)])];
          Rng aug_rng = master.derive(kAugStream, static_cast<std::uint64_t>(epoch),
                                      static_cast<std::uint64_t>(bi));
          StainTriplet aug = augment(item.images, tcfg, cfg.enc.image_size, aug_rng);

          std::array<Tensor, 3> tokens;
          tokens[0] = patchify(image_to_tensor(aug.rgb), grid);
          if (mmae) {
            tokens[1] = patchify(image_to_tensor(aug.h_channel), grid);
            tokens[2] = patchify(image_to_tensor(aug.e_channel), grid);
          }

          Rng mask_rng = master.derive(kMaskStream, static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(bi));
          MaskPlan plan;
          if (mmae) {
            auto counts = dirichlet_counts(tcfg.alphas, budget, mask_rng);
            plan = mask_one_plan(grid, counts, mask_rng);
          } else {
            plan = mae_mask_plan(grid, tcfg.mask_ratio, mask_rng.next_u64());
          }

          Tensor latents = encode(tokens, plan, result.params, cfg.enc);
          Tensor pred = mmae ? decode_mmae(latents, plan, result.params, cfg.enc, cfg.dec)
                             : decode_mae(latents, plan, result.params, cfg.enc, cfg.dec);
          const std::vector<int> targets =
              mmae ? mmae_target_positions(plan) : plan.masked_for(Modality::rgb);
          Tensor loss =
              reconstruction_loss(pred, gather_target_rows(tokens[0], targets), tcfg.norm_pix);
          const double loss_value = loss.item();
          if (!finite(loss_value)) throw NumericalFault("pretrain loss is not finite");
          loss_sum += loss_value;
          ++loss_count;
          tape.backward(scale(loss, 1.0 / static_cast<double>(batch_n)));
        }
      } catch (const NumericalFault&) {
        save_last_good();
        throw;
      }
      clip_global_grad_norm(result.params, tcfg.grad_clip);
      adamw_step(result.params, result.opt, lr, tcfg.weight_decay, tcfg.beta1, tcfg.beta2,
                 tcfg.adam_eps);
      result.params.zero_grads();
      ++result.steps_done;
    }

    result.epoch_loss.push_back(loss_sum / static_cast<double>(loss_count));
    last_good = result.params.clone();
    last_good_opt = result.opt;
    last_good_epoch = epoch + 1;

    if (!opts.checkpoint_dir.empty() && opts.checkpoint_every > 0 &&
        (epoch + 1) % opts.checkpoint_every == 0) {
      save_training_checkpoint(opts.checkpoint_dir, "epoch" + std::to_string(epoch + 1) + ".ckpt",
                               result.params, result.opt, tcfg.seed, result.steps_done, epoch + 1,
                               opts.config_snapshot);
    }
  }

  if (!opts.checkpoint_dir.empty()) {
    save_training_checkpoint(opts.checkpoint_dir, "final.ckpt", result.params, result.opt,
                             tcfg.seed, result.steps_done, end_epoch, opts.config_snapshot);
  }
  return result;
}

double evaluate_accuracy(const ModelParams& params, const Dataset& data,
                         const EncoderConfig& cfg) {
  if (data.items.empty()) throw ContractError("evaluate_accuracy: empty dataset");
  NoGradGuard no_grad;
  const PatchGrid grid = cfg.grid();
  long correct = 0;
  for (const DataItem& item : data.items) {
    Tensor tokens = patchify(image_to_tensor(item.images.rgb), grid);
    Tensor logits = finetune_forward(tokens, params, cfg);
    Eigen::Index best;
    logits.mat().row(0).maxCoeff(&best);
    correct += static_cast<int>(best) == item.label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

EvalReport finetune(const ModelParams& pretrained, const Dataset& labeled, const Dataset& test,
                    const ModelConfig& cfg, const TrainConfig& tcfg) {
  cfg.validate();
  tcfg.validate();
  if (labeled.size() < tcfg.folds) {
    throw ConfigError("fewer labeled samples (" + std::to_string(labeled.size()) +
                      ") than folds (" + std::to_string(tcfg.folds) + ")");
  }
  for (const DataItem& item : labeled.items) {
    if (item.label < 0 || item.label >= cfg.num_classes) {
      throw ContractError("label " + std::to_string(item.label) + " outside [0, " +
                          std::to_string(cfg.num_classes) + ")");
    }
  }

  // Stratified fold assignment.
  std::vector<int> fold_of(labeled.items.size());
  {
    std::map<int, std::vector<int>> by_label;
    for (size_t i = 0; i < labeled.items.size(); ++i) {
      by_label[labeled.items[i].label].push_back(static_cast<int>(i));
    }
    Rng master(tcfg.seed);
    for (auto& [label, idx] : by_label) {
      Rng rng = master.derive(kFoldStream, static_cast<std::uint64_t>(label));
      rng.shuffle(idx);
      for (size_t i = 0; i < idx.size(); ++i) {
        fold_of[static_cast<size_t>(idx[i])] = static_cast<int>(i % tcfg.folds);
      }
    }
  }

  const PatchGrid grid = cfg.enc.grid();
  EvalReport report;
  report.num_labeled = static_cast<int>(labeled.size());

  for (int fold = 0; fold < tcfg.folds; ++fold) {
    std::vector<int> train_idx, val_idx;
    for (size_t i = 0; i < labeled.items.size(); ++i) {
      (fold_of[i] == fold ? val_idx : train_idx).push_back(static_cast<int>(i));
    }
    if (train_idx.empty() || val_idx.empty()) {
      throw ConfigError("fold " + std::to_string(fold) + " is empty");
    }

    ModelParams params = pretrained.clone();
    // Fresh classifier per fold.
    params.at("head.fc.w").data().setZero();
    params.at("head.fc.b").data().setZero();
    params.at("head.norm.g").data().setOnes();
    params.at("head.norm.b").data().setZero();

    const bool freeze = tcfg.freeze_encoder;
    AdamWState opt = AdamWState::init(params, [&](const std::string& name) {
      if (name.rfind("head.", 0) == 0) return true;
      if (freeze) return false;
      return name.rfind("enc.", 0) == 0;  // decoder is not part of fine-tuning
    });

    Rng master(tcfg.seed);
    const long n = static_cast<long>(train_idx.size());
    const long steps_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
    const long total_steps = steps_per_epoch * tcfg.epochs;
    long global_step = 0;

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
      Rng shuffle_rng = master.derive(kShuffleStream, static_cast<std::uint64_t>(fold),
                                      static_cast<std::uint64_t>(epoch));
      std::vector<int> order = train_idx;
      shuffle_rng.shuffle(order);
      for (long step = 0; step < steps_per_epoch; ++step) {
        const long lo = step * tcfg.batch_size;
        const long hi = std::min<long>(n, lo + tcfg.batch_size);
        const double lr = lr_at(global_step, total_steps, tcfg);

        Tape tape;
        {
          Tape::Scope scope(tape);
          std::vector<Tensor> rows;
          std::vector<int> labels;
          for (long bi = lo; bi < hi; ++bi) {
            const DataItem& item = labeled.items[static_cast<size_t>(order[static_cast<size_t>(bi)])];
            Rng aug_rng = master.derive(kAugStream, static_cast<std::uint64_t>(fold))
                              .derive(static_cast<std::uint64_t>(epoch),
                                      static_cast<std::uint64_t>(bi));
            StainTriplet aug = augment(item.images, tcfg, cfg.enc.image_size, aug_rng);
            Tensor tokens = patchify(image_to_tensor(aug.rgb), grid);
            rows.push_back(finetune_forward(tokens, params, cfg.enc));
            labels.push_back(item.label);
          }
          Tensor logits = concat_rows(rows);
          Tensor loss = cross_entropy(logits, labels);
          if (!finite(loss.item())) throw NumericalFault("finetune loss is not finite");
          tape.backward(loss);
        }
        clip_global_grad_norm(params, tcfg.grad_clip);
        adamw_step(params, opt, lr, tcfg.weight_decay, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
        params.zero_grads();
        ++global_step;
      }
    }

    report.per_fold_val.push_back(evaluate_accuracy(params, subset(labeled, val_idx), cfg.enc));
    report.per_fold.push_back(evaluate_accuracy(params, test, cfg.enc));
  }

  double sum = 0;
  for (double a : report.per_fold) sum += a;
  report.accuracy = sum / static_cast<double>(report.per_fold.size());
  return report;
}

RowMat embed_dataset(const ModelParams& params, const Dataset& data, const EncoderConfig& cfg) {
  if (data.items.empty()) throw ContractError("embed_dataset: empty dataset");
  const PatchGrid grid = cfg.grid();
  RowMat out(static_cast<Eigen::Index>(data.items.size()), cfg.embed_dim());
  for (size_t i = 0; i < data.items.size(); ++i) {
    Tensor tokens = patchify(image_to_tensor(data.items[i].images.rgb), grid);
    out.row(static_cast<Eigen::Index>(i)) =
        embed_image(tokens, params, cfg).transpose();
  }
  return out;
}

std::vector<int> knn_predict(const RowMat& train_embeddings, const std::vector<int>& train_labels,
                             const RowMat& test_embeddings, int k, int num_classes) {
  const Eigen::Index n = train_embeddings.rows();
  if (k < 1) throw ContractError("knn: k must be >= 1");
  if (k > n) throw ContractError("knn: k exceeds the train set size");
  if (static_cast<Eigen::Index>(train_labels.size()) != n) {
    throw ShapeError("knn: label count mismatch");
  }

  auto normalized = [](const RowMat& m) {
    RowMat out = m;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double norm = out.row(i).norm();
      if (norm > 0) out.row(i) /= norm;
    }
    return out;
  };
  RowMat train_n = normalized(train_embeddings);
  RowMat test_n = normalized(test_embeddings);

  std::vector<int> predictions;
  predictions.reserve(static_cast<size_t>(test_n.rows()));
  std::vector<int> idx(static_cast<size_t>(n));
  for (Eigen::Index t = 0; t < test_n.rows(); ++t) {
    Vec sims = train_n * test_n.row(t).transpose();
    for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(i);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
      if (sims(a) != sims(b)) return sims(a) > sims(b);
      return a < b;
    });
    std::vector<int> votes(static_cast<size_t>(num_classes), 0);
    std::vector<double> simsum(static_cast<size_t>(num_classes), 0.0);
    for (int i = 0; i < k; ++i) {
      const int label = train_labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];
      votes[static_cast<size_t>(label)] += 1;
      simsum[static_cast<size_t>(label)] += sims(idx[static_cast<size_t>(i)]);
    }
    int best = 0;
    for (int c = 1; c < num_classes; ++c) {
      if (votes[static_cast<size_t>(c)] > votes[static_cast<size_t>(best)] ||
          (votes[static_cast<size_t>(c)] == votes[static_cast<size_t>(best)] &&
           simsum[static_cast<size_t>(c)] > simsum[static_cast<size_t>(best)])) {
        best = c;
      }
    }
    predictions.push_back(best);
  }
  return predictions;
}

EvalReport knn_eval(const ModelParams& params, const Dataset& train, const Dataset& test, int k,
                    const EncoderConfig& cfg) {
  RowMat train_emb = embed_dataset(params, train, cfg);
  RowMat test_emb = embed_dataset(params, test, cfg);
  std::vector<int> train_labels;
  for (const DataItem& item : train.items) train_labels.push_back(item.label);
  const int num_classes = std::max(train.num_classes(), test.num_classes());
  std::vector<int> pred = knn_predict(train_emb, train_labels, test_emb, k, num_classes);

  long correct = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    correct += pred[i] == test.items[i].label;
  }
  EvalReport report;
  report.k = k;
  report.num_labeled = static_cast<int>(train.size());
  report.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  return report;
}

void write_loss_curve_csv(const std::string& path, const std::vector<double>& epoch_loss) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,loss\n" << std::setprecision(17);
  for (size_t i = 0; i < epoch_loss.size(); ++i) {
    out << i << "," << epoch_loss[i] << "\n";
  }
}

void write_eval_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "fold,accuracy\n" << std::setprecision(17);
  for (size_t i = 0; i < report.per_fold.size(); ++i) {
    out << i << "," << report.per_fold[i] << "\n";
  }
  out << "mean," << report.accuracy << "\n";
}

Checkpoint make_checkpoint(const ModelParams& params, const AdamWState* opt, std::uint64_t seed,
                           std::uint64_t step, std::uint64_t epoch,
                           const std::string& config_snapshot) {
  Checkpoint ckpt;
  ckpt.seed = seed;
  ckpt.step = step;
  ckpt.epoch = epoch;
  ckpt.config = config_snapshot;
  for (const auto& [name, t] : params.entries()) {
    ckpt.tensors.emplace_back("p." + name, Tensor::from_flat(t.shape(), t.value()));
  }
  if (opt != nullptr) {
    const auto& entries = params.entries();
    if (opt->m.size() != entries.size()) throw ContractError("optimizer state mismatch");
    for (size_t i = 0; i < entries.size(); ++i) {
      ckpt.tensors.emplace_back("opt.m." + entries[i].first,
                                Tensor::from_flat({static_cast<int>(opt->m[i].size())}, opt->m[i]));
      ckpt.tensors.emplace_back("opt.v." + entries[i].first,
                                Tensor::from_flat({static_cast<int>(opt->v[i].size())}, opt->v[i]));
    }
  }
  return ckpt;
}

void load_params(const Checkpoint& ckpt, ModelParams& into) {
  size_t stored = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("p.", 0) == 0) ++stored;
  }
  if (stored != into.entries().size()) {
    throw FormatError("checkpoint holds " + std::to_string(stored) + " parameters, model has " +
                      std::to_string(into.entries().size()));
  }
  for (auto& [name, t] : into.entries()) {
    const Tensor* src = ckpt.find("p." + name);
    if (src == nullptr) throw FormatError("checkpoint is missing parameter " + name);
    if (src->shape() != t.shape()) {
      throw FormatError("checkpoint shape mismatch for " + name);
    }
    t.data() = src->value();
  }
}

void load_opt_state(const Checkpoint& ckpt, const ModelParams& params, AdamWState& into) {
  into = AdamWState::init(params);
  into.step = static_cast<long>(ckpt.step);
  const auto& entries = params.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    const Tensor* m = ckpt.find("opt.m." + entries[i].first);
    const Tensor* v = ckpt.find("opt.v." + entries[i].first);
    if (m == nullptr || v == nullptr) {
      throw FormatError("checkpoint is missing optimizer state for " + entries[i].first);
    }
    if (m->numel() != entries[i].second.numel() || v->numel() != entries[i].second.numel()) {
      throw FormatError("optimizer state shape mismatch for " + entries[i].first);
    }
    into.m[i] = m->value();
    into.v[i] = v->value();
  }
}

}  // namespace mmae
