// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: synth | stainsep | maskplan | pretrain | finetune |
// knn | attnmap | embed. Every run directory receives the fully resolved
// config; all randomness flows from --seed.
#include <CLI11.hpp>

#include "mmae/checkpoint.hpp"
#include "mmae/dataset.hpp"
#include "mmae/image.hpp"
#include "mmae/masking.hpp"
#include "mmae/model.hpp"
#include "mmae/stain.hpp"
#include "mmae/synth.hpp"
#include "mmae/train.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace mmae;

namespace {

// ---------------------------------------------------------------------------
// key=value snapshot parsing (the checkpoint's config block)

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\"");
      const auto e = s.find_last_not_of(" \t\"\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty() && !value.empty()) kv[key] = value;
  }
  return kv;
}

double kv_num(const std::map<std::string, std::string>& kv, const std::string& key,
              double fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : std::stod(it->second);
}

// ---------------------------------------------------------------------------
// option bundles

struct ModelOpts {
  int image_size = 224;
  int patch_size = 16;
  int enc_depth = 12;
  int enc_heads = 6;
  int enc_head_dim = 64;
  int mlp_ratio = 4;
  int global_tokens = 1;
  int modalities = 1;
  int dec_depth = 2;
  int dec_heads = 3;
  int dec_dim = 192;
  int num_classes = 8;

  ModelConfig to_config() const {
    ModelConfig cfg;
    cfg.enc = {enc_depth, enc_heads, enc_head_dim, mlp_ratio, global_tokens,
               image_size, patch_size, modalities};
    cfg.dec = {dec_depth, dec_heads, dec_dim, modalities == 3};
    cfg.num_classes = num_classes;
    cfg.validate();
    return cfg;
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    ModelOpts o;
    o.image_size = static_cast<int>(kv_num(kv, "image_size", o.image_size));
    o.patch_size = static_cast<int>(kv_num(kv, "patch_size", o.patch_size));
    o.enc_depth = static_cast<int>(kv_num(kv, "enc_depth", o.enc_depth));
    o.enc_heads = static_cast<int>(kv_num(kv, "enc_heads", o.enc_heads));
    o.enc_head_dim = static_cast<int>(kv_num(kv, "enc_head_dim", o.enc_head_dim));
    o.mlp_ratio = static_cast<int>(kv_num(kv, "mlp_ratio", o.mlp_ratio));
    o.global_tokens = static_cast<int>(kv_num(kv, "global_tokens", o.global_tokens));
    o.modalities = static_cast<int>(kv_num(kv, "modalities", o.modalities));
    o.dec_depth = static_cast<int>(kv_num(kv, "dec_depth", o.dec_depth));
    o.dec_heads = static_cast<int>(kv_num(kv, "dec_heads", o.dec_heads));
    o.dec_dim = static_cast<int>(kv_num(kv, "dec_dim", o.dec_dim));
    o.num_classes = static_cast<int>(kv_num(kv, "num_classes", o.num_classes));
    return o.to_config();
  }

  void add_options(CLI::App* sub) {
    sub->add_option("--image-size", image_size, "Model input size in pixels")
        ->configurable(true);
    sub->add_option("--patch-size", patch_size, "ViT patch size");
    sub->add_option("--enc-depth", enc_depth, "Encoder transformer blocks");
    sub->add_option("--enc-heads", enc_heads, "Encoder attention heads");
    sub->add_option("--enc-head-dim", enc_head_dim, "Per-head dimension");
    sub->add_option("--mlp-ratio", mlp_ratio, "MLP expansion ratio");
    sub->add_option("--global-tokens", global_tokens, "Number of global tokens");
    sub->add_option("--modalities", modalities, "1 = RGB only, 3 = RGB+H+E")
        ->check(CLI::IsMember({1, 3}));
    sub->add_option("--dec-depth", dec_depth, "Decoder transformer blocks");
    sub->add_option("--dec-heads", dec_heads, "Decoder attention heads");
    sub->add_option("--dec-dim", dec_dim, "Decoder width");
    sub->add_option("--num-classes", num_classes, "Classifier classes");
  }
};

struct TrainOpts {
  TrainConfig t;
  std::string alphas = "8,1,1";

  TrainConfig to_config() const {
    TrainConfig out = t;
    std::istringstream in(alphas);
    std::string part;
    std::vector<double> a;
    while (std::getline(in, part, ',')) a.push_back(std::stod(part));
    if (a.size() != 3) throw ConfigError("--alphas wants three comma-separated values");
    out.alphas = {a[0], a[1], a[2]};
    out.validate();
    return out;
  }

  void add_options(CLI::App* sub, bool finetune_defaults) {
    if (finetune_defaults) {
      t.base_lr = 3e-3;
      t.weight_decay = 6e-5;
      t.batch_size = 96;
      t.epochs = 100;
      t.warmup_epochs = 5;
      t.mode = TrainConfig::Mode::finetune;
    }
    sub->add_option("--base-lr", t.base_lr, "Base learning rate");
    sub->add_option("--weight-decay", t.weight_decay, "AdamW weight decay");
    sub->add_option("--beta1", t.beta1, "Adam beta1");
    sub->add_option("--beta2", t.beta2, "Adam beta2");
    sub->add_option("--epochs", t.epochs, "Training epochs");
    sub->add_option("--warmup-epochs", t.warmup_epochs, "Linear warmup epochs");
    sub->add_option("--warmup-start-lr", t.warmup_start_lr, "Warmup starting lr");
    sub->add_option("--batch-size", t.batch_size, "Batch size");
    sub->add_option("--seed", t.seed, "Master seed for all randomness");
    sub->add_option("--mask-ratio", t.mask_ratio, "Masked fraction of patch positions");
    sub->add_option("--budget", t.budget, "Visible-token budget (overrides --mask-ratio)");
    sub->add_option("--alphas", alphas, "Dirichlet concentrations rgb,h,e");
    sub->add_option("--norm-pix", t.norm_pix, "Standardize target patches (true/false)");
    sub->add_option("--crop-scale-min", t.crop_scale_min, "Random crop area lower bound");
    sub->add_option("--crop-scale-max", t.crop_scale_max, "Random crop area upper bound");
    sub->add_option("--flip-prob", t.flip_prob, "Horizontal flip probability");
    sub->add_option("--grad-clip", t.grad_clip, "Global gradient-norm clip");
    sub->add_option("--freeze-encoder", t.freeze_encoder,
                    "Train only the classifier head (true/false)");
    sub->add_option("--folds", t.folds, "Cross-validation folds");
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// Sectioned so the echo can be fed straight back through --config.
std::string resolved_config(CLI::App* sub) {
  return "[" + sub->get_name() + "]\n" + sub->config_to_str(true, true);
}

void echo_config(const std::string& out_dir, CLI::App* sub) {
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "config.resolved.cfg", resolved_config(sub));
}

// Backbone (enc.* / dec.*) strictly from the checkpoint; the head stays
// freshly initialized, sized by the current task.
void load_backbone(const Checkpoint& ckpt, ModelParams& params) {
  for (auto& [name, t] : params.entries()) {
    if (name.rfind("head.", 0) == 0) continue;
    const Tensor* src = ckpt.find("p." + name);
    if (src == nullptr) throw FormatError("checkpoint is missing parameter " + name);
    if (src->shape() != t.shape()) throw FormatError("checkpoint shape mismatch for " + name);
    t.data() = src->value();
  }
}

struct LoadedModel {
  ModelConfig cfg;
  ModelParams params;
};

LoadedModel model_from_checkpoint(const std::string& path, int num_classes_override = -1) {
  Checkpoint ckpt = load_checkpoint(path);
  ModelConfig cfg = ModelOpts::from_kv(parse_kv(ckpt.config));
  if (num_classes_override > 0) cfg.num_classes = num_classes_override;
  ModelParams params = ModelParams::init(cfg, ckpt.seed);
  if (num_classes_override > 0) {
    load_backbone(ckpt, params);
  } else {
    load_params(ckpt, params);
  }
  return {cfg, std::move(params)};
}

// ---------------------------------------------------------------------------
// subcommands

void run_synth(const std::string& out_dir, int classes, int size, int count,
               std::uint64_t seed, double noise, double train_fraction) {
  SynthSpec spec;
  spec.num_classes = classes;
  spec.image_size = size;
  spec.per_class = std::max(1, count / std::max(1, classes));
  spec.seed = seed;
  spec.noise_std = noise;
  Dataset all = synth_generate(spec);
  auto [train, test] = split_dataset(all, train_fraction, seed);
  write_dataset(out_dir, train, false);
  write_dataset(out_dir, test, true);
  std::cout << "wrote " << train.size() << " train + " << test.size() << " test triplets to "
            << out_dir << "\n";
}

void run_stainsep_one(const fs::path& input, const SnmfOptions& opts) {
  ImageU8 rgb = read_png(input.string());
  StainModel model;
  StainTriplet triplet = separate_stains(rgb, opts, &model);
  fs::path stem = input;
  stem.replace_extension();
  write_png(stem.string() + "_H.png", triplet.h_channel);
  write_png(stem.string() + "_E.png", triplet.e_channel);
  std::cout << input.string() << ": stain vectors "
            << model.w.col(0).transpose() << " | " << model.w.col(1).transpose() << "\n";
}

void run_stainsep(const std::string& input, double lambda, int max_iters, double tol,
                  double bg_threshold, std::uint64_t seed) {
  SnmfOptions opts;
  opts.lambda = lambda;
  opts.max_iters = max_iters;
  opts.tol = tol;
  opts.background_od_threshold = bg_threshold;
  opts.seed = seed;
  if (fs::is_directory(input)) {
    std::ifstream manifest(fs::path(input) / "manifest.csv");
    if (!manifest) throw IoError("no manifest.csv under " + input);
    std::string line;
    std::getline(manifest, line);
    while (std::getline(manifest, line)) {
      if (line.empty()) continue;
      const std::string rel = line.substr(0, line.find(','));
      run_stainsep_one(fs::path(input) / rel, opts);
    }
  } else {
    run_stainsep_one(input, opts);
  }
}

void run_maskplan(const std::string& out_dir, const std::string& alphas_str, int budget,
                  int grid_side, int trials, std::uint64_t seed) {
  std::istringstream in(alphas_str);
  std::string part;
  std::vector<double> a;
  while (std::getline(in, part, ',')) a.push_back(std::stod(part));
  if (a.size() != 3) throw ConfigError("--alphas wants three comma-separated values");
  DirichletAlphas alphas{a[0], a[1], a[2]};
  PatchGrid grid{grid_side, 1};  // a bare position space of grid_side^2

  Rng rng(seed);
  long duplicates = 0;
  long budget_mismatches = 0;
  double rgb_fraction_sum = 0.0;
  MaskPlan example;
  for (int t = 0; t < trials; ++t) {
    auto counts = dirichlet_counts(alphas, budget, rng);
    MaskPlan plan = mask_one_plan(grid, counts, rng);
    if (t == 0) example = plan;
    std::vector<bool> seen(static_cast<size_t>(plan.num_positions), false);
    long total = 0;
    for (Modality m : kModalityOrder) {
      for (int p : plan.visible_for(m)) {
        if (seen[static_cast<size_t>(p)]) ++duplicates;
        seen[static_cast<size_t>(p)] = true;
        ++total;
      }
    }
    if (total != budget) ++budget_mismatches;
    rgb_fraction_sum +=
        static_cast<double>(plan.visible_for(Modality::rgb).size()) / budget;
  }

  fs::create_directories(out_dir);
  std::ostringstream stats;
  stats << "trials " << trials << "\n"
        << "grid " << grid_side << "x" << grid_side << "\n"
        << "budget " << budget << "\n"
        << "duplicate_positions " << duplicates << "\n"
        << "budget_mismatches " << budget_mismatches << "\n"
        << "mean_rgb_fraction " << rgb_fraction_sum / trials << "\n";
  write_text(fs::path(out_dir) / "stats.txt", stats.str());
  write_text(fs::path(out_dir) / "example_plan.txt", mask_plan_to_text(example));
  std::cout << stats.str();
}

void run_pretrain(const std::string& data_dir, const std::string& out_dir,
                  const ModelOpts& mo, const TrainOpts& to, const std::string& resume_path,
                  int checkpoint_every, CLI::App* sub) {
  ModelConfig cfg = mo.to_config();
  TrainConfig tcfg = to.to_config();
  Dataset train = load_dataset(data_dir, "train");
  if (train.items.empty()) train = load_dataset(data_dir);
  if (train.items.empty()) throw ConfigError("no training images under " + data_dir);

  echo_config(out_dir, sub);
  PretrainOptions opts;
  opts.checkpoint_dir = out_dir;
  opts.checkpoint_every = checkpoint_every;
  opts.config_snapshot = resolved_config(sub);
  Checkpoint resume;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    opts.resume = &resume;
  }

  PretrainResult result = pretrain(train, cfg, tcfg, opts);
  write_loss_curve_csv((fs::path(out_dir) / "loss.csv").string(), result.epoch_loss);
  std::cout << "pretrained " << result.steps_done << " steps; epoch loss "
            << (result.epoch_loss.empty() ? 0.0 : result.epoch_loss.front()) << " -> "
            << (result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()) << "\n"
            << "checkpoint: " << (fs::path(out_dir) / "final.ckpt").string() << "\n";
}

void run_finetune(const std::string& ckpt_path, const std::string& data_dir, int n_labeled,
                  const std::string& out_dir, const TrainOpts& to, CLI::App* sub) {
  Dataset train = load_dataset(data_dir, "train");
  Dataset test = load_dataset(data_dir, "test");
  if (train.items.empty() || test.items.empty()) {
    throw ConfigError("finetune needs train and test splits under " + data_dir);
  }
  TrainConfig tcfg = to.to_config();

  LoadedModel model = model_from_checkpoint(ckpt_path, train.num_classes());

  Dataset labeled = train;
  if (n_labeled > 0 && n_labeled < train.size()) {
    const double fraction = static_cast<double>(n_labeled) / train.size();
    labeled = split_dataset(train, fraction, tcfg.seed).first;
  }

  echo_config(out_dir, sub);
  EvalReport report = finetune(model.params, labeled, test, model.cfg, tcfg);
  write_eval_report_csv((fs::path(out_dir) / "finetune.csv").string(), report);
  std::cout << "fine-tuned on " << report.num_labeled << " labeled samples; mean test accuracy "
            << report.accuracy << "\n";
}

void run_knn(const std::string& ckpt_path, const std::string& data_dir, int k,
             const std::string& out_dir, CLI::App* sub) {
  Dataset train = load_dataset(data_dir, "train");
  Dataset test = load_dataset(data_dir, "test");
  if (train.items.empty() || test.items.empty()) {
    throw ConfigError("knn needs train and test splits under " + data_dir);
  }
  LoadedModel model = model_from_checkpoint(ckpt_path);
  echo_config(out_dir, sub);
  EvalReport report = knn_eval(model.params, train, test, k, model.cfg.enc);
  write_eval_report_csv((fs::path(out_dir) / "knn.csv").string(), report);
  std::cout << "knn k=" << k << " accuracy " << report.accuracy << "\n";
}

void run_attnmap(const std::string& ckpt_path, const std::string& input, int layer,
                 double threshold, const std::string& out_dir) {
  LoadedModel model = model_from_checkpoint(ckpt_path);
  const EncoderConfig& enc = model.cfg.enc;
  if (layer < 0) layer = enc.depth - 1;
  ImageU8 rgb = read_png(input);
  if (rgb.width != enc.image_size || rgb.height != enc.image_size) {
    throw ConfigError("input image must be " + std::to_string(enc.image_size) + "x" +
                      std::to_string(enc.image_size));
  }
  Tensor tokens = patchify(image_to_tensor(rgb), enc.grid());
  std::vector<RowMat> maps = attention_maps(tokens, model.params, enc, layer, threshold);

  fs::create_directories(out_dir);
  fs::path stem = fs::path(input).stem();
  for (size_t head = 0; head < maps.size(); ++head) {
    const RowMat& m = maps[head];
    const double peak = m.maxCoeff();
    std::vector<std::uint8_t> gray(static_cast<size_t>(m.size()));
    for (Eigen::Index y = 0; y < m.rows(); ++y) {
      for (Eigen::Index x = 0; x < m.cols(); ++x) {
        gray[static_cast<size_t>(y * m.cols() + x)] =
            quantize_u8(peak > 0 ? m(y, x) / peak * 255.0 : 0.0);
      }
    }
    std::ostringstream name;
    name << stem.string() << "_L" << layer << "H" << head << ".png";
    write_png_gray((fs::path(out_dir) / name.str()).string(), static_cast<int>(m.cols()),
                   static_cast<int>(m.rows()), gray);
  }
  std::cout << "wrote " << maps.size() << " attention maps to " << out_dir << "\n";
}

void run_embed(const std::string& ckpt_path, const std::string& data_dir,
               const std::string& split, const std::string& out_file) {
  Dataset data = load_dataset(data_dir, split == "all" ? "" : split);
  if (data.items.empty()) throw ConfigError("no images for split '" + split + "'");
  LoadedModel model = model_from_checkpoint(ckpt_path);
  RowMat emb = embed_dataset(model.params, data, model.cfg.enc);

  std::ofstream out(out_file);
  if (!out) throw IoError("cannot write " + out_file);
  out << "label";
  for (Eigen::Index d = 0; d < emb.cols(); ++d) out << ",e" << d;
  out << "\n" << std::setprecision(17);
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    out << data.items[static_cast<size_t>(i)].label;
    for (Eigen::Index d = 0; d < emb.cols(); ++d) out << "," << emb(i, d);
    out << "\n";
  }
  std::cout << "wrote " << emb.rows() << " embeddings of width " << emb.cols() << " to "
            << out_file << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-modal masked autoencoder workbench for H&E histopathology"};
  app.require_subcommand(1);
  // Resolved-config echoes must carry every value, defaults included.
  app.option_defaults()->always_capture_default(true);
  // One config file for all subcommands: keys live under a [subcommand]
  // section (or dotted, subcommand.key=value). Unknown keys are errors.
  app.set_config("--config", "", "Key=value config file");
  app.allow_config_extras(false);

  // synth ---------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate the synthetic histology dataset");
  auto synth_classes = std::make_shared<int>(4);
  auto synth_size = std::make_shared<int>(32);
  auto synth_count = std::make_shared<int>(400);
  auto synth_seed = std::make_shared<std::uint64_t>(0);
  auto synth_noise = std::make_shared<double>(1.0);
  auto synth_fraction = std::make_shared<double>(0.75);
  auto synth_out = std::make_shared<std::string>();
  synth->add_option("--classes", *synth_classes, "Number of tissue classes (max 4)");
  synth->add_option("--size", *synth_size, "Image size in pixels");
  synth->add_option("--count", *synth_count, "Total image count");
  synth->add_option("--seed", *synth_seed, "Generator seed");
  synth->add_option("--noise", *synth_noise, "Intensity noise sigma");
  synth->add_option("--train-fraction", *synth_fraction, "Stratified train fraction");
  synth->add_option("--out", *synth_out, "Output dataset directory")->required();
  synth->callback([=] {
    run_synth(*synth_out, *synth_classes, *synth_size, *synth_count, *synth_seed, *synth_noise,
              *synth_fraction);
  });

  // stainsep --------------------------------------------------------------
  auto* stainsep = app.add_subcommand("stainsep", "Separate H and E stain channels");
  auto ss_input = std::make_shared<std::string>();
  auto ss_lambda = std::make_shared<double>(0.1);
  auto ss_iters = std::make_shared<int>(200);
  auto ss_tol = std::make_shared<double>(1e-6);
  auto ss_bg = std::make_shared<double>(0.15);
  auto ss_seed = std::make_shared<std::uint64_t>(0);
  stainsep->add_option("--input", *ss_input, "PNG file or dataset directory")->required();
  stainsep->add_option("--lambda", *ss_lambda, "L1 sparsity weight");
  stainsep->add_option("--max-iters", *ss_iters, "Alternating iterations");
  stainsep->add_option("--tol", *ss_tol, "Relative objective tolerance");
  stainsep->add_option("--bg-threshold", *ss_bg, "Background optical-density cutoff");
  stainsep->add_option("--seed", *ss_seed, "Initialization seed");
  stainsep->callback(
      [=] { run_stainsep(*ss_input, *ss_lambda, *ss_iters, *ss_tol, *ss_bg, *ss_seed); });

  // maskplan --------------------------------------------------------------
  auto* maskplan = app.add_subcommand("maskplan", "Monte-Carlo statistics of mask-one plans");
  auto mp_alphas = std::make_shared<std::string>("8,1,1");
  auto mp_budget = std::make_shared<int>(190);
  auto mp_grid = std::make_shared<int>(14);
  auto mp_trials = std::make_shared<int>(10000);
  auto mp_seed = std::make_shared<std::uint64_t>(0);
  auto mp_out = std::make_shared<std::string>();
  maskplan->add_option("--alphas", *mp_alphas, "Dirichlet concentrations rgb,h,e");
  maskplan->add_option("--budget", *mp_budget, "Visible-token budget");
  maskplan->add_option("--grid", *mp_grid, "Grid side (positions = side^2)");
  maskplan->add_option("--trials", *mp_trials, "Number of sampled plans");
  maskplan->add_option("--seed", *mp_seed, "Sampling seed");
  maskplan->add_option("--out", *mp_out, "Output directory")->required();
  maskplan->callback(
      [=] { run_maskplan(*mp_out, *mp_alphas, *mp_budget, *mp_grid, *mp_trials, *mp_seed); });

  // pretrain --------------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining (MAE or MMAE)");
  auto pre_model = std::make_shared<ModelOpts>();
  auto pre_train = std::make_shared<TrainOpts>();
  auto pre_data = std::make_shared<std::string>();
  auto pre_out = std::make_shared<std::string>();
  auto pre_resume = std::make_shared<std::string>();
  auto pre_every = std::make_shared<int>(0);
  pre_model->add_options(pre);
  pre_train->add_options(pre, false);
  pre->add_option("--data", *pre_data, "Dataset directory (manifest.csv)")->required();
  pre->add_option("--out", *pre_out, "Run directory")->required();
  pre->add_option("--resume", *pre_resume, "Checkpoint to resume from");
  pre->add_option("--checkpoint-every", *pre_every, "Extra checkpoint every N epochs");
  pre->callback([=] {
    run_pretrain(*pre_data, *pre_out, *pre_model, *pre_train, *pre_resume, *pre_every, pre);
  });

  // finetune --------------------------------------------------------------
  auto* ft = app.add_subcommand("finetune", "Supervised fine-tuning with k-fold CV");
  auto ft_train = std::make_shared<TrainOpts>();
  auto ft_ckpt = std::make_shared<std::string>();
  auto ft_data = std::make_shared<std::string>();
  auto ft_out = std::make_shared<std::string>();
  auto ft_n = std::make_shared<int>(100);
  ft_train->add_options(ft, true);
  ft->add_option("--ckpt", *ft_ckpt, "Pretrained checkpoint")->required();
  ft->add_option("--data", *ft_data, "Dataset directory")->required();
  ft->add_option("--n-labeled", *ft_n, "Labeled subset size (0 = all)");
  ft->add_option("--out", *ft_out, "Run directory")->required();
  ft->callback([=] { run_finetune(*ft_ckpt, *ft_data, *ft_n, *ft_out, *ft_train, ft); });

  // knn ------------------------------------------------------------------
  auto* knn = app.add_subcommand("knn", "Nearest-neighbor evaluation of embeddings");
  auto knn_ckpt = std::make_shared<std::string>();
  auto knn_data = std::make_shared<std::string>();
  auto knn_k = std::make_shared<int>(10);
  auto knn_out = std::make_shared<std::string>();
  knn->add_option("--ckpt", *knn_ckpt, "Pretrained checkpoint")->required();
  knn->add_option("--data", *knn_data, "Dataset directory")->required();
  knn->add_option("--k", *knn_k, "Neighbor count");
  knn->add_option("--out", *knn_out, "Run directory")->required();
  knn->callback([=] { run_knn(*knn_ckpt, *knn_data, *knn_k, *knn_out, knn); });

  // attnmap ----------------------------------------------------------------
  auto* attn = app.add_subcommand("attnmap", "Per-head global-token attention heatmaps");
  auto at_ckpt = std::make_shared<std::string>();
  auto at_input = std::make_shared<std::string>();
  auto at_layer = std::make_shared<int>(-1);
  auto at_threshold = std::make_shared<double>(0.6);
  auto at_out = std::make_shared<std::string>();
  attn->add_option("--ckpt", *at_ckpt, "Pretrained checkpoint")->required();
  attn->add_option("--input", *at_input, "Input PNG")->required();
  attn->add_option("--layer", *at_layer, "Encoder layer (-1 = last)");
  attn->add_option("--threshold", *at_threshold, "Zeroing quantile in [0,1]");
  attn->add_option("--out", *at_out, "Output directory")->required();
  attn->callback([=] { run_attnmap(*at_ckpt, *at_input, *at_layer, *at_threshold, *at_out); });

  // embed ------------------------------------------------------------------
  auto* embed = app.add_subcommand("embed", "Dump global-token embeddings as CSV");
  auto em_ckpt = std::make_shared<std::string>();
  auto em_data = std::make_shared<std::string>();
  auto em_split = std::make_shared<std::string>("all");
  auto em_out = std::make_shared<std::string>();
  embed->add_option("--ckpt", *em_ckpt, "Pretrained checkpoint")->required();
  embed->add_option("--data", *em_data, "Dataset directory")->required();
  embed->add_option("--split", *em_split, "train | test | all")
      ->check(CLI::IsMember({"train", "test", "all"}));
  embed->add_option("--out", *em_out, "Output CSV path")->required();
  embed->callback([=] { run_embed(*em_ckpt, *em_data, *em_split, *em_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
