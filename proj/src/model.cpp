// SPDX-License-Identifier: Apache-2.0
#include "mmae/model.hpp"

#include "mmae/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace mmae {

void EncoderConfig::validate() const {
  if (depth < 1) throw ConfigError("encoder depth must be >= 1");
  if (heads < 1 || head_dim < 1) throw ConfigError("encoder heads/head_dim must be >= 1");
  if (embed_dim() % 4 != 0) throw ConfigError("embed dim must be divisible by 4 (2-D sincos)");
  if (mlp_ratio < 1) throw ConfigError("mlp ratio must be >= 1");
  if (num_global_tokens < 0) throw ConfigError("negative global token count");
  if (modalities != 1 && modalities != 3) throw ConfigError("modalities must be 1 or 3");
  try {
    PatchGrid::make(image_size, patch_size);
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  }
}

void DecoderConfig::validate() const {
  if (depth < 1) throw ConfigError("decoder depth must be >= 1");
  if (heads < 1 || embed_dim < 1 || embed_dim % heads != 0) {
    throw ConfigError("decoder embed dim must be a positive multiple of heads");
  }
  if (embed_dim % 4 != 0) throw ConfigError("decoder dim must be divisible by 4 (2-D sincos)");
}

void ModelConfig::validate() const {
  enc.validate();
  dec.validate();
  if (num_classes < 2) throw ConfigError("need at least two classes");
}

namespace {

std::uint64_t name_tag(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr double kInitStd = 0.02;

// Thread-local memo for the fixed sinusoidal tables.
const RowMat& pos_table(int grid_side, int dim) {
  thread_local std::map<std::pair<int, int>, RowMat> cache;
  auto key = std::make_pair(grid_side, dim);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, sincos_pos_embed_2d(grid_side, dim)).first;
  return it->second;
}

Tensor const_rows(const RowMat& table, const std::vector<int>& rows) {
  RowMat out(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(rows[i]);
  return Tensor::from_matrix(out);
}

Tensor multihead_attention(const Tensor& q_in, const Tensor& kv_in, const ModelParams& p,
                           const std::string& prefix, int heads,
                           std::vector<RowMat>* capture) {
  const int width = q_in.dim(1);
  const int hd = width / heads;
  Tensor q = add_rowvec(matmul(q_in, p.at(prefix + ".wq")), p.at(prefix + ".bq"));
  Tensor k = add_rowvec(matmul(kv_in, p.at(prefix + ".wk")), p.at(prefix + ".bk"));
  Tensor v = add_rowvec(matmul(kv_in, p.at(prefix + ".wv")), p.at(prefix + ".bv"));
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int i = 0; i < heads; ++i) {
    Tensor qi = slice_cols(q, i * hd, hd);
    Tensor ki = slice_cols(k, i * hd, hd);
    Tensor vi = slice_cols(v, i * hd, hd);
    Tensor probs = softmax(scale(matmul(qi, transpose(ki)), scl), 1);
    if (capture != nullptr) capture->push_back(probs.mat());
    head_outs.push_back(matmul(probs, vi));
  }
  Tensor merged = concat_cols(head_outs);
  return add_rowvec(matmul(merged, p.at(prefix + ".wo")), p.at(prefix + ".bo"));
}

Tensor transformer_block(const Tensor& x, const ModelParams& p, const std::string& prefix,
                         int heads, std::vector<RowMat>* capture) {
  Tensor h = layer_norm(x, p.at(prefix + ".ln1.g"), p.at(prefix + ".ln1.b"));
  Tensor x1 = add(x, multihead_attention(h, h, p, prefix + ".attn", heads, capture));
  Tensor m = layer_norm(x1, p.at(prefix + ".ln2.g"), p.at(prefix + ".ln2.b"));
  m = add_rowvec(matmul(m, p.at(prefix + ".mlp.w1")), p.at(prefix + ".mlp.b1"));
  m = gelu(m);
  m = add_rowvec(matmul(m, p.at(prefix + ".mlp.w2")), p.at(prefix + ".mlp.b2"));
  return add(x1, m);
}

std::vector<Modality> active_modalities(const EncoderConfig& cfg) {
  if (cfg.modalities == 1) return {Modality::rgb};
  return {Modality::rgb, Modality::h, Modality::e};
}

}  // namespace

RowMat sincos_pos_embed_2d(int grid_side, int dim) {
  if (dim % 4 != 0) throw ContractError("sincos embed dim must be divisible by 4");
  const int half = dim / 2;     // per-axis channels
  const int quarter = dim / 4;  // frequencies per axis
  const int m = grid_side * grid_side;
  RowMat table(m, dim);
  for (int gy = 0; gy < grid_side; ++gy) {
    for (int gx = 0; gx < grid_side; ++gx) {
      const int row = gy * grid_side + gx;
      for (int k = 0; k < quarter; ++k) {
        const double omega = std::pow(10000.0, -static_cast<double>(k) / quarter);
        table(row, k) = std::sin(gy * omega);
        table(row, quarter + k) = std::cos(gy * omega);
        table(row, half + k) = std::sin(gx * omega);
        table(row, half + quarter + k) = std::cos(gx * omega);
      }
    }
  }
  return table;
}

void ModelParams::insert(const std::string& name, Tensor t) {
  if (index_.count(name) != 0) throw ContractError("duplicate parameter name " + name);
  index_[name] = params_.size();
  params_.emplace_back(name, std::move(t));
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second].second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second].second;
}

void ModelParams::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

long ModelParams::total_parameters() const {
  long n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams copy;
  for (const auto& [name, t] : params_) {
    copy.insert(name, Tensor::from_flat(t.shape(), t.value(), t.requires_grad()));
  }
  return copy;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int d = cfg.enc.embed_dim();
  const int pd = cfg.enc.patch_dim();
  const int dd = cfg.dec.embed_dim;
  Rng master = Rng(seed).derive(0x1417);

  ModelParams p;
  auto normal = [&](const std::string& name, std::vector<int> shape) {
    Rng rng = master.derive(name_tag(name));
    Arr v(numel_of(shape));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.truncated_normal(kInitStd);
    p.insert(name, Tensor::from_flat(std::move(shape), std::move(v), true));
  };
  auto zeros = [&](const std::string& name, std::vector<int> shape) {
    p.insert(name, Tensor::zeros(std::move(shape), true));
  };
  auto ones = [&](const std::string& name, std::vector<int> shape) {
    p.insert(name, Tensor::full(std::move(shape), 1.0, true));
  };
  auto block = [&](const std::string& prefix, int width, int mlp_ratio) {
    ones(prefix + ".ln1.g", {width});
    zeros(prefix + ".ln1.b", {width});
    for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"}) {
      normal(prefix + w, {width, width});
    }
    for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"}) {
      zeros(prefix + b, {width});
    }
    ones(prefix + ".ln2.g", {width});
    zeros(prefix + ".ln2.b", {width});
    normal(prefix + ".mlp.w1", {width, width * mlp_ratio});
    zeros(prefix + ".mlp.b1", {width * mlp_ratio});
    normal(prefix + ".mlp.w2", {width * mlp_ratio, width});
    zeros(prefix + ".mlp.b2", {width});
  };

  for (Modality m : active_modalities(cfg.enc)) {
    const std::string prefix = std::string("enc.proj.") + modality_name(m);
    normal(prefix + ".w", {pd, d});
    zeros(prefix + ".b", {d});
  }
  if (cfg.enc.num_global_tokens > 0) normal("enc.global", {cfg.enc.num_global_tokens, d});
  for (int i = 0; i < cfg.enc.depth; ++i) {
    block("enc.block" + std::to_string(i), d, cfg.enc.mlp_ratio);
  }
  ones("enc.norm.g", {d});
  zeros("enc.norm.b", {d});

  normal("dec.proj.w", {d, dd});
  zeros("dec.proj.b", {dd});
  normal("dec.mask_token", {1, dd});
  if (cfg.dec.has_cross_attention) {
    ones("dec.cross.lnq.g", {dd});
    zeros("dec.cross.lnq.b", {dd});
    ones("dec.cross.lnkv.g", {dd});
    zeros("dec.cross.lnkv.b", {dd});
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) normal(std::string("dec.cross") + w, {dd, dd});
    for (const char* b : {".bq", ".bk", ".bv", ".bo"}) zeros(std::string("dec.cross") + b, {dd});
  }
  for (int i = 0; i < cfg.dec.depth; ++i) {
    block("dec.block" + std::to_string(i), dd, cfg.enc.mlp_ratio);
  }
  ones("dec.norm.g", {dd});
  zeros("dec.norm.b", {dd});
  normal("dec.pixel.w", {dd, pd});
  zeros("dec.pixel.b", {pd});

  ones("head.norm.g", {d});
  zeros("head.norm.b", {d});
  zeros("head.fc.w", {d, cfg.num_classes});
  zeros("head.fc.b", {cfg.num_classes});
  return p;
}

Tensor assemble_encoder_input(const std::array<Tensor, 3>& tokens_per_modality,
                              const MaskPlan& plan, const ModelParams& params,
                              const EncoderConfig& cfg) {
  if (plan.num_modalities != cfg.modalities) {
    throw ContractError("mask plan has " + std::to_string(plan.num_modalities) +
                        " modalities, encoder expects " + std::to_string(cfg.modalities));
  }
  const PatchGrid grid = cfg.grid();
  if (plan.num_positions != grid.num_positions()) {
    throw ContractError("mask plan position space does not match the patch grid");
  }
  const RowMat& table = pos_table(grid.grid_side(), cfg.embed_dim());

  std::vector<Tensor> parts;
  if (cfg.num_global_tokens > 0) parts.push_back(params.at("enc.global"));
  for (Modality m : active_modalities(cfg)) {
    const Tensor& tokens = tokens_per_modality[static_cast<size_t>(m)];
    if (!tokens.defined() || tokens.rank() != 2 || tokens.dim(0) != grid.num_positions() ||
        tokens.dim(1) != cfg.patch_dim()) {
      throw ContractError(std::string("tokens for modality ") + modality_name(m) +
                          " do not match the grid");
    }
    const std::vector<int>& vis = plan.visible_for(m);
    const std::string prefix = std::string("enc.proj.") + modality_name(m);
    Tensor x = gather_rows(tokens, vis);
    x = add_rowvec(matmul(x, params.at(prefix + ".w")), params.at(prefix + ".b"));
    x = add(x, const_rows(table, vis));
    parts.push_back(std::move(x));
  }
  return concat_rows(parts);
}

Tensor encode(const std::array<Tensor, 3>& tokens_per_modality, const MaskPlan& plan,
              const ModelParams& params, const EncoderConfig& cfg, AttnCapture* capture) {
  Tensor x = assemble_encoder_input(tokens_per_modality, plan, params, cfg);
  for (int i = 0; i < cfg.depth; ++i) {
    std::vector<RowMat>* sink =
        (capture != nullptr && capture->layer == i) ? &capture->head_probs : nullptr;
    x = transformer_block(x, params, "enc.block" + std::to_string(i), cfg.heads, sink);
  }
  return layer_norm(x, params.at("enc.norm.g"), params.at("enc.norm.b"));
}

Tensor encode_full(const Tensor& tokens_rgb, const ModelParams& params,
                   const EncoderConfig& cfg, AttnCapture* capture) {
  EncoderConfig single = cfg;
  single.modalities = 1;  // fine-tuning and eval use RGB only
  MaskPlan full;
  full.num_modalities = 1;
  full.num_positions = single.grid().num_positions();
  full.budget = full.num_positions;
  std::vector<int>& vis = full.visible[0];
  vis.resize(static_cast<size_t>(full.num_positions));
  for (int i = 0; i < full.num_positions; ++i) vis[static_cast<size_t>(i)] = i;
  std::array<Tensor, 3> tokens;
  tokens[0] = tokens_rgb;
  return encode(tokens, full, params, single, capture);
}

namespace {

// Latents projected to decoder width, an M-length stream with the mask token
// at non-source positions, plus decoder position embeddings.
struct DecoderStream {
  Tensor stream;   // [M x dec_dim]
  Tensor context;  // projected full encoder output, position-embedded
};

DecoderStream build_decoder_stream(const Tensor& latents, const MaskPlan& plan,
                                   const std::vector<int>& source_positions,
                                   int source_row_offset, const ModelParams& params,
                                   const EncoderConfig& enc_cfg, const DecoderConfig& dec_cfg) {
  const PatchGrid grid = enc_cfg.grid();
  const int m = grid.num_positions();
  const RowMat& table = pos_table(grid.grid_side(), dec_cfg.embed_dim);

  Tensor proj = add_rowvec(matmul(latents, params.at("dec.proj.w")), params.at("dec.proj.b"));

  // Gather the source rows, append the mask token, then fan out over all M
  // positions; repeated gather indices route the mask token everywhere else.
  std::vector<int> source_rows(source_positions.size());
  for (size_t i = 0; i < source_positions.size(); ++i) {
    source_rows[i] = source_row_offset + static_cast<int>(i);
  }
  std::vector<Tensor> stack_parts = {gather_rows(proj, source_rows), params.at("dec.mask_token")};
  Tensor stacked = concat_rows(stack_parts);

  std::vector<int> route(static_cast<size_t>(m), static_cast<int>(source_positions.size()));
  for (size_t i = 0; i < source_positions.size(); ++i) {
    route[static_cast<size_t>(source_positions[i])] = static_cast<int>(i);
  }
  Tensor stream = gather_rows(stacked, route);
  std::vector<int> all(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) all[static_cast<size_t>(i)] = i;
  stream = add(stream, const_rows(table, all));

  // Context: every latent row position-embedded (zero rows for globals).
  RowMat ctx_pos = RowMat::Zero(latents.dim(0), dec_cfg.embed_dim);
  int row = enc_cfg.num_global_tokens;
  for (Modality mod : active_modalities(enc_cfg)) {
    for (int pos : plan.visible_for(mod)) ctx_pos.row(row++) = table.row(pos);
  }
  if (row != latents.dim(0)) throw ContractError("latent rows do not match the mask plan");
  Tensor context = add(proj, Tensor::from_matrix(ctx_pos));
  return {std::move(stream), std::move(context)};
}

Tensor run_decoder_blocks(Tensor x, const ModelParams& params, const DecoderConfig& dec_cfg) {
  for (int i = 0; i < dec_cfg.depth; ++i) {
    x = transformer_block(x, params, "dec.block" + std::to_string(i), dec_cfg.heads, nullptr);
  }
  x = layer_norm(x, params.at("dec.norm.g"), params.at("dec.norm.b"));
  return add_rowvec(matmul(x, params.at("dec.pixel.w")), params.at("dec.pixel.b"));
}

}  // namespace

Tensor decode_mae(const Tensor& latents, const MaskPlan& plan, const ModelParams& params,
                  const EncoderConfig& enc_cfg, const DecoderConfig& dec_cfg) {
  if (plan.num_modalities != 1) {
    throw ContractError("decode_mae expects a single-modality plan");
  }
  DecoderStream ds = build_decoder_stream(latents, plan, plan.visible_for(Modality::rgb),
                                          enc_cfg.num_global_tokens, params, enc_cfg, dec_cfg);
  Tensor pixels = run_decoder_blocks(std::move(ds.stream), params, dec_cfg);
  return gather_rows(pixels, plan.masked_for(Modality::rgb));
}

std::vector<int> mmae_target_positions(const MaskPlan& plan) {
  return plan.masked_for(Modality::rgb);
}

Tensor decode_mmae(const Tensor& latents, const MaskPlan& plan, const ModelParams& params,
                   const EncoderConfig& enc_cfg, const DecoderConfig& dec_cfg) {
  if (plan.num_modalities != 3) {
    throw ContractError("decode_mmae expects a three-modality plan");
  }
  if (!dec_cfg.has_cross_attention) {
    throw ContractError("decode_mmae requires the cross-attention decoder");
  }
  DecoderStream ds = build_decoder_stream(latents, plan, plan.visible_for(Modality::rgb),
                                          enc_cfg.num_global_tokens, params, enc_cfg, dec_cfg);
  // One cross-attention layer: decoder stream queries the complete encoder
  // output (global + RGB + H + E latents).
  Tensor q = layer_norm(ds.stream, params.at("dec.cross.lnq.g"), params.at("dec.cross.lnq.b"));
  Tensor kv =
      layer_norm(ds.context, params.at("dec.cross.lnkv.g"), params.at("dec.cross.lnkv.b"));
  Tensor x = add(ds.stream, multihead_attention(q, kv, params, "dec.cross", dec_cfg.heads, nullptr));
  Tensor pixels = run_decoder_blocks(std::move(x), params, dec_cfg);
  return gather_rows(pixels, mmae_target_positions(plan));
}

RowMat normalize_patch_targets(const RowMat& targets, double eps) {
  RowMat out(targets.rows(), targets.cols());
  for (Eigen::Index i = 0; i < targets.rows(); ++i) {
    const double mean = targets.row(i).mean();
    const double var = (targets.row(i).array() - mean).square().mean();
    out.row(i) = (targets.row(i).array() - mean) / std::sqrt(var + eps);
  }
  return out;
}

Tensor reconstruction_loss(const Tensor& pred, const RowMat& target_pixels, bool norm_pix) {
  if (pred.rank() != 2 || pred.dim(0) != target_pixels.rows() ||
      pred.dim(1) != target_pixels.cols()) {
    throw ShapeError("reconstruction_loss: prediction/target shape mismatch");
  }
  if (pred.dim(0) == 0) {
    throw ContractError("reconstruction_loss: no masked positions to score");
  }
  RowMat target = norm_pix ? normalize_patch_targets(target_pixels) : target_pixels;
  Tensor diff = sub(pred, Tensor::from_matrix(target));
  return mean_all(mul(diff, diff));
}

Tensor finetune_forward(const Tensor& tokens_rgb, const ModelParams& params,
                        const EncoderConfig& cfg) {
  Tensor seq = encode_full(tokens_rgb, params, cfg);
  Tensor pooled = mean_rows(seq);  // all encoded tokens, global included
  Tensor normed = layer_norm(pooled, params.at("head.norm.g"), params.at("head.norm.b"));
  return add_rowvec(matmul(normed, params.at("head.fc.w")), params.at("head.fc.b"));
}

Vec embed_image(const Tensor& tokens_rgb, const ModelParams& params, const EncoderConfig& cfg) {
  if (cfg.num_global_tokens < 1) {
    throw ContractError("embedding requires a global token");
  }
  NoGradGuard no_grad;
  Tensor seq = encode_full(tokens_rgb, params, cfg);
  return seq.mat().row(0).transpose();
}

namespace {

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("quantile of empty set");
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(h));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

RowMat upsample_nearest(const RowMat& grid, int factor) {
  RowMat out(grid.rows() * factor, grid.cols() * factor);
  for (Eigen::Index y = 0; y < out.rows(); ++y) {
    for (Eigen::Index x = 0; x < out.cols(); ++x) {
      out(y, x) = grid(y / factor, x / factor);
    }
  }
  return out;
}

}  // namespace

std::vector<RowMat> attention_maps(const Tensor& tokens_rgb, const ModelParams& params,
                                   const EncoderConfig& cfg, int layer,
                                   double threshold_quantile, std::vector<RowMat>* raw_grid) {
  if (cfg.num_global_tokens < 1) {
    throw ContractError("attention maps need a global token");
  }
  if (layer < 0 || layer >= cfg.depth) {
    throw IndexError("attention layer " + std::to_string(layer) + " out of range");
  }
  if (threshold_quantile < 0.0 || threshold_quantile > 1.0) {
    throw ContractError("threshold quantile must lie in [0, 1]");
  }
  NoGradGuard no_grad;
  AttnCapture capture;
  capture.layer = layer;
  encode_full(tokens_rgb, params, cfg, &capture);

  const PatchGrid grid = cfg.grid();
  const int gs = grid.grid_side();
  const int g = cfg.num_global_tokens;
  std::vector<RowMat> maps;
  for (const RowMat& probs : capture.head_probs) {
    RowMat gmap(gs, gs);
    for (int gy = 0; gy < gs; ++gy) {
      for (int gx = 0; gx < gs; ++gx) {
        gmap(gy, gx) = probs(0, g + gy * gs + gx);
      }
    }
    if (raw_grid != nullptr) raw_grid->push_back(gmap);
    std::vector<double> vals(gmap.data(), gmap.data() + gmap.size());
    const double threshold = quantile(std::move(vals), threshold_quantile);
    RowMat thresholded = (gmap.array() > threshold).select(gmap, RowMat::Zero(gs, gs));
    maps.push_back(upsample_nearest(thresholded, grid.patch_size));
  }
  return maps;
}

}  // namespace mmae
