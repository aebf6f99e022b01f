// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmae/model.hpp"
#include "mmae/rng.hpp"
#include "oracle.hpp"

#include <cmath>

using namespace mmae;
using testutil::grad_check;

namespace {

// Tiny end-to-end configuration for gradient work.
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.enc = {/*depth=*/1, /*heads=*/2, /*head_dim=*/8, /*mlp_ratio=*/2,
             /*num_global_tokens=*/1, /*image_size=*/8, /*patch_size=*/4, /*modalities=*/1};
  cfg.dec = {/*depth=*/1, /*heads=*/2, /*embed_dim=*/8, /*has_cross_attention=*/false};
  cfg.num_classes = 4;
  return cfg;
}

ModelConfig tiny_mmae_config() {
  ModelConfig cfg = tiny_config();
  cfg.enc.modalities = 3;
  cfg.dec.has_cross_attention = true;
  return cfg;
}

Tensor random_tokens(const EncoderConfig& cfg, Rng& rng) {
  const int m = cfg.grid().num_positions();
  Arr v(static_cast<long>(m) * cfg.patch_dim());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.uniform();
  return Tensor::from_flat({m, cfg.patch_dim()}, std::move(v));
}

std::vector<Tensor> params_with_prefix(ModelParams& params, const std::string& prefix) {
  std::vector<Tensor> out;
  for (auto& [name, t] : params.entries()) {
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  }
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.enc.head_dim = 3;  // embed 6, not divisible by 4
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.dec.heads = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.enc.patch_size = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("parameter table has unique dotted names and config-determined shapes") {
  ModelConfig cfg = tiny_mmae_config();
  ModelParams params = ModelParams::init(cfg, 1);
  CHECK(params.has("enc.proj.rgb.w"));
  CHECK(params.has("enc.proj.h.w"));
  CHECK(params.has("enc.proj.e.w"));
  CHECK(params.has("dec.cross.wq"));
  CHECK(params.has("dec.mask_token"));
  CHECK(params.at("enc.proj.rgb.w").shape() == std::vector<int>({48, 16}));
  CHECK(params.at("head.fc.w").shape() == std::vector<int>({16, 4}));
  CHECK(params.at("head.fc.w").value().cwiseAbs().maxCoeff() == 0.0);  // classifier zero-init
  CHECK(params.at("enc.block0.ln1.g").value().minCoeff() == 1.0);

  ModelConfig mae = tiny_config();
  ModelParams mae_params = ModelParams::init(mae, 1);
  CHECK_FALSE(mae_params.has("enc.proj.h.w"));
  CHECK_FALSE(mae_params.has("dec.cross.wq"));

  // Same seed, same values.
  ModelParams again = ModelParams::init(cfg, 1);
  CHECK((again.at("enc.block0.attn.wq").value() - params.at("enc.block0.attn.wq").value())
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

TEST_CASE("position embedding table is deterministic and row/column structured") {
  RowMat t = sincos_pos_embed_2d(4, 16);
  CHECK(t.rows() == 16);
  CHECK(t.cols() == 16);
  // Positions in the same grid row share the first half of the channels.
  CHECK((t.block(0, 0, 1, 8) - t.block(3, 0, 1, 8)).cwiseAbs().maxCoeff() == 0.0);
  // Positions in the same grid column share the second half.
  CHECK((t.block(1, 8, 1, 8) - t.block(13, 8, 1, 8)).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(sincos_pos_embed_2d(4, 18), ContractError);
}

TEST_CASE("encoder output lengths match the paper configurations") {
  // Width and sequence-length contract at ViT-S width; shallow depth keeps
  // the check fast (depth does not change shapes).
  ModelConfig cfg;
  cfg.enc = {2, 6, 64, 4, 1, 224, 16, 1};
  cfg.dec = {1, 3, 192, false};
  ModelParams params = ModelParams::init(cfg, 3);
  Rng rng(5);
  Tensor tokens = random_tokens(cfg.enc, rng);

  MaskPlan plan = mae_mask_plan(cfg.enc.grid(), 0.75, 11);
  Tensor latents = encode({tokens, Tensor(), Tensor()}, plan, params, cfg.enc);
  CHECK(latents.dim(0) == 1 + 49);
  CHECK(latents.dim(1) == 384);

  Tensor pred = decode_mae(latents, plan, params, cfg.enc, cfg.dec);
  CHECK(pred.dim(0) == 147);
  CHECK(pred.dim(1) == 768);

  // MMAE at budget 190 = (152, 19, 19).
  ModelConfig mm = cfg;
  mm.enc.modalities = 3;
  mm.dec.has_cross_attention = true;
  ModelParams mm_params = ModelParams::init(mm, 3);
  Rng prng(6);
  MaskPlan mplan = mask_one_plan(mm.enc.grid(), {152, 19, 19}, prng);
  Tensor mlat = encode({tokens, random_tokens(mm.enc, rng), random_tokens(mm.enc, rng)}, mplan,
                       mm_params, mm.enc);
  CHECK(mlat.dim(0) == 1 + 190);
  Tensor mpred = decode_mmae(mlat, mplan, mm_params, mm.enc, mm.dec);
  CHECK(mpred.dim(0) == 196 - 152);  // 19 + 19 H/E-visible + 6 hidden
  CHECK(mpred.dim(1) == 768);
}

TEST_CASE("zero image with zero projections assembles to pure position embeddings") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 2);
  params.at("enc.proj.rgb.w").data().setZero();
  Tensor tokens = Tensor::zeros({4, 48});
  MaskPlan plan = mae_mask_plan(cfg.enc.grid(), 0.5, 1);
  Tensor seq = assemble_encoder_input({tokens, Tensor(), Tensor()}, plan, params, cfg.enc);
  RowMat table = sincos_pos_embed_2d(2, 16);
  const auto& vis = plan.visible_for(Modality::rgb);
  for (size_t i = 0; i < vis.size(); ++i) {
    CHECK((seq.mat().row(1 + static_cast<Eigen::Index>(i)) - table.row(vis[i]))
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("plan/config modality mismatch is a contract error") {
  ModelConfig cfg = tiny_mmae_config();
  ModelParams params = ModelParams::init(cfg, 2);
  Rng rng(3);
  Tensor tokens = random_tokens(cfg.enc, rng);
  MaskPlan single = mae_mask_plan(cfg.enc.grid(), 0.5, 1);
  CHECK_THROWS_AS(encode({tokens, tokens, tokens}, single, params, cfg.enc), ContractError);

  MaskPlan tri = mask_one_plan(cfg.enc.grid(), {2, 1, 1}, rng);
  CHECK_THROWS_AS(decode_mae(Tensor::zeros({4, 16}), tri, params, cfg.enc, cfg.dec),
                  ContractError);
}

TEST_CASE("zero-initialized pixel projection predicts zeros") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 4);
  params.at("dec.pixel.w").data().setZero();
  Rng rng(9);
  Tensor tokens = random_tokens(cfg.enc, rng);
  MaskPlan plan = mae_mask_plan(cfg.enc.grid(), 0.5, 2);
  Tensor latents = encode({tokens, Tensor(), Tensor()}, plan, params, cfg.enc);
  Tensor pred = decode_mae(latents, plan, params, cfg.enc, cfg.dec);
  CHECK(pred.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mae decoder parameter gradients pass finite differences") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 5);
  Rng rng(6);
  Tensor tokens = random_tokens(cfg.enc, rng);
  MaskPlan plan = mae_mask_plan(cfg.enc.grid(), 0.5, 3);
  RowMat target = RowMat::Random(2, 48);

  auto loss = [&] {
    Tensor latents = encode({tokens, Tensor(), Tensor()}, plan, params, cfg.enc);
    Tensor pred = decode_mae(latents, plan, params, cfg.enc, cfg.dec);
    return reconstruction_loss(pred, target, true);
  };
  double err = grad_check(loss, params_with_prefix(params, "dec."), 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("mmae decoder parameter gradients pass finite differences") {
  ModelConfig cfg = tiny_mmae_config();
  ModelParams params = ModelParams::init(cfg, 7);
  Rng rng(8);
  std::array<Tensor, 3> tokens = {random_tokens(cfg.enc, rng), random_tokens(cfg.enc, rng),
                                  random_tokens(cfg.enc, rng)};
  Rng prng(4);
  MaskPlan plan = mask_one_plan(cfg.enc.grid(), {2, 1, 1}, prng);
  RowMat target = RowMat::Random(2, 48);

  auto loss = [&] {
    Tensor latents = encode(tokens, plan, params, cfg.enc);
    Tensor pred = decode_mmae(latents, plan, params, cfg.enc, cfg.dec);
    return reconstruction_loss(pred, target, false);
  };
  double err = grad_check(loss, params_with_prefix(params, "dec."), 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("full tiny model gradients pass finite differences end to end") {
  ModelConfig cfg = tiny_mmae_config();
  ModelParams params = ModelParams::init(cfg, 11);
  Rng rng(12);
  std::array<Tensor, 3> tokens = {random_tokens(cfg.enc, rng), random_tokens(cfg.enc, rng),
                                  random_tokens(cfg.enc, rng)};
  Rng prng(13);
  MaskPlan plan = mask_one_plan(cfg.enc.grid(), {2, 1, 1}, prng);
  RowMat target = RowMat::Random(2, 48);

  auto loss = [&] {
    Tensor latents = encode(tokens, plan, params, cfg.enc);
    Tensor pred = decode_mmae(latents, plan, params, cfg.enc, cfg.dec);
    return reconstruction_loss(pred, target, true);
  };
  std::vector<Tensor> leaves;
  for (auto& [name, t] : params.entries()) {
    if (name.rfind("head.", 0) != 0) leaves.push_back(t);
  }
  double err = grad_check(loss, leaves, 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("zeroing H and E latents changes the mmae reconstruction") {
  ModelConfig cfg = tiny_mmae_config();
  ModelParams params = ModelParams::init(cfg, 21);
  Rng rng(22);
  std::array<Tensor, 3> tokens = {random_tokens(cfg.enc, rng), random_tokens(cfg.enc, rng),
                                  random_tokens(cfg.enc, rng)};
  Rng prng(23);
  MaskPlan plan = mask_one_plan(cfg.enc.grid(), {2, 1, 1}, prng);

  Tensor latents = encode(tokens, plan, params, cfg.enc);
  Tensor pred = decode_mmae(latents, plan, params, cfg.enc, cfg.dec);

  Arr zeroed = latents.value();
  const int he_start = (1 + 2) * 8;  // global + rgb rows, width 8
  for (Eigen::Index i = he_start; i < zeroed.size(); ++i) zeroed(i) = 0.0;
  Tensor cut = Tensor::from_flat(latents.shape(), zeroed);
  Tensor pred_cut = decode_mmae(cut, plan, params, cfg.enc, cfg.dec);

  CHECK((pred.value() - pred_cut.value()).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("reconstruction loss values") {
  RowMat target(1, 2);
  target << 1.0, -1.0;
  Tensor pred0 = Tensor::zeros({1, 2});
  CHECK(reconstruction_loss(pred0, target, false).item() == doctest::Approx(1.0));

  Tensor exact = Tensor::from_matrix(target);
  CHECK(reconstruction_loss(exact, target, false).item() == doctest::Approx(0.0));

  // Constant patch standardizes to zero, so the loss is mean(pred^2).
  RowMat constant = RowMat::Constant(1, 4, 3.3);
  RowMat pred(1, 4);
  pred << 1, -1, 2, 0;
  CHECK(reconstruction_loss(Tensor::from_matrix(pred), constant, true).item() ==
        doctest::Approx(1.5));

  CHECK_THROWS_AS(reconstruction_loss(pred0, RowMat::Zero(2, 2), false), ShapeError);
}

TEST_CASE("norm-pix standardization is per patch") {
  RowMat t(2, 2);
  t << 1.0, 3.0, -5.0, 5.0;
  RowMat n = normalize_patch_targets(t, 1e-12);
  CHECK(n(0, 0) == doctest::Approx(-1.0));
  CHECK(n(0, 1) == doctest::Approx(1.0));
  CHECK(n(1, 0) == doctest::Approx(-1.0));
  CHECK(n(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("finetune forward: shapes, zero head, gradients, determinism") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 31);
  Rng rng(32);
  Tensor tokens = random_tokens(cfg.enc, rng);

  Tensor logits = finetune_forward(tokens, params, cfg.enc);
  CHECK(logits.shape() == std::vector<int>({1, 4}));
  // Zero classifier: uniform logits, cross entropy log(C).
  CHECK(cross_entropy(logits, {2}).item() == doctest::Approx(std::log(4.0)));

  // Eight-class head matches the task shape.
  ModelConfig cfg8 = tiny_config();
  cfg8.num_classes = 8;
  ModelParams p8 = ModelParams::init(cfg8, 33);
  CHECK(finetune_forward(tokens, p8, cfg8.enc).numel() == 8);

  auto loss = [&] { return cross_entropy(finetune_forward(tokens, params, cfg.enc), {1}); };
  double err = grad_check(loss, params_with_prefix(params, "head."), 1e-4);
  CHECK(err < 1e-6);

  Tensor a = finetune_forward(tokens, params, cfg.enc);
  Tensor b = finetune_forward(tokens, params, cfg.enc);
  CHECK((a.value() - b.value()).cwiseAbs().maxCoeff() == 0.0);  // bitwise

  // MMAE-pretrained params fine-tune through the RGB projection only.
  ModelConfig mm = tiny_mmae_config();
  ModelParams mp = ModelParams::init(mm, 34);
  CHECK(finetune_forward(tokens, mp, mm.enc).numel() == 4);
}

TEST_CASE("permutation equivariance: visible-token order does not matter") {
  ModelConfig cfg = tiny_mmae_config();
  ModelParams params = ModelParams::init(cfg, 41);
  Rng rng(42);
  std::array<Tensor, 3> tokens = {random_tokens(cfg.enc, rng), random_tokens(cfg.enc, rng),
                                  random_tokens(cfg.enc, rng)};
  Rng prng(43);
  MaskPlan sorted_plan = mask_one_plan(cfg.enc.grid(), {2, 1, 1}, prng);

  MaskPlan shuffled = sorted_plan;
  std::reverse(shuffled.visible[0].begin(), shuffled.visible[0].end());

  Tensor a = decode_mmae(encode(tokens, sorted_plan, params, cfg.enc), sorted_plan, params,
                         cfg.enc, cfg.dec);
  Tensor b = decode_mmae(encode(tokens, shuffled, params, cfg.enc), shuffled, params, cfg.enc,
                         cfg.dec);
  CHECK((a.value() - b.value()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("attention maps are thresholded sub-distributions") {
  ModelConfig cfg = tiny_config();
  cfg.enc.depth = 2;
  ModelParams params = ModelParams::init(cfg, 51);
  Rng rng(52);
  Tensor tokens = random_tokens(cfg.enc, rng);

  std::vector<RowMat> raw;
  std::vector<RowMat> maps = attention_maps(tokens, params, cfg.enc, 1, 0.5, &raw);
  REQUIRE(maps.size() == 2);  // one per head
  REQUIRE(raw.size() == 2);
  for (const RowMat& g : raw) {
    CHECK(g.minCoeff() >= 0.0);
    CHECK(g.sum() <= 1.0 + 1e-12);  // softmax row restricted to patch tokens
  }
  for (const RowMat& m : maps) {
    CHECK(m.rows() == 8);
    CHECK(m.cols() == 8);
    CHECK(m.minCoeff() >= 0.0);
    CHECK(m.maxCoeff() <= 1.0);
  }

  // Quantile 1.0 zeroes everything.
  std::vector<RowMat> dark = attention_maps(tokens, params, cfg.enc, 0, 1.0);
  for (const RowMat& m : dark) CHECK(m.cwiseAbs().maxCoeff() == 0.0);

  // Determinism, bit for bit.
  std::vector<RowMat> m1 = attention_maps(tokens, params, cfg.enc, 1, 0.5);
  std::vector<RowMat> m2 = attention_maps(tokens, params, cfg.enc, 1, 0.5);
  for (size_t i = 0; i < m1.size(); ++i) {
    CHECK((m1[i] - m2[i]).cwiseAbs().maxCoeff() == 0.0);
  }

  CHECK_THROWS_AS(attention_maps(tokens, params, cfg.enc, 7, 0.5), IndexError);
  ModelConfig no_global = tiny_config();
  no_global.enc.num_global_tokens = 0;
  ModelParams ng = ModelParams::init(no_global, 53);
  CHECK_THROWS_AS(attention_maps(tokens, ng, no_global.enc, 0, 0.5), ContractError);
}

TEST_CASE("embedding is the global token row") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 61);
  Rng rng(62);
  Tensor tokens = random_tokens(cfg.enc, rng);
  Vec e = embed_image(tokens, params, cfg.enc);
  Tensor seq = encode_full(tokens, params, cfg.enc);
  CHECK((e.transpose() - seq.mat().row(0)).cwiseAbs().maxCoeff() == 0.0);
}
