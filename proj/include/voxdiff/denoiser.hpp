#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "voxdiff/diffusion.hpp"
#include "voxdiff/optim.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/tensor.hpp"

namespace voxdiff {

// Transformer estimating p(s0_hat | s_t): token + factorized position
// embeddings, AdaLayerNorm timestep/label modulation, ordinary blocks, then
// multi-frequency fusion layers and a final block before the category head.
struct DenoiserConfig {
  enum class Condition { none, class_label, token_sequence };

  int channels = 64;
  int ordinary_blocks = 4;
  int mfm_layers = 3;
  int heads = 2;
  int mlp_ratio = 4;
  int num_classes = 4;  // real classes plus the trailing empty label
  Condition condition_mode = Condition::class_label;
  int K = 32;
  Dims3 patch_grid{4, 4, 4};
  int T = 25;
  int mfm_pool = 2;
  int cond_vocab = 0;  // token-sequence conditioning vocabulary
  // Zero residual output projections so every block starts as the identity.
  bool zero_init_residual = true;

  int64_t N() const { return volume(patch_grid); }
  int empty_label() const { return num_classes - 1; }

  static DenoiserConfig desk_scale() { return DenoiserConfig{}; }

  static DenoiserConfig paper_scale() {
    DenoiserConfig c;
    c.channels = 256;
    c.ordinary_blocks = 16;
    c.mfm_layers = 3;
    c.heads = 8;
    c.K = 512;
    c.patch_grid = {8, 8, 8};
    c.T = 100;
    return c;
  }
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct AdaLnParams {
  Tensor w, b;  // (C, 2C): shift and scale from the conditioning vector
};

struct MlpParams {
  Tensor w1, b1, w2, b2;
};

struct OrdinaryBlockParams {
  AdaLnParams ada1;
  AttentionParams attn;
  AdaLnParams ada2;
  MlpParams mlp;
  AttentionParams cross;  // used only in token-sequence mode
  bool has_cross = false;
};

struct MfmLayerParams {
  AdaLnParams ada_high;
  AttentionParams attn_high;
  AdaLnParams ada_low;
  AttentionParams attn_low;
  MlpParams fuse_high;  // f of the residual-add fusion
  MlpParams fuse_low;
};

struct DenoiserParams {
  DenoiserConfig config;
  Tensor token_embed;              // (K+1, C)
  Tensor pos_x, pos_y, pos_z;      // factorized position tables
  Tensor label_embed;              // (num_classes, C)
  Tensor time_table;               // constant sinusoidal table (T+1, C)
  MlpParams time_mlp;              // shared projection of t/label sum
  Tensor cond_embed;               // (cond_vocab, C) in token-sequence mode
  std::vector<OrdinaryBlockParams> blocks;
  std::vector<MfmLayerParams> mfm;
  OrdinaryBlockParams final_block;
  Tensor head_gain, head_bias, head_w, head_b;

  std::vector<Tensor> all() const {
    std::vector<Tensor> out{token_embed, pos_x, pos_y, pos_z, label_embed,
                            time_mlp.w1, time_mlp.b1, time_mlp.w2, time_mlp.b2};
    if (cond_embed.defined()) out.push_back(cond_embed);
    auto push_attn = [&out](const AttentionParams& a) {
      out.insert(out.end(), {a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo});
    };
    auto push_block = [&](const OrdinaryBlockParams& b) {
      out.insert(out.end(), {b.ada1.w, b.ada1.b});
      push_attn(b.attn);
      if (b.has_cross) push_attn(b.cross);
      out.insert(out.end(), {b.ada2.w, b.ada2.b, b.mlp.w1, b.mlp.b1, b.mlp.w2, b.mlp.b2});
    };
    for (const auto& b : blocks) push_block(b);
    for (const auto& m : mfm) {
      out.insert(out.end(), {m.ada_high.w, m.ada_high.b});
      push_attn(m.attn_high);
      out.insert(out.end(), {m.ada_low.w, m.ada_low.b});
      push_attn(m.attn_low);
      out.insert(out.end(), {m.fuse_high.w1, m.fuse_high.b1, m.fuse_high.w2, m.fuse_high.b2,
                             m.fuse_low.w1, m.fuse_low.b1, m.fuse_low.w2, m.fuse_low.b2});
    }
    push_block(final_block);
    out.insert(out.end(), {head_gain, head_bias, head_w, head_b});
    return out;
  }
};

namespace denoiser_detail {

inline Tensor xavier(Shape shape, uint64_t seed, const std::string& name) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  std::vector<real> w(shape_numel(shape));
  for (auto& v : w) v = static_cast<real>(rng.uniform(-bound, bound));
  return Tensor::param(std::move(shape), std::move(w), name, /*decay=*/true);
}

inline Tensor gaussian(Shape shape, double std_dev, uint64_t seed, const std::string& name) {
  Rng rng(seed);
  std::vector<real> w(shape_numel(shape));
  for (auto& v : w) v = static_cast<real>(rng.normal() * std_dev);
  return Tensor::param(std::move(shape), std::move(w), name);
}

inline Tensor zeros_param(Shape shape, const std::string& name, bool decay = false) {
  return Tensor::param(std::move(shape), std::vector<real>(shape_numel(shape), real(0)), name,
                       decay);
}

inline Tensor maybe_zero(Shape shape, bool zero, uint64_t seed, const std::string& name) {
  return zero ? zeros_param(std::move(shape), name, /*decay=*/true)
              : xavier(std::move(shape), seed, name);
}

inline AttentionParams init_attention(int C, bool zero_out, uint64_t seed,
                                      const std::string& prefix) {
  AttentionParams a;
  a.wq = xavier({C, C}, derive_seed(seed, "wq"), prefix + ".wq");
  a.bq = zeros_param({C}, prefix + ".bq");
  a.wk = xavier({C, C}, derive_seed(seed, "wk"), prefix + ".wk");
  a.bk = zeros_param({C}, prefix + ".bk");
  a.wv = xavier({C, C}, derive_seed(seed, "wv"), prefix + ".wv");
  a.bv = zeros_param({C}, prefix + ".bv");
  a.wo = maybe_zero({C, C}, zero_out, derive_seed(seed, "wo"), prefix + ".wo");
  a.bo = zeros_param({C}, prefix + ".bo");
  return a;
}

inline AdaLnParams init_adaln(int C, uint64_t /*seed*/, const std::string& prefix) {
  // Zero projection: modulation starts as plain LayerNorm, independent of t.
  AdaLnParams p;
  p.w = zeros_param({C, 2 * C}, prefix + ".w", /*decay=*/true);
  p.b = zeros_param({2 * C}, prefix + ".b");
  return p;
}

inline MlpParams init_mlp(int C, int hidden, bool zero_out, uint64_t seed,
                          const std::string& prefix) {
  MlpParams m;
  m.w1 = xavier({C, hidden}, derive_seed(seed, "w1"), prefix + ".w1");
  m.b1 = zeros_param({hidden}, prefix + ".b1");
  m.w2 = maybe_zero({hidden, C}, zero_out, derive_seed(seed, "w2"), prefix + ".w2");
  m.b2 = zeros_param({C}, prefix + ".b2");
  return m;
}

inline OrdinaryBlockParams init_block(const DenoiserConfig& cfg, uint64_t seed,
                                      const std::string& prefix) {
  OrdinaryBlockParams b;
  const int C = cfg.channels;
  b.ada1 = init_adaln(C, derive_seed(seed, "ada1"), prefix + ".ada1");
  b.attn = init_attention(C, cfg.zero_init_residual, derive_seed(seed, "attn"), prefix + ".attn");
  b.ada2 = init_adaln(C, derive_seed(seed, "ada2"), prefix + ".ada2");
  b.mlp = init_mlp(C, cfg.mlp_ratio * C, cfg.zero_init_residual, derive_seed(seed, "mlp"),
                   prefix + ".mlp");
  if (cfg.condition_mode == DenoiserConfig::Condition::token_sequence) {
    b.has_cross = true;
    b.cross =
        init_attention(C, cfg.zero_init_residual, derive_seed(seed, "cross"), prefix + ".cross");
  }
  return b;
}

inline Tensor sinusoidal_table(int T, int C) {
  std::vector<real> table(static_cast<size_t>(T + 1) * C);
  for (int t = 0; t <= T; ++t)
    for (int c = 0; c < C / 2; ++c) {
      const double freq = std::pow(10000.0, -2.0 * c / static_cast<double>(C));
      table[static_cast<size_t>(t) * C + 2 * c] = static_cast<real>(std::sin(t * freq));
      table[static_cast<size_t>(t) * C + 2 * c + 1] = static_cast<real>(std::cos(t * freq));
    }
  return Tensor::constant({T + 1, C}, std::move(table));
}

}  // namespace denoiser_detail

inline DenoiserParams init_denoiser(const DenoiserConfig& cfg, uint64_t seed) {
  using namespace denoiser_detail;
  require(cfg.channels % cfg.heads == 0, "channels must divide evenly across heads");
  require(cfg.channels % 2 == 0, "channels must be even");
  for (int d = 0; d < 3; ++d)
    require(cfg.patch_grid[d] % cfg.mfm_pool == 0 || cfg.mfm_layers == 0,
            "mfm pool must divide the patch grid");
  DenoiserParams P;
  P.config = cfg;
  const int C = cfg.channels;
  P.token_embed = gaussian({cfg.K + 1, C}, 0.02, derive_seed(seed, "token_embed"),
                           "denoiser.token_embed");
  P.pos_x = gaussian({cfg.patch_grid[0], C}, 0.02, derive_seed(seed, "pos_x"), "denoiser.pos_x");
  P.pos_y = gaussian({cfg.patch_grid[1], C}, 0.02, derive_seed(seed, "pos_y"), "denoiser.pos_y");
  P.pos_z = gaussian({cfg.patch_grid[2], C}, 0.02, derive_seed(seed, "pos_z"), "denoiser.pos_z");
  P.label_embed = gaussian({cfg.num_classes, C}, 0.02, derive_seed(seed, "label_embed"),
                           "denoiser.label_embed");
  P.time_table = sinusoidal_table(cfg.T, C);
  P.time_mlp = init_mlp(C, C, /*zero_out=*/false, derive_seed(seed, "time_mlp"),
                        "denoiser.time_mlp");
  if (cfg.condition_mode == DenoiserConfig::Condition::token_sequence) {
    require(cfg.cond_vocab >= 1, "token-sequence mode needs cond_vocab");
    P.cond_embed = gaussian({cfg.cond_vocab, C}, 0.02, derive_seed(seed, "cond_embed"),
                            "denoiser.cond_embed");
  }
  for (int i = 0; i < cfg.ordinary_blocks; ++i)
    P.blocks.push_back(init_block(cfg, derive_seed(seed, "block", i),
                                  "denoiser.block" + std::to_string(i)));
  for (int i = 0; i < cfg.mfm_layers; ++i) {
    MfmLayerParams m;
    const uint64_t ms = derive_seed(seed, "mfm", i);
    const std::string prefix = "denoiser.mfm" + std::to_string(i);
    m.ada_high = init_adaln(C, derive_seed(ms, "ada_h"), prefix + ".ada_high");
    m.attn_high = init_attention(C, cfg.zero_init_residual, derive_seed(ms, "attn_h"),
                                 prefix + ".attn_high");
    m.ada_low = init_adaln(C, derive_seed(ms, "ada_l"), prefix + ".ada_low");
    m.attn_low = init_attention(C, cfg.zero_init_residual, derive_seed(ms, "attn_l"),
                                prefix + ".attn_low");
    m.fuse_high = init_mlp(C, C, cfg.zero_init_residual, derive_seed(ms, "fuse_h"),
                           prefix + ".fuse_high");
    m.fuse_low = init_mlp(C, C, cfg.zero_init_residual, derive_seed(ms, "fuse_l"),
                          prefix + ".fuse_low");
    P.mfm.push_back(std::move(m));
  }
  P.final_block = init_block(cfg, derive_seed(seed, "final_block"), "denoiser.final");
  P.head_gain =
      Tensor::param({C}, std::vector<real>(C, real(1)), "denoiser.head_gain");
  P.head_bias = zeros_param({C}, "denoiser.head_bias");
  P.head_w = xavier({C, cfg.K}, derive_seed(seed, "head_w"), "denoiser.head_w");
  P.head_b = zeros_param({cfg.K}, "denoiser.head_b");
  return P;
}

// ---------------------------------------------------------------------------
// Forward pieces.
// ---------------------------------------------------------------------------

namespace denoiser_detail {

inline Tensor row_linear(const Tensor& x3, const Tensor& w, const Tensor& b) {
  const int64_t B = x3.shape()[0], N = x3.shape()[1], C = x3.shape()[2];
  Tensor y = linear(reshape(x3, {B * N, C}), w, b);
  return reshape(y, {B, N, w.shape()[1]});
}

// x (B,N,C) -> heads-major (B*h, N, dh)
inline Tensor split_heads(const Tensor& x, int heads) {
  const int64_t B = x.shape()[0], N = x.shape()[1], C = x.shape()[2];
  const int64_t dh = C / heads;
  return reshape(permute(reshape(x, {B, N, heads, dh}), {0, 2, 1, 3}), {B * heads, N, dh});
}

inline Tensor merge_heads(const Tensor& x, int heads) {
  const int64_t Bh = x.shape()[0], N = x.shape()[1], dh = x.shape()[2];
  const int64_t B = Bh / heads;
  return reshape(permute(reshape(x, {B, heads, N, dh}), {0, 2, 1, 3}), {B, N, heads * dh});
}

}  // namespace denoiser_detail

// Multi-head attention: queries from x, keys/values from kv (self-attention
// when kv == x). Shapes (B,N,C) and (B,S,C).
inline Tensor attention(const Tensor& x, const Tensor& kv, const AttentionParams& p, int heads) {
  using namespace denoiser_detail;
  const int64_t C = x.shape()[2];
  const int64_t dh = C / heads;
  Tensor q = split_heads(row_linear(x, p.wq, p.bq), heads);
  Tensor k = split_heads(row_linear(kv, p.wk, p.bk), heads);
  Tensor v = split_heads(row_linear(kv, p.wv, p.bv), heads);
  Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})),
                        static_cast<real>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor probs = softmax_lastaxis(scores);
  Tensor ctx = merge_heads(bmm(probs, v), heads);
  return row_linear(ctx, p.wo, p.bo);
}

// LayerNorm modulated by the conditioning vector: LN(x)*(1+scale) + shift.
inline Tensor ada_layer_norm(const Tensor& x, const Tensor& cvec, const AdaLnParams& p) {
  const int64_t C = x.shape()[2];
  Tensor ss = linear(cvec, p.w, p.b);  // (B, 2C)
  Tensor shift = slice(ss, 1, 0, C);
  Tensor gain = slice(ss, 1, C, C);
  return modulate_rows(layer_norm_lastaxis(x), gain, shift);
}

inline Tensor mlp_forward(const Tensor& x3, const MlpParams& p) {
  const int64_t B = x3.shape()[0], N = x3.shape()[1], C = x3.shape()[2];
  Tensor h = quick_gelu(linear(reshape(x3, {B * N, C}), p.w1, p.b1));
  return reshape(linear(h, p.w2, p.b2), {B, N, C});
}

// AdaLN -> self-attention -> AdaLN -> bottleneck MLP, both residual; the
// optional cross-attention reads an external condition sequence.
inline Tensor ordinary_block(const Tensor& x, const Tensor& cvec, const OrdinaryBlockParams& p,
                             int heads, const Tensor* cond_kv = nullptr) {
  Tensor a_in = ada_layer_norm(x, cvec, p.ada1);
  Tensor h = add(x, attention(a_in, a_in, p.attn, heads));
  if (p.has_cross && cond_kv != nullptr && cond_kv->shape()[1] > 0)
    h = add(h, attention(layer_norm_lastaxis(h), *cond_kv, p.cross, heads));
  return add(h, mlp_forward(ada_layer_norm(h, cvec, p.ada2), p.mlp));
}

// Dual-branch layer: the high branch keeps per-token features, the low branch
// mean-pools over pool^3 receptive fields; both self-attend, then exchange by
// residual-add fusion (x + f(x + aligned other)).
inline Tensor mfm_layer(const Tensor& x, const Tensor& cvec, const MfmLayerParams& p,
                        const DenoiserConfig& cfg) {
  const Dims3 grid = cfg.patch_grid;
  const int pool = cfg.mfm_pool;
  const Dims3 coarse{grid[0] / pool, grid[1] / pool, grid[2] / pool};
  Tensor low = mean_pool3d(x, grid, pool);
  Tensor high_in = ada_layer_norm(x, cvec, p.ada_high);
  Tensor xh = add(x, attention(high_in, high_in, p.attn_high, cfg.heads));
  Tensor low_in = ada_layer_norm(low, cvec, p.ada_low);
  Tensor yl = add(low, attention(low_in, low_in, p.attn_low, cfg.heads));
  yl = add(yl, mlp_forward(add(yl, mean_pool3d(xh, grid, pool)), p.fuse_low));
  return add(xh, mlp_forward(add(xh, upsample3d_nearest(yl, coarse, pool)), p.fuse_high));
}

struct DenoiserInput {
  std::vector<std::vector<int>> tokens;  // B maps of N indices in [0, K]
  std::vector<int> t;                    // per-sample timestep
  std::vector<int> labels;               // per-sample label (empty_label for none)
  std::vector<std::vector<int>> cond_tokens;  // token-sequence mode only
};

// Token + position embedding and the conditioning vector for AdaLayerNorm.
inline std::pair<Tensor, Tensor> embed(const DenoiserParams& P, const DenoiserInput& in) {
  const DenoiserConfig& cfg = P.config;
  const int64_t B = static_cast<int64_t>(in.tokens.size());
  const int64_t N = cfg.N();
  const int C = cfg.channels;

  std::vector<int> flat;
  flat.reserve(B * N);
  for (const auto& map : in.tokens) {
    require(static_cast<int64_t>(map.size()) == N, "embed: token map size mismatch");
    for (int s : map) {
      require(s >= 0 && s <= cfg.K, "embed: token index out of range");
      flat.push_back(s);
    }
  }
  Tensor x = reshape(embedding_lookup(P.token_embed, flat), {B, N, C});

  std::vector<int> ix(N), iy(N), iz(N);
  for (int64_t i = 0; i < N; ++i) {
    ix[i] = static_cast<int>(i % cfg.patch_grid[0]);
    iy[i] = static_cast<int>((i / cfg.patch_grid[0]) % cfg.patch_grid[1]);
    iz[i] = static_cast<int>(i / (cfg.patch_grid[0] * cfg.patch_grid[1]));
  }
  Tensor pos = add(add(embedding_lookup(P.pos_x, ix), embedding_lookup(P.pos_y, iy)),
                   embedding_lookup(P.pos_z, iz));
  x = add(x, broadcast_to(reshape(pos, {1, N, C}), {B, N, C}));

  std::vector<int> ts = in.t, labels = in.labels;
  for (int t : ts) require(t >= 1 && t <= cfg.T, "embed: timestep out of range");
  for (int y : labels) require(y >= 0 && y < cfg.num_classes, "embed: label out of range");
  Tensor cvec = add(embedding_lookup(P.time_table, ts), embedding_lookup(P.label_embed, labels));
  cvec = linear(quick_gelu(linear(cvec, P.time_mlp.w1, P.time_mlp.b1)), P.time_mlp.w2,
                P.time_mlp.b2);
  return {x, cvec};
}

// Full stack; returns per-position log-probabilities over the K categories.
inline Tensor denoiser_forward(const DenoiserParams& P, const DenoiserInput& in) {
  const DenoiserConfig& cfg = P.config;
  const int64_t B = static_cast<int64_t>(in.tokens.size());
  const int64_t N = cfg.N();
  const int C = cfg.channels;

  auto [x, cvec] = embed(P, in);

  Tensor cond_kv;
  const bool has_cond =
      cfg.condition_mode == DenoiserConfig::Condition::token_sequence && !in.cond_tokens.empty();
  if (has_cond) {
    require(static_cast<int64_t>(in.cond_tokens.size()) == B, "condition batch mismatch");
    const int64_t S = static_cast<int64_t>(in.cond_tokens[0].size());
    std::vector<int> flat;
    for (const auto& seq : in.cond_tokens) {
      require(static_cast<int64_t>(seq.size()) == S, "ragged condition sequences");
      flat.insert(flat.end(), seq.begin(), seq.end());
    }
    if (S > 0) cond_kv = reshape(embedding_lookup(P.cond_embed, flat), {B, S, C});
  }
  const Tensor* cond_ptr = cond_kv.defined() ? &cond_kv : nullptr;

  for (const auto& block : P.blocks) x = ordinary_block(x, cvec, block, cfg.heads, cond_ptr);
  for (const auto& layer : P.mfm) x = mfm_layer(x, cvec, layer, cfg);
  x = ordinary_block(x, cvec, P.final_block, cfg.heads, cond_ptr);

  Tensor gain = broadcast_to(reshape(add_scalar(P.head_gain, real(-1)), {1, C}), {B, C});
  Tensor bias = broadcast_to(reshape(P.head_bias, {1, C}), {B, C});
  Tensor h = modulate_rows(layer_norm_lastaxis(x), gain, bias);
  Tensor logits = linear(reshape(h, {B * N, C}), P.head_w, P.head_b);
  return reshape(log_softmax_lastaxis(logits), {B, N, cfg.K});
}

// Single-map convenience used by samplers and the ELBO (no tape).
inline std::vector<double> denoiser_logits(const DenoiserParams& P, const std::vector<int>& tokens,
                                           int t, int label,
                                           const std::vector<int>* cond = nullptr) {
  NoGradScope ng;
  DenoiserInput in;
  in.tokens = {tokens};
  in.t = {t};
  in.labels = {label};
  if (cond != nullptr) in.cond_tokens = {*cond};
  Tensor out = denoiser_forward(P, in);
  return std::vector<double>(out.value().begin(), out.value().end());
}

// ---------------------------------------------------------------------------
// Training loop (Eq.-7 objective, classifier-free label dropout).
// ---------------------------------------------------------------------------

struct DenoiserTrainOptions {
  int steps = 2500;
  int batch = 8;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double lambda_aux = 1e-3;
  double dropout_p = 0.5;
  int lr_decay_every = 1000;
  double lr_decay_factor = 0.5;
};

struct TrainedDenoiser {
  DenoiserParams params;
  std::vector<double> loss_curve;
};

inline TrainedDenoiser train_denoiser(const std::vector<TokenMap>& corpus,
                                      const DenoiserConfig& cfg, const DiffusionSchedule& schedule,
                                      const DenoiserTrainOptions& opt, uint64_t seed) {
  require(!corpus.empty(), "train_denoiser: empty corpus");
  require(schedule.K == cfg.K && schedule.T == cfg.T, "schedule/config mismatch");
  TrainedDenoiser out;
  out.params = init_denoiser(cfg, derive_seed(seed, "denoiser_init"));
  AdamW adam(out.params.all(),
             {opt.lr, opt.adam_beta1, opt.adam_beta2, 1e-8, opt.weight_decay});

  Rng pick(derive_seed(seed, "denoiser_batches"));
  Rng drop(derive_seed(seed, "label_dropout"));
  const int64_t n = static_cast<int64_t>(corpus.size());

  for (int step = 0; step < opt.steps; ++step) {
    if (opt.lr_decay_every > 0 && step > 0 && step % opt.lr_decay_every == 0)
      adam.set_lr(adam.lr() * opt.lr_decay_factor);

    std::vector<const TokenMap*> batch(opt.batch);
    std::vector<int> labels(opt.batch);
    for (int b = 0; b < opt.batch; ++b) {
      batch[b] = &corpus[pick.below(n)];
      int label = batch[b]->class_label;
      if (cfg.condition_mode != DenoiserConfig::Condition::class_label || label < 0 ||
          drop.uniform() < opt.dropout_p)
        label = cfg.empty_label();
      labels[b] = label;
    }

    auto fn = [&](const std::vector<std::vector<int>>& st, const std::vector<int>& ts) {
      DenoiserInput in;
      in.tokens = st;
      in.t = ts;
      in.labels = labels;
      return denoiser_forward(out.params, in);
    };
    TrainingLoss l =
        training_loss(batch, fn, schedule, opt.lambda_aux, derive_seed(seed, "step", step));
    const double lv = static_cast<double>(l.loss.item());
    if (!std::isfinite(lv))
      throw Error("diffusion training diverged at step " + std::to_string(step));
    adam.zero_grad();
    backward(l.loss);
    adam.step();
    out.loss_curve.push_back(lv);
  }
  return out;
}

inline double smoothed_tail_loss(const std::vector<double>& curve, double fraction = 0.1) {
  require(!curve.empty(), "empty loss curve");
  const size_t n = curve.size();
  const size_t k = std::max<size_t>(1, static_cast<size_t>(n * fraction));
  double acc = 0.0;
  for (size_t i = n - k; i < n; ++i) acc += curve[i];
  return acc / static_cast<double>(k);
}

}  // namespace voxdiff
