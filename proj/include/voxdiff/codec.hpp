#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "voxdiff/optim.hpp"
#include "voxdiff/patch.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/tensor.hpp"

namespace voxdiff {

// K learned entries of dimension n_z; index K is reserved for [MASK] and
// never stores an entry.
struct Codebook {
  int K = 0;
  int n_z = 0;
  std::vector<double> entries;  // K * n_z, row-major

  int mask_index() const { return K; }
  const double* entry(int k) const { return entries.data() + static_cast<int64_t>(k) * n_z; }
};

// Codebook indices for one grid. Index K (= mask) only appears in corrupted
// or partially generated maps.
struct TokenMap {
  std::vector<int> indices;
  PatchSpec patch_spec;
  int class_label = -1;  // -1 = none

  int64_t count() const { return static_cast<int64_t>(indices.size()); }
  bool contains_mask(int K) const {
    for (int s : indices)
      if (s == K) return true;
    return false;
  }
};

// Per-patch MLP codec: edge^3 -> n_z and back, one hidden layer of width
// 2*n_z on each side.
struct CodecParams {
  int64_t edge = 4;
  int64_t n_z = 32;
  Tensor enc_w1, enc_b1, enc_w2, enc_b2;
  Tensor dec_w1, dec_b1, dec_w2, dec_b2;

  std::vector<Tensor> all() const {
    return {enc_w1, enc_b1, enc_w2, enc_b2, dec_w1, dec_b1, dec_w2, dec_b2};
  }
};

namespace codec_detail {

inline Tensor xavier(Shape shape, uint64_t seed, const std::string& name) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  std::vector<real> w(shape_numel(shape));
  for (auto& v : w) v = static_cast<real>(rng.uniform(-bound, bound));
  return Tensor::param(std::move(shape), std::move(w), name, /*decay=*/true);
}

inline Tensor zeros_param(Shape shape, const std::string& name) {
  return Tensor::param(std::move(shape), std::vector<real>(shape_numel(shape), real(0)), name);
}

}  // namespace codec_detail

inline CodecParams init_codec_params(int64_t edge, int64_t n_z, uint64_t seed) {
  const int64_t d = edge * edge * edge;
  const int64_t h = 2 * n_z;
  CodecParams p;
  p.edge = edge;
  p.n_z = n_z;
  p.enc_w1 = codec_detail::xavier({d, h}, derive_seed(seed, "enc_w1"), "codec.enc_w1");
  p.enc_b1 = codec_detail::zeros_param({h}, "codec.enc_b1");
  p.enc_w2 = codec_detail::xavier({h, n_z}, derive_seed(seed, "enc_w2"), "codec.enc_w2");
  p.enc_b2 = codec_detail::zeros_param({n_z}, "codec.enc_b2");
  p.dec_w1 = codec_detail::xavier({n_z, h}, derive_seed(seed, "dec_w1"), "codec.dec_w1");
  p.dec_b1 = codec_detail::zeros_param({h}, "codec.dec_b1");
  p.dec_w2 = codec_detail::xavier({h, d}, derive_seed(seed, "dec_w2"), "codec.dec_w2");
  p.dec_b2 = codec_detail::zeros_param({d}, "codec.dec_b2");
  return p;
}

// patches (B, edge^3) -> latents (B, n_z)
inline Tensor encode_batch(const Tensor& patches, const CodecParams& p) {
  require(patches.rank() == 2 && patches.shape()[1] == p.edge * p.edge * p.edge,
          "encode: patch shape mismatch");
  return linear(quick_gelu(linear(patches, p.enc_w1, p.enc_b1)), p.enc_w2, p.enc_b2);
}

// latents (B, n_z) -> patches (B, edge^3)
inline Tensor decode_batch(const Tensor& latents, const CodecParams& p) {
  require(latents.rank() == 2 && latents.shape()[1] == p.n_z, "decode: latent shape mismatch");
  return linear(quick_gelu(linear(latents, p.dec_w1, p.dec_b1)), p.dec_w2, p.dec_b2);
}

inline Tensor encode_patch(const std::vector<double>& patch, const CodecParams& p) {
  std::vector<real> data(patch.begin(), patch.end());
  Tensor x = Tensor::constant({1, static_cast<int64_t>(patch.size())}, std::move(data));
  return encode_batch(x, p);
}

// Nearest entry by L2; ties break to the lowest index.
inline std::pair<int, std::vector<double>> quantize(const std::vector<double>& z,
                                                    const Codebook& cb) {
  require(cb.K >= 1, "quantize: empty codebook");
  require(static_cast<int>(z.size()) == cb.n_z, "quantize: latent dimension mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < cb.K; ++k) {
    const double* e = cb.entry(k);
    double d = 0.0;
    for (int j = 0; j < cb.n_z; ++j) d += (z[j] - e[j]) * (z[j] - e[j]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return {best, std::vector<double>(cb.entry(best), cb.entry(best) + cb.n_z)};
}

// ---------------------------------------------------------------------------
// k-means codebook initialization (seeded k-means++, Lloyd updates).
// ---------------------------------------------------------------------------

inline Codebook init_codebook_kmeans(const std::vector<std::vector<double>>& latents, int K,
                                     int iters, uint64_t seed) {
  require(K >= 2, "codebook needs K >= 2");
  require(!latents.empty(), "k-means on empty latent set");
  const int n_z = static_cast<int>(latents[0].size());
  {
    auto uniq = latents;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    require(static_cast<int>(uniq.size()) >= K, "fewer than K distinct latents");
  }
  const auto dist2 = [n_z](const double* a, const double* b) {
    double d = 0.0;
    for (int j = 0; j < n_z; ++j) d += (a[j] - b[j]) * (a[j] - b[j]);
    return d;
  };

  Rng rng(derive_seed(seed, "kmeans"));
  std::vector<std::vector<double>> centroids;
  centroids.push_back(latents[rng.below(latents.size())]);
  std::vector<double> d2(latents.size());
  while (static_cast<int>(centroids.size()) < K) {
    for (size_t i = 0; i < latents.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, dist2(latents[i].data(), c.data()));
      d2[i] = best;
    }
    size_t pick = rng.categorical(d2);
    // all-zero weights can only happen if every point is already a centroid
    centroids.push_back(latents[pick]);
  }

  std::vector<int> assign(latents.size(), 0);
  for (int it = 0; it < iters; ++it) {
    for (size_t i = 0; i < latents.size(); ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        const double d = dist2(latents[i].data(), centroids[k].data());
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      assign[i] = best;
    }
    std::vector<std::vector<double>> sums(K, std::vector<double>(n_z, 0.0));
    std::vector<int64_t> counts(K, 0);
    for (size_t i = 0; i < latents.size(); ++i) {
      ++counts[assign[i]];
      for (int j = 0; j < n_z; ++j) sums[assign[i]][j] += latents[i][j];
    }
    for (int k = 0; k < K; ++k) {
      if (counts[k] == 0) continue;  // keep previous centroid; objective cannot increase
      for (int j = 0; j < n_z; ++j) centroids[k][j] = sums[k][j] / static_cast<double>(counts[k]);
    }
  }

  Codebook cb;
  cb.K = K;
  cb.n_z = n_z;
  cb.entries.reserve(static_cast<size_t>(K) * n_z);
  for (const auto& c : centroids) cb.entries.insert(cb.entries.end(), c.begin(), c.end());
  return cb;
}

inline double kmeans_objective(const std::vector<std::vector<double>>& latents,
                               const Codebook& cb) {
  double total = 0.0;
  for (const auto& z : latents) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cb.K; ++k) {
      double d = 0.0;
      for (int j = 0; j < cb.n_z; ++j) d += (z[j] - cb.entry(k)[j]) * (z[j] - cb.entry(k)[j]);
      best = std::min(best, d);
    }
    total += best;
  }
  return total;
}

// ---------------------------------------------------------------------------
// VQ-VAE objective: reconstruction + ||sg[Z]-Zq||^2 + beta ||Z-sg[Zq]||^2,
// with the straight-through estimator feeding the decoder.
// ---------------------------------------------------------------------------

struct VqVaeLoss {
  Tensor loss;
  Tensor reconstruction;   // decoder output
  Tensor encoder_latent;   // Z
  Tensor straight_through; // decoder input; gradient here equals gradient at Z
  std::vector<int> indices;
};

inline std::vector<int> quantize_rows(const Tensor& z, const Tensor& codebook) {
  const int64_t B = z.shape()[0], n_z = z.shape()[1];
  const int64_t K = codebook.shape()[0];
  std::vector<int> ids(B);
  for (int64_t b = 0; b < B; ++b) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int64_t k = 0; k < K; ++k) {
      double d = 0.0;
      for (int64_t j = 0; j < n_z; ++j) {
        const double diff = static_cast<double>(z.value()[b * n_z + j]) -
                            static_cast<double>(codebook.value()[k * n_z + j]);
        d += diff * diff;
      }
      if (d < bd) {
        bd = d;
        best = static_cast<int>(k);
      }
    }
    ids[b] = best;
  }
  return ids;
}

inline VqVaeLoss vqvae_loss(const Tensor& patches, const CodecParams& p, const Tensor& codebook,
                            double beta) {
  require(beta >= 0.0, "commitment weight must be >= 0");
  VqVaeLoss out;
  Tensor z = encode_batch(patches, p);
  out.indices = quantize_rows(z, codebook);
  Tensor zq = embedding_lookup(codebook, out.indices);
  out.encoder_latent = z;
  out.straight_through = add(z, stop_gradient(sub(zq, z)));
  out.reconstruction = decode_batch(out.straight_through, p);
  Tensor recon = mse(out.reconstruction, stop_gradient(patches));
  Tensor vq = mse(stop_gradient(z), zq);
  Tensor commit = scale(mse(z, stop_gradient(zq)), static_cast<real>(beta));
  out.loss = add(add(recon, vq), commit);
  return out;
}

// ---------------------------------------------------------------------------
// Tokenize / detokenize.
// ---------------------------------------------------------------------------

inline TokenMap tokenize(const TsdfGrid& grid, const CodecParams& p, const Codebook& cb,
                         int class_label = -1) {
  NoGradScope ng;
  const PatchSpec spec = PatchSpec::for_grid(grid.dims, p.edge);
  const auto patches = partition(grid, spec);
  std::vector<real> flat;
  flat.reserve(spec.count() * spec.patch_volume());
  for (const auto& patch : patches)
    for (double v : patch) flat.push_back(static_cast<real>(v));
  Tensor x = Tensor::constant({spec.count(), spec.patch_volume()}, std::move(flat));
  Tensor z = encode_batch(x, p);
  TokenMap map;
  map.patch_spec = spec;
  map.class_label = class_label;
  map.indices.resize(spec.count());
  std::vector<double> row(p.n_z);
  for (int64_t i = 0; i < spec.count(); ++i) {
    for (int64_t j = 0; j < p.n_z; ++j) row[j] = static_cast<double>(z.value()[i * p.n_z + j]);
    map.indices[i] = quantize(row, cb).first;
  }
  require(!map.contains_mask(cb.K), "tokenize produced a mask index");
  return map;
}

inline TsdfGrid detokenize(const TokenMap& tokens, const CodecParams& p, const Codebook& cb,
                           double truncation) {
  if (tokens.contains_mask(cb.K))
    throw UnresolvedMaskError("detokenize: token map still contains [MASK]");
  NoGradScope ng;
  Tensor cbt = Tensor::constant({cb.K, cb.n_z},
                                std::vector<real>(cb.entries.begin(), cb.entries.end()));
  Tensor zq = embedding_lookup(cbt, tokens.indices);
  Tensor dec = decode_batch(zq, p);
  std::vector<std::vector<double>> patches(tokens.count());
  const int64_t d = p.edge * p.edge * p.edge;
  for (int64_t i = 0; i < tokens.count(); ++i) {
    patches[i].resize(d);
    for (int64_t j = 0; j < d; ++j)
      patches[i][j] =
          std::clamp(static_cast<double>(dec.value()[i * d + j]), -truncation, truncation);
  }
  return assemble(patches, tokens.patch_spec, truncation);
}

// ---------------------------------------------------------------------------
// Desk-scale training: autoencoder warmup, k-means init, then joint training
// with the full objective.
// ---------------------------------------------------------------------------

struct CodecTrainOptions {
  int K = 32;
  int n_z = 32;
  double beta = 0.25;
  double lr = 1e-3;
  double adam_beta1 = 0.5;  // VQ-VAE literature choice carried over
  double adam_beta2 = 0.9;
  int batch = 256;
  int warmup_steps = 400;
  int joint_steps = 1200;
  int kmeans_iters = 25;
  int lr_halve_every = 600;
};

struct TrainedCodec {
  CodecParams params;
  Codebook codebook;
  std::vector<double> loss_curve;
};

inline std::vector<std::vector<double>> corpus_patches(
    const std::vector<std::pair<TsdfGrid, int>>& corpus, int64_t edge) {
  std::vector<std::vector<double>> all;
  for (const auto& [grid, label] : corpus) {
    auto patches = partition(grid, PatchSpec::for_grid(grid.dims, edge));
    for (auto& patch : patches) all.push_back(std::move(patch));
  }
  return all;
}

inline Tensor patch_batch_tensor(const std::vector<std::vector<double>>& patches,
                                 const std::vector<int64_t>& ids) {
  const int64_t d = static_cast<int64_t>(patches[0].size());
  std::vector<real> flat;
  flat.reserve(ids.size() * d);
  for (int64_t id : ids)
    for (double v : patches[id]) flat.push_back(static_cast<real>(v));
  return Tensor::constant({static_cast<int64_t>(ids.size()), d}, std::move(flat));
}

inline TrainedCodec train_codec(const std::vector<std::pair<TsdfGrid, int>>& corpus, int64_t edge,
                                const CodecTrainOptions& opt, uint64_t seed) {
  require(!corpus.empty(), "train_codec: empty corpus");
  const auto patches = corpus_patches(corpus, edge);
  const int64_t n = static_cast<int64_t>(patches.size());

  TrainedCodec out;
  out.params = init_codec_params(edge, opt.n_z, derive_seed(seed, "codec_init"));

  Rng batch_rng(derive_seed(seed, "codec_batches"));
  const auto draw_batch = [&](int64_t size) {
    std::vector<int64_t> ids(size);
    for (auto& id : ids) id = static_cast<int64_t>(batch_rng.below(n));
    return ids;
  };

  // Phase 1: plain autoencoder so k-means sees informative latents.
  {
    AdamW adam(out.params.all(), {opt.lr, opt.adam_beta1, opt.adam_beta2, 1e-8, 0.0});
    for (int step = 0; step < opt.warmup_steps; ++step) {
      Tensor x = patch_batch_tensor(patches, draw_batch(opt.batch));
      Tensor xhat = decode_batch(encode_batch(x, out.params), out.params);
      Tensor loss = mse(xhat, x);
      adam.zero_grad();
      backward(loss);
      adam.step();
      out.loss_curve.push_back(static_cast<double>(loss.item()));
    }
  }

  // Phase 2: codebook from k-means over all encoder latents.
  std::vector<std::vector<double>> latents;
  {
    NoGradScope ng;
    std::vector<int64_t> all_ids(n);
    for (int64_t i = 0; i < n; ++i) all_ids[i] = i;
    Tensor z = encode_batch(patch_batch_tensor(patches, all_ids), out.params);
    latents.resize(n, std::vector<double>(opt.n_z));
    for (int64_t i = 0; i < n; ++i)
      for (int j = 0; j < opt.n_z; ++j)
        latents[i][j] = static_cast<double>(z.value()[i * opt.n_z + j]);
  }
  Codebook cb = init_codebook_kmeans(latents, opt.K, opt.kmeans_iters, derive_seed(seed, "kmeans"));
  Tensor cbt = Tensor::param({opt.K, opt.n_z},
                             std::vector<real>(cb.entries.begin(), cb.entries.end()), "codec.codebook");

  // Phase 3: joint training with the quantizer in the loop.
  {
    auto params = out.params.all();
    params.push_back(cbt);
    AdamW adam(params, {opt.lr, opt.adam_beta1, opt.adam_beta2, 1e-8, 0.0});
    for (int step = 0; step < opt.joint_steps; ++step) {
      if (opt.lr_halve_every > 0 && step > 0 && step % opt.lr_halve_every == 0)
        adam.set_lr(adam.lr() * 0.5);
      Tensor x = patch_batch_tensor(patches, draw_batch(opt.batch));
      VqVaeLoss l = vqvae_loss(x, out.params, cbt, opt.beta);
      require(std::isfinite(static_cast<double>(l.loss.item())), "codec training diverged");
      adam.zero_grad();
      backward(l.loss);
      adam.step();
      out.loss_curve.push_back(static_cast<double>(l.loss.item()));
    }
  }

  out.codebook.K = opt.K;
  out.codebook.n_z = opt.n_z;
  out.codebook.entries.assign(cbt.value().begin(), cbt.value().end());
  return out;
}

// Mean absolute per-voxel error of quantized round trips over a corpus,
// in raw T-SDF units.
inline double codec_reconstruction_error(const std::vector<std::pair<TsdfGrid, int>>& corpus,
                                         const CodecParams& p, const Codebook& cb) {
  double total = 0.0;
  int64_t count = 0;
  for (const auto& [grid, label] : corpus) {
    TokenMap tokens = tokenize(grid, p, cb, label);
    TsdfGrid rec = detokenize(tokens, p, cb, grid.truncation);
    for (int64_t i = 0; i < grid.numel(); ++i) {
      total += std::fabs(rec.values[i] - grid.values[i]);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// Fraction of codebook entries used at least once over a corpus (diagnostic).
inline double codebook_utilization(const std::vector<std::pair<TsdfGrid, int>>& corpus,
                                   const CodecParams& p, const Codebook& cb) {
  std::vector<bool> used(cb.K, false);
  for (const auto& [grid, label] : corpus)
    for (int s : tokenize(grid, p, cb, label).indices) used[s] = true;
  int64_t n = 0;
  for (bool u : used) n += u;
  return static_cast<double>(n) / static_cast<double>(cb.K);
}

}  // namespace voxdiff
