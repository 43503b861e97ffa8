#include <gtest/gtest.h>

#include <cmath>

#include "voxdiff/codec.hpp"
#include "voxdiff/gradcheck.hpp"
#include "voxdiff/sdf.hpp"

using namespace voxdiff;

namespace {

TsdfGrid random_grid(Dims3 dims, uint64_t seed) {
  TsdfGrid g;
  g.dims = dims;
  g.truncation = 0.2;
  g.values.resize(g.numel());
  Rng rng(seed);
  for (auto& v : g.values) v = rng.uniform(-0.2, 0.2);
  return g;
}

void fill_zero(Tensor t) { std::fill(t.value().begin(), t.value().end(), real(0)); }

CodecParams zero_codec(int64_t edge, int64_t n_z) {
  CodecParams p = init_codec_params(edge, n_z, 1);
  fill_zero(p.enc_w2);
  fill_zero(p.enc_b2);
  fill_zero(p.dec_w2);
  fill_zero(p.dec_b2);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Partition / assemble.
// ---------------------------------------------------------------------------

TEST(Partition, SixteenCubedIntoSixtyFourPatches) {
  TsdfGrid g = random_grid({16, 16, 16}, 3);
  PatchSpec spec = PatchSpec::for_grid(g.dims, 4);
  EXPECT_EQ(spec.count(), 64);
  auto patches = partition(g, spec);
  ASSERT_EQ(patches.size(), 64u);
  for (const auto& p : patches) EXPECT_EQ(p.size(), 64u);
}

TEST(Partition, SinglePatchIsTheGrid) {
  TsdfGrid g = random_grid({8, 8, 8}, 5);
  PatchSpec spec = PatchSpec::for_grid(g.dims, 8);
  auto patches = partition(g, spec);
  ASSERT_EQ(patches.size(), 1u);
  EXPECT_EQ(patches[0], g.values);
}

TEST(Partition, RoundTripIsBitwiseExact) {
  TsdfGrid g = random_grid({8, 12, 16}, 7);
  PatchSpec spec = PatchSpec::for_grid(g.dims, 4);
  TsdfGrid back = assemble(partition(g, spec), spec, g.truncation);
  EXPECT_EQ(back.values, g.values);
  EXPECT_EQ(back.dims, g.dims);
}

TEST(Partition, RejectsIndivisibleDims) {
  EXPECT_THROW(PatchSpec::for_grid({10, 16, 16}, 4), UsageError);
  EXPECT_THROW(PatchSpec::for_grid({16, 16, 16}, 1), UsageError);
}

// ---------------------------------------------------------------------------
// Encoder.
// ---------------------------------------------------------------------------

TEST(Encoder, ZeroFinalLayerMapsZeroPatchToZero) {
  CodecParams p = zero_codec(4, 8);
  Tensor z = encode_patch(std::vector<double>(64, 0.0), p);
  for (int64_t i = 0; i < z.numel(); ++i) EXPECT_DOUBLE_EQ(z.value()[i], 0.0);
}

TEST(Encoder, Deterministic) {
  CodecParams p = init_codec_params(4, 8, 2);
  std::vector<double> patch(64);
  Rng rng(4);
  for (auto& v : patch) v = rng.uniform(-0.2, 0.2);
  Tensor a = encode_patch(patch, p);
  Tensor b = encode_patch(patch, p);
  EXPECT_EQ(a.value(), b.value());
}

TEST(Encoder, GradientMatchesFiniteDifferences) {
  CodecParams p = init_codec_params(2, 4, 6);
  Rng rng(8);
  std::vector<real> patch(8);
  for (auto& v : patch) v = static_cast<real>(rng.uniform(-0.2, 0.2));
  Tensor x = Tensor::constant({1, 8}, std::move(patch));
  const auto f = [&](const std::vector<Tensor>& in) {
    CodecParams q = p;
    q.enc_w1 = in[0];
    q.enc_w2 = in[1];
    Tensor z = encode_batch(x, q);
    return reduce_sum(mul(z, z));
  };
  EXPECT_LE(grad_check(f, {p.enc_w1, p.enc_w2}, 1e-5), 1e-4);
}

// ---------------------------------------------------------------------------
// Quantizer.
// ---------------------------------------------------------------------------

namespace {
Codebook tiny_codebook() {
  Codebook cb;
  cb.K = 5;
  cb.n_z = 2;
  cb.entries = {0, 0, 1, 0, 2, 0, 3, 0, 1, 0};  // entries 1 and 4 coincide
  return cb;
}
}  // namespace

TEST(Quantize, ExactMatch) {
  Codebook cb = tiny_codebook();
  auto [idx, entry] = quantize({3.0, 0.0}, cb);
  EXPECT_EQ(idx, 3);
  EXPECT_EQ(entry, (std::vector<double>{3.0, 0.0}));
}

TEST(Quantize, TieBreaksToLowestIndex) {
  Codebook cb = tiny_codebook();
  // equidistant to entries 1 and 4 (identical entries)
  EXPECT_EQ(quantize({1.0, 5.0}, cb).first, 1);
}

TEST(Quantize, HandDistanceComparison) {
  Codebook cb;
  cb.K = 2;
  cb.n_z = 2;
  cb.entries = {0, 0, 1, 0};
  EXPECT_EQ(quantize({0.6, 0.0}, cb).first, 1);
  EXPECT_EQ(quantize({0.4, 0.0}, cb).first, 0);
}

TEST(Quantize, ProjectionFixedPoint) {
  Codebook cb;
  cb.K = 6;
  cb.n_z = 3;
  Rng rng(11);
  cb.entries.resize(18);
  for (auto& v : cb.entries) v = rng.uniform(-1.0, 1.0);
  for (int k = 0; k < cb.K; ++k) {
    auto [idx, entry] = quantize(std::vector<double>(cb.entry(k), cb.entry(k) + 3), cb);
    EXPECT_EQ(idx, k);
    EXPECT_EQ(entry, (std::vector<double>(cb.entry(k), cb.entry(k) + 3)));
  }
}

// ---------------------------------------------------------------------------
// k-means.
// ---------------------------------------------------------------------------

TEST(KMeans, RecoversTightClusters) {
  Rng rng(13);
  std::vector<std::vector<double>> latents;
  const std::vector<double> c0{0.0, 0.0}, c1{5.0, 5.0};
  for (int i = 0; i < 40; ++i) {
    latents.push_back({c0[0] + rng.uniform(-0.1, 0.1), c0[1] + rng.uniform(-0.1, 0.1)});
    latents.push_back({c1[0] + rng.uniform(-0.1, 0.1), c1[1] + rng.uniform(-0.1, 0.1)});
  }
  Codebook cb = init_codebook_kmeans(latents, 2, 10, 3);
  // each centroid lands within the radius of one cluster mean
  for (int k = 0; k < 2; ++k) {
    const double d0 = std::hypot(cb.entry(k)[0] - c0[0], cb.entry(k)[1] - c0[1]);
    const double d1 = std::hypot(cb.entry(k)[0] - c1[0], cb.entry(k)[1] - c1[1]);
    EXPECT_LE(std::min(d0, d1), 0.1);
  }
}

TEST(KMeans, OneCentroidPerPointIsExact) {
  std::vector<std::vector<double>> latents{{0, 0}, {1, 0}, {0, 1}, {2, 2}};
  Codebook cb = init_codebook_kmeans(latents, 4, 5, 1);
  EXPECT_NEAR(kmeans_objective(latents, cb), 0.0, 1e-18);
}

TEST(KMeans, ZeroItersKeepsSeedingCentroids) {
  std::vector<std::vector<double>> latents{{0, 0}, {1, 0}, {0, 1}, {2, 2}, {3, 1}};
  Codebook cb = init_codebook_kmeans(latents, 3, 0, 9);
  // k-means++ seeds are actual data points
  for (int k = 0; k < 3; ++k) {
    const std::vector<double> c(cb.entry(k), cb.entry(k) + 2);
    EXPECT_NE(std::find(latents.begin(), latents.end(), c), latents.end());
  }
}

TEST(KMeans, RejectsTooFewDistinctLatents) {
  std::vector<std::vector<double>> latents{{1, 1}, {1, 1}, {1, 1}, {2, 2}};
  EXPECT_THROW(init_codebook_kmeans(latents, 3, 5, 1), UsageError);
}

TEST(KMeans, ObjectiveNonIncreasing) {
  Rng rng(17);
  std::vector<std::vector<double>> latents;
  for (int i = 0; i < 60; ++i) latents.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});
  double prev = std::numeric_limits<double>::infinity();
  for (int iters = 0; iters <= 8; ++iters) {
    // same seed: identical seeding, so this walks the Lloyd path
    Codebook cb = init_codebook_kmeans(latents, 4, iters, 21);
    const double obj = kmeans_objective(latents, cb);
    EXPECT_LE(obj, prev + 1e-12);
    prev = obj;
  }
}

// ---------------------------------------------------------------------------
// VQ-VAE loss.
// ---------------------------------------------------------------------------

TEST(VqVaeLoss, PerfectReconstructionIsZero) {
  // zero patch, zero codebook entry, zero-final-layer codec: all terms vanish
  CodecParams p = zero_codec(2, 4);
  Tensor cb = Tensor::param({2, 4}, std::vector<real>(8, real(0)), "cb");
  Tensor x = Tensor::constant({1, 8}, std::vector<real>(8, real(0)));
  VqVaeLoss l = vqvae_loss(x, p, cb, 0.25);
  EXPECT_DOUBLE_EQ(static_cast<double>(l.loss.item()), 0.0);
}

TEST(VqVaeLoss, ZeroCommitmentWeightDropsTermAndGradient) {
  CodecParams p = init_codec_params(2, 4, 31);
  Rng rng(33);
  std::vector<real> cbv(3 * 4), xv(2 * 8);
  for (auto& v : cbv) v = static_cast<real>(rng.uniform(-1, 1));
  for (auto& v : xv) v = static_cast<real>(rng.uniform(-0.2, 0.2));
  Tensor cb = Tensor::param({3, 4}, cbv, "cb");
  Tensor x = Tensor::constant({2, 8}, xv);

  VqVaeLoss l0 = vqvae_loss(x, p, cb, 0.0);
  for (auto& t : p.all()) t.zero_grad();
  backward(l0.loss);
  const auto grad_beta0 = p.enc_w1.grad();

  // reference: straight-through reconstruction only (plus vq term, which has
  // no encoder gradient)
  for (auto& t : p.all()) t.zero_grad();
  Tensor z = encode_batch(x, p);
  Tensor zq = embedding_lookup(cb, quantize_rows(z, cb));
  Tensor recon = mse(decode_batch(add(z, stop_gradient(sub(zq, z))), p), x);
  backward(recon);
  EXPECT_EQ(grad_beta0, p.enc_w1.grad());
}

TEST(VqVaeLoss, StraightThroughGradientIdentity) {
  // gradient at encoder output equals gradient at the quantizer output
  CodecParams p = init_codec_params(2, 4, 41);
  Rng rng(43);
  std::vector<real> cbv(3 * 4), xv(8);
  for (auto& v : cbv) v = static_cast<real>(rng.uniform(-1, 1));
  for (auto& v : xv) v = static_cast<real>(rng.uniform(-0.2, 0.2));
  Tensor cb = Tensor::param({3, 4}, cbv, "cb");
  Tensor x = Tensor::constant({1, 8}, xv);
  VqVaeLoss l = vqvae_loss(x, p, cb, 0.0);
  backward(l.loss);
  EXPECT_EQ(l.encoder_latent.grad(), l.straight_through.grad());
}

TEST(VqVaeLoss, DecoderGradientMatchesFiniteDifferences) {
  CodecParams p = init_codec_params(2, 4, 51);
  Rng rng(53);
  std::vector<real> cbv(3 * 4), xv(8);
  for (auto& v : cbv) v = static_cast<real>(rng.uniform(-1, 1));
  for (auto& v : xv) v = static_cast<real>(rng.uniform(-0.2, 0.2));
  Tensor cb = Tensor::param({3, 4}, cbv, "cb");
  Tensor x = Tensor::constant({1, 8}, xv);
  const auto f = [&](const std::vector<Tensor>& in) {
    CodecParams q = p;
    q.dec_w1 = in[0];
    q.dec_w2 = in[1];
    return vqvae_loss(x, q, cb, 0.25).loss;
  };
  EXPECT_LE(grad_check(f, {p.dec_w1, p.dec_w2}, 1e-5), 1e-4);
}

TEST(VqVaeLoss, CodebookGradientOnlyFromVqTerm) {
  CodecParams p = init_codec_params(2, 4, 61);
  Rng rng(63);
  std::vector<real> cbv(3 * 4), xv(8);
  for (auto& v : cbv) v = static_cast<real>(rng.uniform(-1, 1));
  for (auto& v : xv) v = static_cast<real>(rng.uniform(-0.2, 0.2));
  Tensor x = Tensor::constant({1, 8}, xv);

  Tensor cb_full = Tensor::param({3, 4}, cbv, "cb");
  VqVaeLoss full = vqvae_loss(x, p, cb_full, 0.25);
  backward(full.loss);

  Tensor cb_vq = Tensor::param({3, 4}, cbv, "cb");
  Tensor z = stop_gradient(encode_batch(x, p));
  Tensor zq = embedding_lookup(cb_vq, quantize_rows(z, cb_vq));
  backward(mse(z, zq));
  for (int64_t i = 0; i < cb_full.numel(); ++i)
    EXPECT_NEAR(cb_full.grad()[i], cb_vq.grad()[i], 1e-12);
}

// ---------------------------------------------------------------------------
// Tokenize / detokenize on a trained toy codec.
// ---------------------------------------------------------------------------

namespace {
TrainedCodec toy_trained_codec(std::vector<std::pair<TsdfGrid, int>>& corpus) {
  corpus = make_corpus(6, 2, {8, 8, 8}, 0.2, 71, 4);
  CodecTrainOptions opt;
  opt.K = 6;
  opt.n_z = 8;
  opt.warmup_steps = 60;
  opt.joint_steps = 800;  // tight enough that round trips become fixed points
  opt.batch = 48;
  return train_codec(corpus, 4, opt, 73);
}
}  // namespace

TEST(Tokenize, RoundTripIsQuantizerFixedPoint) {
  std::vector<std::pair<TsdfGrid, int>> corpus;
  TrainedCodec tc = toy_trained_codec(corpus);
  TokenMap tokens = tokenize(corpus[0].first, tc.params, tc.codebook, corpus[0].second);
  TsdfGrid rec = detokenize(tokens, tc.params, tc.codebook, 0.2);
  TokenMap again = tokenize(rec, tc.params, tc.codebook, corpus[0].second);
  EXPECT_EQ(tokens.indices, again.indices);
}

TEST(Tokenize, DetokenizeRejectsMask) {
  std::vector<std::pair<TsdfGrid, int>> corpus;
  TrainedCodec tc = toy_trained_codec(corpus);
  TokenMap tokens = tokenize(corpus[0].first, tc.params, tc.codebook, -1);
  tokens.indices[3] = tc.codebook.mask_index();
  EXPECT_THROW(detokenize(tokens, tc.params, tc.codebook, 0.2), UnresolvedMaskError);
}

TEST(Tokenize, TrainingLossDecreased) {
  std::vector<std::pair<TsdfGrid, int>> corpus;
  TrainedCodec tc = toy_trained_codec(corpus);
  ASSERT_GT(tc.loss_curve.size(), 20u);
  EXPECT_LT(tc.loss_curve.back(), tc.loss_curve.front());
  EXPECT_LT(codec_reconstruction_error(corpus, tc.params, tc.codebook), 0.1);
}
