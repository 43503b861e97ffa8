#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "voxdiff/codec.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/schedule.hpp"
#include "voxdiff/tensor.hpp"

namespace voxdiff {

// Per-position distributions are vectors of log-probabilities over the K+1
// states, floored at log(1e-30) and normalized so exp sums to 1.
using LogProbs = std::vector<double>;

inline double floor_log(double lp) { return std::max(lp, kMinLogProb); }

inline LogProbs log_normalize(std::vector<double> probs) {
  double total = 0.0;
  for (double p : probs) total += p;
  if (!(total > 0.0))
    throw InconsistentStateError("distribution has no mass; state unreachable under the chain");
  LogProbs out(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) out[i] = floor_log(std::log(probs[i] / total));
  return out;
}

inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q_log) {
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * (std::log(p[i]) - q_log[i]);
  }
  return kl;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// ---------------------------------------------------------------------------
// Forward marginal q(s_t | s_0): closed-form cumulative row, sampled
// independently per position with a counter-based generator.
// ---------------------------------------------------------------------------

inline std::vector<double> forward_marginal_dist(int s0, int t, const DiffusionSchedule& s) {
  require(t >= 1 && t <= s.T, "timestep out of range");
  require(s0 >= 0 && s0 < s.K, "forward marginal needs a mask-free source token");
  return s.cumulative_row(s0, t);
}

inline int sample_categorical(const std::vector<double>& probs, Rng& rng) {
  return static_cast<int>(rng.categorical(probs));
}

inline TokenMap sample_forward(const TokenMap& s0, int t, const DiffusionSchedule& s,
                               uint64_t seed) {
  require(t >= 1 && t <= s.T, "timestep out of range");
  require(!s0.contains_mask(s.K), "forward chain starts from a mask-free map");
  TokenMap out = s0;
  for (int64_t i = 0; i < s0.count(); ++i) {
    Rng rng(derive_seed(seed, "forward", (static_cast<uint64_t>(t) << 32) | i));
    out.indices[i] = sample_categorical(s.cumulative_row(s0.indices[i], t), rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact posterior q(s_{t-1} | s_t, s_0) by Bayes over the chain.
// ---------------------------------------------------------------------------

inline LogProbs posterior_log(int s_t, int s0, int t, const DiffusionSchedule& s) {
  require(t >= 1 && t <= s.T, "timestep out of range");
  require(s0 >= 0 && s0 < s.K, "posterior needs a real s_0 category");
  require(s_t >= 0 && s_t <= s.K, "invalid s_t state");
  std::vector<double> num(s.K + 1, 0.0);
  for (int j = 0; j <= s.K; ++j)
    num[j] = s.step_prob(s_t, j, t) * s.cumulative_prob(j, s0, t - 1);
  return log_normalize(std::move(num));
}

// M[j][c] = q(s_{t-1}=j | s_t, s0_hat=c); (K+1) x K row-major, columns for
// unreachable (s_t, c) pairs are zero.
inline std::vector<double> reverse_matrix(int s_t, int t, const DiffusionSchedule& s) {
  require(t >= 1 && t <= s.T, "timestep out of range");
  std::vector<double> M(static_cast<size_t>(s.K + 1) * s.K, 0.0);
  std::vector<double> col(s.K + 1, 0.0);
  for (int c = 0; c < s.K; ++c) {
    double col_total = 0.0;
    for (int j = 0; j <= s.K; ++j) {
      col[j] = s.step_prob(s_t, j, t) * s.cumulative_prob(j, c, t - 1);
      col_total += col[j];
    }
    if (col_total <= 0.0) continue;  // s_t unreachable from this s0 candidate
    for (int j = 0; j <= s.K; ++j) M[static_cast<size_t>(j) * s.K + c] = col[j] / col_total;
  }
  return M;
}

// Eq.-5 style assembly: expectation of the posterior over a predicted
// distribution on s0 (K real categories, probabilities).
inline LogProbs reverse_log_dist(int s_t, const double* p_s0, int t, const DiffusionSchedule& s) {
  const auto M = reverse_matrix(s_t, t, s);
  std::vector<double> probs(s.K + 1, 0.0);
  for (int j = 0; j <= s.K; ++j) {
    const double* row = M.data() + static_cast<size_t>(j) * s.K;
    double acc = 0.0;
    for (int c = 0; c < s.K; ++c) acc += row[c] * p_s0[c];
    probs[j] = acc;
  }
  return log_normalize(std::move(probs));
}

// ---------------------------------------------------------------------------
// Reverse sampling step. The denoiser emits per-position log-probabilities
// over the K real categories; the final step (t = 1) decodes by argmax.
// ---------------------------------------------------------------------------

inline TokenMap reverse_step(const std::vector<double>& logp_s0, const TokenMap& s_t, int t,
                             const DiffusionSchedule& s, uint64_t seed) {
  const int64_t N = s_t.count();
  require(static_cast<int64_t>(logp_s0.size()) == N * s.K,
          "reverse_step: denoiser output must be N x K log-probabilities");
  TokenMap out = s_t;
  std::vector<double> p(s.K);
  for (int64_t i = 0; i < N; ++i) {
    const double* row = logp_s0.data() + i * s.K;
    for (int c = 0; c < s.K; ++c) p[c] = std::exp(row[c]);
    LogProbs lp = reverse_log_dist(s_t.indices[i], p.data(), t, s);
    if (t == 1) {
      // deterministic final decode; the assembly puts no mass on [MASK] here
      int best = 0;
      for (int j = 1; j < s.K; ++j)
        if (lp[j] > lp[best]) best = j;
      out.indices[i] = best;
      continue;
    }
    std::vector<double> probs(s.K + 1);
    for (int j = 0; j <= s.K; ++j) probs[j] = std::exp(lp[j]);
    Rng rng(derive_seed(seed, "reverse", (static_cast<uint64_t>(t) << 32) | i));
    out.indices[i] = sample_categorical(probs, rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classifier-free guidance: (1+w) * logp_cond - w * logp_uncond, floored and
// renormalized. w = 0 returns the conditional input unchanged (bitwise).
// ---------------------------------------------------------------------------

inline LogProbs apply_cfg(const LogProbs& logp_cond, const LogProbs& logp_uncond, double w) {
  require(w >= 0.0, "guidance weight must be >= 0");
  require(logp_cond.size() == logp_uncond.size(), "guidance: length mismatch");
  if (w == 0.0) return logp_cond;
  const size_t n = logp_cond.size();
  LogProbs g(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i) {
    g[i] = floor_log((1.0 + w) * logp_cond[i] - w * logp_uncond[i]);
    mx = std::max(mx, g[i]);
  }
  double z = 0.0;
  for (size_t i = 0; i < n; ++i) z += std::exp(g[i] - mx);
  const double log_z = mx + std::log(z);
  for (size_t i = 0; i < n; ++i) g[i] = floor_log(g[i] - log_z);
  return g;
}

// ---------------------------------------------------------------------------
// ELBO (Eq.-6 decomposition). The t = 1 term conditions on the answer, so it
// reduces to the reconstruction cross-entropy automatically.
// ---------------------------------------------------------------------------

// Per-position log-probabilities over K categories for a corrupted map.
using DenoiserFn = std::function<std::vector<double>(const TokenMap& s_t, int t)>;

inline std::vector<double> terminal_prior(const DiffusionSchedule& s) {
  std::vector<double> p(s.K + 1, 0.0);
  if (s.cum_mask[s.T] >= 1.0) {
    p[s.K] = 1.0;
  } else {
    // cumulative marginal of a uniform s_0
    for (int j = 0; j < s.K; ++j) p[j] = s.cum_keep[s.T] / s.K + s.cum_uniform[s.T];
    p[s.K] = s.cum_mask[s.T];
  }
  return p;
}

inline double elbo_prior_term(const TokenMap& s0, const DiffusionSchedule& s) {
  const auto prior = terminal_prior(s);
  std::vector<double> prior_log(prior.size());
  for (size_t j = 0; j < prior.size(); ++j)
    prior_log[j] = prior[j] > 0.0 ? std::log(prior[j]) : kMinLogProb;
  double total = 0.0;
  for (int64_t i = 0; i < s0.count(); ++i)
    total += kl_divergence(s.cumulative_row(s0.indices[i], s.T), prior_log);
  return total;
}

inline double elbo_kl_at(const TokenMap& s0, const TokenMap& s_t, int t,
                         const std::vector<double>& logits, const DiffusionSchedule& s) {
  double total = 0.0;
  std::vector<double> p(s.K);
  for (int64_t i = 0; i < s0.count(); ++i) {
    const double* row = logits.data() + i * s.K;
    for (int c = 0; c < s.K; ++c) p[c] = std::exp(row[c]);
    const LogProbs model = reverse_log_dist(s_t.indices[i], p.data(), t, s);
    const LogProbs target = posterior_log(s_t.indices[i], s0.indices[i], t, s);
    std::vector<double> target_p(s.K + 1);
    for (int j = 0; j <= s.K; ++j) target_p[j] = std::exp(target[j]);
    total += kl_divergence(target_p, model);
  }
  return total;
}

// Upper bound on -log p_theta(s0) in nats for the whole map. Sampled mode
// draws one s_t per timestep; exact mode (N = 1 only) enumerates s_t states.
inline double elbo(const TokenMap& s0, const DenoiserFn& denoiser, const DiffusionSchedule& s,
                   uint64_t seed, bool exact = false) {
  require(!s0.contains_mask(s.K), "elbo: s0 must be mask-free");
  double total = elbo_prior_term(s0, s);
  if (exact) {
    require(s0.count() == 1, "exact elbo supports single-token maps");
    for (int t = 1; t <= s.T; ++t) {
      const auto marg = forward_marginal_dist(s0.indices[0], t, s);
      for (int st = 0; st <= s.K; ++st) {
        if (marg[st] <= 0.0) continue;
        TokenMap stm = s0;
        stm.indices[0] = st;
        total += marg[st] * elbo_kl_at(s0, stm, t, denoiser(stm, t), s);
      }
    }
    return total;
  }
  for (int t = 1; t <= s.T; ++t) {
    TokenMap stm = sample_forward(s0, t, s, derive_seed(seed, "elbo", t));
    total += elbo_kl_at(s0, stm, t, denoiser(stm, t), s);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Training objective (Eq. 7): per sample draw t uniformly and s_t from the
// closed-form marginal; L_main is the exact cross-entropy of the true
// posterior against the assembled reverse distribution (the expectation of
// the sampled-s_{t-1} form), L_aux the NLL of the true s0.
// ---------------------------------------------------------------------------

// Batched denoiser: maps (corrupted index maps, timesteps) to a (B, N, K)
// tensor of log-probabilities. Conditioning labels are bound by the caller.
using DenoiserBatchFn =
    std::function<Tensor(const std::vector<std::vector<int>>& s_t, const std::vector<int>& t)>;

struct TrainingLoss {
  Tensor loss;
  double main_term = 0.0;
  double aux_term = 0.0;
};

inline TrainingLoss training_loss(const std::vector<const TokenMap*>& batch,
                                  const DenoiserBatchFn& denoiser, const DiffusionSchedule& s,
                                  double lambda_aux, uint64_t seed) {
  require(lambda_aux >= 0.0, "auxiliary weight must be >= 0");
  require(!batch.empty(), "training_loss: empty batch");
  const int64_t B = static_cast<int64_t>(batch.size());
  const int64_t N = batch[0]->count();
  const int K = s.K;

  std::vector<std::vector<int>> st_maps(B);
  std::vector<int> ts(B);
  for (int64_t b = 0; b < B; ++b) {
    require(batch[b]->count() == N, "training_loss: ragged batch");
    Rng trng(derive_seed(seed, "loss_t", b));
    ts[b] = 1 + static_cast<int>(trng.below(s.T));
    st_maps[b] = sample_forward(*batch[b], ts[b], s, derive_seed(seed, "loss_st", b)).indices;
  }

  Tensor logits = denoiser(st_maps, ts);  // (B, N, K) log-probs
  require(logits.rank() == 3 && logits.shape()[0] == B && logits.shape()[1] == N &&
              logits.shape()[2] == K,
          "training_loss: denoiser output shape mismatch");

  const int64_t R = B * N;
  // Reverse assembly matrices and posterior targets as constants; positions
  // share them whenever (t, s_t) or (t, s_t, s_0) repeat, so cache per batch.
  std::vector<real> mdata(static_cast<size_t>(R) * (K + 1) * K);
  std::vector<real> qdata(static_cast<size_t>(R) * (K + 1));
  std::vector<int> s0_flat(R);
  std::map<int64_t, std::vector<double>> m_cache;
  std::map<int64_t, std::vector<real>> q_cache;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < N; ++i) {
      const int64_t r = b * N + i;
      const int st = st_maps[b][i], s0 = batch[b]->indices[i];
      auto [mit, m_new] = m_cache.try_emplace(int64_t(ts[b]) * (K + 2) + st);
      if (m_new) mit->second = reverse_matrix(st, ts[b], s);
      std::copy(mit->second.begin(), mit->second.end(), mdata.begin() + r * (K + 1) * K);
      auto [qit, q_new] =
          q_cache.try_emplace((int64_t(ts[b]) * (K + 2) + st) * (K + 2) + s0);
      if (q_new) {
        const LogProbs post = posterior_log(st, s0, ts[b], s);
        qit->second.resize(K + 1);
        for (int j = 0; j <= K; ++j) qit->second[j] = static_cast<real>(std::exp(post[j]));
      }
      std::copy(qit->second.begin(), qit->second.end(), qdata.begin() + r * (K + 1));
      s0_flat[r] = s0;
    }
  }
  Tensor M = Tensor::constant({R, K + 1, K}, std::move(mdata));
  Tensor q_post = Tensor::constant({R, K + 1}, std::move(qdata));

  Tensor p_s0 = reshape(exp_op(logits), {R, K, 1});
  Tensor p_prev = reshape(bmm(M, p_s0), {R, K + 1});
  // Renormalize: unreachable-s0 columns may have dropped mass.
  Tensor row_sum = reshape(sum_lastaxis(p_prev), {R, 1});
  p_prev = div(p_prev, broadcast_to(row_sum, {R, K + 1}));
  Tensor log_p_prev = log_op(clamp_min(p_prev, static_cast<real>(kMinProb)));

  Tensor main_term = scale(reduce_sum(mul(q_post, log_p_prev)), real(-1) / static_cast<real>(R));
  Tensor aux_term =
      scale(reduce_sum(gather_lastaxis(reshape(logits, {R, K}), s0_flat)),
            real(-1) / static_cast<real>(R));

  TrainingLoss out;
  out.main_term = static_cast<double>(main_term.item());
  out.aux_term = static_cast<double>(aux_term.item());
  out.loss = add(main_term, scale(aux_term, static_cast<real>(lambda_aux)));
  return out;
}

// Exact expectation of L_main for a perfect predictor: mean posterior entropy
// over uniformly drawn timesteps and the forward marginal of s_t.
inline double training_loss_entropy_floor(const TokenMap& s0, const DiffusionSchedule& s) {
  double total = 0.0;
  for (int t = 1; t <= s.T; ++t) {
    double at_t = 0.0;
    for (int64_t i = 0; i < s0.count(); ++i) {
      const auto marg = forward_marginal_dist(s0.indices[i], t, s);
      for (int st = 0; st <= s.K; ++st) {
        if (marg[st] <= 0.0) continue;
        const LogProbs post = posterior_log(st, s0.indices[i], t, s);
        std::vector<double> p(s.K + 1);
        for (int j = 0; j <= s.K; ++j) p[j] = std::exp(post[j]);
        at_t += marg[st] * entropy(p);
      }
    }
    total += at_t / static_cast<double>(s0.count());
  }
  return total / static_cast<double>(s.T);
}

}  // namespace voxdiff
