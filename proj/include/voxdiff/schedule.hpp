#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "voxdiff/common.hpp"

namespace voxdiff {

// Markov corruption chain over K+1 states (K geometry categories plus the
// absorbing mask state K). The per-step transition matrix is
//
//   Q_t[i][j] = 1 - gamma_t - (K-1)/K * beta_t   (i = j < K)
//             = beta_t / K                       (i != j, both < K)
//             = gamma_t                          (j = K, i < K)
//   Q_t[K][.] = one-hot at K                     (mask row, absorbing)
//
// The t-step product Q_1...Q_t keeps the same structure, with
//   cum_keep[t]     = prod_{s<=t} (alpha_s - beta_s)     coefficient of I
//   cum_uniform[t]  = (1 - cum_keep[t] - cum_mask[t])/K  per-category mass
//   cum_mask[t]     = 1 - prod_{s<=t} (1 - gamma_s)      mask mass
// so cumulative marginals never need an explicit matrix product.
struct DiffusionSchedule {
  int T = 0;
  int K = 0;
  std::string kind;
  // index 1..T; [0] unused for per-step values
  std::vector<double> step_beta;   // total uniform-transition mass
  std::vector<double> step_gamma;  // mask-transition mass
  // index 0..T; cum_keep[0] = 1, cum_mask[0] = 0
  std::vector<double> cum_keep;
  std::vector<double> cum_uniform;  // per category
  std::vector<double> cum_mask;

  int mask_index() const { return K; }
  double step_alpha(int t) const { return 1.0 - step_gamma[t]; }
  double step_diag(int t) const {
    return 1.0 - step_gamma[t] - (K - 1) * step_beta[t] / K;
  }

  // Single entry of Q_t without materializing the row.
  double step_prob(int to, int from, int t) const {
    if (from == K) return to == K ? 1.0 : 0.0;
    if (to == K) return step_gamma[t];
    if (to == from) return step_diag(t);
    return step_beta[t] / K;
  }

  // Row of Q_t for a non-mask source category (K+1 entries).
  std::vector<double> step_row(int from, int t) const {
    std::vector<double> row(K + 1, 0.0);
    if (from == K) {
      row[K] = 1.0;
      return row;
    }
    for (int j = 0; j < K; ++j) row[j] = step_beta[t] / K;
    row[from] = step_diag(t);
    row[K] = step_gamma[t];
    return row;
  }

  // Row of the cumulative product Q_1..Q_t.
  std::vector<double> cumulative_row(int from, int t) const {
    std::vector<double> row(K + 1, 0.0);
    if (from == K) {
      row[K] = 1.0;
      return row;
    }
    for (int j = 0; j < K; ++j) row[j] = cum_uniform[t];
    row[from] += cum_keep[t];
    row[K] = cum_mask[t];
    return row;
  }

  double cumulative_prob(int to, int from, int t) const {
    if (from == K) return to == K ? 1.0 : 0.0;
    if (to == K) return cum_mask[t];
    return cum_uniform[t] + (to == from ? cum_keep[t] : 0.0);
  }
};

namespace schedule_detail {

inline void finalize(DiffusionSchedule& s) {
  s.cum_keep.assign(s.T + 1, 1.0);
  s.cum_uniform.assign(s.T + 1, 0.0);
  s.cum_mask.assign(s.T + 1, 0.0);
  for (int t = 1; t <= s.T; ++t) {
    const double beta = s.step_beta[t];
    const double gamma = s.step_gamma[t];
    require(beta >= 0.0 && gamma >= 0.0, "schedule: negative transition probability");
    require(1.0 - gamma - (s.K - 1) * beta / s.K >= -1e-12,
            "schedule: negative diagonal probability");
    s.cum_keep[t] = s.cum_keep[t - 1] * (1.0 - gamma - beta);
    s.cum_mask[t] = 1.0 - (1.0 - s.cum_mask[t - 1]) * (1.0 - gamma);
    s.cum_uniform[t] = (1.0 - s.cum_keep[t] - s.cum_mask[t]) / s.K;
    require(s.cum_keep[t] >= -1e-12 && s.cum_uniform[t] >= -1e-12,
            "schedule: negative cumulative probability");
  }
  // By T the original-token coefficient must have vanished ("completely
  // corrupted"): at most 1% of the mass still pinned to s_0.
  require(s.cum_keep[s.T] <= 0.01, "schedule: s_T retains the original token");
}

}  // namespace schedule_detail

// Explicit per-step values (mostly for oracles and randomized tests).
inline DiffusionSchedule build_schedule_from_steps(int T, int K, std::vector<double> betas,
                                                   std::vector<double> gammas,
                                                   bool check_corrupted = true) {
  require(T >= 1 && K >= 2, "schedule needs T >= 1, K >= 2");
  require(betas.size() == static_cast<size_t>(T) && gammas.size() == static_cast<size_t>(T),
          "schedule: per-step vectors must have length T");
  DiffusionSchedule s;
  s.T = T;
  s.K = K;
  s.kind = "explicit";
  s.step_beta.assign(T + 1, 0.0);
  s.step_gamma.assign(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    s.step_beta[t] = betas[t - 1];
    s.step_gamma[t] = gammas[t - 1];
  }
  if (check_corrupted) {
    schedule_detail::finalize(s);
  } else {
    // test-only path: keep cumulative algebra but skip the corruption gate
    auto relaxed = s;
    relaxed.cum_keep.assign(T + 1, 1.0);
    relaxed.cum_uniform.assign(T + 1, 0.0);
    relaxed.cum_mask.assign(T + 1, 0.0);
    for (int t = 1; t <= T; ++t) {
      relaxed.cum_keep[t] = relaxed.cum_keep[t - 1] * (1.0 - s.step_gamma[t] - s.step_beta[t]);
      relaxed.cum_mask[t] = 1.0 - (1.0 - relaxed.cum_mask[t - 1]) * (1.0 - s.step_gamma[t]);
      relaxed.cum_uniform[t] = (1.0 - relaxed.cum_keep[t] - relaxed.cum_mask[t]) / s.K;
    }
    s = relaxed;
  }
  return s;
}

// Named schedules:
//   linear-cumulative (default): cumulative mask mass 0.9*t/T and cumulative
//     uniform mass 0.1*t/T, per-step values recovered from the recurrences;
//     by T nothing of the original token remains.
//   mask-only: pure absorbing chain, cumulative mask mass t/T.
inline DiffusionSchedule build_schedule(int T, int K, const std::string& kind = "linear-cumulative") {
  require(T >= 1 && K >= 2, "schedule needs T >= 1, K >= 2");
  std::vector<double> betas(T), gammas(T);
  if (kind == "linear-cumulative") {
    double prev_mask = 0.0, prev_keep = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double frac = static_cast<double>(t) / T;
      const double mask = 0.9 * frac;
      const double keep = 1.0 - frac;  // 1 - mask - uniform
      const double gamma = 1.0 - (1.0 - mask) / (1.0 - prev_mask);
      const double beta = (1.0 - gamma) - keep / prev_keep;
      gammas[t - 1] = gamma;
      betas[t - 1] = beta;
      prev_mask = mask;
      prev_keep = keep;
    }
  } else if (kind == "mask-only") {
    for (int t = 1; t <= T; ++t) {
      gammas[t - 1] = 1.0 / static_cast<double>(T - t + 1);
      betas[t - 1] = 0.0;
    }
  } else {
    throw UsageError("unknown schedule kind: " + kind);
  }
  DiffusionSchedule s = build_schedule_from_steps(T, K, betas, gammas);
  s.kind = kind;
  return s;
}

// Diagnostic text table.
inline std::string dump_schedule(const DiffusionSchedule& s) {
  std::ostringstream os;
  os << "t\talpha\tbeta\tgamma\talpha_bar\tbeta_bar\tgamma_bar\n";
  os.precision(12);
  for (int t = 1; t <= s.T; ++t) {
    os << t << '\t' << s.step_alpha(t) << '\t' << s.step_beta[t] << '\t' << s.step_gamma[t] << '\t'
       << s.cum_keep[t] << '\t' << s.K * s.cum_uniform[t] << '\t' << s.cum_mask[t] << '\n';
  }
  return os.str();
}

}  // namespace voxdiff
