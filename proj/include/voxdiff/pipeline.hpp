#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "voxdiff/codec.hpp"
#include "voxdiff/denoiser.hpp"
#include "voxdiff/diffusion.hpp"

namespace voxdiff {

// Conditioning is expressed as a corruption start: observed tokens are
// diffused k steps forward and the reverse chain runs from there instead of
// from the fully masked map.
struct ConditionSpec {
  enum class Mode { unconditional, completion, denoise, edit, class_conditional, token_sequence };
  Mode mode = Mode::unconditional;
  double start_fraction = 0.5;  // k/T; 0.5 for completion/denoise, 0.98 for edit
  int class_label = -1;         // -1 = empty label
  double guidance_w = 0.5;
  uint64_t seed = 0;
  int n_samples = 1;

  static ConditionSpec for_mode(Mode m) {
    ConditionSpec s;
    s.mode = m;
    s.start_fraction = (m == Mode::edit) ? 0.98 : 0.5;
    return s;
  }
};

inline int fraction_to_step(double fraction, int T) {
  require(fraction >= 0.0 && fraction <= 1.0, "start fraction must lie in [0,1]");
  const int k = static_cast<int>(std::lround(fraction * T));
  return std::clamp(k, 0, T);
}

// Axis-aligned box in grid fractions; a patch counts as observed iff it lies
// fully inside.
struct FractionBox {
  Vec3 lo{0.0, 0.0, 0.0};
  Vec3 hi{1.0, 1.0, 1.0};
};

inline std::vector<bool> observed_patches_from_box(const PatchSpec& spec, const FractionBox& box) {
  std::vector<bool> observed(spec.count(), false);
  int64_t p = 0;
  constexpr double eps = 1e-9;
  for (int64_t pz = 0; pz < spec.per_axis[2]; ++pz)
    for (int64_t py = 0; py < spec.per_axis[1]; ++py)
      for (int64_t px = 0; px < spec.per_axis[0]; ++px, ++p) {
        const int64_t idx[3] = {px, py, pz};
        bool inside = true;
        for (int d = 0; d < 3; ++d) {
          const double lo = static_cast<double>(idx[d]) / spec.per_axis[d];
          const double hi = static_cast<double>(idx[d] + 1) / spec.per_axis[d];
          inside = inside && lo >= box.lo[d] - eps && hi <= box.hi[d] + eps;
        }
        observed[p] = inside;
      }
  return observed;
}

// ---------------------------------------------------------------------------
// Reverse chain from timestep k down to 1. Guidance applies only when a
// label is present; the final map is asserted mask-free.
// ---------------------------------------------------------------------------

inline TokenMap reverse_chain(TokenMap state, int k, const DenoiserParams& P,
                              const DiffusionSchedule& schedule, int label, double guidance_w,
                              uint64_t seed, const std::vector<int>* cond_tokens = nullptr) {
  const DenoiserConfig& cfg = P.config;
  require(k >= 0 && k <= schedule.T, "chain start out of range");
  require(label < cfg.num_classes, "label out of range");
  const int empty = cfg.empty_label();
  const int cond_label = label >= 0 ? label : empty;
  const bool guided = label >= 0 && guidance_w > 0.0;

  for (int t = k; t >= 1; --t) {
    std::vector<double> logp =
        denoiser_logits(P, state.indices, t, cond_label, cond_tokens);
    if (guided) {
      const std::vector<double> logp_uncond =
          denoiser_logits(P, state.indices, t, empty, cond_tokens);
      for (int64_t i = 0; i < state.count(); ++i) {
        LogProbs cond_row(logp.begin() + i * cfg.K, logp.begin() + (i + 1) * cfg.K);
        LogProbs uncond_row(logp_uncond.begin() + i * cfg.K,
                            logp_uncond.begin() + (i + 1) * cfg.K);
        LogProbs g = apply_cfg(cond_row, uncond_row, guidance_w);
        std::copy(g.begin(), g.end(), logp.begin() + i * cfg.K);
      }
    }
    state = reverse_step(logp, state, t, schedule, derive_seed(seed, "chain", t));
  }
  if (k >= 1 && state.contains_mask(schedule.K))
    throw Error("reverse chain left unresolved masks; this should be impossible");
  return state;
}

inline TokenMap all_mask_map(const DenoiserConfig& cfg, int label = -1) {
  TokenMap m;
  m.patch_spec.edge = 0;  // filled by callers that detokenize
  m.patch_spec.per_axis = cfg.patch_grid;
  m.indices.assign(cfg.N(), cfg.K);
  m.class_label = label;
  return m;
}

inline TokenMap sample_tokens(const DenoiserParams& P, const DiffusionSchedule& schedule,
                              int label, double guidance_w, uint64_t seed) {
  TokenMap start = all_mask_map(P.config, label);
  return reverse_chain(std::move(start), schedule.T, P, schedule, label, guidance_w, seed);
}

inline TsdfGrid sample_unconditional(const DenoiserParams& P, const DiffusionSchedule& schedule,
                                     const CodecParams& codec, const Codebook& cb,
                                     double truncation, const ConditionSpec& spec) {
  TokenMap tokens = sample_tokens(P, schedule, spec.class_label, spec.guidance_w, spec.seed);
  tokens.patch_spec = PatchSpec{codec.edge, P.config.patch_grid};
  return detokenize(tokens, codec, cb, truncation);
}

// ---------------------------------------------------------------------------
// Completion: observed patches are diffused to k, unobserved start as [MASK].
// k = 0 requires full observation (masks could never resolve).
// ---------------------------------------------------------------------------

inline std::vector<TokenMap> complete_tokens(const TokenMap& observed_tokens,
                                             const std::vector<bool>& observed,
                                             const DenoiserParams& P,
                                             const DiffusionSchedule& schedule,
                                             const ConditionSpec& spec) {
  require(observed.size() == observed_tokens.indices.size(),
          "observed mask length must match token count");
  require(std::find(observed.begin(), observed.end(), true) != observed.end(),
          "completion requires a nonempty observed region");
  const int k = fraction_to_step(spec.start_fraction, schedule.T);
  const bool fully_observed =
      std::find(observed.begin(), observed.end(), false) == observed.end();
  require(k >= 1 || fully_observed, "k = 0 completion needs a fully observed input");

  std::vector<TokenMap> out;
  out.reserve(spec.n_samples);
  for (int s = 0; s < spec.n_samples; ++s) {
    const uint64_t run_seed = derive_seed(spec.seed, "completion", s);
    TokenMap state = observed_tokens;
    if (k >= 1) {
      state = sample_forward(observed_tokens, k, schedule, derive_seed(run_seed, "corrupt"));
      for (size_t i = 0; i < observed.size(); ++i)
        if (!observed[i]) state.indices[i] = schedule.K;
    }
    out.push_back(reverse_chain(std::move(state), k, P, schedule, spec.class_label,
                                spec.guidance_w, run_seed));
  }
  return out;
}

inline std::vector<TsdfGrid> complete(const TsdfGrid& partial, const std::vector<bool>& observed,
                                      const DenoiserParams& P, const DiffusionSchedule& schedule,
                                      const CodecParams& codec, const Codebook& cb,
                                      const ConditionSpec& spec) {
  TokenMap tokens = tokenize(partial, codec, cb, spec.class_label);
  std::vector<TsdfGrid> grids;
  for (auto& map : complete_tokens(tokens, observed, P, schedule, spec)) {
    map.patch_spec = tokens.patch_spec;
    grids.push_back(detokenize(map, codec, cb, partial.truncation));
  }
  return grids;
}

// ---------------------------------------------------------------------------
// Denoising: encode the noisy grid, diffuse all tokens to k, reverse.
// ---------------------------------------------------------------------------

inline TsdfGrid denoise_grid(const TsdfGrid& noisy, const DenoiserParams& P,
                             const DiffusionSchedule& schedule, const CodecParams& codec,
                             const Codebook& cb, const ConditionSpec& spec) {
  TokenMap tokens = tokenize(noisy, codec, cb, spec.class_label);
  const int k = fraction_to_step(spec.start_fraction, schedule.T);
  TokenMap state = tokens;
  if (k >= 1)
    state = sample_forward(tokens, k, schedule, derive_seed(spec.seed, "denoise_corrupt"));
  TokenMap result = reverse_chain(std::move(state), k, P, schedule, spec.class_label,
                                  spec.guidance_w, derive_seed(spec.seed, "denoise"));
  result.patch_spec = tokens.patch_spec;
  return detokenize(result, codec, cb, noisy.truncation);
}

// Additive noise used by the denoising benchmark: X + alpha * eps, clamped
// back to the truncation range.
enum class NoiseKind { gaussian, uniform };

inline TsdfGrid add_noise(const TsdfGrid& clean, double alpha, NoiseKind kind, uint64_t seed) {
  TsdfGrid noisy = clean;
  Rng rng(derive_seed(seed, "noise"));
  for (auto& v : noisy.values) {
    const double eps = kind == NoiseKind::gaussian ? rng.normal() : rng.uniform(-1.0, 1.0);
    v = std::clamp(v + alpha * eps, -clean.truncation, clean.truncation);
  }
  return noisy;
}

// ---------------------------------------------------------------------------
// Editing: diffuse an existing map close to T, then reverse under a new
// label with guidance.
// ---------------------------------------------------------------------------

inline TokenMap edit_tokens(const TokenMap& current, int new_label, const DenoiserParams& P,
                            const DiffusionSchedule& schedule, const ConditionSpec& spec) {
  require(!current.contains_mask(schedule.K), "edit needs a mask-free token map");
  const int k = fraction_to_step(spec.start_fraction, schedule.T);
  TokenMap state = current;
  if (k >= 1) state = sample_forward(current, k, schedule, derive_seed(spec.seed, "edit_corrupt"));
  TokenMap out = reverse_chain(std::move(state), k, P, schedule, new_label, spec.guidance_w,
                               derive_seed(spec.seed, "edit"));
  out.patch_spec = current.patch_spec;
  out.class_label = new_label;
  return out;
}

inline TsdfGrid edit(const TokenMap& current, int new_label, const DenoiserParams& P,
                     const DiffusionSchedule& schedule, const CodecParams& codec,
                     const Codebook& cb, double truncation, const ConditionSpec& spec) {
  return detokenize(edit_tokens(current, new_label, P, schedule, spec), codec, cb, truncation);
}

}  // namespace voxdiff
