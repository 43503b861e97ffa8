#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "voxdiff/sdf.hpp"

namespace voxdiff {

enum class DistanceKind { chamfer, emd };

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::string params;
};

inline std::string format_metric_line(const MetricReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.name << '\t' << r.value << '\t' << r.params;
  return os.str();
}

namespace metric_detail {

inline double sq_dist(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline double min_sq_dist(const Vec3& p, const std::vector<Vec3>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& q : set) best = std::min(best, sq_dist(p, q));
  return best;
}

// Exact minimum-cost perfect matching on an n x n cost matrix (shortest
// augmenting paths with potentials, O(n^3)).
inline double solve_assignment(const std::vector<double>& cost, int n,
                               std::vector<int>* col_of_row = nullptr) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  if (col_of_row) col_of_row->assign(n, -1);
  for (int j = 1; j <= n; ++j) {
    total += cost[(p[j] - 1) * n + (j - 1)];
    if (col_of_row) (*col_of_row)[p[j] - 1] = j - 1;
  }
  return total;
}

}  // namespace metric_detail

// Symmetric mean squared nearest-neighbor distance.
inline double chamfer(const SurfacePointSet& X, const SurfacePointSet& Y) {
  require(!X.points.empty() && !Y.points.empty(), "chamfer: empty point set");
  double xy = 0.0, yx = 0.0;
  for (const auto& p : X.points) xy += metric_detail::min_sq_dist(p, Y.points);
  for (const auto& q : Y.points) yx += metric_detail::min_sq_dist(q, X.points);
  return xy / static_cast<double>(X.points.size()) + yx / static_cast<double>(Y.points.size());
}

// Exact earth mover distance: minimum-cost perfect matching under Euclidean
// cost, divided by the set size. Exact-assignment regime only.
inline double emd(const SurfacePointSet& X, const SurfacePointSet& Y) {
  require(X.points.size() == Y.points.size(), "emd: point sets must have equal size");
  require(!X.points.empty(), "emd: empty point set");
  require(X.points.size() <= 512, "emd: exact assignment limited to 512 points");
  const int n = static_cast<int>(X.points.size());
  std::vector<double> cost(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      cost[static_cast<size_t>(i) * n + j] =
          std::sqrt(metric_detail::sq_dist(X.points[i], Y.points[j]));
  return metric_detail::solve_assignment(cost, n) / static_cast<double>(n);
}

inline double set_distance(const SurfacePointSet& a, const SurfacePointSet& b, DistanceKind kind) {
  return kind == DistanceKind::chamfer ? chamfer(a, b) : emd(a, b);
}

// Leave-one-out accuracy of the 1-NN classifier over the pooled populations;
// 0.5 means the generated set is indistinguishable from the reference set.
inline double one_nna(const std::vector<SurfacePointSet>& generated,
                      const std::vector<SurfacePointSet>& reference, DistanceKind kind) {
  require(generated.size() >= 2 && reference.size() >= 2,
          "1-NNA needs at least two samples per population");
  const size_t ng = generated.size(), nr = reference.size(), n = ng + nr;
  const auto& sample = [&](size_t i) -> const SurfacePointSet& {
    return i < ng ? generated[i] : reference[i - ng];
  };
  std::vector<double> dist(n * n, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      const double d = set_distance(sample(i), sample(j), kind);
      dist[i * n + j] = d;
      dist[j * n + i] = d;
    }
  size_t correct = 0;
  for (size_t i = 0; i < n; ++i) {
    size_t nn = n;
    double best = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (dist[i * n + j] < best) {
        best = dist[i * n + j];
        nn = j;
      }
    }
    const bool same = (i < ng) == (nn < ng);
    correct += same;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// Completion-quality pair: for each reference, the best (MMD) and the mean
// (AMD) Chamfer distance over its k completions; averaged over references.
struct MmdAmd {
  double mmd = 0.0;
  double amd = 0.0;
};

inline MmdAmd mmd_amd(const std::vector<std::vector<SurfacePointSet>>& completions,
                      const std::vector<SurfacePointSet>& references) {
  require(completions.size() == references.size(),
          "mmd_amd: one completion set per reference");
  require(!references.empty(), "mmd_amd: empty reference set");
  MmdAmd out;
  for (size_t i = 0; i < references.size(); ++i) {
    require(!completions[i].empty(), "mmd_amd: need at least one completion");
    double best = std::numeric_limits<double>::infinity(), mean = 0.0;
    for (const auto& c : completions[i]) {
      const double d = chamfer(c, references[i]);
      best = std::min(best, d);
      mean += d;
    }
    out.mmd += best;
    out.amd += mean / static_cast<double>(completions[i].size());
  }
  out.mmd /= static_cast<double>(references.size());
  out.amd /= static_cast<double>(references.size());
  return out;
}

// Mean pairwise Chamfer distance (diversity).
inline double tmd(const std::vector<SurfacePointSet>& completions) {
  require(completions.size() >= 2, "tmd needs at least two completions");
  double total = 0.0;
  size_t pairs = 0;
  for (size_t i = 0; i < completions.size(); ++i)
    for (size_t j = i + 1; j < completions.size(); ++j) {
      total += chamfer(completions[i], completions[j]);
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

// Mean over completions of the directed Hausdorff distance from the partial
// input to the completion (Euclidean).
inline double uhd(const SurfacePointSet& partial, const std::vector<SurfacePointSet>& completions) {
  require(!partial.points.empty(), "uhd: empty partial set");
  require(!completions.empty(), "uhd: no completions");
  double total = 0.0;
  for (const auto& c : completions) {
    double worst = 0.0;
    for (const auto& p : partial.points)
      worst = std::max(worst, std::sqrt(metric_detail::min_sq_dist(p, c.points)));
    total += worst;
  }
  return total / static_cast<double>(completions.size());
}

// ---------------------------------------------------------------------------
// DCT power spectral density: orthonormal 3D type-II DCT, power binned into
// octave bands of the radial coefficient-index norm. Band 0 holds DC; band m
// covers 2^(m-1) <= r < 2^m.
// ---------------------------------------------------------------------------

struct DctPsd {
  std::vector<double> band_power;
  double total_power = 0.0;   // sum of squared coefficients
  double input_energy = 0.0;  // sum of squared samples (Parseval partner)
  int top_band() const { return static_cast<int>(band_power.size()) - 1; }
};

namespace metric_detail {

inline std::vector<double> dct_basis(int n) {
  std::vector<double> C(static_cast<size_t>(n) * n);
  for (int k = 0; k < n; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (int i = 0; i < n; ++i)
      C[static_cast<size_t>(k) * n + i] = s * std::cos(M_PI * (2 * i + 1) * k / (2.0 * n));
  }
  return C;
}

}  // namespace metric_detail

inline DctPsd dct_psd(const TsdfGrid& grid) {
  require(grid.dims[0] == grid.dims[1] && grid.dims[1] == grid.dims[2],
          "dct_psd requires a cubic grid");
  const int n = static_cast<int>(grid.dims[0]);
  const auto C = metric_detail::dct_basis(n);
  std::vector<double> a = grid.values, b(a.size());

  // transform along x, then y, then z (separable); storage is x-fastest
  const auto apply_axis = [&](const std::vector<double>& src, std::vector<double>& dst,
                              int axis) {
    const int64_t strides[3] = {1, n, static_cast<int64_t>(n) * n};
    const int u_axis = axis == 0 ? 1 : 0;
    const int v_axis = axis == 2 ? 1 : 2;
    for (int64_t v = 0; v < n; ++v)
      for (int64_t u = 0; u < n; ++u) {
        const int64_t base = u * strides[u_axis] + v * strides[v_axis];
        const int64_t stride = strides[axis];
        for (int k = 0; k < n; ++k) {
          double acc = 0.0;
          for (int i = 0; i < n; ++i)
            acc += C[static_cast<size_t>(k) * n + i] * src[base + i * stride];
          dst[base + k * stride] = acc;
        }
      }
  };
  apply_axis(a, b, 0);
  apply_axis(b, a, 1);
  apply_axis(a, b, 2);

  DctPsd out;
  for (double v : grid.values) out.input_energy += v * v;
  const double r_max = std::sqrt(3.0) * (n - 1);
  const int bands = r_max < 1.0 ? 1 : static_cast<int>(std::floor(std::log2(r_max))) + 2;
  out.band_power.assign(bands, 0.0);
  for (int kz = 0; kz < n; ++kz)
    for (int ky = 0; ky < n; ++ky)
      for (int kx = 0; kx < n; ++kx) {
        const double coeff = b[kx + static_cast<int64_t>(n) * (ky + static_cast<int64_t>(n) * kz)];
        const double p = coeff * coeff;
        out.total_power += p;
        const double r = std::sqrt(static_cast<double>(kx) * kx + static_cast<double>(ky) * ky +
                                   static_cast<double>(kz) * kz);
        const int band = r < 1.0 ? 0 : static_cast<int>(std::floor(std::log2(r))) + 1;
        out.band_power[std::min(band, bands - 1)] += p;
      }
  return out;
}

}  // namespace voxdiff
