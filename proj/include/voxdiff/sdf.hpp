#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "voxdiff/common.hpp"
#include "voxdiff/rng.hpp"

namespace voxdiff {

// Dense truncated signed-distance grid over the cube [-1,1]^3, sampled at
// voxel centers, stored x-fastest. Negative inside, clamped to [-tau, tau].
struct TsdfGrid {
  Dims3 dims{0, 0, 0};
  double truncation = 0.2;
  std::vector<double> values;  // dims[0]*dims[1]*dims[2], x-fastest

  int64_t numel() const { return volume(dims); }
  double& at(int64_t x, int64_t y, int64_t z) {
    return values[x + dims[0] * (y + dims[1] * z)];
  }
  double at(int64_t x, int64_t y, int64_t z) const {
    return values[x + dims[0] * (y + dims[1] * z)];
  }
  // Center of voxel i along an axis of extent n.
  static double axis_coord(int64_t i, int64_t n) {
    return -1.0 + 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
  }
  Vec3 voxel_center(int64_t x, int64_t y, int64_t z) const {
    return {axis_coord(x, dims[0]), axis_coord(y, dims[1]), axis_coord(z, dims[2])};
  }
  double spacing() const { return 2.0 / static_cast<double>(dims[0]); }
};

enum class ShapeKind { box, cylinder, union_of_two };

// Analytic solid, strictly inside [-0.9, 0.9]^3.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::box;
  Vec3 box_center{0, 0, 0};
  Vec3 box_half{0.5, 0.5, 0.5};
  Vec3 cyl_center{0, 0, 0};  // axis along z
  double cyl_radius = 0.4;
  double cyl_half_height = 0.5;
  int class_label = 0;

  static ShapeSpec box_of(Vec3 center, Vec3 half, int label = 0) {
    ShapeSpec s;
    s.kind = ShapeKind::box;
    s.box_center = center;
    s.box_half = half;
    s.class_label = label;
    return s;
  }
};

struct SurfacePointSet {
  std::vector<Vec3> points;
  size_t count() const { return points.size(); }
};

namespace sdf_detail {

inline double sd_box(const Vec3& p, const Vec3& c, const Vec3& h) {
  const double qx = std::fabs(p[0] - c[0]) - h[0];
  const double qy = std::fabs(p[1] - c[1]) - h[1];
  const double qz = std::fabs(p[2] - c[2]) - h[2];
  const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0), oz = std::max(qz, 0.0);
  return std::sqrt(ox * ox + oy * oy + oz * oz) + std::min(std::max({qx, qy, qz}), 0.0);
}

inline double sd_cylinder_z(const Vec3& p, const Vec3& c, double r, double hh) {
  const double dr = std::hypot(p[0] - c[0], p[1] - c[1]) - r;
  const double dz = std::fabs(p[2] - c[2]) - hh;
  const double or_ = std::max(dr, 0.0), oz = std::max(dz, 0.0);
  return std::min(std::max(dr, dz), 0.0) + std::sqrt(or_ * or_ + oz * oz);
}

inline void check_inside(bool ok) {
  require(ok, "shape parameters leave the [-0.9,0.9]^3 bound; spec rejected");
}

}  // namespace sdf_detail

inline double evaluate_sdf(const ShapeSpec& spec, const Vec3& p) {
  using namespace sdf_detail;
  switch (spec.kind) {
    case ShapeKind::box:
      return sd_box(p, spec.box_center, spec.box_half);
    case ShapeKind::cylinder:
      return sd_cylinder_z(p, spec.cyl_center, spec.cyl_radius, spec.cyl_half_height);
    case ShapeKind::union_of_two:
      return std::min(sd_box(p, spec.box_center, spec.box_half),
                      sd_cylinder_z(p, spec.cyl_center, spec.cyl_radius, spec.cyl_half_height));
  }
  return 0.0;
}

inline void validate_spec(const ShapeSpec& spec) {
  using namespace sdf_detail;
  const auto box_ok = [&] {
    for (int d = 0; d < 3; ++d)
      if (std::fabs(spec.box_center[d]) + spec.box_half[d] > 0.9) return false;
    return true;
  };
  const auto cyl_ok = [&] {
    return std::fabs(spec.cyl_center[0]) + spec.cyl_radius <= 0.9 &&
           std::fabs(spec.cyl_center[1]) + spec.cyl_radius <= 0.9 &&
           std::fabs(spec.cyl_center[2]) + spec.cyl_half_height <= 0.9;
  };
  switch (spec.kind) {
    case ShapeKind::box: check_inside(box_ok()); break;
    case ShapeKind::cylinder: check_inside(cyl_ok()); break;
    case ShapeKind::union_of_two: check_inside(box_ok() && cyl_ok()); break;
  }
}

// Clamp to [-threshold, threshold]; idempotent, rejects non-finite input.
inline TsdfGrid truncate_and_normalize(TsdfGrid grid, double threshold) {
  require(threshold > 0.0, "truncation threshold must be positive");
  for (auto& v : grid.values) {
    require_data(std::isfinite(v), "non-finite value in raw distance grid");
    v = std::clamp(v, -threshold, threshold);
  }
  grid.truncation = threshold;
  return grid;
}

inline TsdfGrid generate_shape(const ShapeSpec& spec, const Dims3& dims, double truncation,
                               int64_t patch_edge = 1) {
  require(truncation > 0.0, "truncation must be positive");
  for (int d = 0; d < 3; ++d)
    require(dims[d] > 0 && dims[d] % patch_edge == 0, "grid dims must be divisible by patch edge");
  validate_spec(spec);
  TsdfGrid g;
  g.dims = dims;
  g.truncation = truncation;
  g.values.resize(g.numel());
  for (int64_t z = 0; z < dims[2]; ++z)
    for (int64_t y = 0; y < dims[1]; ++y)
      for (int64_t x = 0; x < dims[0]; ++x)
        g.at(x, y, z) = std::clamp(evaluate_sdf(spec, g.voxel_center(x, y, z)), -truncation,
                                   truncation);
  return g;
}

// Trilinear interpolation of the grid (voxel-center convention); queries are
// clamped to the center lattice hull.
inline double interpolate_tsdf(const TsdfGrid& g, const Vec3& p) {
  double fx[3];
  int64_t i0[3];
  for (int d = 0; d < 3; ++d) {
    const double n = static_cast<double>(g.dims[d]);
    double u = (p[d] + 1.0) * 0.5 * n - 0.5;  // fractional voxel-center index
    u = std::clamp(u, 0.0, n - 1.0);
    i0[d] = std::min(static_cast<int64_t>(u), g.dims[d] - 2 >= 0 ? g.dims[d] - 2 : 0);
    fx[d] = u - static_cast<double>(i0[d]);
  }
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? fx[0] : 1.0 - fx[0]) * (dy ? fx[1] : 1.0 - fx[1]) *
                         (dz ? fx[2] : 1.0 - fx[2]);
        acc += w * g.at(std::min(i0[0] + dx, g.dims[0] - 1), std::min(i0[1] + dy, g.dims[1] - 1),
                        std::min(i0[2] + dz, g.dims[2] - 1));
      }
  return acc;
}

// All zero crossings along axis edges between adjacent voxel centers, each
// refined by linear interpolation along its edge.
inline std::vector<Vec3> zero_crossings(const TsdfGrid& g) {
  std::vector<Vec3> pts;
  const auto consider = [&](int64_t x, int64_t y, int64_t z, int axis) {
    int64_t x2 = x + (axis == 0), y2 = y + (axis == 1), z2 = z + (axis == 2);
    const double a = g.at(x, y, z), b = g.at(x2, y2, z2);
    if (a == 0.0) {
      pts.push_back(g.voxel_center(x, y, z));
      return;
    }
    if (a * b < 0.0) {
      const double t = a / (a - b);
      const Vec3 p0 = g.voxel_center(x, y, z);
      const Vec3 p1 = g.voxel_center(x2, y2, z2);
      pts.push_back({p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1]),
                     p0[2] + t * (p1[2] - p0[2])});
    }
  };
  for (int64_t z = 0; z < g.dims[2]; ++z)
    for (int64_t y = 0; y < g.dims[1]; ++y)
      for (int64_t x = 0; x < g.dims[0]; ++x) {
        if (x + 1 < g.dims[0]) consider(x, y, z, 0);
        if (y + 1 < g.dims[1]) consider(x, y, z, 1);
        if (z + 1 < g.dims[2]) consider(x, y, z, 2);
      }
  return pts;
}

// n points drawn uniformly (with replacement) from the zero-crossing
// candidates; deterministic given seed.
inline SurfacePointSet sample_surface_points(const TsdfGrid& grid, size_t n, uint64_t seed) {
  require(n >= 1, "surface sampling needs n >= 1");
  const auto candidates = zero_crossings(grid);
  if (candidates.empty()) throw EmptySurfaceError("grid has no zero crossing");
  Rng rng(derive_seed(seed, "surface"));
  SurfacePointSet out;
  out.points.reserve(n);
  for (size_t i = 0; i < n; ++i) out.points.push_back(candidates[rng.below(candidates.size())]);
  return out;
}

// Deterministic randomized corpus; labels cycle 0..classes-1 so counts are
// balanced within one. Kind follows the label (box / cylinder / union).
inline ShapeSpec random_shape_spec(int label, uint64_t seed) {
  Rng rng(seed);
  ShapeSpec s;
  s.class_label = label;
  s.kind = static_cast<ShapeKind>(label % 3);
  for (int d = 0; d < 3; ++d) {
    s.box_center[d] = rng.uniform(-0.12, 0.12);
    s.box_half[d] = rng.uniform(0.28, 0.55);
  }
  s.cyl_center = {rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12)};
  s.cyl_radius = rng.uniform(0.22, 0.48);
  s.cyl_half_height = rng.uniform(0.3, 0.6);
  if (s.kind == ShapeKind::union_of_two) {
    // keep the pair overlapping so the union reads as one solid
    for (int d = 0; d < 3; ++d) s.box_half[d] = rng.uniform(0.2, 0.38);
    s.cyl_radius = rng.uniform(0.16, 0.3);
    s.cyl_half_height = rng.uniform(0.35, 0.6);
  }
  return s;
}

inline std::vector<ShapeSpec> make_corpus_specs(int count, int classes, uint64_t seed) {
  require(count >= 1 && classes >= 1, "corpus needs count >= 1 and classes >= 1");
  std::vector<ShapeSpec> specs;
  specs.reserve(count);
  for (int i = 0; i < count; ++i)
    specs.push_back(random_shape_spec(i % classes, derive_seed(seed, "corpus", i)));
  return specs;
}

inline std::vector<std::pair<TsdfGrid, int>> make_corpus(int count, int classes, const Dims3& dims,
                                                         double truncation, uint64_t seed,
                                                         int64_t patch_edge = 1) {
  std::vector<std::pair<TsdfGrid, int>> out;
  out.reserve(count);
  for (const auto& spec : make_corpus_specs(count, classes, seed))
    out.emplace_back(generate_shape(spec, dims, truncation, patch_edge), spec.class_label);
  return out;
}

}  // namespace voxdiff
