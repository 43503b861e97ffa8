#pragma once

#include <vector>

#include "voxdiff/sdf.hpp"

namespace voxdiff {

// Non-overlapping cubic partition of a grid. Patch order and within-patch
// order are both x-fastest, matching grid storage.
struct PatchSpec {
  int64_t edge = 4;
  Dims3 per_axis{4, 4, 4};

  int64_t count() const { return volume(per_axis); }
  int64_t patch_volume() const { return edge * edge * edge; }

  static PatchSpec for_grid(const Dims3& dims, int64_t edge) {
    require(edge >= 2, "patch edge must be >= 2");
    for (int d = 0; d < 3; ++d)
      require(dims[d] % edge == 0, "grid dims not divisible by patch edge");
    return PatchSpec{edge, {dims[0] / edge, dims[1] / edge, dims[2] / edge}};
  }

  Dims3 grid_dims() const {
    return {per_axis[0] * edge, per_axis[1] * edge, per_axis[2] * edge};
  }

  bool operator==(const PatchSpec& o) const {
    return edge == o.edge && per_axis == o.per_axis;
  }
};

inline std::vector<std::vector<double>> partition(const TsdfGrid& grid, const PatchSpec& spec) {
  require(spec.grid_dims() == grid.dims, "patch spec does not match grid dims");
  std::vector<std::vector<double>> patches(spec.count());
  const int64_t e = spec.edge;
  int64_t p = 0;
  for (int64_t pz = 0; pz < spec.per_axis[2]; ++pz)
    for (int64_t py = 0; py < spec.per_axis[1]; ++py)
      for (int64_t px = 0; px < spec.per_axis[0]; ++px, ++p) {
        auto& out = patches[p];
        out.resize(spec.patch_volume());
        int64_t w = 0;
        for (int64_t z = 0; z < e; ++z)
          for (int64_t y = 0; y < e; ++y)
            for (int64_t x = 0; x < e; ++x)
              out[w++] = grid.at(px * e + x, py * e + y, pz * e + z);
      }
  return patches;
}

inline TsdfGrid assemble(const std::vector<std::vector<double>>& patches, const PatchSpec& spec,
                         double truncation) {
  require(static_cast<int64_t>(patches.size()) == spec.count(),
          "assemble: patch count mismatch");
  TsdfGrid g;
  g.dims = spec.grid_dims();
  g.truncation = truncation;
  g.values.resize(g.numel());
  const int64_t e = spec.edge;
  int64_t p = 0;
  for (int64_t pz = 0; pz < spec.per_axis[2]; ++pz)
    for (int64_t py = 0; py < spec.per_axis[1]; ++py)
      for (int64_t px = 0; px < spec.per_axis[0]; ++px, ++p) {
        require(static_cast<int64_t>(patches[p].size()) == spec.patch_volume(),
                "assemble: patch volume mismatch");
        int64_t w = 0;
        for (int64_t z = 0; z < e; ++z)
          for (int64_t y = 0; y < e; ++y)
            for (int64_t x = 0; x < e; ++x)
              g.at(px * e + x, py * e + y, pz * e + z) = patches[p][w++];
      }
  return g;
}

}  // namespace voxdiff
