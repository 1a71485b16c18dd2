#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "partrag/geometry.hpp"

namespace partrag {

using Points = std::vector<Vec3>;

/// Mean squared nearest-neighbour distance A->B plus B->A.
double chamfer(const Points& a, const Points& b);
/// Same value from the serial kernel; kept for tests and benchmarks.
double chamfer_serial(const Points& a, const Points& b);

/// F-score at threshold tau (0 when precision and recall are both 0).
double fscore(const Points& a, const Points& b, double tau = 0.1);

/// Occupancy of a res^3 grid over [-1, 1]^3: a cell is set if its centre is
/// inside the mesh or within half a cell of its surface.
struct VoxelGrid {
  int res = 64;
  std::vector<std::uint8_t> occ;

  std::size_t count() const;
  double pitch() const { return 2.0 / res; }
  Vec3 center(int i, int j, int k) const;
  std::uint8_t at(int i, int j, int k) const {
    return occ[(static_cast<std::size_t>(i) * res + j) * res + k];
  }
};

VoxelGrid voxelize(const Mesh& m, int res = 64);
/// |A & B| / |A | B|; 0 when both are empty.
double voxel_iou(const VoxelGrid& a, const VoxelGrid& b);

/// Mean voxel IoU over unordered part pairs. Needs >= 2 parts, each with at
/// least one occupied voxel.
double part_overlap_iou(const std::vector<Mesh>& parts, int res = 64);

/// Mean voxel IoU of the listed parts between two versions of an asset.
double preservation_iou(const std::vector<Mesh>& before, const std::vector<Mesh>& after,
                        const std::vector<std::size_t>& frozen, int res = 64);

/// Vertices of `edited` within eps of any frozen mesh.
std::vector<std::uint32_t> seam_vertices(const Mesh& edited, const std::vector<Mesh>& frozen,
                                         double eps);
/// Mean distance of the given vertices to the nearest frozen surface (0 when
/// the list is empty).
double seam_discontinuity(const Mesh& edited, const std::vector<Mesh>& frozen,
                          const std::vector<std::uint32_t>& seam);

/// Variance over `views` canonical cameras of the chamfer distance between
/// the camera-facing surface samples of the two meshes.
double mv_consistency(const Mesh& asset, const Mesh& reference, std::size_t views = 8,
                      std::size_t samples = 2048, std::uint64_t seed = 7);

struct MetricReport {
  double cd = 0.0;
  double fscore = 0.0;
  double part_iou = 0.0;
  double preservation_iou = 1.0;
  double mv_cons = 0.0;

  std::string to_json() const;
};

}  // namespace partrag
