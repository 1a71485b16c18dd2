#include "partrag/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

#include "partrag/errors.hpp"
#include "partrag/kernels.hpp"
#include "partrag/parallel.hpp"
#include "partrag/synthdata.hpp"

namespace partrag {

namespace {

std::span<const kernels::Point3> as_points(const Points& p) { return {p.data(), p.size()}; }

void require_nonempty(const Points& a, const Points& b, const char* what) {
  if (a.empty() || b.empty()) throw DegenerateInputError(std::string(what) + ": empty point cloud");
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double chamfer(const Points& a, const Points& b) {
  require_nonempty(a, b, "chamfer");
  return mean(kernels::parallel::nearest_sq_dist(as_points(a), as_points(b))) +
         mean(kernels::parallel::nearest_sq_dist(as_points(b), as_points(a)));
}

double chamfer_serial(const Points& a, const Points& b) {
  require_nonempty(a, b, "chamfer");
  return mean(kernels::serial::nearest_sq_dist(as_points(a), as_points(b))) +
         mean(kernels::serial::nearest_sq_dist(as_points(b), as_points(a)));
}

double fscore(const Points& a, const Points& b, double tau) {
  require_nonempty(a, b, "fscore");
  if (!(tau > 0.0)) throw ConfigError("fscore: tau must be positive");
  const double t2 = tau * tau;
  auto within = [&](const std::vector<double>& d) {
    std::size_t n = 0;
    for (double x : d) n += x <= t2 ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(d.size());
  };
  const double p = within(kernels::nearest_sq_dist(as_points(a), as_points(b)));
  const double r = within(kernels::nearest_sq_dist(as_points(b), as_points(a)));
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

std::size_t VoxelGrid::count() const {
  return static_cast<std::size_t>(std::count(occ.begin(), occ.end(), std::uint8_t{1}));
}

Vec3 VoxelGrid::center(int i, int j, int k) const {
  const double h = pitch();
  return {-1.0 + (i + 0.5) * h, -1.0 + (j + 0.5) * h, -1.0 + (k + 0.5) * h};
}

VoxelGrid voxelize(const Mesh& m, int res) {
  VoxelGrid g;
  g.res = res;
  g.occ.assign(static_cast<std::size_t>(res) * res * res, 0);
  if (m.faces.empty()) return g;
  const double h = g.pitch();
  auto cell_lo = [&](double x) { return std::clamp(static_cast<int>(std::floor((x + 1.0) / h - 0.5)), 0, res - 1); };
  auto cell_hi = [&](double x) { return std::clamp(static_cast<int>(std::ceil((x + 1.0) / h - 0.5)), 0, res - 1); };
  auto idx = [&](int i, int j, int k) { return (static_cast<std::size_t>(i) * res + j) * res + k; };

  // Surface band.
  const double band = 0.5 * h;
  for (const auto& f : m.faces) {
    const Vec3 &a = m.vertices[f[0]], &b = m.vertices[f[1]], &c = m.vertices[f[2]];
    std::array<int, 3> lo{}, hi{};
    for (int ax = 0; ax < 3; ++ax) {
      lo[ax] = cell_lo(std::min({a[ax], b[ax], c[ax]}) - band);
      hi[ax] = cell_hi(std::max({a[ax], b[ax], c[ax]}) + band);
    }
    for (int i = lo[0]; i <= hi[0]; ++i)
      for (int j = lo[1]; j <= hi[1]; ++j)
        for (int k = lo[2]; k <= hi[2]; ++k) {
          const Vec3 p = g.center(i, j, k);
          const Vec3 q = closest_point_on_triangle(p, a, b, c);
          if (dot(p - q, p - q) <= band * band) g.occ[idx(i, j, k)] = 1;
        }
  }

  // Interior by crossing parity along +z; the tiny offset keeps rays off
  // edges (cells near the surface are already set by the band).
  const Aabb box = m.bounds();
  const int i0 = cell_lo(box.lo[0]), i1 = cell_hi(box.hi[0]);
  const int j0 = cell_lo(box.lo[1]), j1 = cell_hi(box.hi[1]);
  std::vector<double> zs;
  for (int i = i0; i <= i1; ++i)
    for (int j = j0; j <= j1; ++j) {
      const Vec3 c0 = g.center(i, j, 0);
      const double x = c0[0] + 1.2345678e-9, y = c0[1] + 2.3456789e-9;
      zs.clear();
      for (const auto& f : m.faces) {
        const Vec3 &a = m.vertices[f[0]], &b = m.vertices[f[1]], &c = m.vertices[f[2]];
        const double d = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if (d == 0.0) continue;
        const double u = ((b[0] - x) * (c[1] - y) - (c[0] - x) * (b[1] - y)) / d;
        const double v = ((c[0] - x) * (a[1] - y) - (a[0] - x) * (c[1] - y)) / d;
        const double w = 1.0 - u - v;
        if (u < 0.0 || v < 0.0 || w < 0.0) continue;
        zs.push_back(u * a[2] + v * b[2] + w * c[2]);
      }
      if (zs.size() < 2) continue;
      std::sort(zs.begin(), zs.end());
      for (int k = cell_lo(zs.front()); k <= cell_hi(zs.back()); ++k) {
        const double z = g.center(i, j, k)[2];
        const auto below = std::lower_bound(zs.begin(), zs.end(), z) - zs.begin();
        if (below % 2 == 1) g.occ[idx(i, j, k)] = 1;
      }
    }
  return g;
}

double voxel_iou(const VoxelGrid& a, const VoxelGrid& b) {
  if (a.res != b.res) throw DimensionError("voxel_iou: grid resolutions differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.occ.size(); ++i) {
    inter += (a.occ[i] & b.occ[i]);
    uni += (a.occ[i] | b.occ[i]);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double part_overlap_iou(const std::vector<Mesh>& parts, int res) {
  if (parts.size() < 2) throw DimensionError("part_overlap_iou: needs at least two parts");
  std::vector<VoxelGrid> grids(parts.size());
  parallel_for(parts.size(), [&](std::size_t i) { grids[i] = voxelize(parts[i], res); });
  for (std::size_t i = 0; i < grids.size(); ++i)
    if (grids[i].count() == 0)
      throw DegenerateInputError("part_overlap_iou: part " + std::to_string(i) +
                                 " occupies no voxel");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < grids.size(); ++i)
    for (std::size_t j = i + 1; j < grids.size(); ++j) {
      sum += voxel_iou(grids[i], grids[j]);
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

double preservation_iou(const std::vector<Mesh>& before, const std::vector<Mesh>& after,
                        const std::vector<std::size_t>& frozen, int res) {
  if (frozen.empty()) return 1.0;
  std::vector<double> iou(frozen.size());
  for (std::size_t i : frozen)
    if (i >= before.size() || i >= after.size())
      throw DimensionError("preservation_iou: part " + std::to_string(i) + " missing");
  parallel_for(frozen.size(), [&](std::size_t n) {
    const std::size_t i = frozen[n];
    if (before[i] == after[i]) {
      iou[n] = 1.0;
      return;
    }
    iou[n] = voxel_iou(voxelize(before[i], res), voxelize(after[i], res));
  });
  return mean(iou);
}

std::vector<std::uint32_t> seam_vertices(const Mesh& edited, const std::vector<Mesh>& frozen,
                                         double eps) {
  std::vector<std::uint32_t> out;
  for (std::size_t v = 0; v < edited.vertices.size(); ++v)
    for (const auto& f : frozen)
      if (point_mesh_distance(edited.vertices[v], f) <= eps) {
        out.push_back(static_cast<std::uint32_t>(v));
        break;
      }
  return out;
}

double seam_discontinuity(const Mesh& edited, const std::vector<Mesh>& frozen,
                          const std::vector<std::uint32_t>& seam) {
  if (seam.empty() || frozen.empty()) return 0.0;
  double sum = 0.0;
  for (std::uint32_t v : seam) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& f : frozen) best = std::min(best, point_mesh_distance(edited.vertices[v], f));
    sum += best;
  }
  return sum / static_cast<double>(seam.size());
}

double mv_consistency(const Mesh& asset, const Mesh& reference, std::size_t views,
                      std::size_t samples, std::uint64_t seed) {
  if (views < 2) throw ConfigError("mv_consistency: needs at least two views");
  Rng ra(seed), rb(seed);
  const SurfaceSample sa = sample_mesh_surface(asset, samples, ra);
  const SurfaceSample sb = sample_mesh_surface(reference, samples, rb);
  std::vector<double> cds;
  for (const auto& view : canonical_views(20.0, views)) {
    const Vec3 dir = view_direction(view);
    auto facing = [&](const SurfaceSample& s) {
      Points out;
      for (std::size_t i = 0; i < s.points.size(); ++i)
        if (dot(s.normals[i], dir) > 0.0) out.push_back(s.points[i]);
      return out;
    };
    const Points a = facing(sa), b = facing(sb);
    if (a.empty() || b.empty()) {
      cds.push_back(a.empty() && b.empty() ? 0.0 : std::numeric_limits<double>::infinity());
      continue;
    }
    cds.push_back(chamfer(a, b));
  }
  const double mu = mean(cds);
  double var = 0.0;
  for (double c : cds) var += (c - mu) * (c - mu);
  return var / static_cast<double>(cds.size());
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["cd"] = cd;
  j["fscore"] = fscore;
  j["part_iou"] = part_iou;
  j["preservation_iou"] = preservation_iou;
  j["mv_cons"] = mv_cons;
  return j.dump();
}

}  // namespace partrag
