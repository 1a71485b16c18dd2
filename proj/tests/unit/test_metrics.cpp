#include <cmath>
#include <vector>

#include "doctest.h"
#include "partrag/errors.hpp"
#include "partrag/metrics.hpp"
#include "partrag/synthdata.hpp"

using namespace partrag;

namespace {

Points random_points(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Points p(n);
  for (auto& v : p) v = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  return p;
}

PrimitiveSpec prim(PrimitiveKind kind, Vec3 size, Vec3 at) {
  PrimitiveSpec p;
  p.kind = kind;
  p.size = size;
  p.pose.translation = at;
  return p;
}

// Monte-Carlo IoU of two closed meshes by inside tests at uniform points.
double mc_iou(const Mesh& a, const Mesh& b, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const bool ia = inside_closed_mesh(a, p), ib = inside_closed_mesh(b, p);
    inter += ia && ib;
    uni += ia || ib;
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

TEST_CASE("chamfer identities") {
  const Points a = random_points(300, 1), b = random_points(200, 2);
  CHECK(chamfer(a, a) == 0.0);
  CHECK(chamfer(Points{{0, 0, 0}}, Points{{1, 0, 0}}) == 2.0);
  CHECK(chamfer(a, b) == chamfer(b, a));
  CHECK(chamfer(a, b) == chamfer_serial(a, b));

  // Direct O(n m) formula.
  auto directed = [](const Points& x, const Points& y) {
    double s = 0.0;
    for (const auto& p : x) {
      double best = 1e300;
      for (const auto& q : y) best = std::min(best, dot(p - q, p - q));
      s += best;
    }
    return s / static_cast<double>(x.size());
  };
  CHECK(std::abs(chamfer(a, b) - (directed(a, b) + directed(b, a))) < 1e-12);
  CHECK_THROWS_AS(chamfer(Points{}, b), DegenerateInputError);
}

TEST_CASE("fscore examples") {
  const Points a = random_points(100, 3);
  CHECK(fscore(a, a, 0.1) == 1.0);
  CHECK(fscore(Points{{0, 0, 0}}, Points{{0.05, 0, 0}}, 0.1) == 1.0);
  CHECK(fscore(Points{{0, 0, 0}}, Points{{0.2, 0, 0}}, 0.1) == 0.0);
  const Points b = random_points(100, 4);
  double prev = 0.0;
  for (double tau : {0.05, 0.1, 0.2, 0.4, 0.8}) {
    const double f = fscore(a, b, tau);
    CHECK(f >= prev);
    CHECK(f <= 1.0);
    prev = f;
  }
  CHECK_THROWS_AS(fscore(a, b, 0.0), ConfigError);
  CHECK_THROWS_AS(fscore(a, Points{}, 0.1), DegenerateInputError);
}

TEST_CASE("part overlap IoU of identical and disjoint parts") {
  const Mesh box = tessellate(prim(PrimitiveKind::box, {0.3, 0.3, 0.3}, {-0.5, 0, 0}));
  const Mesh far = tessellate(prim(PrimitiveKind::box, {0.3, 0.3, 0.3}, {0.5, 0, 0}));
  CHECK(part_overlap_iou({box, box}) == 1.0);
  CHECK(part_overlap_iou({box, far}) == 0.0);
  CHECK_THROWS_AS(part_overlap_iou({box}), DimensionError);
  CHECK_THROWS_AS(part_overlap_iou({box, Mesh{}}), DegenerateInputError);
}

TEST_CASE("voxel IoU agrees with a Monte-Carlo oracle") {
  const std::vector<std::pair<PrimitiveSpec, PrimitiveSpec>> cases = {
      {prim(PrimitiveKind::box, {0.5, 0.4, 0.3}, {0, 0, 0}),
       prim(PrimitiveKind::box, {0.4, 0.4, 0.4}, {0.3, 0.1, 0})},
      {prim(PrimitiveKind::sphere, {0.5, 0.5, 0.5}, {0, 0, 0}),
       prim(PrimitiveKind::cylinder, {0.3, 0.6, 0.3}, {0.2, 0, 0.1})},
      {prim(PrimitiveKind::cone, {0.5, 0.5, 0.5}, {0, 0.1, 0}),
       prim(PrimitiveKind::box, {0.6, 0.2, 0.6}, {0, -0.2, 0})},
  };
  for (const auto& [pa, pb] : cases) {
    const Mesh a = tessellate(pa, 24), b = tessellate(pb, 24);
    const double vox = voxel_iou(voxelize(a), voxelize(b));
    const double mc = mc_iou(a, b, 100000, 5);
    CHECK(std::abs(vox - mc) < 0.02);
  }
}

TEST_CASE("voxelization of a box") {
  const Mesh box = tessellate(prim(PrimitiveKind::box, {0.5, 0.5, 0.5}, {0, 0, 0}));
  const VoxelGrid g = voxelize(box);
  // 32^3 interior cells plus one band layer on each face; edge and corner
  // cells of the 34^3 block sit sqrt(2) or sqrt(3) half-cells away.
  CHECK(g.count() == 34u * 34u * 34u - 12u * 32u - 8u);
  CHECK(g.at(32, 32, 32) == 1);
  CHECK(g.at(0, 0, 0) == 0);
}

TEST_CASE("preservation IoU") {
  const Mesh a = tessellate(prim(PrimitiveKind::box, {0.3, 0.2, 0.4}, {0.1, 0, 0}));
  const Mesh b = tessellate(prim(PrimitiveKind::sphere, {0.3, 0.3, 0.3}, {-0.4, 0, 0}));
  CHECK(preservation_iou({a, b}, {a, b}, {0, 1}) == 1.0);
  const Mesh shifted = transformed(a, Pose{{2.0 / 64.0, 0, 0}, 1.0});
  CHECK(preservation_iou({a, b}, {shifted, b}, {0}) < 1.0);
  CHECK(preservation_iou({a, b}, {shifted, b}, {1}) == 1.0);
  CHECK_THROWS_AS(preservation_iou({a, b}, {a}, {1}), DimensionError);
}

TEST_CASE("seam discontinuity") {
  const Mesh frozen = tessellate(prim(PrimitiveKind::box, {0.5, 0.5, 0.5}, {0, 0, 0}));
  const Mesh touching = tessellate(prim(PrimitiveKind::box, {0.2, 0.2, 0.2}, {0, 0.71, 0}));
  const auto seam = seam_vertices(touching, {frozen}, 0.02);
  CHECK(seam.size() == 4);
  CHECK(std::abs(seam_discontinuity(touching, {frozen}, seam) - 0.01) < 1e-12);
  const Mesh away = tessellate(prim(PrimitiveKind::box, {0.2, 0.2, 0.2}, {0, 0.9, 0}));
  CHECK(seam_vertices(away, {frozen}, 0.02).empty());
  CHECK(seam_discontinuity(away, {frozen}, {}) == 0.0);
}

TEST_CASE("multi-view consistency") {
  const Mesh a = tessellate(prim(PrimitiveKind::cylinder, {0.3, 0.5, 0.3}, {0, 0, 0}));
  const Mesh b = tessellate(prim(PrimitiveKind::cone, {0.4, 0.5, 0.4}, {0.1, 0, 0}));
  CHECK(mv_consistency(a, a) == 0.0);
  const double base = mv_consistency(a, b);
  CHECK(base > 0.0);
  const Pose shift{{0.1, -0.2, 0.05}, 1.0};
  CHECK(std::abs(mv_consistency(transformed(a, shift), transformed(b, shift)) - base) <
        1e-9 + 1e-6 * base);
  CHECK_THROWS_AS(mv_consistency(a, b, 1), ConfigError);
}
