#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "partrag/rng.hpp"

namespace partrag {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return (1.0 / norm(a)) * a; }

struct Aabb {
  Vec3 lo{0, 0, 0};
  Vec3 hi{0, 0, 0};

  Aabb merged(const Aabb& o) const;
  Vec3 center() const { return 0.5 * (lo + hi); }
  /// Largest gap between the boxes along any axis (0 when they touch/overlap).
  double gap(const Aabb& o) const;
};

using Face = std::array<std::uint32_t, 3>;

/// Indexed triangle list.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;

  Aabb bounds() const;
  double area() const;
  bool operator==(const Mesh&) const = default;
};

/// Translation + uniform scale: p -> translation + scale * p.
struct Pose {
  Vec3 translation{0, 0, 0};
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return translation + scale * p; }
  bool operator==(const Pose&) const = default;
};

Mesh transformed(const Mesh& m, const Pose& pose);

struct SurfaceSample {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
};

/// Area-weighted uniform samples on the triangles of `m`.
SurfaceSample sample_mesh_surface(const Mesh& m, std::size_t n, Rng& rng);

/// Closest point on triangle (a, b, c) to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);
double point_mesh_distance(const Vec3& p, const Mesh& m);

/// Generalized winding number inside test for closed, consistently oriented meshes.
bool inside_closed_mesh(const Mesh& m, const Vec3& p);

/// Vertex adjacency (1-ring) from the face list.
std::vector<std::vector<std::uint32_t>> vertex_neighbors(const Mesh& m);

}  // namespace partrag
