#include "partrag/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numbers>

namespace partrag {

Aabb Aabb::merged(const Aabb& o) const {
  Aabb r;
  for (int i = 0; i < 3; ++i) {
    r.lo[i] = std::min(lo[i], o.lo[i]);
    r.hi[i] = std::max(hi[i], o.hi[i]);
  }
  return r;
}

double Aabb::gap(const Aabb& o) const {
  double g = 0.0;
  for (int i = 0; i < 3; ++i) {
    g = std::max(g, o.lo[i] - hi[i]);
    g = std::max(g, lo[i] - o.hi[i]);
  }
  return g;
}

Aabb Mesh::bounds() const {
  Aabb b;
  b.lo = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  b.hi = {-b.lo[0], -b.lo[1], -b.lo[2]};
  for (const auto& v : vertices) {
    for (int i = 0; i < 3; ++i) {
      b.lo[i] = std::min(b.lo[i], v[i]);
      b.hi[i] = std::max(b.hi[i], v[i]);
    }
  }
  return b;
}

double Mesh::area() const {
  double a = 0.0;
  for (const auto& f : faces) {
    a += 0.5 * norm(cross(vertices[f[1]] - vertices[f[0]], vertices[f[2]] - vertices[f[0]]));
  }
  return a;
}

Mesh transformed(const Mesh& m, const Pose& pose) {
  Mesh out = m;
  for (auto& v : out.vertices) v = pose.apply(v);
  return out;
}

SurfaceSample sample_mesh_surface(const Mesh& m, std::size_t n, Rng& rng) {
  SurfaceSample s;
  if (m.faces.empty() || n == 0) return s;
  std::vector<double> cdf(m.faces.size());
  std::vector<Vec3> normals(m.faces.size());
  double total = 0.0;
  for (std::size_t i = 0; i < m.faces.size(); ++i) {
    const auto& f = m.faces[i];
    const Vec3 c = cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]);
    const double len = norm(c);
    total += 0.5 * len;
    cdf[i] = total;
    normals[i] = len > 0.0 ? (1.0 / len) * c : Vec3{0, 0, 0};
  }
  s.points.reserve(n);
  s.normals.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const std::size_t i =
        std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
    const auto& f = m.faces[i];
    double r1 = rng.uniform();
    double r2 = rng.uniform();
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    const Vec3& a = m.vertices[f[0]];
    s.points.push_back(a + r1 * (m.vertices[f[1]] - a) + r2 * (m.vertices[f[2]] - a));
    s.normals.push_back(normals[i]);
  }
  return s;
}

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = dot(ab, ap);
  const double d2 = dot(ac, ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;
  const Vec3 bp = p - b;
  const double d3 = dot(ab, bp);
  const double d4 = dot(ac, bp);
  if (d3 >= 0.0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = dot(ab, cp);
  const double d6 = dot(ac, cp);
  if (d6 >= 0.0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  }
  const double denom = 1.0 / (va + vb + vc);
  return a + (vb * denom) * ab + (vc * denom) * ac;
}

double point_mesh_distance(const Vec3& p, const Mesh& m) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& f : m.faces) {
    const Vec3 q = closest_point_on_triangle(p, m.vertices[f[0]], m.vertices[f[1]],
                                             m.vertices[f[2]]);
    best = std::min(best, dot(p - q, p - q));
  }
  return std::sqrt(best);
}

bool inside_closed_mesh(const Mesh& m, const Vec3& p) {
  double total = 0.0;
  for (const auto& f : m.faces) {
    const Vec3 a = m.vertices[f[0]] - p;
    const Vec3 b = m.vertices[f[1]] - p;
    const Vec3 c = m.vertices[f[2]] - p;
    const double la = norm(a), lb = norm(b), lc = norm(c);
    const double num = dot(a, cross(b, c));
    const double den = la * lb * lc + dot(a, b) * lc + dot(a, c) * lb + dot(b, c) * la;
    total += 2.0 * std::atan2(num, den);
  }
  return total / (4.0 * std::numbers::pi) > 0.5;
}

std::vector<std::vector<std::uint32_t>> vertex_neighbors(const Mesh& m) {
  std::vector<std::vector<std::uint32_t>> nb(m.vertices.size());
  auto link = [&](std::uint32_t a, std::uint32_t b) {
    if (std::find(nb[a].begin(), nb[a].end(), b) == nb[a].end()) nb[a].push_back(b);
  };
  for (const auto& f : m.faces) {
    for (int i = 0; i < 3; ++i) {
      link(f[i], f[(i + 1) % 3]);
      link(f[(i + 1) % 3], f[i]);
    }
  }
  for (auto& n : nb) std::sort(n.begin(), n.end());
  return nb;
}

}  // namespace partrag
