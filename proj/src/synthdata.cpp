#include "partrag/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <tuple>

#include "partrag/errors.hpp"

namespace partrag {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kRad = kPi / 180.0;

double max_extent(const Vec3& s) { return std::max({s[0], s[1], s[2]}); }

Vec3 to_local(const PrimitiveSpec& p, const Vec3& x) {
  return (1.0 / p.pose.scale) * (x - p.pose.translation);
}

// Local-frame half-extents of the primitive's bounding box.
Vec3 local_half_box(const PrimitiveSpec& p) {
  switch (p.kind) {
    case PrimitiveKind::box:
      return p.size;
    case PrimitiveKind::cylinder:
    case PrimitiveKind::cone:
      return {p.size[0], p.size[1], p.size[0]};
    case PrimitiveKind::sphere:
      return {p.size[0], p.size[0], p.size[0]};
  }
  return p.size;
}

double local_area(PrimitiveKind kind, const Vec3& s) {
  switch (kind) {
    case PrimitiveKind::box:
      return 8.0 * (s[1] * s[2] + s[0] * s[2] + s[0] * s[1]);
    case PrimitiveKind::cylinder:
      return 2.0 * kPi * s[0] * 2.0 * s[1] + 2.0 * kPi * s[0] * s[0];
    case PrimitiveKind::cone: {
      const double slant = std::sqrt(s[0] * s[0] + 4.0 * s[1] * s[1]);
      return kPi * s[0] * slant + kPi * s[0] * s[0];
    }
    case PrimitiveKind::sphere:
      return 4.0 * kPi * s[0] * s[0];
  }
  return 0.0;
}

// Smallest positive root of a t^2 + b t + c satisfying `accept`.
template <typename Accept>
std::optional<double> quadratic_hit(double a, double b, double c, Accept accept) {
  std::optional<double> best;
  auto consider = [&](double t) {
    if (t > 0.0 && accept(t) && (!best || t < *best)) best = t;
  };
  if (std::abs(a) < 1e-14) {
    if (std::abs(b) > 1e-14) consider(-c / b);
    return best;
  }
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return best;
  const double sq = std::sqrt(disc);
  consider((-b - sq) / (2.0 * a));
  consider((-b + sq) / (2.0 * a));
  return best;
}

// Ray hit distance in the primitive's local (unscaled) frame.
std::optional<double> local_hit(const PrimitiveSpec& p, const Vec3& o, const Vec3& d) {
  const Vec3& s = p.size;
  std::optional<double> best;
  auto keep = [&](std::optional<double> t) {
    if (t && (!best || *t < *best)) best = t;
  };
  switch (p.kind) {
    case PrimitiveKind::box: {
      double t0 = -std::numeric_limits<double>::infinity();
      double t1 = std::numeric_limits<double>::infinity();
      for (int i = 0; i < 3; ++i) {
        if (std::abs(d[i]) < 1e-15) {
          if (o[i] < -s[i] || o[i] > s[i]) return std::nullopt;
          continue;
        }
        double a = (-s[i] - o[i]) / d[i];
        double b = (s[i] - o[i]) / d[i];
        if (a > b) std::swap(a, b);
        t0 = std::max(t0, a);
        t1 = std::min(t1, b);
      }
      if (t0 <= t1 && t0 > 0.0) return t0;
      return std::nullopt;
    }
    case PrimitiveKind::cylinder: {
      const double r = s[0], h = s[1];
      keep(quadratic_hit(d[0] * d[0] + d[2] * d[2], 2.0 * (o[0] * d[0] + o[2] * d[2]),
                         o[0] * o[0] + o[2] * o[2] - r * r, [&](double t) {
                           const double y = o[1] + t * d[1];
                           return y >= -h && y <= h;
                         }));
      if (std::abs(d[1]) > 1e-15) {
        for (double cap : {-h, h}) {
          const double t = (cap - o[1]) / d[1];
          const double x = o[0] + t * d[0], z = o[2] + t * d[2];
          if (t > 0.0 && x * x + z * z <= r * r) keep(t);
        }
      }
      return best;
    }
    case PrimitiveKind::cone: {
      const double r = s[0], h = s[1];
      const double k = r / (2.0 * h);
      const double k2 = k * k;
      const double hy = h - o[1];
      keep(quadratic_hit(d[0] * d[0] + d[2] * d[2] - k2 * d[1] * d[1],
                         2.0 * (o[0] * d[0] + o[2] * d[2] + k2 * hy * d[1]),
                         o[0] * o[0] + o[2] * o[2] - k2 * hy * hy, [&](double t) {
                           const double y = o[1] + t * d[1];
                           return y >= -h && y <= h;
                         }));
      if (std::abs(d[1]) > 1e-15) {
        const double t = (-h - o[1]) / d[1];
        const double x = o[0] + t * d[0], z = o[2] + t * d[2];
        if (t > 0.0 && x * x + z * z <= r * r) keep(t);
      }
      return best;
    }
    case PrimitiveKind::sphere: {
      const double r = s[0];
      return quadratic_hit(dot(d, d), 2.0 * dot(o, d), dot(o, o) - r * r,
                           [](double) { return true; });
    }
  }
  return std::nullopt;
}

std::optional<double> ray_hit(const PrimitiveSpec& p, const Vec3& origin, const Vec3& dir) {
  auto t = local_hit(p, to_local(p, origin), dir);
  if (!t) return std::nullopt;
  return *t * p.pose.scale;
}

// --------------------------------------------------------------------------
// Object templates. Each returns the first n parts of its slot list.

PrimitiveSpec make_part(PrimitiveKind kind, Vec3 size, Vec3 center, std::string_view label) {
  PrimitiveSpec p;
  p.kind = kind;
  p.size = size;
  p.pose.translation = center;
  p.pose.scale = 1.0;
  p.label = label_index(label);
  return p.canonicalized();
}

std::vector<PrimitiveSpec> build_chair(int n, Rng& rng) {
  const double sw = rng.uniform(0.45, 0.6), st = rng.uniform(0.05, 0.08);
  const double sd = rng.uniform(0.45, 0.6), lh = rng.uniform(0.3, 0.45);
  const double lr = rng.uniform(0.07, 0.1);
  const double seat_top = 2.0 * lh + 2.0 * st;
  const double bw = sw * rng.uniform(0.9, 1.0), bh = rng.uniform(0.35, 0.5);
  const double bt = rng.uniform(0.04, 0.07);
  const double ar = rng.uniform(0.08, 0.11), ah = rng.uniform(0.15, 0.22);

  std::vector<PrimitiveSpec> parts;
  parts.push_back(make_part(PrimitiveKind::box, {sw, st, sd}, {0, 2 * lh + st, 0}, "seat"));
  parts.push_back(
      make_part(PrimitiveKind::box, {bw, bh, bt}, {0, seat_top + bh, -sd + bt}, "back"));
  for (auto [sx, sz] : {std::pair{-1, 1}, {1, 1}, {-1, -1}, {1, -1}}) {
    parts.push_back(make_part(PrimitiveKind::cylinder, {lr, lh, lr},
                              {sx * (sw - lr), lh, sz * (sd - lr)}, "leg"));
  }
  for (int sx : {-1, 1}) {
    parts.push_back(make_part(PrimitiveKind::cone, {ar, ah, ar},
                              {sx * (sw - ar), seat_top + ah, 0.2 * sd}, "arm"));
  }
  parts.resize(static_cast<std::size_t>(n));
  return parts;
}

std::vector<PrimitiveSpec> build_table(int n, Rng& rng) {
  const double R = rng.uniform(0.6, 0.8), th = rng.uniform(0.04, 0.06);
  const double lh = rng.uniform(0.35, 0.45), lr = rng.uniform(0.07, 0.1);
  const double a = 0.75 * R * std::numbers::sqrt2 / 2.0;
  const double bw = std::min(rng.uniform(0.25, 0.3), a - lr - 0.03);
  const double bh = rng.uniform(0.15, 0.25);
  const double hx = std::min(rng.uniform(0.12, 0.18), a - lr - 0.02);
  const double hy = rng.uniform(0.05, 0.07);
  const double hz = rng.uniform(0.04, 0.06);

  std::vector<PrimitiveSpec> parts;
  parts.push_back(make_part(PrimitiveKind::cylinder, {R, th, R}, {0, 2 * lh + th, 0}, "top"));
  for (auto [sx, sz] : {std::pair{-1, 1}, {1, 1}, {-1, -1}, {1, -1}}) {
    parts.push_back(
        make_part(PrimitiveKind::cylinder, {lr, lh, lr}, {sx * a, lh, sz * a}, "leg"));
  }
  parts.push_back(make_part(PrimitiveKind::box, {bw, bh, bw}, {0, 2 * lh - bh, 0}, "body"));
  parts.push_back(
      make_part(PrimitiveKind::box, {hx, hy, hz}, {0, 2 * lh - bh, bw + hz}, "handle"));
  parts.resize(static_cast<std::size_t>(n));
  return parts;
}

std::vector<PrimitiveSpec> build_cart(int n, Rng& rng) {
  const double bw = rng.uniform(0.45, 0.6), bh = rng.uniform(0.22, 0.32);
  const double bd = rng.uniform(0.3, 0.4), wr = rng.uniform(0.12, 0.16);
  const double body_top = 2.0 * wr + 2.0 * bh;
  const double hx = rng.uniform(0.25, 0.35), hy = rng.uniform(0.05, 0.07);
  const double hz = rng.uniform(0.05, 0.07);
  const double tr = rng.uniform(0.15, bd - 0.12), th = rng.uniform(0.03, 0.05);

  std::vector<PrimitiveSpec> parts;
  parts.push_back(make_part(PrimitiveKind::box, {bw, bh, bd}, {0, 2 * wr + bh, 0}, "body"));
  for (auto [sx, sz] : {std::pair{-1, 1}, {1, 1}, {-1, -1}, {1, -1}}) {
    parts.push_back(make_part(PrimitiveKind::sphere, {wr, wr, wr},
                              {sx * (bw - wr), wr, sz * (bd - wr)}, "wheel"));
  }
  parts.push_back(
      make_part(PrimitiveKind::box, {hx, hy, hz}, {0, body_top + hy, -bd + hz}, "handle"));
  parts.push_back(
      make_part(PrimitiveKind::cylinder, {tr, th, tr}, {0, body_top + th, 0.08}, "top"));
  parts.resize(static_cast<std::size_t>(n));
  return parts;
}

struct Category {
  const char* name;
  int capacity;
  std::vector<PrimitiveSpec> (*build)(int, Rng&);
};

constexpr std::array<Category, 3> kCategories = {{
    {"chair", 8, &build_chair},
    {"table", 7, &build_table},
    {"cart", 7, &build_cart},
}};

bool attached(const PartObjectSpec& obj, double tol) {
  if (obj.parts.size() < 2) return true;
  for (std::size_t i = 0; i < obj.parts.size(); ++i) {
    const Aabb bi = obj.parts[i].bounds();
    bool touches = false;
    for (std::size_t j = 0; j < obj.parts.size() && !touches; ++j) {
      if (i != j && bi.gap(obj.parts[j].bounds()) <= tol) touches = true;
    }
    if (!touches) return false;
  }
  return true;
}

bool every_part_poolable(const PartObjectSpec& obj, const SynthConfig& cfg) {
  std::vector<bool> seen(obj.parts.size(), false);
  for (const auto& v : canonical_views(cfg.elevation_deg, cfg.views)) {
    const DepthRender r = render_depth(obj, v, cfg.render_size);
    for (std::size_t i = 0; i < obj.parts.size(); ++i) {
      if (!seen[i] && !patch_members(r, static_cast<std::int32_t>(i + 1), cfg.patch_size,
                                     cfg.patch_fraction)
                           .empty())
        seen[i] = true;
    }
  }
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

void sample_local(PrimitiveKind kind, const Vec3& s, Rng& rng, Vec3& out) {
  switch (kind) {
    case PrimitiveKind::box: {
      const std::array<double, 3> face_area = {s[1] * s[2], s[0] * s[2], s[0] * s[1]};
      const double total = 2.0 * (face_area[0] + face_area[1] + face_area[2]);
      double u = rng.uniform() * total;
      int axis = 0;
      int sign = 1;
      for (int f = 0; f < 6; ++f) {
        const double a = face_area[static_cast<std::size_t>(f / 2)];
        if (u < a || f == 5) {
          axis = f / 2;
          sign = (f % 2 == 0) ? -1 : 1;
          break;
        }
        u -= a;
      }
      for (int i = 0; i < 3; ++i) out[static_cast<std::size_t>(i)] = rng.uniform(-s[static_cast<std::size_t>(i)], s[static_cast<std::size_t>(i)]);
      out[static_cast<std::size_t>(axis)] = sign * s[static_cast<std::size_t>(axis)];
      return;
    }
    case PrimitiveKind::cylinder: {
      const double r = s[0], h = s[1];
      const double side = 2.0 * kPi * r * 2.0 * h;
      const double cap = kPi * r * r;
      const double u = rng.uniform() * (side + 2.0 * cap);
      const double theta = 2.0 * kPi * rng.uniform();
      if (u < side) {
        out = {r * std::cos(theta), rng.uniform(-h, h), r * std::sin(theta)};
      } else {
        const double rho = r * std::sqrt(rng.uniform());
        out = {rho * std::cos(theta), u < side + cap ? -h : h, rho * std::sin(theta)};
      }
      return;
    }
    case PrimitiveKind::cone: {
      const double r = s[0], h = s[1];
      const double slant = std::sqrt(r * r + 4.0 * h * h);
      const double lateral = kPi * r * slant;
      const double base = kPi * r * r;
      const double u = rng.uniform() * (lateral + base);
      const double theta = 2.0 * kPi * rng.uniform();
      if (u < lateral) {
        // Distance from the apex ~ sqrt(uniform) gives uniform area density.
        const double f = std::sqrt(rng.uniform());
        out = {f * r * std::cos(theta), h - f * 2.0 * h, f * r * std::sin(theta)};
      } else {
        const double rho = r * std::sqrt(rng.uniform());
        out = {rho * std::cos(theta), -h, rho * std::sin(theta)};
      }
      return;
    }
    case PrimitiveKind::sphere: {
      Vec3 g{0, 0, 0};
      double len = 0.0;
      while (len < 1e-12) {
        g = {rng.normal(), rng.normal(), rng.normal()};
        len = norm(g);
      }
      out = (s[0] / len) * g;
      return;
    }
  }
}

}  // namespace

// --------------------------------------------------------------------------

std::string_view kind_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::box:
      return "box";
    case PrimitiveKind::cylinder:
      return "cylinder";
    case PrimitiveKind::sphere:
      return "sphere";
    case PrimitiveKind::cone:
      return "cone";
  }
  return "box";
}

PrimitiveKind kind_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kPrimitiveKinds; ++i) {
    const auto k = static_cast<PrimitiveKind>(i);
    if (kind_name(k) == name) return k;
  }
  throw FormatError("unknown primitive kind: " + std::string(name));
}

int label_index(std::string_view label) {
  for (std::size_t i = 0; i < kPartLabels.size(); ++i)
    if (kPartLabels[i] == label) return static_cast<int>(i);
  throw FormatError("unknown part label: " + std::string(label));
}

PrimitiveSpec PrimitiveSpec::canonicalized() const {
  PrimitiveSpec p = *this;
  switch (kind) {
    case PrimitiveKind::box:
      break;
    case PrimitiveKind::cylinder:
    case PrimitiveKind::cone:
      p.size[2] = p.size[0];
      break;
    case PrimitiveKind::sphere:
      p.size[1] = p.size[2] = p.size[0];
      break;
  }
  return p;
}

Aabb PrimitiveSpec::bounds() const {
  const Vec3 h = pose.scale * local_half_box(*this);
  return Aabb{pose.translation - h, pose.translation + h};
}

bool PrimitiveSpec::contains(const Vec3& x) const {
  const Vec3 q = to_local(*this, x);
  const Vec3& s = size;
  switch (kind) {
    case PrimitiveKind::box:
      return std::abs(q[0]) <= s[0] && std::abs(q[1]) <= s[1] && std::abs(q[2]) <= s[2];
    case PrimitiveKind::cylinder:
      return std::abs(q[1]) <= s[1] && q[0] * q[0] + q[2] * q[2] <= s[0] * s[0];
    case PrimitiveKind::cone: {
      if (std::abs(q[1]) > s[1]) return false;
      const double rho = s[0] * (s[1] - q[1]) / (2.0 * s[1]);
      return q[0] * q[0] + q[2] * q[2] <= rho * rho;
    }
    case PrimitiveKind::sphere:
      return dot(q, q) <= s[0] * s[0];
  }
  return false;
}

double PrimitiveSpec::surface_area() const {
  return local_area(kind, canonicalized().size) * pose.scale * pose.scale;
}

Aabb PartObjectSpec::bounds() const {
  if (parts.empty()) return Aabb{};
  Aabb b = parts[0].bounds();
  for (std::size_t i = 1; i < parts.size(); ++i) b = b.merged(parts[i].bounds());
  return b;
}

std::vector<ViewSpec> canonical_views(double elevation_deg, std::size_t count) {
  std::vector<ViewSpec> v;
  for (std::size_t i = 0; i < count; ++i)
    v.push_back(ViewSpec{360.0 * static_cast<double>(i) / static_cast<double>(count),
                         elevation_deg});
  return v;
}

Vec3 view_direction(const ViewSpec& v) {
  const double az = v.azimuth_deg * kRad;
  const double el = v.elevation_deg * kRad;
  return {std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
}

std::size_t DepthRender::mask_area(std::int32_t id) const {
  return static_cast<std::size_t>(std::count(part_mask.begin(), part_mask.end(), id));
}

DepthRender render_depth(const PartObjectSpec& object, const ViewSpec& view, int size) {
  DepthRender r;
  r.height = r.width = size;
  r.view = view;
  r.depth.assign(static_cast<std::size_t>(size * size), 0.0);
  r.part_mask.assign(static_cast<std::size_t>(size * size), 0);

  const Vec3 c = view_direction(view);
  const Vec3 forward = -1.0 * c;
  const Vec3 right = normalized(cross(forward, Vec3{0, 1, 0}));
  const Vec3 up = cross(right, forward);
  for (int row = 0; row < size; ++row) {
    const double y = (1.0 - 2.0 * (row + 0.5) / size) * kImageHalfExtent;
    for (int col = 0; col < size; ++col) {
      const double x = (2.0 * (col + 0.5) / size - 1.0) * kImageHalfExtent;
      const Vec3 origin = kCameraDistance * c + x * right + y * up;
      double best = std::numeric_limits<double>::infinity();
      std::int32_t id = 0;
      for (std::size_t i = 0; i < object.parts.size(); ++i) {
        auto t = ray_hit(object.parts[i], origin, forward);
        if (t && *t < best) {
          best = *t;
          id = static_cast<std::int32_t>(i + 1);
        }
      }
      if (id > 0) {
        const auto k = static_cast<std::size_t>(row * size + col);
        r.depth[k] = best;
        r.part_mask[k] = id;
      }
    }
  }
  return r;
}

std::vector<std::size_t> patch_members(const DepthRender& r, std::int32_t id, int patch,
                                       double fraction) {
  if (patch <= 0 || r.height % patch != 0 || r.width % patch != 0)
    throw DimensionError("patch_members: render " + std::to_string(r.height) + "x" +
                         std::to_string(r.width) + " not divisible by patch " +
                         std::to_string(patch));
  const int gh = r.height / patch, gw = r.width / patch;
  const double need = fraction * patch * patch;
  std::vector<std::size_t> out;
  for (int pr = 0; pr < gh; ++pr) {
    for (int pc = 0; pc < gw; ++pc) {
      int count = 0;
      for (int i = 0; i < patch; ++i)
        for (int j = 0; j < patch; ++j) count += r.mask_at(pr * patch + i, pc * patch + j) == id;
      if (count > need) out.push_back(static_cast<std::size_t>(pr * gw + pc));
    }
  }
  return out;
}

PointCloud sample_points(const PrimitiveSpec& part, std::size_t n, Rng& rng) {
  const PrimitiveSpec p = part.canonicalized();
  PointCloud pc;
  pc.points.resize(n);
  pc.labels.assign(n, p.label);
  for (auto& pt : pc.points) {
    Vec3 local{};
    sample_local(p.kind, p.size, rng, local);
    pt = p.pose.apply(local);
  }
  return pc;
}

PointCloud sample_object_points(const PartObjectSpec& object, std::size_t n, Rng& rng) {
  PointCloud pc;
  if (object.parts.empty()) return pc;
  std::vector<double> areas;
  double total = 0.0;
  for (const auto& p : object.parts) {
    areas.push_back(p.surface_area());
    total += areas.back();
  }
  // Largest-remainder allocation keeps the total exactly n.
  std::vector<std::size_t> counts(areas.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < areas.size(); ++i) {
    const double exact = static_cast<double>(n) * areas[i] / total;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    used += counts[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++counts[rem[k % rem.size()].second];
  for (std::size_t i = 0; i < object.parts.size(); ++i) {
    PointCloud part = sample_points(object.parts[i], counts[i], rng);
    pc.points.insert(pc.points.end(), part.points.begin(), part.points.end());
    pc.labels.insert(pc.labels.end(), part.labels.begin(), part.labels.end());
  }
  return pc;
}

Pose canonical_transform(const Aabb& box) {
  const Vec3 c = box.center();
  const double ext = 0.5 * std::max({box.hi[0] - box.lo[0], box.hi[1] - box.lo[1],
                                     box.hi[2] - box.lo[2]});
  if (!(ext > 0.0)) throw DegenerateInputError("normalize_canonical: zero-extent bounding box");
  Pose p;
  p.scale = 1.0 / ext;
  p.translation = (-1.0 / ext) * c;
  return p;
}

PartObjectSpec normalize_canonical(const PartObjectSpec& object) {
  if (object.parts.empty()) throw DegenerateInputError("normalize_canonical: no parts");
  const Aabb box = object.bounds();
  const Vec3 c = box.center();
  const double ext = 0.5 * std::max({box.hi[0] - box.lo[0], box.hi[1] - box.lo[1],
                                     box.hi[2] - box.lo[2]});
  if (!(ext > 0.0)) throw DegenerateInputError("normalize_canonical: zero-extent bounding box");
  PartObjectSpec out = object;
  for (auto& p : out.parts) {
    for (int i = 0; i < 3; ++i) p.pose.translation[i] = (p.pose.translation[i] - c[i]) / ext;
    p.pose.scale = p.pose.scale / ext;
  }
  return out;
}

Mesh tessellate_local(PrimitiveKind kind, const Vec3& size, int segments) {
  Mesh m;
  const auto S = static_cast<std::uint32_t>(segments);
  auto ring_angle = [&](std::uint32_t i) { return 2.0 * kPi * i / segments; };
  switch (kind) {
    case PrimitiveKind::box: {
      for (std::uint32_t i = 0; i < 8; ++i) {
        m.vertices.push_back({(i & 1) ? size[0] : -size[0], (i & 2) ? size[1] : -size[1],
                              (i & 4) ? size[2] : -size[2]});
      }
      m.faces = {{0, 4, 6}, {0, 6, 2}, {1, 3, 7}, {1, 7, 5}, {0, 1, 5}, {0, 5, 4},
                 {2, 6, 7}, {2, 7, 3}, {0, 2, 3}, {0, 3, 1}, {4, 5, 7}, {4, 7, 6}};
      return m;
    }
    case PrimitiveKind::cylinder: {
      const double r = size[0], h = size[1];
      for (std::uint32_t i = 0; i < S; ++i)
        m.vertices.push_back({r * std::cos(ring_angle(i)), -h, r * std::sin(ring_angle(i))});
      for (std::uint32_t i = 0; i < S; ++i)
        m.vertices.push_back({r * std::cos(ring_angle(i)), h, r * std::sin(ring_angle(i))});
      m.vertices.push_back({0, -h, 0});
      m.vertices.push_back({0, h, 0});
      for (std::uint32_t i = 0; i < S; ++i) {
        const std::uint32_t j = (i + 1) % S;
        m.faces.push_back({i, S + i, j});
        m.faces.push_back({j, S + i, S + j});
        m.faces.push_back({2 * S, i, j});
        m.faces.push_back({2 * S + 1, S + j, S + i});
      }
      break;
    }
    case PrimitiveKind::cone: {
      const double r = size[0], h = size[1];
      for (std::uint32_t i = 0; i < S; ++i)
        m.vertices.push_back({r * std::cos(ring_angle(i)), -h, r * std::sin(ring_angle(i))});
      m.vertices.push_back({0, -h, 0});
      m.vertices.push_back({0, h, 0});
      for (std::uint32_t i = 0; i < S; ++i) {
        const std::uint32_t j = (i + 1) % S;
        m.faces.push_back({i, S + 1, j});
        m.faces.push_back({S, i, j});
      }
      break;
    }
    case PrimitiveKind::sphere: {
      const double r = size[0];
      const std::uint32_t rings = std::max<std::uint32_t>(2, S / 2);
      m.vertices.push_back({0, r, 0});
      for (std::uint32_t k = 1; k < rings; ++k) {
        const double phi = kPi * k / rings;
        for (std::uint32_t i = 0; i < S; ++i) {
          m.vertices.push_back({r * std::sin(phi) * std::cos(ring_angle(i)), r * std::cos(phi),
                                r * std::sin(phi) * std::sin(ring_angle(i))});
        }
      }
      const auto bottom = static_cast<std::uint32_t>(m.vertices.size());
      m.vertices.push_back({0, -r, 0});
      auto at = [&](std::uint32_t k, std::uint32_t i) { return 1 + (k - 1) * S + (i % S); };
      for (std::uint32_t i = 0; i < S; ++i) {
        m.faces.push_back({0, at(1, i), at(1, i + 1)});
        m.faces.push_back({bottom, at(rings - 1, i + 1), at(rings - 1, i)});
      }
      for (std::uint32_t k = 1; k + 1 < rings; ++k) {
        for (std::uint32_t i = 0; i < S; ++i) {
          m.faces.push_back({at(k, i), at(k + 1, i), at(k + 1, i + 1)});
          m.faces.push_back({at(k, i), at(k + 1, i + 1), at(k, i + 1)});
        }
      }
      break;
    }
  }
  // Every solid here is convex and contains the origin, so a face is outward
  // when its normal points away from the origin.
  for (auto& f : m.faces) {
    const Vec3& a = m.vertices[f[0]];
    const Vec3& b = m.vertices[f[1]];
    const Vec3& c = m.vertices[f[2]];
    const Vec3 centroid = (1.0 / 3.0) * (a + b + c);
    if (dot(cross(b - a, c - a), centroid) < 0.0) std::swap(f[1], f[2]);
  }
  return m;
}

Mesh tessellate(const PrimitiveSpec& part, int segments) {
  const PrimitiveSpec p = part.canonicalized();
  return transformed(tessellate_local(p.kind, p.size, segments), p.pose);
}

PartFrame part_frame(const PrimitiveSpec& part) {
  const PrimitiveSpec p = part.canonicalized();
  const double ms = max_extent(local_half_box(p));
  PartFrame f;
  f.local = p;
  f.local.size = (1.0 / ms) * p.size;
  f.local.pose = Pose{};
  f.transform = Pose{p.pose.translation, p.pose.scale * ms};
  return f;
}

double primitive_pair_iou(const PrimitiveSpec& a, const PrimitiveSpec& b, int grid) {
  const Aabb box = a.bounds().merged(b.bounds());
  std::size_t inter = 0, uni = 0;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      for (int k = 0; k < grid; ++k) {
        Vec3 p;
        const std::array<int, 3> idx = {i, j, k};
        for (int d = 0; d < 3; ++d) {
          const double t = (idx[static_cast<std::size_t>(d)] + 0.5) / grid;
          p[static_cast<std::size_t>(d)] = box.lo[static_cast<std::size_t>(d)] + t * (box.hi[static_cast<std::size_t>(d)] - box.lo[static_cast<std::size_t>(d)]);
        }
        const bool ia = a.contains(p), ib = b.contains(p);
        inter += (ia && ib) ? 1 : 0;
        uni += (ia || ib) ? 1 : 0;
      }
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double mean_pairwise_overlap_iou(const PartObjectSpec& object, int grid) {
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < object.parts.size(); ++i) {
    for (std::size_t j = i + 1; j < object.parts.size(); ++j) {
      sum += primitive_pair_iou(object.parts[i], object.parts[j], grid);
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : sum / static_cast<double>(pairs);
}

PartObjectSpec sorted_parts(const PartObjectSpec& object) {
  PartObjectSpec out = object;
  std::stable_sort(out.parts.begin(), out.parts.end(),
                   [](const PrimitiveSpec& a, const PrimitiveSpec& b) {
                     const auto& ta = a.pose.translation;
                     const auto& tb = b.pose.translation;
                     return std::tie(a.label, ta[1], ta[0], ta[2]) <
                            std::tie(b.label, tb[1], tb[0], tb[2]);
                   });
  return out;
}

PartObjectSpec generate_object(std::uint64_t seed, int n_parts, const SynthConfig& cfg) {
  if (n_parts < 2 || n_parts > 8 || n_parts < cfg.min_parts || n_parts > cfg.max_parts) {
    throw ConfigError("generate_object: n_parts must lie in [" + std::to_string(cfg.min_parts) +
                      ", " + std::to_string(cfg.max_parts) + "], got " +
                      std::to_string(n_parts));
  }
  std::vector<const Category*> eligible;
  for (const auto& c : kCategories)
    if (c.capacity >= n_parts) eligible.push_back(&c);

  const Rng base(seed);
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    Rng rng = base.fork(static_cast<std::uint64_t>(attempt));
    const Category& cat = *eligible[rng.below(eligible.size())];
    PartObjectSpec obj;
    obj.seed = seed;
    obj.category = cat.name;
    obj.parts = cat.build(n_parts, rng);
    obj = normalize_canonical(obj);
    if (!attached(obj, cfg.attach_tolerance)) continue;
    if (mean_pairwise_overlap_iou(obj) >= cfg.max_mean_overlap_iou) continue;
    if (!every_part_poolable(obj, cfg)) continue;
    return obj;
  }
  throw GenerationError("generate_object: no valid object for seed " + std::to_string(seed) +
                        " after " + std::to_string(cfg.max_attempts) + " attempts");
}

}  // namespace partrag
