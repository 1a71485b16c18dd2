#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "partrag/geometry.hpp"
#include "partrag/rng.hpp"

namespace partrag {

enum class PrimitiveKind : std::uint8_t { box = 0, cylinder = 1, sphere = 2, cone = 3 };
inline constexpr std::size_t kPrimitiveKinds = 4;
std::string_view kind_name(PrimitiveKind k);
PrimitiveKind kind_from_name(std::string_view name);

inline constexpr std::array<std::string_view, 8> kPartLabels = {
    "leg", "seat", "back", "top", "handle", "wheel", "body", "arm"};
int label_index(std::string_view label);

/// One primitive part. `size` holds half-extents in the primitive's frame:
/// boxes use all three; cylinders and cones use (radius, half-height, radius);
/// spheres use size[0] as the radius. Cylinder/cone axes point along +y and a
/// cone's apex sits at +half-height.
struct PrimitiveSpec {
  PrimitiveKind kind = PrimitiveKind::box;
  Vec3 size{1, 1, 1};
  Pose pose;
  int label = 0;

  /// Forces the symmetric extents implied by `kind`.
  PrimitiveSpec canonicalized() const;
  Aabb bounds() const;
  bool contains(const Vec3& p) const;
  double surface_area() const;
  bool operator==(const PrimitiveSpec&) const = default;
};

struct PartObjectSpec {
  std::vector<PrimitiveSpec> parts;
  std::uint64_t seed = 0;
  std::string category;

  std::size_t n_parts() const { return parts.size(); }
  Aabb bounds() const;
  bool operator==(const PartObjectSpec&) const = default;
};

struct ViewSpec {
  double azimuth_deg = 0.0;
  double elevation_deg = 20.0;
  bool operator==(const ViewSpec&) const = default;
};

/// Eight views at 45 degree azimuth steps.
std::vector<ViewSpec> canonical_views(double elevation_deg = 20.0, std::size_t count = 8);
/// Unit vector from the origin toward the camera.
Vec3 view_direction(const ViewSpec& v);

struct DepthRender {
  int height = 0;
  int width = 0;
  std::vector<double> depth;         // 0 on background
  std::vector<std::int32_t> part_mask;  // 0 = background, i + 1 = part i
  ViewSpec view;

  double depth_at(int r, int c) const { return depth[static_cast<std::size_t>(r * width + c)]; }
  std::int32_t mask_at(int r, int c) const {
    return part_mask[static_cast<std::size_t>(r * width + c)];
  }
  std::size_t mask_area(std::int32_t id) const;
  bool operator==(const DepthRender&) const = default;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<std::int32_t> labels;  // optional, per point
};

struct SynthConfig {
  int min_parts = 2;
  int max_parts = 8;
  int render_size = 32;
  double elevation_deg = 20.0;
  std::size_t views = 8;
  double attach_tolerance = 0.05;
  double max_mean_overlap_iou = 0.5;
  int max_attempts = 100;
  // Every part must own at least one patch of this size in some view.
  int patch_size = 4;
  double patch_fraction = 0.25;
};

/// Orthographic camera: view plane at distance 3 from the origin, image
/// spanning [-1.75, 1.75] so all of [-1, 1]^3 projects inside.
inline constexpr double kCameraDistance = 3.0;
inline constexpr double kImageHalfExtent = 1.75;

PartObjectSpec generate_object(std::uint64_t seed, int n_parts,
                               const SynthConfig& cfg = SynthConfig{});

DepthRender render_depth(const PartObjectSpec& object, const ViewSpec& view,
                         int size = 32);

/// Indices (row-major over the patch grid) of patches in which strictly more
/// than `fraction` of the pixels carry mask id `id`.
std::vector<std::size_t> patch_members(const DepthRender& r, std::int32_t id, int patch,
                                       double fraction);

/// Uniform surface samples of one posed primitive (exact area weighting).
PointCloud sample_points(const PrimitiveSpec& part, std::size_t n, Rng& rng);
/// Samples all parts with counts proportional to their surface areas.
PointCloud sample_object_points(const PartObjectSpec& object, std::size_t n, Rng& rng);

/// Isotropic scale + translation mapping the union bounding box into
/// [-1, 1]^3 with the longest axis spanning exactly [-1, 1].
PartObjectSpec normalize_canonical(const PartObjectSpec& object);
/// The transform normalize_canonical would apply.
Pose canonical_transform(const Aabb& box);

/// Tessellation in the primitive's own frame (boxes 12 triangles; round
/// kinds at `segments` segments), outward-oriented.
Mesh tessellate_local(PrimitiveKind kind, const Vec3& size, int segments = 16);
/// Posed tessellation.
Mesh tessellate(const PrimitiveSpec& part, int segments = 16);

/// Part frame used by the latent representation: the part scaled so its
/// largest half-extent is 1 and centred at the origin, plus the pose T that
/// restores it.
struct PartFrame {
  PrimitiveSpec local;  // identity pose
  Pose transform;
};
PartFrame part_frame(const PrimitiveSpec& part);

/// Pairwise IoU of two primitives estimated on a regular grid over their
/// joint bounding box.
double primitive_pair_iou(const PrimitiveSpec& a, const PrimitiveSpec& b, int grid = 16);
double mean_pairwise_overlap_iou(const PartObjectSpec& object, int grid = 16);

/// Parts sorted by (label, y, x, z); the generator's canonical part order.
PartObjectSpec sorted_parts(const PartObjectSpec& object);

}  // namespace partrag
