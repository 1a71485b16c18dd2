#pragma once

#include <cstddef>
#include <vector>

#include "partrag/geometry.hpp"
#include "partrag/module.hpp"
#include "partrag/synthdata.hpp"
#include "partrag/tensor.hpp"

namespace partrag {

struct EncoderConfig {
  int render_size = 32;
  int patch = 4;
  std::size_t width = 32;   // d
  std::size_t hidden = 64;  // h
  double membership = 0.25;
  std::size_t points_per_part = 128;

  std::size_t grid() const { return static_cast<std::size_t>(render_size / patch); }
  std::size_t tokens() const { return grid() * grid(); }
  /// Two channels per pixel: foreground flag and normalized height.
  std::size_t patch_dim() const { return static_cast<std::size_t>(2 * patch * patch); }
};

/// Part latent z with its part id and pose T.
struct PartLatent {
  Tensor z;  // 1 x d
  int part_id = 0;
  Pose transform;
};

/// Decoder output in the part's local frame.
struct DecodedPrimitive {
  PrimitiveKind kind = PrimitiveKind::box;
  Vec3 size{1, 1, 1};
  Vec3 offset{0, 0, 0};
  PrimitiveSpec local() const;
};

/// Adds patch encoder ("patch.*"), part encoder ("part.*") and part decoder
/// ("dec.*") parameters.
void init_encoders(ParameterSet& ps, const EncoderConfig& cfg, Rng& rng);

/// L x (2 p^2) patch pixel matrix of a render.
Tensor patch_pixels(const DepthRender& r, const EncoderConfig& cfg);

/// Patch tokens, one row per patch: gelu(p W1) W2 + pos.
Var encode_patches(Binder& b, Var pixels);
Tensor encode_patches(const ParameterSet& ps, const DepthRender& r, const EncoderConfig& cfg);

/// Patches (row-major) in which > membership of pixels show part `part`
/// (0-based index into the object's parts).
std::vector<std::size_t> patch_membership(const DepthRender& r, std::size_t part,
                                          const EncoderConfig& cfg);
/// Patches with > membership foreground pixels.
std::vector<std::size_t> foreground_membership(const DepthRender& r, const EncoderConfig& cfg);

/// Mean of the member tokens; throws PartInvisibleError when empty.
Var pool_part_features(Var tokens, const std::vector<std::size_t>& members);
Tensor pool_part_features(const Tensor& tokens, const std::vector<std::size_t>& members);
/// Arithmetic mean of 1 x d rows.
Var object_pool(const std::vector<Var>& xs);
Tensor object_pool(const std::vector<Tensor>& xs);

/// Max-pooled point encoder: P x 3 -> 1 x d.
Var encode_part(Binder& b, Var points);
Tensor encode_part(const ParameterSet& ps, const Tensor& points);

/// Samples the part's surface in its local frame (largest half-extent 1).
Tensor local_part_points(const PrimitiveSpec& part, std::size_t n, std::uint64_t seed);

struct DecoderVars {
  Var logits;  // 1 x kinds
  Var size;    // 1 x 3, strictly positive
  Var offset;  // 1 x 3
};
DecoderVars decode_head(Binder& b, Var z);
DecodedPrimitive decode_primitive(const ParameterSet& ps, const Tensor& z);
/// Tessellated primitive of the decoded latent, posed by T.
Mesh decode_part(const ParameterSet& ps, const PartLatent& latent, int segments = 16);

/// Autoencoding loss over latent rows: mean cross-entropy on kind + MSE on
/// size and offset against the local-frame targets.
Var autoencode_loss(Binder& b, Var z, const std::vector<PrimitiveSpec>& local_targets);

}  // namespace partrag
