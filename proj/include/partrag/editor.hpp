#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "partrag/generator.hpp"
#include "partrag/index.hpp"
#include "partrag/metrics.hpp"

namespace partrag {

enum class EditOp { swap, refine, compose };
std::string_view op_name(EditOp op);
EditOp op_from_name(std::string_view name);

/// A part-structured asset that can be edited: latents with poses plus the
/// context that conditioned its generation.
struct EditableAsset {
  std::vector<PartLatent> parts;
  FusedContext ctx;
};

/// Ground-truth latents of a corpus object with its own retrieval context.
EditableAsset asset_from_object(const ParameterSet& retriever, const RetrievalIndex& index,
                                const CorpusObject& object, const EncoderConfig& enc,
                                std::size_t k = 3);

/// One target group and the condition it is pulled toward.
struct EditTarget {
  std::vector<std::size_t> parts;
  Tensor condition;  // 1 x d, c_edit
};

struct EditRequest {
  EditOp op = EditOp::swap;
  /// swap and refine take exactly one group; compose takes disjoint groups.
  std::vector<EditTarget> targets;
  double alpha = 0.5;         // refine only
  std::size_t k_steps = 20;   // K
  double theta = 0.5;         // theta_valid
  std::size_t k = 3;          // exemplars retrieved per group
  std::size_t max_retries = 0;  // 0 means k
  std::uint64_t seed = 0;
};

struct EditConfig {
  double t_edit = 0.5;
  double cfg_scale = 1.5;
  double eps_seam = 0.02;
  double lambda_smooth = 0.5;
  std::size_t smooth_iters = 3;
  std::size_t n_nearest = 4;
  std::size_t frozen_samples = 512;
  double seamless_threshold = 0.01;
  int segments = 16;
};

/// Throws EditError on empty groups (swap, refine), bad indices, overlapping
/// compose groups, alpha outside [0, 1] or a zero condition.
void validate_request(const EditRequest& req, std::size_t n_parts);

/// Label condition: normalized mean of the stored part embeddings carrying
/// `label`. Throws QueryError when no stored part has it.
Tensor label_condition(const RetrievalIndex& index, int label);
/// Stored embedding of one indexed part.
Tensor part_condition(const RetrievalIndex& index, std::size_t entry, std::size_t part);
/// Image-side part embedding pooled over the render's foreground.
Tensor render_condition(const ParameterSet& retriever, const DepthRender& r,
                        const EncoderConfig& enc);

struct Exemplar {
  PartHit hit;
  std::string asset_id;
  int label = 0;
  PartLatent latent;
};
/// Top-k stored parts by cosine against c_edit.
std::vector<Exemplar> retrieve_exemplars(const RetrievalIndex& index, const Tensor& c_edit,
                                         std::size_t k = 3);

/// Exemplar latent with the target's part id and pose.
PartLatent align_exemplar(const PartLatent& exemplar, const PartLatent& target);
/// (1 - alpha) z + alpha mean(candidates).
Tensor refine_init(const Tensor& z, const std::vector<Tensor>& candidates, double alpha);

struct DenoiseStats {
  std::size_t channels_updated = 0;
  std::size_t channels_total = 0;
};
/// Re-noises the target parts to t_start and integrates `steps` Euler steps
/// down to 0, writing only target token rows. Frozen latents and every pose
/// are copied through unchanged.
std::vector<PartLatent> masked_denoise(const ParameterSet& gen, const DiTConfig& cfg,
                                       const std::vector<PartLatent>& parts,
                                       const std::vector<std::size_t>& targets,
                                       const FusedContext& ctx, std::size_t steps, double t_start,
                                       double cfg_scale, std::uint64_t seed,
                                       DenoiseStats* stats = nullptr);

/// Cosine between the shape-side part embedding of z and c_edit.
double semantic_similarity(const ParameterSet& retriever, const Tensor& z, const Tensor& c_edit);
bool semantic_validate(const ParameterSet& retriever, const Tensor& z, const Tensor& c_edit,
                       double theta);

struct SmoothResult {
  Mesh mesh;
  std::vector<std::uint32_t> seam;
  double before = 0.0;  // seam discontinuity
  double after = 0.0;
};
/// Seam projection onto frozen surface samples, then Laplacian smoothing of
/// the seam's one-ring. Seam vertices only move when that brings them closer
/// to the frozen surface.
SmoothResult boundary_smooth(const Mesh& edited, const std::vector<Mesh>& frozen,
                             const EditConfig& cfg, std::uint64_t seed = 0);

struct EditAttempt {
  std::size_t rank = 0;
  std::vector<double> similarity;  // per group
  bool accepted = false;
};

struct EditResult {
  std::vector<PartLatent> parts;
  bool accepted = false;
  std::size_t retries = 0;  // rejected attempts
  std::vector<EditAttempt> attempts;
  std::vector<std::vector<Exemplar>> exemplars;  // per group
  std::vector<std::size_t> edited;               // union of the groups, ascending
  std::size_t channels_updated = 0;
  std::size_t channels_total = 0;
  std::vector<Mesh> meshes;  // after smoothing
  std::size_t seam_vertices = 0;
  double seam_before = 0.0;
  double seam_after = 0.0;
  bool seamless = true;
  double preservation_pre = 1.0;
  double preservation_post = 1.0;

  std::string to_json() const;
};

EditResult edit(const EditRequest& req, const EditableAsset& asset, const ParameterSet& gen,
                const DiTConfig& dit, const ParameterSet& retriever, const RetrievalIndex& index,
                const EditConfig& cfg = {});

/// "PRTM" binary: magic, version, vertex count, face count, f64 vertices,
/// u32 indices.
std::string serialize_mesh(const Mesh& m);
Mesh deserialize_mesh(std::string_view bytes);
void save_mesh(const std::filesystem::path& path, const Mesh& m);
Mesh load_mesh(const std::filesystem::path& path);

/// Similarities of same-label swaps on held-out objects with validation
/// disabled; the 10th percentile is the largest threshold that keeps 90% of
/// them.
struct ThetaCalibration {
  std::vector<double> similarity;
  double theta90 = 0.0;
  double pass_rate(double theta) const;
};
ThetaCalibration calibrate_theta(const std::vector<CorpusObject>& objects,
                                 const ParameterSet& gen, const DiTConfig& dit,
                                 const ParameterSet& retriever, const RetrievalIndex& index,
                                 const EncoderConfig& enc, const EditConfig& cfg = {},
                                 std::uint64_t seed = 0);

}  // namespace partrag
