#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "partrag/corpus.hpp"
#include "partrag/hcr.hpp"
#include "partrag/index.hpp"
#include "partrag/module.hpp"
#include "partrag/optim.hpp"

namespace partrag {

struct DiTConfig {
  std::size_t n_blocks = 6;
  std::vector<std::size_t> global_blocks{0, 2, 4};
  std::size_t width = 32;
  std::size_t heads = 2;
  std::size_t max_parts = 8;
  std::size_t tokens_per_part = 16;
  std::size_t latent_dim = 32;   // d of a part latent
  std::size_t context_dim = 32;  // width of the fused context tokens
  std::size_t time_freqs = 8;
  std::size_t mlp_hidden = 64;
  double cfg_drop = 0.1;

  /// Latent channels carried by each token.
  std::size_t channels() const { return latent_dim / tokens_per_part; }
  bool is_global(std::size_t block) const;
  /// Throws ConfigError on inconsistent settings.
  void validate() const;

  /// 21 blocks, global lane on every even block.
  static DiTConfig paper();
};

/// Adds the "dit.*" parameters. The output projection starts at zero; the
/// "dit.stats.*" entries hold latent and pose standardization and are never
/// trained.
void init_generator(ParameterSet& ps, const DiTConfig& cfg, Rng& rng);
bool is_stats_param(const std::string& name);

/// Fits "dit.stats.*" to a set of part latents.
void fit_generator_stats(ParameterSet& ps, const std::vector<PartLatent>& parts);

/// Part latents (standardized) <-> token matrix of N * tokens_per_part rows,
/// each carrying channels() consecutive latent entries.
Tensor latents_to_tokens(const ParameterSet& ps, const DiTConfig& cfg,
                         const std::vector<Tensor>& z);
std::vector<Tensor> tokens_to_latents(const ParameterSet& ps, const DiTConfig& cfg,
                                      const Tensor& tokens);
/// Pose (tx, ty, tz, log scale), standardized; one row per part.
Tensor poses_to_targets(const ParameterSet& ps, const std::vector<Pose>& poses);
std::vector<Pose> targets_to_poses(const ParameterSet& ps, const Tensor& targets);

/// Fused retrieval context: query tokens followed by retrieved tokens in rank
/// order, or the learned null row repeated.
struct FusedContext {
  Tensor tokens;
  bool null = false;
  std::size_t rows() const { return tokens.rows(); }
};
FusedContext fuse_context(const Tensor& query_tokens, const std::vector<const Tensor*>& retrieved);
/// Null context with the given row count.
FusedContext null_context(const ParameterSet& ps, std::size_t rows);
Var context_var(Binder& b, const FusedContext& ctx);

struct DiTOutput {
  Var velocity;  // same shape as Z_t
  Var pose;      // N x 4, standardized
};
/// Dual-lane transformer over the noisy part tokens.
DiTOutput dit_forward(Binder& b, const DiTConfig& cfg, Var zt, double t, Var ctx,
                      const std::vector<std::size_t>& part_ids);

/// Z_t = (1 - t) Z_0 + t eps.
Tensor interpolate(const Tensor& z0, const Tensor& eps, double t);

struct FlowLoss {
  Var flow;  // mean squared error against eps - Z_0
  Var pose;  // mean squared error of the pose head
};
FlowLoss flow_loss(Binder& b, const DiTConfig& cfg, const Tensor& z0, const Tensor& eps, double t,
                   Var ctx, const std::vector<std::size_t>& part_ids, const Tensor& pose_target);
/// L_flow + L_HCR; a default Var for `hcr` means stage 1 (no HCR term).
Var total_loss(Var flow, Var hcr);

/// v_u + s (v_c - v_u); s = 1 and s = 0 return v_c and v_u exactly.
Tensor cfg_combine(const Tensor& v_uncond, const Tensor& v_cond, double s);

/// Euler integration of dZ/dt = -v from t = 1 to t = 0 in uniform steps.
using VelocityFn = std::function<Tensor(const Tensor& z, double t)>;
Tensor euler_integrate(Tensor z1, std::size_t steps, const VelocityFn& v,
                       std::vector<Tensor>* trajectory = nullptr);

struct SampleConfig {
  std::size_t steps = 50;
  double cfg_scale = 1.5;
  std::size_t k = 3;
  std::uint64_t seed = 0;
  /// Asset left out of retrieval (evaluation on indexed objects).
  std::optional<std::string> exclude;
};

/// Standardized latent tokens from noise, guided between `ctx` and the null
/// context.
Tensor sample_tokens(const ParameterSet& gen, const DiTConfig& cfg, const FusedContext& ctx,
                     std::size_t n_parts, const SampleConfig& sc,
                     std::vector<Tensor>* trajectory = nullptr);
/// Latents and poses from clean tokens: one conditional forward at t = 0
/// reads the pose head.
std::vector<PartLatent> read_parts(const ParameterSet& gen, const DiTConfig& cfg,
                                   const Tensor& tokens, const FusedContext& ctx);

/// Decodes every part; rescales all poses together when the union leaves
/// [-1, 1]^3.
std::vector<Mesh> assemble(const ParameterSet& retriever, std::vector<PartLatent>& parts,
                           int segments = 16);
Mesh merge_meshes(const std::vector<Mesh>& parts);

struct SampleResult {
  std::vector<PartLatent> parts;
  std::vector<Hit> retrieved;
  std::vector<Mesh> meshes;
};
/// Retrieve, fuse, denoise, read poses and assemble. Throws FingerprintError
/// when the index was built by a different retriever.
SampleResult sample(const ParameterSet& gen, const DiTConfig& cfg, const ParameterSet& retriever,
                    const RetrievalIndex& index, const DepthRender& render, std::size_t n_parts,
                    const SampleConfig& sc, const EncoderConfig& enc);

/// Query tokens plus the top-k retrieved token blocks for a render.
FusedContext retrieval_context(const ParameterSet& retriever, const RetrievalIndex& index,
                               const DepthRender& render, std::size_t k,
                               const EncoderConfig& enc,
                               const std::optional<std::string>& exclude = std::nullopt,
                               std::vector<Hit>* hits = nullptr);

struct GeneratorTrainConfig {
  DiTConfig dit;
  AdamWConfig opt{.lr = 1e-3, .weight_decay = 0.0, .warmup_steps = 100};
  std::size_t stage1_steps = 1000;
  std::size_t stage2_steps = 200;
  std::size_t batch = 8;
  std::size_t max_parts = 4;  // objects with more parts are skipped
  std::size_t k = 3;
  double pose_weight = 1.0;
  HcrConfig hcr;
  double block_multiplier = 0.1;  // stage 2: pretrained DiT blocks
  double new_multiplier = 1.0;    // stage 2: new modules and heads
  bool ema = false;
  double ema_decay = 0.999;
  std::size_t log_every = 50;
  std::uint64_t seed = 1;
};

struct GeneratorLogRecord {
  std::size_t step = 0;  // updates applied before this batch
  int stage = 1;
  double flow = 0.0;
  double flow_avg = 0.0;  // mean batch flow loss since the previous record
  double pose = 0.0;
  double hcr = 0.0;
};

struct GeneratorTrainResult {
  ParameterSet params;
  std::vector<GeneratorLogRecord> log;
};

/// Stage-2 learning-rate multiplier of a parameter.
double stage2_multiplier(const std::string& name, const GeneratorTrainConfig& cfg);

/// Two-stage curriculum. `init` must hold initialized "dit.*" parameters;
/// stats are fitted here from the training latents.
GeneratorTrainResult train_generator(
    const Corpus& corpus, const EncoderConfig& enc, const ParameterSet& retriever,
    const RetrievalIndex& index, const GeneratorTrainConfig& cfg, ParameterSet init,
    const std::function<void(const GeneratorLogRecord&)>& on_log = {});

}  // namespace partrag
