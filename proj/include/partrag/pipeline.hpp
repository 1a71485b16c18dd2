#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>

#include "partrag/editor.hpp"
#include "partrag/generator.hpp"
#include "partrag/hcr.hpp"
#include "partrag/index.hpp"

namespace partrag {

/// Resolved run configuration: "section.key" values over a profile's
/// defaults. Later layers (file, then flags) override earlier ones; unknown
/// keys are rejected.
class RunConfig {
 public:
  /// "desk" or "paper".
  static RunConfig profile(std::string_view name);
  /// Profile from `profile` if given, else the file's run.profile, else
  /// desk; then the file on top.
  static RunConfig load(const std::optional<std::filesystem::path>& file,
                        const std::optional<std::string>& profile);

  void merge_file(const std::filesystem::path& path);
  void merge_ini(const std::string& text);
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string str(const std::string& key) const;
  double num(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::vector<double> list(const std::string& key) const;
  std::uint64_t seed() const { return count("run.seed"); }

  /// Sorted sections and keys; reading it back gives the same config.
  std::string to_ini() const;

  CorpusConfig corpus() const;
  EncoderConfig encoder() const;
  RetrieverTrainConfig retriever() const;
  DiTConfig dit() const;
  GeneratorTrainConfig generator() const;
  SampleConfig sampler() const;
  EditConfig edit() const;

 private:
  boost::property_tree::ptree tree_;
};

/// Artifact layout under one output directory.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path retriever() const { return root / "retriever.prtw"; }
  std::filesystem::path index() const { return root / "index.prti"; }
  std::filesystem::path generator() const { return root / "generator.prtw"; }
  std::filesystem::path assets() const { return root / "assets"; }
  std::filesystem::path eval() const { return root / "eval"; }
  /// Throws MissingArtifactError naming the command that produces `path`.
  static void require(const std::filesystem::path& path, const std::string& producer);
};

/// Writes the resolved config next to a command's outputs.
void write_config_snapshot(const RunConfig& cfg, const std::filesystem::path& dir,
                           const std::string& command);

/// One directory per object: spec.json, points.prtf, view_<i>.bin + .json.
void export_dataset(const Corpus& corpus, const RunConfig& cfg, const std::filesystem::path& dir);
std::string serialize_point_cloud(const PointCloud& pc);
PointCloud deserialize_point_cloud(std::string_view bytes);

using LogSink = std::function<void(const std::string& line)>;

ParameterSet run_train_retriever(const RunConfig& cfg, const Corpus& corpus, const LogSink& log = {});
/// All training objects, or a k-means curated subset when index.curate > 0.
RetrievalIndex run_build_index(const RunConfig& cfg, const Corpus& corpus,
                               const ParameterSet& retriever);
GeneratorTrainResult run_train_generator(const RunConfig& cfg, const Corpus& corpus,
                                         const ParameterSet& retriever,
                                         const RetrievalIndex& index, const LogSink& log = {});

/// Everything inference needs, loaded and cross-checked.
struct Models {
  EncoderConfig enc;
  DiTConfig dit;
  ParameterSet retriever;
  RetrievalIndex index;
  ParameterSet generator;
  Fingerprint retriever_fp{};
  Fingerprint generator_fp{};
};
Models load_models(const RunConfig& cfg, const Workspace& ws);

struct GenerateRequest {
  /// Held-out corpus object whose render conditions the sample, or a fresh
  /// synthetic object from this seed.
  std::optional<std::size_t> heldout;
  std::optional<std::uint64_t> synthetic_seed;
  std::size_t view = 0;
  std::size_t parts = 3;
  std::size_t k = 3;
  double cfg_scale = 1.5;
  std::size_t steps = 50;
  std::uint64_t seed = 0;
};

struct GeneratedAsset {
  GenerateRequest request;
  std::vector<PartLatent> parts;
  std::vector<Hit> retrieved;
  std::vector<Mesh> meshes;
  FusedContext ctx;
};

DepthRender request_render(const RunConfig& cfg, const GenerateRequest& req);
GeneratedAsset generate_asset(const RunConfig& cfg, const Models& m, const GenerateRequest& req);
/// Part meshes and the merged mesh as PRTM, plus asset.json.
void write_asset(const GeneratedAsset& a, const Models& m, const std::filesystem::path& dir);

std::string request_to_json(const GenerateRequest& r);
GenerateRequest request_from_json(const std::string& text);
std::string latents_to_json(const std::vector<PartLatent>& parts);
std::vector<PartLatent> latents_from_json(const std::string& text);

/// User-facing edit description, resolved against the index into an
/// EditRequest.
struct EditCondition {
  std::optional<int> label;
  std::optional<std::string> reference_asset;  // with reference_part
  std::size_t reference_part = 0;
};
struct EditSpec {
  EditOp op = EditOp::swap;
  std::vector<std::vector<std::size_t>> groups;
  std::vector<EditCondition> conditions;  // one per group
  double alpha = 0.5;
  std::size_t k_steps = 20;
  std::optional<double> theta;
  std::size_t k = 3;
  std::uint64_t seed = 0;
};
EditRequest resolve_edit(const EditSpec& spec, const RunConfig& cfg, const Models& m);
std::string edit_spec_to_json(const EditSpec& s);
EditSpec edit_spec_from_json(const std::string& text);

/// Mean metrics of samples conditioned on view 0 of each object, against
/// the ground-truth surface.
struct EvalRow {
  double cd = 0.0, fscore = 0.0, part_iou = 0.0;
  std::size_t objects = 0;
};
EvalRow evaluate_generation(const RunConfig& cfg, const Models& m,
                            const std::vector<CorpusObject>& objects, std::size_t k);

/// Top-k and contrastive-weight sweeps written as eval/topk.csv and
/// eval/lambda.csv.
void run_eval(const RunConfig& cfg, const Workspace& ws, const Corpus& corpus,
              const LogSink& log = {});

}  // namespace partrag
