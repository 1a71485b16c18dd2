#include "partrag/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

#include <boost/property_tree/ini_parser.hpp>

#include "json.hpp"

#include "partrag/errors.hpp"
#include "partrag/io.hpp"
#include "partrag/metrics.hpp"

namespace partrag {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

using Defaults = std::vector<std::pair<std::string, std::string>>;

// Desk profile. Every accepted key appears here.
const Defaults& desk_defaults() {
  static const Defaults d{
      {"run.profile", "desk"},
      {"run.seed", "1"},
      {"data.n_train", "320"},
      {"data.n_heldout", "64"},
      {"data.min_parts", "2"},
      {"data.max_parts", "8"},
      {"data.render_size", "32"},
      {"data.views", "8"},
      {"data.elevation", "20"},
      {"data.export_points", "2048"},
      {"encoder.width", "32"},
      {"encoder.hidden", "64"},
      {"encoder.patch", "4"},
      {"encoder.membership", "0.25"},
      {"encoder.points_per_part", "128"},
      {"hcr.tau", "0.07"},
      {"hcr.lambda_part", "0.03"},
      {"hcr.lambda_obj", "0.03"},
      {"hcr.queue", "512"},
      {"hcr.momentum", "0.99"},
      {"hcr.batch", "16"},
      {"hcr.steps", "1000"},
      {"hcr.lr", "0.001"},
      {"hcr.weight_decay", "0.0001"},
      {"hcr.warmup", "50"},
      {"hcr.ae_weight", "1"},
      {"hcr.log_every", "100"},
      {"index.curate", "0"},
      {"generator.blocks", "6"},
      {"generator.global_every", "2"},
      {"generator.width", "32"},
      {"generator.heads", "2"},
      {"generator.max_parts", "8"},
      {"generator.tokens_per_part", "16"},
      {"generator.time_freqs", "8"},
      {"generator.mlp_hidden", "64"},
      {"generator.cfg_drop", "0.1"},
      {"generator.stage1_steps", "1000"},
      {"generator.stage2_steps", "200"},
      {"generator.batch", "8"},
      {"generator.lr", "0.001"},
      {"generator.weight_decay", "0"},
      {"generator.warmup", "100"},
      {"generator.train_max_parts", "4"},
      {"generator.pose_weight", "1"},
      {"generator.block_multiplier", "0.1"},
      {"generator.new_multiplier", "1"},
      {"generator.ema", "0"},
      {"generator.ema_decay", "0.999"},
      {"generator.log_every", "50"},
      {"retrieval.k", "3"},
      {"sampler.steps", "50"},
      {"sampler.cfg_scale", "1.5"},
      {"sampler.parts", "3"},
      {"edit.t_edit", "0.5"},
      {"edit.k_steps", "20"},
      {"edit.theta", "0.5"},
      {"edit.alpha", "0.5"},
      {"edit.cfg_scale", "1.5"},
      {"edit.eps_seam", "0.02"},
      {"edit.lambda_smooth", "0.5"},
      {"edit.smooth_iters", "3"},
      {"edit.n_nearest", "4"},
      {"edit.frozen_samples", "512"},
      {"edit.seamless_threshold", "0.01"},
      {"eval.objects", "16"},
      {"eval.max_parts", "4"},
      {"eval.samples", "2048"},
      {"eval.k_sweep", "1,3,5,10"},
      {"eval.lambda_sweep", "0.01,0.02,0.03,0.05,0.10"},
      {"eval.sweep_retriever_steps", "200"},
      {"eval.sweep_generator_steps", "100"},
      {"service.host", "127.0.0.1"},
      {"service.port", "8080"},
      {"service.cors_origin", "*"},
      {"service.workers", "4"},
  };
  return d;
}

// Full-scale profile: reference values far beyond desk hardware.
const Defaults& paper_overrides() {
  static const Defaults d{
      {"run.profile", "paper"},
      {"encoder.width", "1024"},
      {"encoder.hidden", "4096"},
      {"hcr.momentum", "0.999"},
      {"hcr.queue", "65536"},
      {"hcr.batch", "48"},
      {"hcr.lr", "0.00003"},
      {"hcr.weight_decay", "0.01"},
      {"hcr.warmup", "300"},
      {"index.curate", "1236"},
      {"generator.blocks", "21"},
      {"generator.width", "1024"},
      {"generator.heads", "16"},
      {"generator.mlp_hidden", "4096"},
      {"generator.tokens_per_part", "16"},
      {"generator.stage1_steps", "1322"},
      {"generator.stage2_steps", "4628"},
      {"generator.batch", "48"},
      {"generator.lr", "0.00003"},
      {"generator.weight_decay", "0.01"},
      {"generator.warmup", "300"},
      {"generator.ema", "1"},
      {"generator.ema_decay", "0.9999"},
  };
  return d;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

Points surface_points(const Mesh& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_mesh_surface(m, n, rng).points;
}

PartObjectSpec heldout_spec(const RunConfig& cfg, std::size_t i) {
  const CorpusConfig cc = cfg.corpus();
  if (i >= cc.n_heldout)
    throw ConfigError("held-out object " + std::to_string(i) + " out of range (" +
                      std::to_string(cc.n_heldout) + " held out)");
  return corpus_spec(cc, cc.n_train + i);
}

ordered_json pose_json(const Pose& p) {
  return {{"translation", {p.translation[0], p.translation[1], p.translation[2]}},
          {"scale", p.scale}};
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::profile(std::string_view name) {
  if (name != "desk" && name != "paper") throw ConfigError("unknown profile '" + std::string(name) + "'");
  RunConfig c;
  for (const auto& [k, v] : desk_defaults()) c.tree_.put(k, v);
  if (name == "paper")
    for (const auto& [k, v] : paper_overrides()) c.tree_.put(k, v);
  return c;
}

RunConfig RunConfig::load(const std::optional<fs::path>& file,
                          const std::optional<std::string>& profile_name) {
  boost::property_tree::ptree t;
  if (file) {
    if (!fs::exists(*file)) throw MissingArtifactError("config file " + file->string() + " not found");
    std::istringstream in(read_file(*file));
    try {
      boost::property_tree::ini_parser::read_ini(in, t);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
  }
  RunConfig c = profile(profile_name.value_or(t.get<std::string>("run.profile", "desk")));
  for (const auto& [section, body] : t) {
    if (body.empty()) throw ConfigError("config key '" + section + "' outside a section");
    for (const auto& [key, v] : body)
      if (section + "." + key != "run.profile") c.set(section + "." + key, v.data());
  }
  return c;
}

bool RunConfig::has(const std::string& key) const {
  return static_cast<bool>(tree_.get_optional<std::string>(key));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!has(key) || key.find('.') == std::string::npos) throw ConfigError("unknown config key '" + key + "'");
  if (key == "run.profile" && value != str(key))
    throw ConfigError("run.profile cannot change after the profile is loaded");
  tree_.put(key, value);
}

void RunConfig::merge_ini(const std::string& text) {
  boost::property_tree::ptree t;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, t);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const auto& [section, body] : t) {
    if (body.empty()) throw ConfigError("config key '" + section + "' outside a section");
    for (const auto& [key, v] : body) set(section + "." + key, v.data());
  }
}

void RunConfig::merge_file(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifactError("config file " + path.string() + " not found");
  merge_ini(read_file(path));
}

std::string RunConfig::str(const std::string& key) const {
  if (!has(key)) throw ConfigError("unknown config key '" + key + "'");
  return tree_.get<std::string>(key);
}

double RunConfig::num(const std::string& key) const {
  const std::string s = str(key);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || !std::isfinite(v)) throw ConfigError(key + ": '" + s + "' is not a number");
  return v;
}

std::size_t RunConfig::count(const std::string& key) const {
  const std::string s = str(key);
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
  return static_cast<std::size_t>(std::stoull(s));
}

std::vector<double> RunConfig::list(const std::string& key) const {
  std::vector<double> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0) throw ConfigError(key + ": bad list item '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string RunConfig::to_ini() const {
  std::ostringstream out;
  boost::property_tree::ini_parser::write_ini(out, tree_);
  return out.str();
}

CorpusConfig RunConfig::corpus() const {
  CorpusConfig c;
  c.seed = seed();
  c.n_train = count("data.n_train");
  c.n_heldout = count("data.n_heldout");
  c.min_parts = static_cast<int>(count("data.min_parts"));
  c.max_parts = static_cast<int>(count("data.max_parts"));
  if (c.min_parts < 1 || c.min_parts > c.max_parts) throw ConfigError("data: bad part range");
  c.synth.min_parts = c.min_parts;
  c.synth.max_parts = c.max_parts;
  c.synth.render_size = static_cast<int>(count("data.render_size"));
  c.synth.views = count("data.views");
  c.synth.elevation_deg = num("data.elevation");
  return c;
}

EncoderConfig RunConfig::encoder() const {
  EncoderConfig e;
  e.render_size = static_cast<int>(count("data.render_size"));
  e.patch = static_cast<int>(count("encoder.patch"));
  e.width = count("encoder.width");
  e.hidden = count("encoder.hidden");
  e.membership = num("encoder.membership");
  e.points_per_part = count("encoder.points_per_part");
  if (e.patch == 0 || e.render_size % e.patch != 0)
    throw ConfigError("encoder.patch must divide data.render_size");
  return e;
}

RetrieverTrainConfig RunConfig::retriever() const {
  RetrieverTrainConfig r;
  r.hcr.tau = num("hcr.tau");
  r.hcr.lambda_part = num("hcr.lambda_part");
  r.hcr.lambda_obj = num("hcr.lambda_obj");
  r.hcr.queue = count("hcr.queue");
  r.hcr.momentum = num("hcr.momentum");
  r.hcr.batch = count("hcr.batch");
  r.opt.lr = num("hcr.lr");
  r.opt.weight_decay = num("hcr.weight_decay");
  r.opt.warmup_steps = count("hcr.warmup");
  r.steps = count("hcr.steps");
  r.ae_weight = num("hcr.ae_weight");
  r.log_every = count("hcr.log_every");
  r.seed = seed();
  return r;
}

DiTConfig RunConfig::dit() const {
  DiTConfig d;
  d.n_blocks = count("generator.blocks");
  const std::size_t every = count("generator.global_every");
  if (every == 0) throw ConfigError("generator.global_every must be positive");
  d.global_blocks.clear();
  for (std::size_t i = 0; i < d.n_blocks; i += every) d.global_blocks.push_back(i);
  d.width = count("generator.width");
  d.heads = count("generator.heads");
  d.max_parts = count("generator.max_parts");
  d.tokens_per_part = count("generator.tokens_per_part");
  d.latent_dim = count("encoder.width");
  d.context_dim = count("encoder.width");
  d.time_freqs = count("generator.time_freqs");
  d.mlp_hidden = count("generator.mlp_hidden");
  d.cfg_drop = num("generator.cfg_drop");
  d.validate();
  return d;
}

GeneratorTrainConfig RunConfig::generator() const {
  GeneratorTrainConfig g;
  g.dit = dit();
  g.opt.lr = num("generator.lr");
  g.opt.weight_decay = num("generator.weight_decay");
  g.opt.warmup_steps = count("generator.warmup");
  g.stage1_steps = count("generator.stage1_steps");
  g.stage2_steps = count("generator.stage2_steps");
  g.batch = count("generator.batch");
  g.max_parts = count("generator.train_max_parts");
  g.k = count("retrieval.k");
  g.pose_weight = num("generator.pose_weight");
  g.hcr = retriever().hcr;
  g.block_multiplier = num("generator.block_multiplier");
  g.new_multiplier = num("generator.new_multiplier");
  g.ema = count("generator.ema") != 0;
  g.ema_decay = num("generator.ema_decay");
  g.log_every = count("generator.log_every");
  g.seed = seed();
  return g;
}

SampleConfig RunConfig::sampler() const {
  SampleConfig s;
  s.steps = count("sampler.steps");
  s.cfg_scale = num("sampler.cfg_scale");
  s.k = count("retrieval.k");
  s.seed = seed();
  return s;
}

EditConfig RunConfig::edit() const {
  EditConfig e;
  e.t_edit = num("edit.t_edit");
  e.cfg_scale = num("edit.cfg_scale");
  e.eps_seam = num("edit.eps_seam");
  e.lambda_smooth = num("edit.lambda_smooth");
  e.smooth_iters = count("edit.smooth_iters");
  e.n_nearest = count("edit.n_nearest");
  e.frozen_samples = count("edit.frozen_samples");
  e.seamless_threshold = num("edit.seamless_threshold");
  return e;
}

// ---------------------------------------------------------------------------
// Workspace and dataset export

void Workspace::require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path))
    throw MissingArtifactError(path.string() + " not found; run '" + producer + "' first");
}

void write_config_snapshot(const RunConfig& cfg, const fs::path& dir, const std::string& command) {
  fs::create_directories(dir);
  write_file_atomic(dir / (command + ".config.ini"), cfg.to_ini());
}

std::string serialize_point_cloud(const PointCloud& pc) {
  ByteWriter w;
  w.bytes("PRTF");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(pc.points.size()));
  for (const auto& p : pc.points)
    for (double x : p) w.f32(static_cast<float>(x));
  w.u32(pc.labels.empty() ? 0 : 1);
  for (std::int32_t l : pc.labels) w.u32(static_cast<std::uint32_t>(l));
  return w.data();
}

PointCloud deserialize_point_cloud(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != "PRTF") throw FormatError("point cloud: bad magic");
  if (r.u32() != 1) throw FormatError("point cloud: unsupported version");
  PointCloud pc;
  pc.points.resize(r.u32());
  for (auto& p : pc.points)
    for (double& x : p) x = r.f32();
  if (r.u32() == 1) {
    pc.labels.resize(pc.points.size());
    for (auto& l : pc.labels) l = static_cast<std::int32_t>(r.u32());
  }
  if (!r.done()) throw FormatError("point cloud: trailing bytes");
  return pc;
}

void export_dataset(const Corpus& corpus, const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["train"] = ordered_json::array();
  manifest["heldout"] = ordered_json::array();
  const std::size_t n_points = cfg.count("data.export_points");
  auto write_object = [&](const CorpusObject& o) {
    const fs::path od = dir / o.asset_id;
    fs::create_directories(od);
    ordered_json spec;
    spec["asset_id"] = o.asset_id;
    spec["seed"] = o.spec.seed;
    spec["category"] = o.spec.category;
    spec["parts"] = ordered_json::array();
    for (const auto& p : o.spec.parts) {
      ordered_json pj;
      pj["kind"] = std::string(kind_name(p.kind));
      pj["label"] = p.label;
      pj["size"] = {p.size[0], p.size[1], p.size[2]};
      pj["pose"] = pose_json(p.pose);
      spec["parts"].push_back(pj);
    }
    write_file_atomic(od / "spec.json", spec.dump(2) + "\n");
    Rng rng(o.spec.seed);
    write_file_atomic(od / "points.prtf",
                      serialize_point_cloud(sample_object_points(o.spec, n_points, rng)));
    for (std::size_t v = 0; v < o.views.size(); ++v) {
      const DepthRender& r = o.views[v];
      ByteWriter w;
      for (double d : r.depth) w.f32(static_cast<float>(d));
      for (std::int32_t m : r.part_mask) w.u32(static_cast<std::uint32_t>(m));
      const std::string stem = "view_" + std::to_string(v);
      write_file_atomic(od / (stem + ".bin"), w.data());
      ordered_json vj{{"H", r.height}, {"W", r.width}, {"azimuth", r.view.azimuth_deg},
                      {"elevation", r.view.elevation_deg}, {"layout", "f32 depth[H*W], i32 mask[H*W]"}};
      write_file_atomic(od / (stem + ".json"), vj.dump(2) + "\n");
    }
  };
  for (const auto& o : corpus.train) {
    write_object(o);
    manifest["train"].push_back(o.asset_id);
  }
  for (const auto& o : corpus.heldout) {
    write_object(o);
    manifest["heldout"].push_back(o.asset_id);
  }
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Training stages

ParameterSet run_train_retriever(const RunConfig& cfg, const Corpus& corpus, const LogSink& log) {
  const EncoderConfig enc = cfg.encoder();
  Rng rng = Rng(cfg.seed()).fork(1);
  auto res = train_retriever(corpus, enc, cfg.retriever(), init_retriever(enc, rng),
                             [&](const RetrieverLogRecord& r) {
                               if (!log) return;
                               log("step " + std::to_string(r.step) + " l_part " + fmt(r.l_part) +
                                   " l_obj " + fmt(r.l_obj) + " l_ae " + fmt(r.l_ae) +
                                   " recall@1 " + fmt(r.recall_at1));
                             });
  return std::move(res.params);
}

RetrievalIndex run_build_index(const RunConfig& cfg, const Corpus& corpus,
                               const ParameterSet& retriever) {
  const EncoderConfig enc = cfg.encoder();
  const std::size_t target = cfg.count("index.curate");
  if (target == 0 || target >= corpus.train.size()) return build_index(retriever, corpus.train, enc);
  // Curate on the object embeddings of the full training split.
  const RetrievalIndex full = build_index(retriever, corpus.train, enc);
  Tensor emb(full.size(), enc.width);
  for (std::size_t i = 0; i < full.size(); ++i)
    for (std::size_t c = 0; c < enc.width; ++c) emb(i, c) = full.entries[i].embedding[c];
  std::vector<CorpusObject> picked;
  for (std::size_t i : curate_kmeans(emb, target, cfg.seed())) picked.push_back(corpus.train[i]);
  return build_index(retriever, picked, enc);
}

GeneratorTrainResult run_train_generator(const RunConfig& cfg, const Corpus& corpus,
                                         const ParameterSet& retriever, const RetrievalIndex& index,
                                         const LogSink& log) {
  const GeneratorTrainConfig gc = cfg.generator();
  Rng rng = Rng(cfg.seed()).fork(2);
  ParameterSet init;
  init_generator(init, gc.dit, rng);
  return train_generator(corpus, cfg.encoder(), retriever, index, gc, std::move(init),
                         [&](const GeneratorLogRecord& r) {
                           if (!log) return;
                           log("step " + std::to_string(r.step) + " stage " + std::to_string(r.stage) +
                               " flow " + fmt(r.flow_avg) + " pose " + fmt(r.pose) + " hcr " +
                               fmt(r.hcr));
                         });
}

// ---------------------------------------------------------------------------
// Inference

Models load_models(const RunConfig& cfg, const Workspace& ws) {
  Workspace::require(ws.retriever(), "train-retriever");
  Workspace::require(ws.index(), "build-index");
  Workspace::require(ws.generator(), "train-gen");
  Models m;
  m.enc = cfg.encoder();
  m.dit = cfg.dit();
  m.retriever = load_params(ws.retriever());
  m.retriever_fp = params_fingerprint(m.retriever);
  m.index = load_index(ws.index());
  check_fingerprint(m.index, m.retriever_fp);
  m.generator = load_params(ws.generator());
  m.generator_fp = params_fingerprint(m.generator);

  const std::string last = "dit.blk" + std::to_string(m.dit.n_blocks - 1) + ".mlp.w1";
  const std::string extra = "dit.blk" + std::to_string(m.dit.n_blocks) + ".mlp.w1";
  if (!m.generator.contains("dit.in.w") || !m.generator.contains(last) || m.generator.contains(extra) ||
      m.generator.get("dit.in.w").value.rows() != m.dit.channels() ||
      m.generator.get("dit.in.w").value.cols() != m.dit.width)
    throw ConfigError("generator checkpoint does not match the generator.* config");
  // A stage-2 checkpoint carries a frozen copy of the retriever it was trained with.
  for (std::size_t i = 0; i < m.generator.size(); ++i) {
    const auto& p = m.generator.at(i);
    if (!p.name.starts_with("hcr.")) continue;
    const std::string base = p.name.substr(4);
    if (!m.retriever.contains(base) || !m.retriever.get(base).value.bit_equal(p.value)) {
      if (base.starts_with("head.")) continue;  // heads are retrained in stage 2
      throw FingerprintError("generator was trained against a different retriever (" + base + ")");
    }
  }
  if (m.index.entries.empty()) throw ConfigError("index is empty");
  return m;
}

DepthRender request_render(const RunConfig& cfg, const GenerateRequest& req) {
  if (req.heldout.has_value() == req.synthetic_seed.has_value())
    throw ConfigError("generate: give exactly one of a held-out object or a synthetic seed");
  const CorpusConfig cc = cfg.corpus();
  PartObjectSpec spec;
  if (req.heldout) {
    spec = heldout_spec(cfg, *req.heldout);
  } else {
    const int n = static_cast<int>(std::clamp<std::size_t>(req.parts, cc.synth.min_parts,
                                                           cc.synth.max_parts));
    spec = sorted_parts(generate_object(*req.synthetic_seed, n, cc.synth));
  }
  const auto views = canonical_views(cc.synth.elevation_deg, cc.synth.views);
  if (req.view >= views.size()) throw ConfigError("generate: view out of range");
  return render_depth(spec, views[req.view], cc.synth.render_size);
}

GeneratedAsset generate_asset(const RunConfig& cfg, const Models& m, const GenerateRequest& req) {
  const DepthRender render = request_render(cfg, req);
  SampleConfig sc;
  sc.steps = req.steps;
  sc.cfg_scale = req.cfg_scale;
  sc.k = req.k;
  sc.seed = req.seed;
  SampleResult s = sample(m.generator, m.dit, m.retriever, m.index, render, req.parts, sc, m.enc);
  GeneratedAsset a;
  a.request = req;
  a.parts = std::move(s.parts);
  a.retrieved = std::move(s.retrieved);
  a.meshes = std::move(s.meshes);
  a.ctx = retrieval_context(m.retriever, m.index, render, req.k, m.enc);
  return a;
}

std::string request_to_json(const GenerateRequest& r) {
  ordered_json j;
  if (r.heldout) j["heldout"] = *r.heldout;
  if (r.synthetic_seed) j["synthetic_seed"] = *r.synthetic_seed;
  j["view"] = r.view;
  j["parts"] = r.parts;
  j["k"] = r.k;
  j["cfg_scale"] = r.cfg_scale;
  j["steps"] = r.steps;
  j["seed"] = r.seed;
  return j.dump();
}

GenerateRequest request_from_json(const std::string& text) {
  GenerateRequest r;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.contains("heldout")) r.heldout = j.at("heldout").get<std::size_t>();
    if (j.contains("synthetic_seed")) r.synthetic_seed = j.at("synthetic_seed").get<std::uint64_t>();
    r.view = j.value("view", r.view);
    r.parts = j.value("parts", r.parts);
    r.k = j.value("k", r.k);
    r.cfg_scale = j.value("cfg_scale", r.cfg_scale);
    r.steps = j.value("steps", r.steps);
    r.seed = j.value("seed", r.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("generate request: ") + e.what());
  }
  return r;
}

std::string latents_to_json(const std::vector<PartLatent>& parts) {
  ordered_json j = ordered_json::array();
  for (const auto& p : parts) {
    ordered_json pj;
    pj["part_id"] = p.part_id;
    pj["z"] = std::vector<double>(p.z.data().begin(), p.z.data().end());
    pj["pose"] = pose_json(p.transform);
    j.push_back(pj);
  }
  return j.dump();
}

std::vector<PartLatent> latents_from_json(const std::string& text) {
  std::vector<PartLatent> out;
  try {
    for (const auto& pj : nlohmann::json::parse(text)) {
      PartLatent p;
      p.part_id = pj.at("part_id").get<int>();
      const auto z = pj.at("z").get<std::vector<double>>();
      p.z = Tensor(1, z.size());
      std::copy(z.begin(), z.end(), p.z.data().begin());
      const auto t = pj.at("pose").at("translation").get<std::vector<double>>();
      if (t.size() != 3) throw FormatError("latents: translation needs 3 values");
      p.transform = Pose{{t[0], t[1], t[2]}, pj.at("pose").at("scale").get<double>()};
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("latents: ") + e.what());
  }
  return out;
}

void write_asset(const GeneratedAsset& a, const Models& m, const fs::path& dir) {
  fs::create_directories(dir);
  ordered_json j;
  j["request"] = ordered_json::parse(request_to_json(a.request));
  j["parts"] = ordered_json::parse(latents_to_json(a.parts));
  j["retrieved"] = ordered_json::array();
  for (const auto& h : a.retrieved)
    j["retrieved"].push_back({{"asset_id", m.index.entries[h.entry].asset_id}, {"score", h.score}});
  write_file_atomic(dir / "asset.json", j.dump(2) + "\n");
  for (std::size_t i = 0; i < a.meshes.size(); ++i)
    save_mesh(dir / ("part_" + std::to_string(i) + ".prtm"), a.meshes[i]);
  save_mesh(dir / "merged.prtm", merge_meshes(a.meshes));
}

// ---------------------------------------------------------------------------
// Editing

EditRequest resolve_edit(const EditSpec& spec, const RunConfig& cfg, const Models& m) {
  if (spec.groups.size() != spec.conditions.size())
    throw EditError("each target group needs one condition");
  EditRequest req;
  req.op = spec.op;
  req.alpha = spec.alpha;
  req.k_steps = spec.k_steps;
  req.theta = spec.theta.value_or(cfg.num("edit.theta"));
  req.k = spec.k;
  req.seed = spec.seed;
  for (std::size_t g = 0; g < spec.groups.size(); ++g) {
    const EditCondition& c = spec.conditions[g];
    Tensor cond;
    if (c.label) {
      cond = label_condition(m.index, *c.label);
    } else if (c.reference_asset) {
      const auto it = std::find_if(m.index.entries.begin(), m.index.entries.end(),
                                   [&](const IndexEntry& e) { return e.asset_id == *c.reference_asset; });
      if (it == m.index.entries.end())
        throw EditError("reference asset '" + *c.reference_asset + "' is not in the index");
      cond = part_condition(m.index, static_cast<std::size_t>(it - m.index.entries.begin()),
                            c.reference_part);
    } else {
      throw EditError("edit condition needs a label or a reference part");
    }
    req.targets.push_back(EditTarget{spec.groups[g], std::move(cond)});
  }
  return req;
}

std::string edit_spec_to_json(const EditSpec& s) {
  ordered_json j;
  j["op"] = std::string(op_name(s.op));
  j["target_parts"] = s.groups;
  j["conditions"] = ordered_json::array();
  for (const auto& c : s.conditions) {
    ordered_json cj;
    if (c.label) cj["label"] = *c.label;
    if (c.reference_asset) cj["reference_part"] = {{"asset_id", *c.reference_asset}, {"part", c.reference_part}};
    j["conditions"].push_back(cj);
  }
  j["alpha"] = s.alpha;
  j["k_steps"] = s.k_steps;
  if (s.theta) j["theta"] = *s.theta;
  j["k"] = s.k;
  j["seed"] = s.seed;
  return j.dump();
}

EditSpec edit_spec_from_json(const std::string& text) {
  EditSpec s;
  try {
    const auto j = nlohmann::json::parse(text);
    s.op = op_from_name(j.at("op").get<std::string>());
    // A flat list is one group; a list of lists gives compose groups.
    const auto& tp = j.at("target_parts");
    if (!tp.is_array()) throw EditError("target_parts must be an array");
    if (!tp.empty() && tp.front().is_array()) s.groups = tp.get<std::vector<std::vector<std::size_t>>>();
    else s.groups = {tp.get<std::vector<std::size_t>>()};
    auto parse_condition = [](const nlohmann::json& cj) {
      EditCondition c;
      if (cj.contains("label")) {
        const auto& l = cj.at("label");
        c.label = l.is_string() ? label_index(l.get<std::string>()) : l.get<int>();
      }
      if (cj.contains("reference_part")) {
        c.reference_asset = cj.at("reference_part").at("asset_id").get<std::string>();
        c.reference_part = cj.at("reference_part").at("part").get<std::size_t>();
      }
      return c;
    };
    if (j.contains("conditions")) {
      for (const auto& cj : j.at("conditions")) s.conditions.push_back(parse_condition(cj));
    } else if (j.contains("condition")) {
      s.conditions.assign(s.groups.size(), parse_condition(j.at("condition")));
    }
    s.alpha = j.value("alpha", s.alpha);
    s.k_steps = j.value("k_steps", s.k_steps);
    if (j.contains("theta")) s.theta = j.at("theta").get<double>();
    s.k = j.value("k", s.k);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw EditError(std::string("edit request: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalRow evaluate_generation(const RunConfig& cfg, const Models& m,
                            const std::vector<CorpusObject>& objects, std::size_t k) {
  const std::size_t limit = cfg.count("eval.objects"), max_parts = cfg.count("eval.max_parts");
  const std::size_t n_samples = cfg.count("eval.samples");
  SampleConfig sc = cfg.sampler();
  sc.k = k;
  EvalRow row;
  for (std::size_t i = 0; i < objects.size() && row.objects < limit; ++i) {
    const auto& o = objects[i];
    if (o.n_parts() > max_parts || o.n_parts() > m.dit.max_parts) continue;
    sc.seed = cfg.seed() + i;
    const SampleResult s = sample(m.generator, m.dit, m.retriever, m.index, o.views[0], o.n_parts(), sc, m.enc);
    const Points gen = surface_points(merge_meshes(s.meshes), n_samples, cfg.seed() ^ 0x5eedULL);
    Rng rng(o.spec.seed);
    const Points gt = sample_object_points(o.spec, n_samples, rng).points;
    row.cd += chamfer(gen, gt);
    row.fscore += fscore(gen, gt);
    row.part_iou += part_overlap_iou(s.meshes);
    ++row.objects;
  }
  if (row.objects == 0) throw ConfigError("eval: no held-out object with <= eval.max_parts parts");
  const double n = static_cast<double>(row.objects);
  row.cd /= n;
  row.fscore /= n;
  row.part_iou /= n;
  return row;
}

void run_eval(const RunConfig& cfg, const Workspace& ws, const Corpus& corpus, const LogSink& log) {
  const Models m = load_models(cfg, ws);
  fs::create_directories(ws.eval());

  std::string topk = "k,cd,fscore,part_iou,objects\n";
  for (double kv : cfg.list("eval.k_sweep")) {
    const auto k = static_cast<std::size_t>(kv);
    if (k == 0 || static_cast<double>(k) != kv) throw ConfigError("eval.k_sweep: k must be a positive integer");
    const EvalRow r = evaluate_generation(cfg, m, corpus.heldout, k);
    topk += std::to_string(k) + "," + fmt(r.cd) + "," + fmt(r.fscore) + "," + fmt(r.part_iou) + "," +
            std::to_string(r.objects) + "\n";
    if (log) log("top-k " + std::to_string(k) + " cd " + fmt(r.cd));
  }
  write_file_atomic(ws.eval() / "topk.csv", topk);

  // Each weight retrains a short retriever and generator pair from scratch.
  std::string lambda = "lambda_obj,lambda_part,recall_at1,cd,fscore,part_iou,stability\n";
  for (double lam : cfg.list("eval.lambda_sweep")) {
    RunConfig c = cfg;
    c.set("hcr.lambda_obj", fmt(lam));
    c.set("hcr.lambda_part", fmt(lam));
    c.set("hcr.steps", c.str("eval.sweep_retriever_steps"));
    const std::size_t gs = c.count("eval.sweep_generator_steps");
    c.set("generator.stage1_steps", std::to_string(gs - gs / 5));
    c.set("generator.stage2_steps", std::to_string(gs / 5));
    std::string line = fmt(lam) + "," + fmt(lam) + ",";
    try {
      Models sm;
      sm.enc = c.encoder();
      sm.dit = c.dit();
      sm.retriever = run_train_retriever(c, corpus);
      sm.index = run_build_index(c, corpus, sm.retriever);
      sm.generator = run_train_generator(c, corpus, sm.retriever, sm.index).params;
      const double recall = part_recall_at1(sm.retriever, corpus.heldout);
      const EvalRow r = evaluate_generation(c, sm, corpus.heldout, c.count("retrieval.k"));
      line += fmt(recall) + "," + fmt(r.cd) + "," + fmt(r.fscore) + "," + fmt(r.part_iou) + ",stable";
    } catch (const NumericalError&) {
      line += "nan,nan,nan,nan,nonfinite";
    }
    lambda += line + "\n";
    if (log) log("lambda " + fmt(lam) + " done");
  }
  write_file_atomic(ws.eval() / "lambda.csv", lambda);
  write_config_snapshot(cfg, ws.eval(), "eval");
}

}  // namespace partrag
