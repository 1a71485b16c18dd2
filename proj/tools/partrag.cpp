#include <cstdio>
#include <fstream>
#include <memory>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "partrag/corpus.hpp"
#include "partrag/errors.hpp"
#include "partrag/io.hpp"
#include "partrag/pipeline.hpp"
#include "partrag/service.hpp"
#include "partrag/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace partrag;

namespace {

struct Common {
  std::optional<std::string> config;
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::vector<std::string> sets;
  bool quiet = false;
};

struct GenerateFlags {
  std::optional<std::size_t> heldout;
  std::optional<std::uint64_t> synthetic_seed;
  std::size_t view = 0;
  std::optional<std::size_t> parts, k, steps;
  std::optional<double> cfg_scale;
  std::string name;
};

struct EditFlags {
  std::string asset;
  std::string op = "swap";
  std::string target_parts;
  std::vector<std::string> labels;
  std::vector<std::string> references;
  std::optional<double> alpha, theta;
  std::optional<std::size_t> k_steps, k;
  std::string name;
};

RunConfig resolve(const Common& c) {
  std::optional<fs::path> file;
  if (c.config) file = *c.config;
  RunConfig cfg = RunConfig::load(file, c.profile);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.set("run.seed", std::to_string(*c.seed));
  return cfg;
}

LogSink file_log(const fs::path& path, bool quiet) {
  fs::create_directories(path.parent_path());
  auto out = std::make_shared<std::ofstream>(path, std::ios::trunc);
  return [out, quiet](const std::string& line) {
    *out << line << '\n';
    out->flush();
    if (!quiet) std::cerr << line << '\n';
  };
}

std::vector<std::vector<std::size_t>> parse_groups(const std::string& text) {
  std::vector<std::vector<std::size_t>> groups;
  std::stringstream gs(text);
  std::string group;
  while (std::getline(gs, group, ';')) {
    std::vector<std::size_t> g;
    std::stringstream ps(group);
    std::string item;
    while (std::getline(ps, item, ',')) {
      if (item.empty()) continue;
      try {
        std::size_t used = 0;
        const unsigned long v = std::stoul(item, &used);
        if (used != item.size()) throw std::invalid_argument(item);
        g.push_back(v);
      } catch (const std::exception&) {
        throw EditError("--target-parts: '" + item + "' is not a part index");
      }
    }
    groups.push_back(std::move(g));
  }
  if (groups.empty()) throw EditError("--target-parts is empty");
  return groups;
}

EditCondition parse_label(const std::string& s) {
  EditCondition c;
  const bool numeric = !s.empty() && s.find_first_not_of("0123456789") == std::string::npos;
  c.label = numeric ? std::stoi(s) : label_index(s);
  return c;
}

// "<asset_id>:<part>"
EditCondition parse_reference(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
    throw EditError("--reference expects asset_id:part, got '" + s + "'");
  EditCondition c;
  c.reference_asset = s.substr(0, colon);
  try {
    c.reference_part = std::stoul(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw EditError("--reference: bad part index in '" + s + "'");
  }
  return c;
}

std::string fp_hex(const ParameterSet& ps) { return hex(params_fingerprint(ps)); }

ordered_json cmd_synth(const RunConfig& cfg, const Workspace& ws) {
  const Corpus corpus = build_corpus(cfg.corpus(), cfg.encoder());
  export_dataset(corpus, cfg, ws.data());
  write_config_snapshot(cfg, ws.root, "synth");
  return {{"data", ws.data().string()}, {"train", corpus.train.size()}, {"heldout", corpus.heldout.size()}};
}

ordered_json cmd_train_retriever(const RunConfig& cfg, const Workspace& ws, bool quiet) {
  const Corpus corpus = build_corpus(cfg.corpus(), cfg.encoder());
  const ParameterSet params = run_train_retriever(cfg, corpus, file_log(ws.root / "train-retriever.log", quiet));
  save_params(ws.retriever(), params);
  write_config_snapshot(cfg, ws.root, "train-retriever");
  return {{"checkpoint", ws.retriever().string()}, {"fingerprint", fp_hex(params)}};
}

ordered_json cmd_build_index(const RunConfig& cfg, const Workspace& ws) {
  Workspace::require(ws.retriever(), "train-retriever");
  const ParameterSet retriever = load_params(ws.retriever());
  const Corpus corpus = build_corpus(cfg.corpus(), cfg.encoder());
  const RetrievalIndex index = run_build_index(cfg, corpus, retriever);
  save_index(index, ws.index());
  write_config_snapshot(cfg, ws.root, "build-index");
  return {{"index", ws.index().string()}, {"entries", index.size()}, {"fingerprint", hex(index.fingerprint)}};
}

ordered_json cmd_train_gen(const RunConfig& cfg, const Workspace& ws, bool quiet) {
  Workspace::require(ws.retriever(), "train-retriever");
  Workspace::require(ws.index(), "build-index");
  const ParameterSet retriever = load_params(ws.retriever());
  const RetrievalIndex index = load_index(ws.index());
  check_fingerprint(index, params_fingerprint(retriever));
  const Corpus corpus = build_corpus(cfg.corpus(), cfg.encoder());
  const GeneratorTrainResult res =
      run_train_generator(cfg, corpus, retriever, index, file_log(ws.root / "train-gen.log", quiet));
  save_params(ws.generator(), res.params);
  write_config_snapshot(cfg, ws.root, "train-gen");
  return {{"checkpoint", ws.generator().string()}, {"fingerprint", fp_hex(res.params)}};
}

ordered_json retrieved_json(const std::vector<Hit>& hits, const RetrievalIndex& index) {
  ordered_json j = ordered_json::array();
  for (const auto& h : hits) j.push_back({{"asset_id", index.entries[h.entry].asset_id}, {"score", h.score}});
  return j;
}

ordered_json cmd_generate(const RunConfig& cfg, const Workspace& ws, const GenerateFlags& f) {
  if (f.heldout.has_value() == f.synthetic_seed.has_value())
    throw ConfigError("generate: give exactly one of --heldout or --synthetic-seed");
  const Models m = load_models(cfg, ws);
  GenerateRequest req;
  req.heldout = f.heldout;
  req.synthetic_seed = f.synthetic_seed;
  req.view = f.view;
  req.parts = f.parts.value_or(cfg.count("sampler.parts"));
  req.k = f.k.value_or(cfg.count("retrieval.k"));
  req.cfg_scale = f.cfg_scale.value_or(cfg.num("sampler.cfg_scale"));
  req.steps = f.steps.value_or(cfg.count("sampler.steps"));
  req.seed = cfg.seed();
  const GeneratedAsset a = generate_asset(cfg, m, req);
  std::string name = f.name;
  if (name.empty())
    name = (req.heldout ? "heldout-" + std::to_string(*req.heldout) : "synth-" + std::to_string(*req.synthetic_seed)) +
           "-s" + std::to_string(req.seed);
  const fs::path dir = ws.assets() / name;
  write_asset(a, m, dir);
  write_config_snapshot(cfg, dir, "generate");
  return {{"asset", dir.string()},
          {"parts", a.parts.size()},
          {"retrieved", retrieved_json(a.retrieved, m.index)}};
}

ordered_json cmd_edit(const RunConfig& cfg, const Workspace& ws, const EditFlags& f) {
  const fs::path src = ws.assets() / f.asset;
  Workspace::require(src / "asset.json", "generate");
  const Models m = load_models(cfg, ws);
  const auto record = nlohmann::json::parse(read_file(src / "asset.json"));
  const GenerateRequest gen_req = request_from_json(record.at("request").dump());

  EditSpec spec;
  spec.op = op_from_name(f.op);
  spec.groups = parse_groups(f.target_parts);
  for (const auto& l : f.labels) spec.conditions.push_back(parse_label(l));
  for (const auto& r : f.references) spec.conditions.push_back(parse_reference(r));
  if (spec.conditions.size() == 1 && spec.groups.size() > 1)
    spec.conditions.assign(spec.groups.size(), spec.conditions.front());
  if (spec.op == EditOp::refine && spec.conditions.empty()) {
    // Refine defaults to each group's own label.
    const auto parts = latents_from_json(record.at("parts").dump());
    for (const auto& g : spec.groups) {
      if (g.empty() || g.front() >= parts.size()) throw EditError("refine: target part out of range");
      EditCondition c;
      c.label = parts[g.front()].part_id;
      spec.conditions.push_back(c);
    }
  }
  spec.alpha = f.alpha.value_or(cfg.num("edit.alpha"));
  spec.k_steps = f.k_steps.value_or(cfg.count("edit.k_steps"));
  spec.theta = f.theta;
  spec.k = f.k.value_or(cfg.count("retrieval.k"));
  spec.seed = cfg.seed();

  GeneratedAsset a;
  a.request = gen_req;
  a.parts = latents_from_json(record.at("parts").dump());
  a.ctx = retrieval_context(m.retriever, m.index, request_render(cfg, gen_req), gen_req.k, m.enc,
                            std::nullopt, &a.retrieved);
  const EditResult r = edit(resolve_edit(spec, cfg, m), EditableAsset{a.parts, a.ctx}, m.generator,
                            m.dit, m.retriever, m.index, cfg.edit());

  const fs::path dir = ws.assets() / (f.name.empty() ? f.asset + "-" + f.op : f.name);
  fs::create_directories(dir);
  write_file_atomic(dir / "edit.json", ordered_json::parse(r.to_json()).dump(2) + "\n");
  write_file_atomic(dir / "edit_request.json", ordered_json::parse(edit_spec_to_json(spec)).dump(2) + "\n");
  if (r.accepted) {
    a.parts = r.parts;
    a.meshes = r.meshes;
    write_asset(a, m, dir);
  }
  write_config_snapshot(cfg, dir, "edit");
  if (!r.accepted)
    throw EditError("no exemplar passed semantic validation after " + std::to_string(r.attempts.size()) +
                    " attempts; see " + (dir / "edit.json").string());
  return {{"asset", dir.string()},
          {"accepted", r.accepted},
          {"retries", r.retries},
          {"edited", r.edited},
          {"seamless", r.seamless},
          {"preservation_post", r.preservation_post}};
}

ordered_json cmd_eval(const RunConfig& cfg, const Workspace& ws, bool quiet) {
  const Corpus corpus = build_corpus(cfg.corpus(), cfg.encoder());
  run_eval(cfg, ws, corpus, file_log(ws.eval() / "eval.log", quiet));
  return {{"topk", (ws.eval() / "topk.csv").string()}, {"lambda", (ws.eval() / "lambda.csv").string()}};
}

ordered_json cmd_calibrate_theta(const RunConfig& cfg, const Workspace& ws) {
  const Models m = load_models(cfg, ws);
  const Corpus corpus = build_corpus(cfg.corpus(), cfg.encoder());
  const ThetaCalibration c = calibrate_theta(corpus.heldout, m.generator, m.dit, m.retriever, m.index,
                                             m.enc, cfg.edit(), cfg.seed());
  ordered_json j{{"swaps", c.similarity.size()},
                 {"theta90", c.theta90},
                 {"pass_rate_at_theta", c.pass_rate(cfg.num("edit.theta"))},
                 {"similarity", c.similarity}};
  fs::create_directories(ws.eval());
  write_file_atomic(ws.eval() / "theta.json", j.dump(2) + "\n");
  write_config_snapshot(cfg, ws.eval(), "calibrate-theta");
  j.erase("similarity");
  return j;
}

int cmd_serve(const RunConfig& cfg, const Workspace& ws, std::optional<std::string> host,
              std::optional<int> port) {
  Service svc(cfg, ws);
  const int bound = svc.start(host.value_or(cfg.str("service.host")),
                              port.value_or(static_cast<int>(cfg.count("service.port"))));
  ordered_json j{{"command", "serve"}, {"port", bound}, {"models_loaded", svc.models_loaded()}};
  std::cout << j.dump() << std::endl;
  svc.wait();
  return 0;
}

void print_error(const std::string& kind, const std::string& message) {
  std::cout << ordered_json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PartRAG desk-scale pipeline"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "INI config file");
  app.add_option("--profile", common.profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", common.seed, "run.seed override");
  app.add_option("--out", common.out, "workspace directory");
  app.add_option("--set", common.sets, "section.key=value override")->allow_extra_args(false);
  app.add_flag("--quiet", common.quiet, "no training log on stderr");

  auto* synth = app.add_subcommand("synth", "build the synthetic corpus and export it");
  auto* train_ret = app.add_subcommand("train-retriever", "train the contrastive retriever");
  auto* build_idx = app.add_subcommand("build-index", "embed the training split into an index");
  auto* train_gen = app.add_subcommand("train-gen", "train the generator");

  GenerateFlags gf;
  auto* gen = app.add_subcommand("generate", "sample an asset from a render");
  gen->add_option("--heldout", gf.heldout, "held-out object index");
  gen->add_option("--synthetic-seed", gf.synthetic_seed, "fresh synthetic object seed");
  gen->add_option("--view", gf.view, "canonical view");
  gen->add_option("--parts", gf.parts, "number of parts");
  gen->add_option("--k", gf.k, "retrieved exemplars");
  gen->add_option("--cfg-scale", gf.cfg_scale, "guidance scale");
  gen->add_option("--steps", gf.steps, "Euler steps");
  gen->add_option("--name", gf.name, "asset directory name");

  EditFlags ef;
  auto* ed = app.add_subcommand("edit", "edit parts of a generated asset");
  ed->add_option("--asset", ef.asset, "asset directory name under assets/")->required();
  ed->add_option("--edit-op", ef.op, "swap, refine or compose")
      ->check(CLI::IsMember({"swap", "refine", "compose"}));
  ed->add_option("--target-parts", ef.target_parts, "comma list; ';' separates compose groups")->required();
  ed->add_option("--label", ef.labels, "target label name or index, one per group");
  ed->add_option("--reference", ef.references, "asset_id:part of an indexed object");
  ed->add_option("--alpha", ef.alpha, "refine strength");
  ed->add_option("--k-steps", ef.k_steps, "denoising steps");
  ed->add_option("--theta", ef.theta, "semantic validation threshold");
  ed->add_option("--k", ef.k, "exemplars per group");
  ed->add_option("--name", ef.name, "output asset directory name");

  auto* ev = app.add_subcommand("eval", "top-k and contrastive-weight sweeps");
  auto* cal = app.add_subcommand("calibrate-theta", "same-label swap similarities");

  std::optional<std::string> host;
  std::optional<int> port;
  auto* serve = app.add_subcommand("serve", "HTTP API");
  serve->add_option("--host", host);
  serve->add_option("--port", port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    const RunConfig cfg = resolve(common);
    const Workspace ws{common.out};
    fs::create_directories(ws.root);
    ordered_json out;
    if (sub == synth) out = cmd_synth(cfg, ws);
    else if (sub == train_ret) out = cmd_train_retriever(cfg, ws, common.quiet);
    else if (sub == build_idx) out = cmd_build_index(cfg, ws);
    else if (sub == train_gen) out = cmd_train_gen(cfg, ws, common.quiet);
    else if (sub == gen) out = cmd_generate(cfg, ws, gf);
    else if (sub == ed) out = cmd_edit(cfg, ws, ef);
    else if (sub == ev) out = cmd_eval(cfg, ws, common.quiet);
    else if (sub == cal) out = cmd_calibrate_theta(cfg, ws);
    else if (sub == serve) return cmd_serve(cfg, ws, host, port);
    ordered_json j{{"command", sub->get_name()}};
    j.update(out);
    std::cout << j.dump() << std::endl;
    return 0;
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    print_error("format", e.what());
  } catch (const std::exception& e) {
    print_error("internal", e.what());
  }
  return 1;
}
