#include "partrag/service.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <map>
#include <mutex>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "partrag/errors.hpp"
#include "partrag/io.hpp"

namespace partrag {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// Status codes for failures that are not the client's fault are 500.
struct HttpError {
  int status;
  std::string kind;
  std::string message;
};

int status_for(const Error& e) {
  const std::string& k = e.kind();
  if (k == "edit" || k == "query" || k == "config" || k == "format" || k == "dimension") return 422;
  if (k == "missing_artifact") return 503;
  return 500;
}

const char* kPalette[] = {"#e6194b", "#3cb44b", "#4363d8", "#f58231",
                          "#911eb4", "#46f0f0", "#f032e6", "#bcf60c"};

ordered_json mesh_payload(const std::vector<Mesh>& meshes) {
  ordered_json parts = ordered_json::array();
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    ordered_json v = ordered_json::array(), f = ordered_json::array();
    for (const auto& p : meshes[i].vertices)
      for (double x : p) v.push_back(x);
    for (const auto& t : meshes[i].faces)
      for (std::uint32_t x : t) f.push_back(x);
    parts.push_back({{"part", i},
                     {"color", kPalette[i % (sizeof kPalette / sizeof *kPalette)]},
                     {"vertices", std::move(v)},
                     {"faces", std::move(f)}});
  }
  return {{"parts", std::move(parts)}};
}

}  // namespace

struct AssetState {
  std::string id;
  std::string source;  // "generated" or "synthetic"
  GenerateRequest request;
  std::string status = "pending";
  std::string error;

  std::vector<PartLatent> base;
  std::vector<EditSpec> history;
  std::vector<PartLatent> current;
  std::vector<Mesh> meshes;
  std::vector<Hit> retrieved;
  FusedContext ctx;

  std::mutex data_mu;  // guards every field above
  std::mutex edit_mu;  // held for the whole of an edit or undo
};

struct Service::Impl {
  RunConfig cfg;
  Workspace ws;
  ServiceOptions opt;
  std::optional<Models> models;
  std::string load_error;

  httplib::Server server;
  std::thread server_thread;

  std::mutex store_mu;
  std::map<std::string, std::shared_ptr<AssetState>> assets;
  std::size_t next_id = 1;

  std::mutex job_mu;
  std::condition_variable job_cv, idle_cv;
  std::deque<std::shared_ptr<AssetState>> jobs;
  bool busy = false;
  bool stopping = false;
  std::thread worker;

  Impl(RunConfig c, Workspace w, ServiceOptions o) : cfg(std::move(c)), ws(std::move(w)), opt(o) {}

  // --- state ---------------------------------------------------------------

  const Models& need_models() const {
    if (!models) throw HttpError{503, "model_not_loaded", "model not loaded: " + load_error};
    return *models;
  }

  std::shared_ptr<AssetState> find(const std::string& id) {
    std::lock_guard lk(store_mu);
    const auto it = assets.find(id);
    if (it == assets.end()) throw HttpError{404, "not_found", "unknown asset '" + id + "'"};
    return it->second;
  }

  std::string new_id() {
    char buf[32];
    std::snprintf(buf, sizeof buf, "asset-%04zu", next_id++);
    return buf;
  }

  void persist(AssetState& a) {
    ordered_json j;
    j["asset_id"] = a.id;
    j["source"] = a.source;
    j["request"] = ordered_json::parse(request_to_json(a.request));
    j["base"] = ordered_json::parse(latents_to_json(a.base));
    j["history"] = ordered_json::array();
    for (const auto& e : a.history) j["history"].push_back(ordered_json::parse(edit_spec_to_json(e)));
    fs::create_directories(ws.assets() / a.id);
    write_file_atomic(ws.assets() / a.id / "record.json", j.dump(2) + "\n");
  }

  EditableAsset editable(const AssetState& a) const { return EditableAsset{a.current, a.ctx}; }

  EditResult apply(const EditSpec& spec, const EditableAsset& asset) const {
    const Models& m = need_models();
    return edit(resolve_edit(spec, cfg, m), asset, m.generator, m.dit, m.retriever, m.index, cfg.edit());
  }

  /// Rebuilds context, current latents and meshes from base + history.
  void replay(AssetState& a) const {
    const Models& m = need_models();
    a.ctx = retrieval_context(m.retriever, m.index, request_render(cfg, a.request), a.request.k,
                              m.enc, std::nullopt, &a.retrieved);
    a.current = a.base;
    a.meshes.clear();
    for (const auto& p : a.current) a.meshes.push_back(decode_part(m.retriever, p));
    for (const auto& spec : a.history) {
      EditResult r = apply(spec, editable(a));
      if (!r.accepted) throw EditError("replay of " + a.id + " diverged: a recorded edit was rejected");
      a.current = std::move(r.parts);
      a.meshes = std::move(r.meshes);
    }
  }

  void load_store() {
    if (!fs::exists(ws.assets())) return;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(ws.assets()))
      if (fs::exists(e.path() / "record.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const auto j = nlohmann::json::parse(read_file(d / "record.json"));
      auto a = std::make_shared<AssetState>();
      a->id = j.at("asset_id").get<std::string>();
      a->source = j.at("source").get<std::string>();
      a->request = request_from_json(j.at("request").dump());
      a->base = latents_from_json(j.at("base").dump());
      for (const auto& e : j.at("history")) a->history.push_back(edit_spec_from_json(e.dump()));
      try {
        replay(*a);
        a->status = "ready";
      } catch (const HttpError& e) {
        a->status = "failed";
        a->error = e.message;
      } catch (const std::exception& e) {
        a->status = "failed";
        a->error = e.what();
      }
      unsigned n = 0;
      if (std::sscanf(a->id.c_str(), "asset-%u", &n) == 1) next_id = std::max<std::size_t>(next_id, n + 1);
      assets[a->id] = a;
    }
  }

  // --- generate worker -----------------------------------------------------

  void run_job(AssetState& a) {
    try {
      const Models& m = need_models();
      std::vector<PartLatent> base;
      if (a.source == "synthetic") {
        const CorpusConfig cc = cfg.corpus();
        const std::size_t i = *a.request.heldout;
        const PartObjectSpec spec = corpus_spec(cc, cc.n_train + i);
        const CorpusObject obj = prepare_object(asset_name(cc.n_train + i), spec, m.enc, cc.synth);
        base = asset_from_object(m.retriever, m.index, obj, m.enc, a.request.k).parts;
      } else {
        base = generate_asset(cfg, m, a.request).parts;
      }
      std::lock_guard lk(a.data_mu);
      a.base = std::move(base);
      replay(a);
      persist(a);
      a.status = "ready";
    } catch (const HttpError& e) {
      std::lock_guard lk(a.data_mu);
      a.status = "failed";
      a.error = e.message;
    } catch (const std::exception& e) {
      std::lock_guard lk(a.data_mu);
      a.status = "failed";
      a.error = e.what();
    }
  }

  void worker_loop() {
    std::unique_lock lk(job_mu);
    while (true) {
      job_cv.wait(lk, [&] { return stopping || !jobs.empty(); });
      if (stopping) return;
      auto a = jobs.front();
      jobs.pop_front();
      busy = true;
      lk.unlock();
      run_job(*a);
      lk.lock();
      busy = false;
      idle_cv.notify_all();
    }
  }

  // --- handlers ------------------------------------------------------------

  ordered_json summary(AssetState& a) {
    std::lock_guard lk(a.data_mu);
    ordered_json j{{"asset_id", a.id},
                   {"source", a.source},
                   {"status", a.status},
                   {"parts", a.current.size()},
                   {"edits", a.history.size()},
                   {"poll", "/v1/assets/" + a.id}};
    if (!a.error.empty()) j["error"] = a.error;
    return j;
  }

  std::shared_ptr<AssetState> ready(const std::string& id) {
    auto a = find(id);
    std::lock_guard lk(a->data_mu);
    if (a->status == "pending") throw HttpError{409, "not_ready", "asset '" + id + "' is still generating"};
    if (a->status == "failed") throw HttpError{409, "failed", "asset '" + id + "' failed: " + a->error};
    return a;
  }

  ordered_json handle_generate(const std::string& body) {
    need_models();
    const auto j = nlohmann::json::parse(body.empty() ? "{}" : body);
    GenerateRequest req = request_from_json(j.dump());
    const bool ground_truth = j.value("ground_truth", false);
    if (!j.contains("k")) req.k = cfg.count("retrieval.k");
    if (!j.contains("cfg_scale")) req.cfg_scale = cfg.num("sampler.cfg_scale");
    if (!j.contains("steps")) req.steps = cfg.count("sampler.steps");
    if (!j.contains("parts")) req.parts = cfg.count("sampler.parts");
    if (ground_truth && !req.heldout) throw ConfigError("ground_truth needs a held-out object");
    request_render(cfg, req);  // validates the source before queueing
    if (!ground_truth && (req.parts == 0 || req.parts > models->dit.max_parts))
      throw ConfigError("parts must lie in [1, " + std::to_string(models->dit.max_parts) + "]");
    if (req.k == 0 || req.k > models->index.size()) throw ConfigError("k outside [1, index size]");

    auto a = std::make_shared<AssetState>();
    a->request = req;
    a->source = ground_truth ? "synthetic" : "generated";
    {
      std::lock_guard lk(store_mu);
      a->id = new_id();
      assets[a->id] = a;
    }
    {
      std::lock_guard lk(job_mu);
      jobs.push_back(a);
    }
    job_cv.notify_one();
    return summary(*a);
  }

  ordered_json handle_edit(const std::string& id, const std::string& body) {
    need_models();
    auto a = ready(id);
    std::unique_lock edit_lock(a->edit_mu, std::try_to_lock);
    if (!edit_lock.owns_lock())
      throw HttpError{409, "conflict", "another edit on '" + id + "' is in progress"};
    EditSpec spec = edit_spec_from_json(body);
    const auto j = nlohmann::json::parse(body);
    if (!j.contains("k")) spec.k = cfg.count("retrieval.k");
    if (!j.contains("k_steps")) spec.k_steps = cfg.count("edit.k_steps");
    if (!j.contains("alpha")) spec.alpha = cfg.num("edit.alpha");
    EditableAsset snapshot;
    {
      std::lock_guard lk(a->data_mu);
      snapshot = editable(*a);
    }
    EditResult r = apply(spec, snapshot);
    if (opt.edit_hold.count() > 0) std::this_thread::sleep_for(opt.edit_hold);
    if (r.accepted) {
      std::lock_guard lk(a->data_mu);
      a->history.push_back(spec);
      a->current = r.parts;
      a->meshes = r.meshes;
      persist(*a);
    }
    ordered_json out;
    out["asset_id"] = id;
    out["result"] = ordered_json::parse(r.to_json());
    out["mesh"] = mesh_payload(r.meshes);
    return out;
  }

  ordered_json handle_undo(const std::string& id) {
    need_models();
    auto a = ready(id);
    std::unique_lock edit_lock(a->edit_mu, std::try_to_lock);
    if (!edit_lock.owns_lock())
      throw HttpError{409, "conflict", "another edit on '" + id + "' is in progress"};
    std::lock_guard lk(a->data_mu);
    if (a->history.empty()) throw HttpError{422, "edit", "no edit to undo"};
    a->history.pop_back();
    replay(*a);
    persist(*a);
    ordered_json out = {{"asset_id", id}, {"edits", a->history.size()}};
    out["mesh"] = mesh_payload(a->meshes);
    return out;
  }

  ordered_json handle_healthz() {
    ordered_json j;
    j["status"] = models ? "ok" : "degraded";
    j["models_loaded"] = models.has_value();
    if (models) {
      j["retriever_fingerprint"] = hex(models->retriever_fp);
      j["generator_fingerprint"] = hex(models->generator_fp);
      j["index_fingerprint"] = hex(models->index.fingerprint);
      j["index_entries"] = models->index.size();
    } else {
      j["error"] = load_error;
    }
    return j;
  }

  template <class F>
  void guarded(httplib::Response& res, int ok_status, F&& f) {
    auto fail = [&](int status, const std::string& kind, const std::string& msg) {
      res.status = status;
      res.set_content(ordered_json{{"error", {{"kind", kind}, {"message", msg}}}}.dump(), "application/json");
    };
    try {
      const ordered_json body = f();
      res.status = ok_status;
      res.set_content(body.dump(), "application/json");
    } catch (const HttpError& e) {
      fail(e.status, e.kind, e.message);
    } catch (const Error& e) {
      fail(status_for(e), e.kind(), e.what());
    } catch (const nlohmann::json::exception& e) {
      fail(422, "format", e.what());
    } catch (const std::exception& e) {
      fail(500, "internal", e.what());
    }
  }

  void routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", cfg.str("service.cors_origin")},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/v1/healthz", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, 200, [&] { return handle_healthz(); });
    });
    server.Get("/v1/assets", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, 200, [&] {
        std::vector<std::shared_ptr<AssetState>> all;
        {
          std::lock_guard lk(store_mu);
          for (const auto& [id, a] : assets) all.push_back(a);
        }
        ordered_json list = ordered_json::array();
        for (const auto& a : all) list.push_back(summary(*a));
        return ordered_json{{"assets", list}};
      });
    });
    server.Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, 202, [&] { return handle_generate(req.body); });
    });
    server.Get(R"(/v1/assets/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, 200, [&] { return summary(*find(req.matches[1])); });
    });
    server.Get(R"(/v1/assets/([^/]+)/mesh)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, 200, [&] {
        auto a = ready(req.matches[1]);
        std::lock_guard lk(a->data_mu);
        ordered_json out = mesh_payload(a->meshes);
        out["asset_id"] = a->id;
        return out;
      });
    });
    server.Get(R"(/v1/assets/([^/]+)/retrievals)",
               [this](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, 200, [&] {
                   const Models& m = need_models();
                   auto a = ready(req.matches[1]);
                   std::lock_guard lk(a->data_mu);
                   ordered_json list = ordered_json::array();
                   for (std::size_t r = 0; r < a->retrieved.size(); ++r)
                     list.push_back({{"rank", r + 1},
                                     {"asset_id", m.index.entries[a->retrieved[r].entry].asset_id},
                                     {"score", a->retrieved[r].score}});
                   return ordered_json{{"asset_id", a->id}, {"k", a->request.k}, {"retrievals", list}};
                 });
               });
    server.Post(R"(/v1/assets/([^/]+)/edit)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, 200, [&] { return handle_edit(req.matches[1], req.body); });
    });
    server.Post(R"(/v1/assets/([^/]+)/undo)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, 200, [&] { return handle_undo(req.matches[1]); });
    });
  }
};

Service::Service(RunConfig cfg, Workspace ws, ServiceOptions opt)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(ws), opt)) {
  try {
    impl_->models = load_models(impl_->cfg, impl_->ws);
  } catch (const std::exception& e) {
    impl_->load_error = e.what();
  }
  impl_->load_store();
  impl_->routes();
  impl_->worker = std::thread([this] { impl_->worker_loop(); });
}

Service::Service(RunConfig cfg, Workspace ws, std::optional<Models> models, ServiceOptions opt)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(ws), opt)) {
  impl_->models = std::move(models);
  if (!impl_->models) impl_->load_error = "no models supplied";
  impl_->load_store();
  impl_->routes();
  impl_->worker = std::thread([this] { impl_->worker_loop(); });
}

Service::~Service() {
  stop();
  {
    std::lock_guard lk(impl_->job_mu);
    impl_->stopping = true;
  }
  impl_->job_cv.notify_all();
  if (impl_->worker.joinable()) impl_->worker.join();
}

int Service::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) bound = impl_->server.bind_to_any_port(host);
  else if (!impl_->server.bind_to_port(host, port)) bound = -1;
  if (bound < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void Service::wait() {
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

bool Service::models_loaded() const { return impl_->models.has_value(); }

void Service::drain() {
  std::unique_lock lk(impl_->job_mu);
  impl_->idle_cv.wait(lk, [&] { return impl_->jobs.empty() && !impl_->busy; });
}

}  // namespace partrag
