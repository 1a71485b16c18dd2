#include "partrag/editor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "partrag/errors.hpp"
#include "partrag/hcr.hpp"
#include "partrag/io.hpp"

namespace partrag {

namespace {

constexpr std::uint32_t kMeshVersion = 1;

double cosine(const Tensor& a, const Tensor& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

Tensor normalized_row(Tensor v, const char* what) {
  double n = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) n += v[i] * v[i];
  if (n == 0.0) throw QueryError(std::string(what) + ": zero vector");
  n = std::sqrt(n);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] /= n;
  return v;
}

double frozen_distance(const Vec3& p, const std::vector<Mesh>& frozen) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& f : frozen) best = std::min(best, point_mesh_distance(p, f));
  return best;
}

std::vector<Mesh> decode_all(const ParameterSet& retriever, const std::vector<PartLatent>& parts,
                             int segments) {
  std::vector<Mesh> out;
  out.reserve(parts.size());
  for (const auto& p : parts) out.push_back(decode_part(retriever, p, segments));
  return out;
}

nlohmann::ordered_json latent_json(const PartLatent& p) {
  nlohmann::ordered_json j;
  j["part_id"] = p.part_id;
  j["z"] = std::vector<double>(p.z.data().begin(), p.z.data().end());
  j["translation"] = {p.transform.translation[0], p.transform.translation[1],
                      p.transform.translation[2]};
  j["scale"] = p.transform.scale;
  return j;
}

}  // namespace

std::string_view op_name(EditOp op) {
  switch (op) {
    case EditOp::swap: return "swap";
    case EditOp::refine: return "refine";
    case EditOp::compose: return "compose";
  }
  return "?";
}

EditOp op_from_name(std::string_view name) {
  if (name == "swap") return EditOp::swap;
  if (name == "refine") return EditOp::refine;
  if (name == "compose") return EditOp::compose;
  throw EditError("unknown edit op '" + std::string(name) + "'");
}

EditableAsset asset_from_object(const ParameterSet& retriever, const RetrievalIndex& index,
                                const CorpusObject& object, const EncoderConfig& enc,
                                std::size_t k) {
  EditableAsset a;
  for (std::size_t i = 0; i < object.n_parts(); ++i)
    a.parts.push_back(PartLatent{encode_part(retriever, object.points[i]), static_cast<int>(i),
                                 object.frames[i].transform});
  a.ctx = retrieval_context(retriever, index, object.views[0], k, enc, object.asset_id);
  return a;
}

void validate_request(const EditRequest& req, std::size_t n_parts) {
  if (req.op != EditOp::compose && req.targets.size() != 1)
    throw EditError(std::string(op_name(req.op)) + " takes exactly one target group");
  if (req.alpha < 0.0 || req.alpha > 1.0) throw EditError("alpha must lie in [0, 1]");
  if (req.k_steps == 0) throw EditError("k_steps must be positive");
  if (req.k == 0) throw EditError("k must be positive");
  std::vector<char> seen(n_parts, 0);
  for (const auto& t : req.targets) {
    if (t.parts.empty()) throw EditError("empty target set");
    double n = 0.0;
    for (std::size_t i = 0; i < t.condition.size(); ++i) n += t.condition[i] * t.condition[i];
    if (t.condition.size() == 0 || n == 0.0) throw EditError("edit condition is zero");
    for (std::size_t p : t.parts) {
      if (p >= n_parts)
        throw EditError("part " + std::to_string(p) + " out of range (asset has " +
                        std::to_string(n_parts) + ")");
      if (seen[p]) throw EditError("target sets overlap at part " + std::to_string(p));
      seen[p] = 1;
    }
  }
}

Tensor label_condition(const RetrievalIndex& index, int label) {
  Tensor acc;
  std::size_t count = 0;
  for (const auto& e : index.entries)
    for (const auto& p : e.parts) {
      if (p.label != label) continue;
      if (count++ == 0) acc = p.embedding;
      else
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.embedding[i];
    }
  if (count == 0) throw QueryError("no indexed part has label " + std::to_string(label));
  return normalized_row(acc, "label condition");
}

Tensor part_condition(const RetrievalIndex& index, std::size_t entry, std::size_t part) {
  if (entry >= index.size() || part >= index.entries[entry].parts.size())
    throw QueryError("reference part out of range");
  return index.entries[entry].parts[part].embedding;
}

Tensor render_condition(const ParameterSet& retriever, const DepthRender& r,
                        const EncoderConfig& enc) {
  return image_part_embedding(retriever, encode_patches(retriever, r, enc),
                              foreground_membership(r, enc));
}

std::vector<Exemplar> retrieve_exemplars(const RetrievalIndex& index, const Tensor& c_edit,
                                         std::size_t k) {
  std::vector<Exemplar> out;
  for (const auto& h : query_parts(index, c_edit, k)) {
    const auto& e = index.entries[h.entry];
    out.push_back(Exemplar{h, e.asset_id, e.parts[h.part].label, e.parts[h.part].latent});
  }
  return out;
}

PartLatent align_exemplar(const PartLatent& exemplar, const PartLatent& target) {
  return PartLatent{exemplar.z, target.part_id, target.transform};
}

Tensor refine_init(const Tensor& z, const std::vector<Tensor>& candidates, double alpha) {
  if (candidates.empty()) throw EditError("refine: no candidates");
  Tensor mean(z.rows(), z.cols());
  for (const auto& c : candidates) {
    if (!c.same_shape(z)) throw DimensionError("refine: candidate shape differs");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += c[i];
  }
  const double inv = 1.0 / static_cast<double>(candidates.size());
  Tensor out = z;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - alpha) * z[i] + alpha * (mean[i] * inv);
  return out;
}

std::vector<PartLatent> masked_denoise(const ParameterSet& gen, const DiTConfig& cfg,
                                       const std::vector<PartLatent>& parts,
                                       const std::vector<std::size_t>& targets,
                                       const FusedContext& ctx, std::size_t steps, double t_start,
                                       double cfg_scale, std::uint64_t seed, DenoiseStats* stats) {
  const std::size_t tp = cfg.tokens_per_part, ch = cfg.channels();
  if (stats) *stats = DenoiseStats{0, parts.size() * tp * ch};
  if (targets.empty()) return parts;
  if (steps == 0) throw ConfigError("masked_denoise: steps must be positive");
  if (t_start < 0.0 || t_start > 1.0) throw ConfigError("masked_denoise: t_start outside [0, 1]");

  std::vector<Tensor> z;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    z.push_back(p.z);
    ids.push_back(static_cast<std::size_t>(p.part_id));
  }
  Tensor tok = latents_to_tokens(gen, cfg, z);

  std::vector<std::size_t> rows;
  for (std::size_t p : targets)
    for (std::size_t r = 0; r < tp; ++r) rows.push_back(p * tp + r);

  Rng rng(seed);
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < ch; ++c) tok(r, c) = (1.0 - t_start) * tok(r, c) + t_start * rng.normal();
  if (stats) stats->channels_updated = rows.size() * ch;

  const FusedContext null = null_context(gen, ctx.rows());
  auto predict = [&](const FusedContext& c, double t) {
    Graph g;
    Binder b(g, gen);
    return dit_forward(b, cfg, g.constant(tok), t, context_var(b, c), ids).velocity.value();
  };
  const double dt = t_start / static_cast<double>(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = t_start * static_cast<double>(steps - i) / static_cast<double>(steps);
    Tensor v;
    if (cfg_scale == 1.0) v = predict(ctx, t);
    else if (cfg_scale == 0.0) v = predict(null, t);
    else v = cfg_combine(predict(null, t), predict(ctx, t), cfg_scale);
    for (std::size_t r : rows)
      for (std::size_t c = 0; c < ch; ++c) tok(r, c) -= dt * v(r, c);
  }

  const auto edited = tokens_to_latents(gen, cfg, tok);
  std::vector<PartLatent> out = parts;
  for (std::size_t p : targets) out[p].z = edited[p];
  return out;
}

double semantic_similarity(const ParameterSet& retriever, const Tensor& z, const Tensor& c_edit) {
  return cosine(shape_part_embedding(retriever, z), c_edit);
}

bool semantic_validate(const ParameterSet& retriever, const Tensor& z, const Tensor& c_edit,
                       double theta) {
  return semantic_similarity(retriever, z, c_edit) >= theta;
}

SmoothResult boundary_smooth(const Mesh& edited, const std::vector<Mesh>& frozen,
                             const EditConfig& cfg, std::uint64_t seed) {
  if (edited.vertices.empty()) throw DegenerateInputError("boundary_smooth: edited mesh is empty");
  SmoothResult res;
  res.mesh = edited;
  res.seam = seam_vertices(edited, frozen, cfg.eps_seam);
  if (res.seam.empty()) return res;
  res.before = seam_discontinuity(edited, frozen, res.seam);

  std::vector<Vec3> samples;
  const Rng base(seed);
  for (std::size_t j = 0; j < frozen.size(); ++j) {
    Rng rng = base.fork(j);
    const auto s = sample_mesh_surface(frozen[j], cfg.frozen_samples, rng);
    samples.insert(samples.end(), s.points.begin(), s.points.end());
    samples.insert(samples.end(), frozen[j].vertices.begin(), frozen[j].vertices.end());
  }

  const std::size_t n = std::min(cfg.n_nearest, samples.size());
  std::vector<std::size_t> order(samples.size());
  for (std::uint32_t v : res.seam) {
    const Vec3 p = edited.vertices[v];
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto d2 = [&](std::size_t i) {
      const Vec3 d = samples[i] - p;
      return dot(d, d);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double da = d2(a), db = d2(b);
                        return da != db ? da < db : a < b;
                      });
    Vec3 avg{0, 0, 0};
    for (std::size_t i = 0; i < n; ++i) avg = avg + samples[order[i]];
    avg = (1.0 / static_cast<double>(n)) * avg;
    const double d0 = frozen_distance(p, frozen);
    if (frozen_distance(avg, frozen) < d0) res.mesh.vertices[v] = avg;
    else if (frozen_distance(samples[order[0]], frozen) < d0) res.mesh.vertices[v] = samples[order[0]];
  }

  const auto nb = vertex_neighbors(edited);
  std::vector<char> is_seam(edited.vertices.size(), 0);
  for (std::uint32_t v : res.seam) is_seam[v] = 1;
  std::vector<std::uint32_t> ring;
  for (std::uint32_t v : res.seam)
    for (std::uint32_t u : nb[v])
      if (!is_seam[u]) ring.push_back(u);
  std::sort(ring.begin(), ring.end());
  ring.erase(std::unique(ring.begin(), ring.end()), ring.end());

  for (std::size_t it = 0; it < cfg.smooth_iters; ++it) {
    const auto prev = res.mesh.vertices;
    for (std::uint32_t v : ring) {
      if (nb[v].empty()) continue;
      Vec3 m{0, 0, 0};
      for (std::uint32_t u : nb[v]) m = m + prev[u];
      m = (1.0 / static_cast<double>(nb[v].size())) * m;
      res.mesh.vertices[v] = prev[v] + cfg.lambda_smooth * (m - prev[v]);
    }
  }
  res.after = seam_discontinuity(res.mesh, frozen, res.seam);
  return res;
}

EditResult edit(const EditRequest& req, const EditableAsset& asset, const ParameterSet& gen,
                const DiTConfig& dit, const ParameterSet& retriever, const RetrievalIndex& index,
                const EditConfig& cfg) {
  const std::size_t n = asset.parts.size();
  validate_request(req, n);
  EditResult res;
  res.parts = asset.parts;
  for (const auto& t : req.targets) res.edited.insert(res.edited.end(), t.parts.begin(), t.parts.end());
  std::sort(res.edited.begin(), res.edited.end());
  res.channels_total = n * dit.tokens_per_part * dit.channels();

  const std::vector<Mesh> before = decode_all(retriever, asset.parts, cfg.segments);
  if (res.edited.empty()) {
    res.accepted = true;
    res.meshes = before;
    return res;
  }

  const std::size_t attempts = req.max_retries ? req.max_retries : req.k;
  const std::size_t window = req.op == EditOp::refine ? req.k : 1;
  for (const auto& t : req.targets)
    res.exemplars.push_back(retrieve_exemplars(index, t.condition, window + attempts - 1));

  for (std::size_t r = 0; r < attempts; ++r) {
    bool available = true;
    for (const auto& ex : res.exemplars) available = available && r < ex.size();
    if (!available) break;

    std::vector<PartLatent> init = asset.parts;
    for (std::size_t g = 0; g < req.targets.size(); ++g) {
      const auto& ex = res.exemplars[g];
      for (std::size_t p : req.targets[g].parts) {
        if (req.op == EditOp::refine) {
          std::vector<Tensor> cands;
          for (std::size_t i = r; i < std::min(r + window, ex.size()); ++i) cands.push_back(ex[i].latent.z);
          init[p].z = refine_init(asset.parts[p].z, cands, req.alpha);
        } else {
          init[p] = align_exemplar(ex[r].latent, asset.parts[p]);
        }
      }
    }
    const double t_start = req.op == EditOp::refine ? req.alpha * cfg.t_edit : cfg.t_edit;
    DenoiseStats st;
    auto out = masked_denoise(gen, dit, init, res.edited, asset.ctx, req.k_steps, t_start,
                              cfg.cfg_scale, req.seed + r, &st);

    EditAttempt a;
    a.rank = r;
    a.accepted = true;
    for (const auto& t : req.targets) {
      double worst = 1.0;
      for (std::size_t p : t.parts)
        worst = std::min(worst, semantic_similarity(retriever, out[p].z, t.condition));
      a.similarity.push_back(worst);
      a.accepted = a.accepted && worst >= req.theta;
    }
    res.attempts.push_back(a);
    if (a.accepted) {
      res.accepted = true;
      res.parts = std::move(out);
      res.channels_updated = st.channels_updated;
      break;
    }
    ++res.retries;
  }

  res.meshes = decode_all(retriever, res.parts, cfg.segments);
  if (!res.accepted) return res;

  std::vector<std::size_t> frozen_ids;
  for (std::size_t i = 0; i < n; ++i)
    if (!std::binary_search(res.edited.begin(), res.edited.end(), i)) frozen_ids.push_back(i);
  if (frozen_ids.empty()) return res;

  res.preservation_pre = preservation_iou(before, res.meshes, frozen_ids);
  std::vector<Mesh> frozen;
  for (std::size_t i : frozen_ids) frozen.push_back(res.meshes[i]);
  double sum_before = 0.0, sum_after = 0.0;
  for (std::size_t i : res.edited) {
    // An untouched latent has no new seam (refine at alpha = 0).
    if (res.parts[i].z.bit_equal(asset.parts[i].z)) continue;
    const SmoothResult s = boundary_smooth(res.meshes[i], frozen, cfg, req.seed + i);
    res.meshes[i] = s.mesh;
    res.seam_vertices += s.seam.size();
    sum_before += s.before * static_cast<double>(s.seam.size());
    sum_after += s.after * static_cast<double>(s.seam.size());
  }
  if (res.seam_vertices) {
    res.seam_before = sum_before / static_cast<double>(res.seam_vertices);
    res.seam_after = sum_after / static_cast<double>(res.seam_vertices);
  }
  res.seamless = res.seam_after < cfg.seamless_threshold;
  res.preservation_post = preservation_iou(before, res.meshes, frozen_ids);
  return res;
}

std::string EditResult::to_json() const {
  nlohmann::ordered_json j;
  j["accepted"] = accepted;
  j["retries"] = retries;
  j["edited"] = edited;
  j["parts"] = nlohmann::ordered_json::array();
  for (const auto& p : parts) j["parts"].push_back(latent_json(p));
  j["attempts"] = nlohmann::ordered_json::array();
  for (const auto& a : attempts)
    j["attempts"].push_back({{"rank", a.rank}, {"similarity", a.similarity}, {"accepted", a.accepted}});
  j["exemplars"] = nlohmann::ordered_json::array();
  for (const auto& group : exemplars) {
    auto g = nlohmann::ordered_json::array();
    for (const auto& e : group)
      g.push_back({{"asset_id", e.asset_id}, {"part", e.hit.part}, {"label", e.label},
                   {"score", e.hit.score}});
    j["exemplars"].push_back(g);
  }
  j["channels_updated"] = channels_updated;
  j["channels_total"] = channels_total;
  j["metrics"] = {{"seam_vertices", seam_vertices},   {"seam_before", seam_before},
                  {"seam_after", seam_after},         {"seamless", seamless},
                  {"preservation_pre", preservation_pre}, {"preservation_post", preservation_post}};
  return j.dump();
}

std::string serialize_mesh(const Mesh& m) {
  ByteWriter w;
  w.bytes("PRTM");
  w.u32(kMeshVersion);
  w.u32(static_cast<std::uint32_t>(m.vertices.size()));
  w.u32(static_cast<std::uint32_t>(m.faces.size()));
  for (const auto& v : m.vertices)
    for (double x : v) w.f64(x);
  for (const auto& f : m.faces)
    for (std::uint32_t i : f) w.u32(i);
  return w.data();
}

Mesh deserialize_mesh(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != "PRTM") throw FormatError("mesh: bad magic");
  if (const auto v = r.u32(); v != kMeshVersion)
    throw FormatError("mesh: unsupported version " + std::to_string(v));
  const std::uint32_t nv = r.u32(), nf = r.u32();
  if (static_cast<std::uint64_t>(nv) * 24 + static_cast<std::uint64_t>(nf) * 12 != r.remaining())
    throw FormatError("mesh: size does not match header");
  Mesh m;
  m.vertices.resize(nv);
  for (auto& v : m.vertices)
    for (double& x : v) x = r.f64();
  m.faces.resize(nf);
  for (auto& f : m.faces)
    for (std::uint32_t& i : f) {
      i = r.u32();
      if (i >= nv) throw FormatError("mesh: face index out of range");
    }
  return m;
}

void save_mesh(const std::filesystem::path& path, const Mesh& m) {
  write_file_atomic(path, serialize_mesh(m));
}

Mesh load_mesh(const std::filesystem::path& path) { return deserialize_mesh(read_file(path)); }

double ThetaCalibration::pass_rate(double theta) const {
  if (similarity.empty()) return 0.0;
  const auto pass = std::count_if(similarity.begin(), similarity.end(),
                                  [&](double s) { return s >= theta; });
  return static_cast<double>(pass) / static_cast<double>(similarity.size());
}

ThetaCalibration calibrate_theta(const std::vector<CorpusObject>& objects, const ParameterSet& gen,
                                 const DiTConfig& dit, const ParameterSet& retriever,
                                 const RetrievalIndex& index, const EncoderConfig& enc,
                                 const EditConfig& cfg, std::uint64_t seed) {
  ThetaCalibration out;
  for (std::size_t o = 0; o < objects.size(); ++o) {
    const auto& obj = objects[o];
    if (obj.n_parts() > dit.max_parts) continue;
    const EditableAsset asset = asset_from_object(retriever, index, obj, enc);
    for (std::size_t i = 0; i < obj.n_parts(); ++i) {
      EditRequest req;
      req.targets = {EditTarget{{i}, label_condition(index, obj.spec.parts[i].label)}};
      req.theta = -1.0;
      req.max_retries = 1;
      req.seed = seed + 1000 * o + i;
      const EditResult r = edit(req, asset, gen, dit, retriever, index, cfg);
      out.similarity.push_back(r.attempts.at(0).similarity.at(0));
    }
  }
  if (out.similarity.empty()) throw ConfigError("calibrate_theta: no eligible objects");
  std::vector<double> s = out.similarity;
  std::sort(s.begin(), s.end());
  out.theta90 = s[s.size() / 10];
  return out;
}

}  // namespace partrag
