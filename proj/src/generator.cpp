#include "partrag/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "partrag/errors.hpp"
#include "partrag/io.hpp"
#include "partrag/parallel.hpp"

namespace partrag {

namespace {

std::string blk(std::size_t i) { return "dit.blk" + std::to_string(i) + "."; }

void add_ln(ParameterSet& ps, const std::string& name, std::size_t w) {
  ps.add(name + ".g", Tensor(1, w, 1.0));
  ps.add(name + ".b", Tensor(1, w));
}

void add_attn(ParameterSet& ps, const std::string& name, std::size_t w, std::size_t kv_in,
              Rng& rng) {
  ps.add(name + ".q", glorot(w, w, rng));
  ps.add(name + ".k", glorot(kv_in, w, rng));
  ps.add(name + ".v", glorot(kv_in, w, rng));
  ps.add(name + ".o", glorot(w, w, rng));
}

Var ln(Binder& b, const std::string& name, Var x) {
  return ops::layer_norm(x, b(name + ".g"), b(name + ".b"));
}

Var attn(Binder& b, const std::string& name, Var x, Var kv, std::size_t heads, std::size_t group) {
  Var q = ops::matmul(x, b(name + ".q"));
  Var k = ops::matmul(kv, b(name + ".k"));
  Var v = ops::matmul(kv, b(name + ".v"));
  return ops::matmul(ops::attention(q, k, v, heads, group), b(name + ".o"));
}

Tensor time_features(double t, std::size_t freqs) {
  Tensor f(1, 2 * freqs);
  for (std::size_t j = 0; j < freqs; ++j) {
    const double w = std::exp(std::log(1000.0) * static_cast<double>(j) /
                              static_cast<double>(freqs));
    f[j] = std::sin(w * t);
    f[freqs + j] = std::cos(w * t);
  }
  return f;
}

std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

}  // namespace

bool DiTConfig::is_global(std::size_t block) const {
  return std::find(global_blocks.begin(), global_blocks.end(), block) != global_blocks.end();
}

void DiTConfig::validate() const {
  if (n_blocks == 0) throw ConfigError("dit: n_blocks must be positive");
  for (std::size_t g : global_blocks)
    if (g >= n_blocks) throw ConfigError("dit: global block " + std::to_string(g) + " out of range");
  if (heads == 0 || width % heads != 0) throw ConfigError("dit: heads must divide width");
  if (tokens_per_part == 0 || latent_dim % tokens_per_part != 0)
    throw ConfigError("dit: tokens_per_part must divide latent_dim");
  if (max_parts == 0) throw ConfigError("dit: max_parts must be positive");
  if (cfg_drop < 0.0 || cfg_drop > 1.0) throw ConfigError("dit: cfg_drop outside [0, 1]");
}

DiTConfig DiTConfig::paper() {
  DiTConfig c;
  c.n_blocks = 21;
  c.global_blocks.clear();
  for (std::size_t i = 0; i < 21; i += 2) c.global_blocks.push_back(i);
  return c;
}

void init_generator(ParameterSet& ps, const DiTConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t w = cfg.width;
  ps.add("dit.in.w", glorot(cfg.channels(), w, rng));
  ps.add("dit.in.b", Tensor(1, w));
  ps.add("dit.tok", Tensor::randn(cfg.tokens_per_part, w, rng, 0.1));
  ps.add("dit.pid", Tensor::randn(cfg.max_parts, w, rng, 0.1));
  add_mlp(ps, "dit.temb", 2 * cfg.time_freqs, w, w, rng);
  ps.add("dit.null", Tensor::randn(1, cfg.context_dim, rng, 0.1));
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::string p = blk(i);
    add_ln(ps, p + "ln1", w);
    add_attn(ps, p + "ls", w, w, rng);
    add_ln(ps, p + "ln2", w);
    add_attn(ps, p + "lx", w, cfg.context_dim, rng);
    if (cfg.is_global(i)) {
      add_ln(ps, p + "ln3", w);
      add_attn(ps, p + "gs", w, w, rng);
      add_ln(ps, p + "ln4", w);
      add_attn(ps, p + "gx", w, cfg.context_dim, rng);
    }
    add_ln(ps, p + "ln5", w);
    add_mlp(ps, p + "mlp", w, cfg.mlp_hidden, w, rng);
  }
  add_ln(ps, "dit.out.ln", w);
  ps.add("dit.out.w", Tensor(w, cfg.channels()));
  ps.add("dit.out.b", Tensor(1, cfg.channels()));
  add_mlp(ps, "dit.pose", w, w, 4, rng);
  ps.add("dit.stats.z_mean", Tensor(1, cfg.latent_dim));
  ps.add("dit.stats.z_std", Tensor(1, cfg.latent_dim, 1.0));
  ps.add("dit.stats.pose_mean", Tensor(1, 4));
  ps.add("dit.stats.pose_std", Tensor(1, 4, 1.0));
}

bool is_stats_param(const std::string& name) { return name.starts_with("dit.stats."); }

void fit_generator_stats(ParameterSet& ps, const std::vector<PartLatent>& parts) {
  if (parts.empty()) throw ConfigError("fit_generator_stats: no parts");
  auto fit = [&](const std::string& prefix, std::size_t dims, auto value) {
    Tensor mean(1, dims), stdv(1, dims);
    for (const auto& p : parts)
      for (std::size_t c = 0; c < dims; ++c) mean[c] += value(p, c);
    for (std::size_t c = 0; c < dims; ++c) mean[c] /= static_cast<double>(parts.size());
    for (const auto& p : parts)
      for (std::size_t c = 0; c < dims; ++c) {
        const double d = value(p, c) - mean[c];
        stdv[c] += d * d;
      }
    for (std::size_t c = 0; c < dims; ++c)
      stdv[c] = std::max(1e-6, std::sqrt(stdv[c] / static_cast<double>(parts.size())));
    ps.get(prefix + "_mean").value = mean;
    ps.get(prefix + "_std").value = stdv;
  };
  fit("dit.stats.z", parts[0].z.size(), [](const PartLatent& p, std::size_t c) { return p.z[c]; });
  fit("dit.stats.pose", 4, [](const PartLatent& p, std::size_t c) {
    return c < 3 ? p.transform.translation[c] : std::log(p.transform.scale);
  });
}

Tensor latents_to_tokens(const ParameterSet& ps, const DiTConfig& cfg,
                         const std::vector<Tensor>& z) {
  const Tensor& mean = ps.get("dit.stats.z_mean").value;
  const Tensor& stdv = ps.get("dit.stats.z_std").value;
  const std::size_t tp = cfg.tokens_per_part, c = cfg.channels();
  Tensor out(z.size() * tp, c);
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i].size() != cfg.latent_dim) throw DimensionError("latents_to_tokens: latent width");
    for (std::size_t j = 0; j < cfg.latent_dim; ++j)
      out(i * tp + j / c, j % c) = (z[i][j] - mean[j]) / stdv[j];
  }
  return out;
}

std::vector<Tensor> tokens_to_latents(const ParameterSet& ps, const DiTConfig& cfg,
                                      const Tensor& tokens) {
  const Tensor& mean = ps.get("dit.stats.z_mean").value;
  const Tensor& stdv = ps.get("dit.stats.z_std").value;
  const std::size_t tp = cfg.tokens_per_part, c = cfg.channels();
  if (tokens.cols() != c || tokens.rows() % tp != 0)
    throw DimensionError("tokens_to_latents: token matrix " + shape_string(tokens));
  std::vector<Tensor> out(tokens.rows() / tp, Tensor(1, cfg.latent_dim));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < cfg.latent_dim; ++j)
      out[i][j] = tokens(i * tp + j / c, j % c) * stdv[j] + mean[j];
  return out;
}

Tensor poses_to_targets(const ParameterSet& ps, const std::vector<Pose>& poses) {
  const Tensor& mean = ps.get("dit.stats.pose_mean").value;
  const Tensor& stdv = ps.get("dit.stats.pose_std").value;
  Tensor out(poses.size(), 4);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (!(poses[i].scale > 0.0)) throw DegenerateInputError("poses_to_targets: scale <= 0");
    for (std::size_t c = 0; c < 3; ++c)
      out(i, c) = (poses[i].translation[c] - mean[c]) / stdv[c];
    out(i, 3) = (std::log(poses[i].scale) - mean[3]) / stdv[3];
  }
  return out;
}

std::vector<Pose> targets_to_poses(const ParameterSet& ps, const Tensor& targets) {
  const Tensor& mean = ps.get("dit.stats.pose_mean").value;
  const Tensor& stdv = ps.get("dit.stats.pose_std").value;
  std::vector<Pose> out(targets.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c)
      out[i].translation[c] = targets(i, c) * stdv[c] + mean[c];
    out[i].scale = std::exp(targets(i, 3) * stdv[3] + mean[3]);
  }
  return out;
}

FusedContext fuse_context(const Tensor& query_tokens, const std::vector<const Tensor*>& retrieved) {
  FusedContext ctx;
  std::size_t rows = query_tokens.rows();
  for (const Tensor* r : retrieved) {
    if (r->cols() != query_tokens.cols())
      throw DimensionError("fuse_context: retrieved token width " + std::to_string(r->cols()) +
                           " differs from query width " + std::to_string(query_tokens.cols()));
    rows += r->rows();
  }
  ctx.tokens = Tensor(rows, query_tokens.cols());
  auto out = ctx.tokens.data();
  auto at = std::copy(query_tokens.data().begin(), query_tokens.data().end(), out.begin());
  for (const Tensor* r : retrieved) at = std::copy(r->data().begin(), r->data().end(), at);
  return ctx;
}

FusedContext null_context(const ParameterSet& ps, std::size_t rows) {
  const Tensor& row = ps.get("dit.null").value;
  FusedContext ctx;
  ctx.null = true;
  ctx.tokens = Tensor(rows, row.cols());
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(row.data().begin(), row.data().end(), ctx.tokens.row_span(r).begin());
  return ctx;
}

Var context_var(Binder& b, const FusedContext& ctx) {
  if (ctx.null) return ops::repeat_row(b("dit.null"), ctx.rows());
  return b.graph().constant(ctx.tokens);
}

DiTOutput dit_forward(Binder& b, const DiTConfig& cfg, Var zt, double t, Var ctx,
                      const std::vector<std::size_t>& part_ids) {
  const std::size_t n = part_ids.size(), tp = cfg.tokens_per_part;
  if (n == 0) throw DimensionError("dit_forward: no parts");
  if (n > cfg.max_parts)
    throw ConfigError("dit_forward: " + std::to_string(n) + " parts exceed the part-ID table of " +
                      std::to_string(cfg.max_parts));
  for (std::size_t id : part_ids)
    if (id >= cfg.max_parts) throw ConfigError("dit_forward: part id " + std::to_string(id) +
                                               " outside the part-ID table");
  if (zt.rows() != n * tp || zt.cols() != cfg.channels())
    throw DimensionError("dit_forward: Z_t shape " + shape_string(zt.value()));
  if (ctx.cols() != cfg.context_dim) throw DimensionError("dit_forward: context width");

  Graph& g = b.graph();
  std::vector<std::size_t> token_pid(n * tp);
  for (std::size_t i = 0; i < n; ++i)
    std::fill_n(token_pid.begin() + static_cast<std::ptrdiff_t>(i * tp), tp, part_ids[i]);
  std::vector<Var> pos(n, b("dit.tok"));
  Var temb = mlp(b, "dit.temb", g.constant(time_features(t, cfg.time_freqs)));

  Var x = ops::linear(zt, b("dit.in.w"), b("dit.in.b"));
  x = ops::add(x, ops::concat_rows(pos));
  x = ops::add(x, ops::gather_rows(b("dit.pid"), token_pid));
  x = ops::add_row(x, temb);

  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::string p = blk(i);
    Var h = ln(b, p + "ln1", x);
    x = ops::add(x, attn(b, p + "ls", h, h, cfg.heads, tp));
    x = ops::add(x, attn(b, p + "lx", ln(b, p + "ln2", x), ctx, cfg.heads, 0));
    if (cfg.is_global(i)) {
      h = ln(b, p + "ln3", x);
      x = ops::add(x, attn(b, p + "gs", h, h, cfg.heads, 0));
      x = ops::add(x, attn(b, p + "gx", ln(b, p + "ln4", x), ctx, cfg.heads, 0));
    }
    x = ops::add(x, mlp(b, p + "mlp", ln(b, p + "ln5", x)));
  }

  Var h = ln(b, "dit.out.ln", x);
  DiTOutput out;
  out.velocity = ops::linear(h, b("dit.out.w"), b("dit.out.b"));
  std::vector<Var> pooled;
  for (std::size_t i = 0; i < n; ++i) pooled.push_back(ops::mean_rows(ops::slice_rows(h, i * tp, tp)));
  out.pose = mlp(b, "dit.pose", ops::concat_rows(pooled));
  return out;
}

Tensor interpolate(const Tensor& z0, const Tensor& eps, double t) {
  if (!z0.same_shape(eps)) throw DimensionError("interpolate: Z_0 and eps differ in shape");
  Tensor out = z0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * z0[i] + t * eps[i];
  return out;
}

FlowLoss flow_loss(Binder& b, const DiTConfig& cfg, const Tensor& z0, const Tensor& eps, double t,
                   Var ctx, const std::vector<std::size_t>& part_ids, const Tensor& pose_target) {
  Graph& g = b.graph();
  Tensor target = eps;
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = eps[i] - z0[i];
  const DiTOutput out = dit_forward(b, cfg, g.constant(interpolate(z0, eps, t)), t, ctx, part_ids);
  return FlowLoss{ops::mse(out.velocity, g.constant(std::move(target))),
                  ops::mse(out.pose, g.constant(pose_target))};
}

Var total_loss(Var flow, Var hcr) {
  if (hcr.graph == nullptr) return flow;
  return ops::add(flow, hcr);
}

Tensor cfg_combine(const Tensor& v_uncond, const Tensor& v_cond, double s) {
  if (!v_uncond.same_shape(v_cond)) throw DimensionError("cfg_combine: shapes differ");
  if (s == 1.0) return v_cond;
  if (s == 0.0) return v_uncond;
  Tensor out = v_uncond;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_uncond[i] + s * (v_cond[i] - v_uncond[i]);
  return out;
}

Tensor euler_integrate(Tensor z, std::size_t steps, const VelocityFn& v,
                       std::vector<Tensor>* trajectory) {
  if (steps == 0) throw ConfigError("euler_integrate: steps must be positive");
  const double dt = 1.0 / static_cast<double>(steps);
  if (trajectory) trajectory->push_back(z);
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = static_cast<double>(steps - i) / static_cast<double>(steps);
    const Tensor vel = v(z, t);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] -= dt * vel[j];
    if (trajectory) trajectory->push_back(z);
  }
  return z;
}

Tensor sample_tokens(const ParameterSet& gen, const DiTConfig& cfg, const FusedContext& ctx,
                     std::size_t n_parts, const SampleConfig& sc, std::vector<Tensor>* trajectory) {
  if (sc.cfg_scale < 0.0) throw ConfigError("sample: guidance scale must be >= 0");
  if (n_parts == 0 || n_parts > cfg.max_parts)
    throw ConfigError("sample: part count " + std::to_string(n_parts) + " outside [1, " +
                      std::to_string(cfg.max_parts) + "]");
  Rng rng(sc.seed);
  const Tensor z1 = Tensor::randn(n_parts * cfg.tokens_per_part, cfg.channels(), rng);
  const auto ids = iota_ids(n_parts);
  const FusedContext null = null_context(gen, ctx.rows());
  auto predict = [&](const Tensor& z, double t, const FusedContext& c) {
    Graph g;
    Binder b(g, gen);
    return dit_forward(b, cfg, g.constant(z), t, context_var(b, c), ids).velocity.value();
  };
  const double s = sc.cfg_scale;
  return euler_integrate(
      z1, sc.steps,
      [&](const Tensor& z, double t) {
        if (s == 1.0) return predict(z, t, ctx);
        if (s == 0.0) return predict(z, t, null);
        return cfg_combine(predict(z, t, null), predict(z, t, ctx), s);
      },
      trajectory);
}

std::vector<PartLatent> read_parts(const ParameterSet& gen, const DiTConfig& cfg,
                                   const Tensor& tokens, const FusedContext& ctx) {
  const std::size_t n = tokens.rows() / cfg.tokens_per_part;
  Graph g;
  Binder b(g, gen);
  const DiTOutput out = dit_forward(b, cfg, g.constant(tokens), 0.0, context_var(b, ctx), iota_ids(n));
  const auto z = tokens_to_latents(gen, cfg, tokens);
  const auto poses = targets_to_poses(gen, out.pose.value());
  std::vector<PartLatent> parts(n);
  for (std::size_t i = 0; i < n; ++i) {
    parts[i].z = z[i];
    parts[i].part_id = static_cast<int>(i);
    parts[i].transform = poses[i];
  }
  return parts;
}

std::vector<Mesh> assemble(const ParameterSet& retriever, std::vector<PartLatent>& parts,
                           int segments) {
  std::vector<Mesh> meshes;
  for (const auto& p : parts) meshes.push_back(decode_part(retriever, p, segments));
  if (meshes.empty()) return meshes;
  Aabb box = meshes[0].bounds();
  for (const auto& m : meshes) box = box.merged(m.bounds());
  bool inside = true;
  for (int a = 0; a < 3; ++a) inside = inside && box.lo[a] >= -1.0 && box.hi[a] <= 1.0;
  if (inside) return meshes;
  const Pose c = canonical_transform(box);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    Pose& t = parts[i].transform;
    t = Pose{c.apply(t.translation), c.scale * t.scale};
    meshes[i] = decode_part(retriever, parts[i], segments);
  }
  return meshes;
}

Mesh merge_meshes(const std::vector<Mesh>& parts) {
  Mesh out;
  for (const auto& m : parts) {
    const auto base = static_cast<std::uint32_t>(out.vertices.size());
    out.vertices.insert(out.vertices.end(), m.vertices.begin(), m.vertices.end());
    for (const auto& f : m.faces) out.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
  }
  return out;
}

FusedContext retrieval_context(const ParameterSet& retriever, const RetrievalIndex& index,
                               const DepthRender& render, std::size_t k, const EncoderConfig& enc,
                               const std::optional<std::string>& exclude, std::vector<Hit>* hits) {
  const Tensor tokens = encode_patches(retriever, render, enc);
  std::vector<const Tensor*> retrieved;
  std::vector<Hit> found;
  if (k > 0) {
    found = query_topk(index, query_embedding(retriever, render, enc), k, exclude);
    for (const auto& h : found) retrieved.push_back(&index.entries[h.entry].tokens);
  }
  FusedContext ctx = fuse_context(tokens, retrieved);
  if (hits) *hits = std::move(found);
  return ctx;
}

SampleResult sample(const ParameterSet& gen, const DiTConfig& cfg, const ParameterSet& retriever,
                    const RetrievalIndex& index, const DepthRender& render, std::size_t n_parts,
                    const SampleConfig& sc, const EncoderConfig& enc) {
  check_fingerprint(index, params_fingerprint(retriever));
  SampleResult res;
  const FusedContext ctx =
      retrieval_context(retriever, index, render, sc.k, enc, sc.exclude, &res.retrieved);
  const Tensor tokens = sample_tokens(gen, cfg, ctx, n_parts, sc);
  res.parts = read_parts(gen, cfg, tokens, ctx);
  res.meshes = assemble(retriever, res.parts);
  return res;
}

double stage2_multiplier(const std::string& name, const GeneratorTrainConfig& cfg) {
  if (is_stats_param(name)) return 0.0;
  for (const char* frozen : {"hcr.patch.", "hcr.part.", "hcr.dec."})
    if (name.starts_with(frozen)) return 0.0;
  if (name.starts_with("dit.blk")) return cfg.block_multiplier;
  return cfg.new_multiplier;
}

GeneratorTrainResult train_generator(
    const Corpus& corpus, const EncoderConfig& enc, const ParameterSet& retriever,
    const RetrievalIndex& index, const GeneratorTrainConfig& cfg, ParameterSet init,
    const std::function<void(const GeneratorLogRecord&)>& on_log) {
  const DiTConfig& dit = cfg.dit;
  dit.validate();
  std::vector<const CorpusObject*> objects;
  for (const auto& o : corpus.train)
    if (o.n_parts() <= std::min(cfg.max_parts, dit.max_parts)) objects.push_back(&o);
  if (objects.size() < cfg.batch)
    throw ConfigError("train_generator: " + std::to_string(objects.size()) +
                      " eligible objects, fewer than one batch");
  if (cfg.k > 0 && index.size() <= cfg.k)
    throw ConfigError("train_generator: index too small for k=" + std::to_string(cfg.k));

  // Clean latents, pose targets and per-view retrieval, fixed for the run.
  struct Prepared {
    std::vector<Tensor> z;
    std::vector<Pose> poses;
    std::vector<FusedContext> ctx;  // per view
  };
  std::vector<Prepared> prep(objects.size());
  std::vector<PartLatent> all_parts;
  parallel_for(objects.size(), [&](std::size_t i) {
    const CorpusObject& o = *objects[i];
    for (std::size_t p = 0; p < o.n_parts(); ++p) {
      prep[i].z.push_back(encode_part(retriever, o.points[p]));
      prep[i].poses.push_back(o.frames[p].transform);
    }
    for (const auto& view : o.views)
      prep[i].ctx.push_back(retrieval_context(retriever, index, view, cfg.k, enc, o.asset_id));
  });
  for (const auto& p : prep)
    for (std::size_t j = 0; j < p.z.size(); ++j)
      all_parts.push_back(PartLatent{p.z[j], static_cast<int>(j), p.poses[j]});

  GeneratorTrainResult res;
  res.params = std::move(init);
  fit_generator_stats(res.params, all_parts);
  std::vector<Tensor> z_tokens(objects.size()), pose_targets(objects.size());
  for (std::size_t i = 0; i < objects.size(); ++i) {
    z_tokens[i] = latents_to_tokens(res.params, dit, prep[i].z);
    pose_targets[i] = poses_to_targets(res.params, prep[i].poses);
  }

  const std::size_t total_steps = cfg.stage1_steps + cfg.stage2_steps;
  AdamWConfig opt_cfg = cfg.opt;
  opt_cfg.total_steps = total_steps;
  auto opt = std::make_unique<AdamW>(res.params, opt_cfg, [](const std::string& n) {
    return is_stats_param(n) ? 0.0 : 1.0;
  });
  std::optional<ParameterSet> ema;
  if (cfg.ema) ema = res.params;
  ParameterSet momentum;
  std::optional<HcrQueues> queues;

  Rng rng(cfg.seed);
  double window = 0.0;
  std::size_t window_n = 0;
  for (std::size_t step = 0; step < total_steps; ++step) {
    const int stage = step < cfg.stage1_steps ? 1 : 2;
    if (stage == 2 && !queues) {
      res.params.append("hcr.", retriever);
      momentum = retriever;
      queues.emplace(cfg.hcr.queue, enc.width);
      // Carry the stage-1 optimizer position into the new schedule.
      AdamWConfig c2 = opt_cfg;
      c2.warmup_steps = 0;
      c2.total_steps = cfg.stage2_steps;
      opt = std::make_unique<AdamW>(res.params, c2, [&cfg](const std::string& n) {
        return stage2_multiplier(n, cfg);
      });
      if (ema) ema->append("hcr.", retriever);
    }

    struct Item {
      std::size_t obj, view;
      double t;
      bool drop;
      Tensor eps;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      Item it;
      it.obj = rng.below(objects.size());
      it.view = rng.below(objects[it.obj]->views.size());
      it.t = rng.uniform();
      it.drop = rng.uniform() < dit.cfg_drop;
      it.eps = Tensor::randn(z_tokens[it.obj].rows(), dit.channels(), rng);
      items.push_back(std::move(it));
    }

    const double inv_b = 1.0 / static_cast<double>(cfg.batch);
    std::vector<std::unique_ptr<Graph>> graphs(items.size());
    std::vector<double> flow(items.size()), pose(items.size());
    parallel_for(items.size(), [&](std::size_t i) {
      const Item& it = items[i];
      graphs[i] = std::make_unique<Graph>();
      Graph& g = *graphs[i];
      Binder b(g, res.params);
      const FusedContext& c = prep[it.obj].ctx[it.view];
      const FusedContext ctx = it.drop ? null_context(res.params, c.rows()) : c;
      const FlowLoss fl = flow_loss(b, dit, z_tokens[it.obj], it.eps, it.t, context_var(b, ctx),
                                    iota_ids(objects[it.obj]->n_parts()), pose_targets[it.obj]);
      flow[i] = fl.flow.value()[0];
      pose[i] = fl.pose.value()[0];
      Var loss = ops::scale(ops::add(fl.flow, ops::scale(fl.pose, cfg.pose_weight)), inv_b);
      if (std::isfinite(loss.value()[0])) g.backward(loss);
    });
    double flow_mean = 0.0, pose_mean = 0.0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      flow_mean += flow[i] * inv_b;
      pose_mean += pose[i] * inv_b;
    }
    if (!std::isfinite(flow_mean) || !std::isfinite(pose_mean)) {
      std::string dump;
      for (const auto& it : items)
        dump += " " + objects[it.obj]->asset_id + "@view" + std::to_string(it.view) +
                ",t=" + std::to_string(it.t);
      throw NumericalError("train_generator: non-finite loss at step " + std::to_string(step) +
                           "; batch:" + dump);
    }
    for (const auto& g : graphs) g->accumulate_param_grads();
    graphs.clear();

    double hcr_value = 0.0;
    if (stage == 2) {
      std::vector<BatchItem> batch;
      for (const auto& it : items) batch.push_back({objects[it.obj], it.view});
      Graph g;
      Binder b(g, res.params, "hcr.");
      const HcrKeys keys = hcr_keys(momentum, batch);
      const HcrLoss hl = hcr_loss(hcr_features(b, batch), keys, *queues, cfg.hcr);
      hcr_value = hl.total.value()[0];
      if (!std::isfinite(hcr_value))
        throw NumericalError("train_generator: non-finite HCR loss at step " + std::to_string(step));
      g.backward(hl.total);
      g.accumulate_param_grads();
      queues->enqueue(keys);
    }

    window += flow_mean;
    ++window_n;
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total_steps)) {
      GeneratorLogRecord rec{step, stage, flow_mean, window / static_cast<double>(window_n),
                             pose_mean, hcr_value};
      res.log.push_back(rec);
      if (on_log) on_log(rec);
      window = 0.0;
      window_n = 0;
    }

    opt->step();
    if (stage == 2) momentum_update(momentum, extract_prefix(res.params, "hcr."), cfg.hcr.momentum);
    if (ema) momentum_update(*ema, res.params, cfg.ema_decay);
  }
  if (ema) res.params = std::move(*ema);
  return res;
}

}  // namespace partrag
