// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failures, capped at 255.
//
//   acceptance --cli <path to partrag> [--only <name>] [--work <dir>]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"

#include "partrag/corpus.hpp"
#include "partrag/editor.hpp"
#include "partrag/errors.hpp"
#include "partrag/hcr.hpp"
#include "partrag/index.hpp"
#include "partrag/io.hpp"
#include "partrag/metrics.hpp"
#include "partrag/optim.hpp"
#include "partrag/pipeline.hpp"
#include "partrag/service.hpp"

using namespace partrag;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t) {
  return std::chrono::duration<double>(clk::now() - t).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Collects failed sub-checks of one criterion.
struct Verdict {
  std::vector<std::string> failures;
  std::vector<std::string> notes;
  void require(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

Tensor unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Tensor t = Tensor::randn(n, d, rng);
  for (std::size_t r = 0; r < n; ++r) {
    double n2 = 0.0;
    for (double v : t.row_span(r)) n2 += v * v;
    for (auto& v : t.row_span(r)) v /= std::sqrt(n2);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Shared desk-scale state, trained once.

struct Desk {
  RunConfig cfg = RunConfig::profile("desk");
  Corpus corpus;
  std::optional<ParameterSet> retriever;
  std::optional<RetrievalIndex> index;
  std::optional<GeneratorTrainResult> generator;
  double retriever_seconds = 0.0, generator_seconds = 0.0;

  const Corpus& data() {
    if (corpus.train.empty()) corpus = build_corpus(cfg.corpus(), cfg.encoder());
    return corpus;
  }
  const ParameterSet& ret() {
    if (!retriever) {
      const auto t0 = clk::now();
      retriever = run_train_retriever(cfg, data());
      retriever_seconds = seconds_since(t0);
    }
    return *retriever;
  }
  const RetrievalIndex& idx() {
    if (!index) index = run_build_index(cfg, data(), ret());
    return *index;
  }
  const GeneratorTrainResult& gen() {
    if (!generator) {
      const auto t0 = clk::now();
      generator = run_train_generator(cfg, data(), ret(), idx());
      generator_seconds = seconds_since(t0);
    }
    return *generator;
  }
  Models models() {
    Models m;
    m.enc = cfg.encoder();
    m.dit = cfg.dit();
    m.retriever = ret();
    m.retriever_fp = params_fingerprint(m.retriever);
    m.index = idx();
    m.generator = gen().params;
    m.generator_fp = params_fingerprint(m.generator);
    return m;
  }
};

// ---------------------------------------------------------------------------

Verdict gradient_suite() {
  Verdict v;
  const auto t0 = clk::now();
  const RunConfig cfg = RunConfig::profile("desk");
  const EncoderConfig enc = cfg.encoder();
  const DiTConfig dit = cfg.dit();
  Rng rng(101);
  const std::size_t patches = (enc.render_size / enc.patch) * (enc.render_size / enc.patch);

  // Attention block: self and cross attention at desk width and token counts.
  const Tensor ctx_rows = Tensor::randn(patches, enc.width, rng);
  const double e_self = grad_check(
      [&](Graph&, Var a) { return ops::sum(ops::square(ops::attention(a, a, a, dit.heads))); },
      Tensor::randn(patches, enc.width, rng));
  const double e_cross = grad_check(
      [&](Graph& g, Var a) {
        Var c = g.constant(ctx_rows);
        return ops::sum(ops::square(ops::attention(a, c, ops::tanh(c), dit.heads)));
      },
      Tensor::randn(3 * dit.tokens_per_part, enc.width, rng));
  const double e_grouped = grad_check(
      [&](Graph&, Var a) {
        return ops::sum(ops::square(ops::attention(a, a, a, dit.heads, dit.tokens_per_part)));
      },
      Tensor::randn(3 * dit.tokens_per_part, enc.width, rng));
  v.require(e_self < 1e-4, fmt("self attention %.2e", e_self));
  v.require(e_cross < 1e-4, fmt("cross attention %.2e", e_cross));
  v.require(e_grouped < 1e-4, fmt("per-part attention %.2e", e_grouped));

  // InfoNCE over a desk batch against batch keys plus a filled queue.
  const std::size_t batch = cfg.count("hcr.batch"), queue = cfg.count("hcr.queue");
  const Tensor keys = unit_rows(batch + queue, enc.width, rng);
  Positives pos = identity_positives(batch);
  for (std::size_t i = 0; i + 1 < batch; i += 3) pos[i].push_back(i + 1);
  const double e_nce = grad_check(
      [&](Graph& g, Var q) { return info_nce(q, g.constant(keys), cfg.num("hcr.tau"), pos); },
      Tensor::randn(batch, enc.width, rng));
  v.require(e_nce < 1e-4, fmt("InfoNCE %.2e", e_nce));

  // Flow loss over every desk DiT parameter (probed), and dit_forward over its input.
  ParameterSet ps;
  init_generator(ps, dit, rng);
  ps.get("dit.out.w").value = Tensor::randn(dit.width, dit.channels(), rng, 0.5);
  const std::size_t parts = 3, rows = parts * dit.tokens_per_part;
  const Tensor z0 = Tensor::randn(rows, dit.channels(), rng), eps = Tensor::randn(rows, dit.channels(), rng);
  const Tensor ctx = Tensor::randn(patches * (1 + cfg.count("retrieval.k")), dit.context_dim, rng);
  const Tensor pose = Tensor::randn(parts, 4, rng);
  Rng probe(102);
  const double e_flow = grad_check(
      [&](Graph& g) {
        Binder b(g, ps);
        const FlowLoss fl = flow_loss(b, dit, z0, eps, 0.37, g.constant(ctx), {0, 3, 1}, pose);
        return ops::add(fl.flow, fl.pose);
      },
      ps, 2, probe);
  v.require(e_flow < 1e-4, fmt("flow loss %.2e", e_flow));
  const double e_fwd = grad_check(
      [&](Graph& g, Var zt) {
        Binder b(g, ps);
        const DiTOutput out = dit_forward(b, dit, zt, 0.61, g.constant(ctx), {2, 0, 5});
        return ops::add(ops::mean(ops::square(out.velocity)), ops::sum(out.pose));
      },
      z0);
  v.require(e_fwd < 1e-4, fmt("dit_forward input %.2e", e_fwd));

  const double secs = seconds_since(t0);
  v.require(secs < 60.0, fmt("runtime %.1f s >= 60 s", secs));
  v.note(fmt("max rel err %.1e, %.1f s", std::max({e_self, e_cross, e_grouped, e_nce, e_flow, e_fwd}), secs));
  return v;
}

Verdict queue_and_momentum() {
  Verdict v;
  Rng rng(201);
  std::size_t mismatched = 0;
  for (int seq = 0; seq < 1000; ++seq) {
    const std::size_t k = 1 + rng.below(16), d = 1 + rng.below(6);
    MomentumQueue q(k, d);
    std::deque<std::vector<double>> oracle;
    const std::size_t pushes = rng.below(12);
    for (std::size_t p = 0; p < pushes; ++p) {
      const Tensor rows = unit_rows(1 + rng.below(k), d, rng);
      q.push(rows);
      for (std::size_t r = 0; r < rows.rows(); ++r) {
        oracle.emplace_back(rows.row_span(r).begin(), rows.row_span(r).end());
        if (oracle.size() > k) oracle.pop_front();
      }
    }
    const Tensor c = q.contents();
    bool same = c.rows() == oracle.size();
    for (std::size_t r = 0; same && r < oracle.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) same = same && c(r, j) == oracle[r][j];
    mismatched += !same;
  }
  v.require(mismatched == 0, fmt("%zu of 1000 queue sequences differ", mismatched));

  ParameterSet online, shadow;
  online.add("a", Tensor::randn(4, 8, rng));
  online.add("b", Tensor::randn(1, 16, rng));
  shadow.add("a", Tensor::randn(4, 8, rng));
  shadow.add("b", Tensor::randn(1, 16, rng));
  const ParameterSet theta0 = shadow;
  double worst = 0.0;
  for (double m : {0.99, 0.999}) {
    ParameterSet s = theta0;
    for (int n = 1; n <= 500; ++n) {
      momentum_update(s, online, m);
      const double mn = std::pow(m, n);
      for (const char* name : {"a", "b"}) {
        const Tensor& t0 = theta0.get(name).value;
        for (std::size_t i = 0; i < t0.size(); ++i)
          worst = std::max(worst, std::abs(s.get(name).value[i] -
                                           (mn * t0[i] + (1.0 - mn) * online.get(name).value[i])));
      }
    }
  }
  v.require(worst <= 1e-12, fmt("momentum EMA off by %.2e", worst));
  v.note(fmt("1000 sequences, EMA max err %.1e", worst));
  return v;
}

Verdict infonce_exactness() {
  Verdict v;
  auto loss = [](const Tensor& q, const Tensor& k, double tau) {
    Graph g;
    return info_nce(g.constant(q), g.constant(k), tau, identity_positives(q.rows())).value()[0];
  };
  const double l = loss(Tensor::identity(2), Tensor::identity(2), 1.0);
  const double expect = std::log(1.0 + std::exp(-1.0));
  v.require(std::abs(l - expect) < 1e-9, fmt("I2 loss %.12f vs %.12f", l, expect));

  Rng rng(301);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor q = unit_rows(8, 16, rng), k = unit_rows(8, 16, rng);
    v.require(std::isfinite(loss(q, k, 1e-3)), "non-finite loss at tau 1e-3");
    v.require(std::isfinite(loss(q, q, 1e-3)), "non-finite loss at tau 1e-3 (q = k)");
  }

  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor s = Tensor::randn(6, 10, rng, 3.0);
    Tensor shifted = s;
    for (std::size_t r = 0; r < 6; ++r) {
      const double c = rng.uniform(-50, 50);
      for (auto& x : shifted.row_span(r)) x += c;
    }
    Positives pos = identity_positives(6);
    pos[1].push_back(7);
    Graph g;
    worst = std::max(worst, std::abs(info_nce_logits(g.constant(s), pos).value()[0] -
                                     info_nce_logits(g.constant(shifted), pos).value()[0]));
  }
  v.require(worst <= 1e-12, fmt("row shift changes the loss by %.2e", worst));
  v.note(fmt("ln(1+e^-1) err %.1e, shift err %.1e", std::abs(l - expect), worst));
  return v;
}

Verdict retrieval_oracle() {
  Verdict v;
  Rng rng(401);
  const std::size_t n = 512, d = 32;
  RetrievalIndex idx;
  for (std::size_t i = 0; i < n; ++i) {
    IndexEntry e;
    e.asset_id = asset_name((i * 211) % n);
    e.embedding = l2_normalize(Tensor::randn(1, d, rng));
    for (auto& x : e.embedding.data()) x = static_cast<double>(static_cast<float>(x));
    idx.entries.push_back(std::move(e));
  }
  std::size_t wrong = 0, recalled = 0, wanted = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor q = Tensor::randn(1, d, rng);
    const std::size_t k = trial % 10 == 0 ? n : 1 + rng.below(32);
    // Independent oracle: cosine from scratch, full sort, ties by asset id.
    double qn = 0.0;
    for (double x : q.data()) qn += x * x;
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0, en = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dot += q[c] * idx.entries[i].embedding[c];
        en += idx.entries[i].embedding[c] * idx.entries[i].embedding[c];
      }
      scored.emplace_back(dot / std::sqrt(qn * en), i);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return idx.entries[a.second].asset_id < idx.entries[b.second].asset_id;
    });
    const auto hits = query_topk(idx, q, k);
    bool same = hits.size() == k;
    for (std::size_t i = 0; same && i < k; ++i) same = hits[i].entry == scored[i].second;
    wrong += !same;
    std::vector<std::size_t> top(k), got;
    for (std::size_t i = 0; i < k; ++i) top[i] = scored[i].second;
    for (const auto& h : hits) got.push_back(h.entry);
    std::sort(top.begin(), top.end());
    std::sort(got.begin(), got.end());
    std::vector<std::size_t> common;
    std::set_intersection(top.begin(), top.end(), got.begin(), got.end(), std::back_inserter(common));
    recalled += common.size();
    wanted += k;
  }
  const double recall = static_cast<double>(recalled) / static_cast<double>(wanted);
  v.require(wrong == 0, fmt("%zu of 1000 orderings differ", wrong));
  v.require(recall == 1.0, fmt("recall@k %.6f", recall));
  v.note(fmt("1000 queries over %zu entries, recall@k %.3f", n, recall));
  return v;
}

Verdict desk_retrieval(Desk& desk) {
  Verdict v;
  const std::size_t steps = desk.cfg.count("hcr.steps");
  v.require(steps <= 2000, fmt("%zu training steps > 2000", steps));
  const ParameterSet& ret = desk.ret();
  const double recall = part_recall_at1(ret, desk.data().heldout);
  const double chance = 1.0 / 8.0;
  v.require(recall >= 5.0 * chance, fmt("part recall@1 %.3f < %.3f", recall, 5.0 * chance));
  v.require(desk.retriever_seconds <= 1800.0, fmt("training took %.0f s", desk.retriever_seconds));
  v.note(fmt("recall@1 %.3f (%.1fx chance) after %zu steps, %.0f s", recall, recall / chance, steps,
             desk.retriever_seconds));
  return v;
}

Verdict flow_sanity(Desk& desk) {
  Verdict v;
  // Oracle velocity eps - Z0 is constant along the path: Euler is exact.
  Rng rng(601);
  const Tensor z0 = Tensor::randn(32, 2, rng), eps = Tensor::randn(32, 2, rng);
  auto constant_err = [&](std::size_t steps) {
    const Tensor out = euler_integrate(eps, steps, [&](const Tensor&, double) {
      Tensor u = eps;
      for (std::size_t i = 0; i < u.size(); ++i) u[i] = eps[i] - z0[i];
      return u;
    });
    double e = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) e = std::max(e, std::abs(out[i] - z0[i]));
    return e;
  };
  const double c10 = constant_err(10), c100 = constant_err(100);
  v.require(c10 < 1e-12 && c100 < 1e-12, fmt("oracle field not recovered: %.2e / %.2e", c10, c100));
  // Marginal velocity of Z0 ~ N(mu, s^2): first-order Euler error.
  const double mu = -0.7, s = 0.4;
  auto field = [&](const Tensor& z, double t) {
    const double var = (1 - t) * (1 - t) * s * s + t * t;
    Tensor u = z;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double dz = z[i] - (1 - t) * mu;
      u[i] = t / var * dz - (mu + (1 - t) * s * s / var * dz);
    }
    return u;
  };
  auto curved_err = [&](std::size_t steps) {
    const Tensor out = euler_integrate(eps, steps, field);
    double e = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) e = std::max(e, std::abs(out[i] - (mu + s * eps[i])));
    return e;
  };
  const double e10 = curved_err(10), e100 = curved_err(100);
  v.require(e10 / e100 > 5.0 && e10 / e100 < 20.0, fmt("error ratio 10/100 steps %.2f", e10 / e100));

  // Trained versus untrained generator, same seeds and retrieval.
  const std::size_t steps = desk.cfg.count("generator.stage1_steps") + desk.cfg.count("generator.stage2_steps");
  v.require(steps <= 2000, fmt("%zu generator steps > 2000", steps));
  RunConfig cfg = desk.cfg;
  cfg.set("eval.max_parts", "4");
  const Models trained = desk.models();
  Models untrained = trained;
  {
    Rng init_rng = Rng(cfg.seed()).fork(2);
    ParameterSet init;
    init_generator(init, cfg.dit(), init_rng);
    // Standardization statistics are fitted, not learned; both sides share them.
    for (std::size_t i = 0; i < init.size(); ++i)
      if (init.at(i).name.starts_with("dit.stats."))
        init.at(i).value = trained.generator.get(init.at(i).name).value;
    untrained.generator = std::move(init);
  }
  const std::size_t k = cfg.count("retrieval.k");
  const EvalRow a = evaluate_generation(cfg, untrained, desk.data().heldout, k);
  const EvalRow b = evaluate_generation(cfg, trained, desk.data().heldout, k);
  v.require(b.cd < 0.5 * a.cd, fmt("trained CD %.4f vs untrained %.4f (ratio %.3f)", b.cd, a.cd, b.cd / a.cd));
  v.note(fmt("Euler ratio %.1f; CD %.4f -> %.4f (ratio %.3f) over %zu objects, %zu steps, %.0f s", e10 / e100,
             a.cd, b.cd, b.cd / a.cd, b.objects, steps, desk.generator_seconds));
  return v;
}

Verdict cfg_identities(Desk& desk) {
  Verdict v;
  Rng rng(701);
  const Tensor vu = Tensor::randn(16, 2, rng), vc = Tensor::randn(16, 2, rng);
  v.require(cfg_combine(vu, vc, 1.0).bit_equal(vc), "combine at s=1");
  v.require(cfg_combine(vu, vc, 0.0).bit_equal(vu), "combine at s=0");

  const ParameterSet& gen = desk.gen().params;
  const DiTConfig dit = desk.cfg.dit();
  const EncoderConfig enc = desk.cfg.encoder();
  const auto& obj = desk.data().heldout[0];
  const FusedContext ctx = retrieval_context(desk.ret(), desk.idx(), obj.views[0], 3, enc);
  const std::size_t parts = obj.n_parts();
  SampleConfig sc;
  sc.steps = 12;
  sc.seed = 9;
  // Reference trajectories: one branch only, written out here.
  auto single = [&](const FusedContext& fc) {
    Rng r(sc.seed);
    Tensor z = Tensor::randn(parts * dit.tokens_per_part, dit.channels(), r);
    std::vector<std::size_t> ids(parts);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return euler_integrate(z, sc.steps, [&](const Tensor& x, double t) {
      Graph g;
      Binder b(g, gen);
      return dit_forward(b, dit, g.constant(x), t, context_var(b, fc), ids).velocity.value();
    });
  };
  sc.cfg_scale = 1.0;
  v.require(sample_tokens(gen, dit, ctx, parts, sc).bit_equal(single(ctx)), "s=1 differs from conditional");
  sc.cfg_scale = 0.0;
  v.require(sample_tokens(gen, dit, ctx, parts, sc).bit_equal(single(null_context(gen, ctx.rows()))),
            "s=0 differs from unconditional");
  v.note("bit-exact at s=1 and s=0 on the trained desk generator");
  return v;
}

Verdict editing_contracts(Desk& desk) {
  Verdict v;
  const Models m = desk.models();
  const EditConfig ec = desk.cfg.edit();
  const auto& heldout = desk.data().heldout;
  Rng rng(801);

  // 100 randomized edits: frozen latents bit-equal, poses kept, |S|/N channels.
  std::size_t frozen_bad = 0, channel_bad = 0, pose_bad = 0, seam_bad = 0, edits = 0, accepted = 0;
  std::size_t pre_bad = 0;
  double min_post = 1.0, sum_post = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto& obj = heldout[rng.below(heldout.size())];
    const EditableAsset asset = asset_from_object(m.retriever, m.index, obj, m.enc, 3);
    const std::size_t n = asset.parts.size();
    EditRequest req;
    const int op = static_cast<int>(rng.below(3));
    req.op = static_cast<EditOp>(op);
    req.k_steps = 1 + rng.below(20);
    req.alpha = rng.uniform();
    req.theta = -1.0;  // validation is not under test here
    req.seed = static_cast<std::uint64_t>(trial);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const std::size_t n_target = 1 + rng.below(n - 1);  // leave one part frozen
    const std::size_t groups = req.op == EditOp::compose ? std::min<std::size_t>(n_target, 2) : 1;
    for (std::size_t g = 0; g < groups; ++g) {
      EditTarget t;
      for (std::size_t i = g; i < n_target; i += groups) t.parts.push_back(order[i]);
      std::sort(t.parts.begin(), t.parts.end());
      t.condition = label_condition(m.index, static_cast<int>(rng.below(8)));
      req.targets.push_back(std::move(t));
    }
    const EditResult r = edit(req, asset, m.generator, m.dit, m.retriever, m.index, ec);
    ++edits;
    if (!r.accepted) continue;
    ++accepted;
    std::vector<char> target(n, 0);
    for (const auto& t : req.targets)
      for (std::size_t p : t.parts) target[p] = 1;
    std::size_t s_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      pose_bad += !(r.parts[i].transform == asset.parts[i].transform);
      if (target[i]) {
        ++s_count;
        continue;
      }
      frozen_bad += !(r.parts[i].z.bit_equal(asset.parts[i].z) && r.parts[i].part_id == asset.parts[i].part_id);
    }
    channel_bad += r.channels_updated * n != s_count * r.channels_total;
    seam_bad += r.seam_after > r.seam_before;
    pre_bad += r.preservation_pre != 1.0;
    min_post = std::min(min_post, r.preservation_post);
    sum_post += r.preservation_post;
  }
  v.require(accepted == edits, fmt("%zu of %zu edits rejected with validation off", edits - accepted, edits));
  v.require(frozen_bad == 0, fmt("%zu frozen latents changed", frozen_bad));
  v.require(pose_bad == 0, fmt("%zu poses changed", pose_bad));
  v.require(channel_bad == 0, fmt("%zu edits touched other than |S|/N channels", channel_bad));
  v.require(seam_bad == 0, fmt("%zu edits increased seam discontinuity", seam_bad));
  v.require(pre_bad == 0, fmt("%zu edits with pre-smoothing preservation < 1", pre_bad));
  v.require(min_post >= 0.98, fmt("post-smoothing preservation %.4f", min_post));

  // Empty mask is the identity.
  const EditableAsset asset = asset_from_object(m.retriever, m.index, heldout[1], m.enc, 3);
  const FusedContext ctx = asset.ctx;
  const auto same = masked_denoise(m.generator, m.dit, asset.parts, {}, ctx, 20, ec.t_edit, ec.cfg_scale, 5);
  bool identity = same.size() == asset.parts.size();
  for (std::size_t i = 0; identity && i < same.size(); ++i)
    identity = same[i].z.bit_equal(asset.parts[i].z) && same[i].transform == asset.parts[i].transform;
  EditRequest empty;
  empty.op = EditOp::compose;
  const EditResult er = edit(empty, asset, m.generator, m.dit, m.retriever, m.index, ec);
  for (std::size_t i = 0; identity && i < er.parts.size(); ++i)
    identity = er.parts[i].z.bit_equal(asset.parts[i].z) && er.channels_updated == 0;
  v.require(identity, "empty mask changed the asset");

  v.note(fmt("%zu edits, preservation pre 1.0, post min %.4f mean %.4f", edits, min_post,
             sum_post / static_cast<double>(std::max<std::size_t>(accepted, 1))));
  return v;
}

Verdict metric_identities() {
  Verdict v;
  Rng rng(901);
  Points a(500);
  for (auto& p : a) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  v.require(chamfer(a, a) == 0.0, "chamfer(A,A) != 0");
  v.require(fscore(a, a) == 1.0, "fscore(A,A) != 1");

  auto box = [](Vec3 at, Vec3 size) {
    return tessellate(PrimitiveSpec{PrimitiveKind::box, size, Pose{at, 1.0}, 0});
  };
  const Mesh p = box({-0.4, 0, 0}, {0.3, 0.25, 0.2});
  v.require(part_overlap_iou({p, p}) == 1.0, "overlap of identical parts != 1");
  v.require(part_overlap_iou({p, box({0.5, 0, 0}, {0.3, 0.25, 0.2})}) == 0.0, "overlap of disjoint parts != 0");

  // Voxel IoU against Monte-Carlo inside tests.
  const std::vector<std::pair<PrimitiveSpec, PrimitiveSpec>> cases = {
      {{PrimitiveKind::box, {0.5, 0.4, 0.3}, Pose{{0, 0, 0}, 1}, 0},
       {PrimitiveKind::sphere, {0.45, 0.45, 0.45}, Pose{{0.25, 0.1, 0}, 1}, 0}},
      {{PrimitiveKind::cylinder, {0.3, 0.7, 0.3}, Pose{{0, 0, 0}, 1}, 0},
       {PrimitiveKind::cone, {0.5, 0.5, 0.5}, Pose{{0.1, 0.2, -0.1}, 1}, 0}},
  };
  double worst = 0.0;
  for (const auto& [pa, pb] : cases) {
    const Mesh ma = tessellate(pa, 24), mb = tessellate(pb, 24);
    std::size_t inter = 0, uni = 0;
    for (int i = 0; i < 200000; ++i) {
      const Vec3 q{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const bool ia = inside_closed_mesh(ma, q), ib = inside_closed_mesh(mb, q);
      inter += ia && ib;
      uni += ia || ib;
    }
    const double mc = static_cast<double>(inter) / static_cast<double>(uni);
    worst = std::max(worst, std::abs(voxel_iou(voxelize(ma), voxelize(mb)) - mc));
  }
  v.require(worst < 0.02, fmt("voxel IoU off the Monte-Carlo oracle by %.4f", worst));
  v.note(fmt("voxel IoU max deviation %.4f", worst));
  return v;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

Verdict ablation_harness(Desk& desk, const fs::path& work) {
  Verdict v;
  const Workspace ws{work / "ablation"};
  fs::remove_all(ws.root);
  fs::create_directories(ws.root);
  RunConfig cfg = desk.cfg;
  // Desk models; shortened per-lambda retraining and fewer objects.
  cfg.set("eval.objects", "4");
  cfg.set("eval.samples", "1024");
  cfg.set("eval.sweep_retriever_steps", "30");
  cfg.set("eval.sweep_generator_steps", "20");
  save_params(ws.retriever(), desk.ret());
  save_index(desk.idx(), ws.index());
  save_params(ws.generator(), desk.gen().params);
  const auto t0 = clk::now();
  run_eval(cfg, ws, desk.data());

  const auto topk = read_csv(ws.eval() / "topk.csv");
  const auto lam = read_csv(ws.eval() / "lambda.csv");
  auto finite_row = [](const std::vector<std::string>& row, std::size_t from, std::size_t to) {
    for (std::size_t i = from; i < to && i < row.size(); ++i)
      if (!std::isfinite(std::stod(row[i]))) return false;
    return true;
  };
  const std::vector<std::string> ks{"1", "3", "5", "10"};
  v.require(topk.size() == 1 + ks.size(), fmt("topk.csv has %zu lines", topk.size()));
  for (std::size_t i = 0; i < ks.size() && i + 1 < topk.size(); ++i) {
    v.require(topk[i + 1].size() == 5 && topk[i + 1][0] == ks[i], "topk row for k=" + ks[i]);
    v.require(finite_row(topk[i + 1], 1, 4), "non-finite topk metrics");
  }
  const std::vector<double> grid{0.01, 0.02, 0.03, 0.05, 0.10};
  v.require(lam.size() == 1 + grid.size(), fmt("lambda.csv has %zu lines", lam.size()));
  for (std::size_t i = 0; i < grid.size() && i + 1 < lam.size(); ++i) {
    v.require(lam[i + 1].size() == 7 && std::abs(std::stod(lam[i + 1][0]) - grid[i]) < 1e-12,
              fmt("lambda row %zu", i));
    v.require(finite_row(lam[i + 1], 0, 6), "non-finite lambda metrics");
  }
  v.require(fs::exists(ws.eval() / "eval.config.ini"), "no config snapshot");
  v.note(fmt("%zu top-k rows, %zu lambda rows, %.0f s", topk.size() - 1, lam.size() - 1, seconds_since(t0)));
  return v;
}

// Runs the CLI; returns the exit status and captures stdout.
int run_cli(const std::string& cli, const std::string& args, std::string* out = nullptr) {
  const std::string cmd = "\"" + cli + "\" " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return -1;
  std::string s;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) s.append(buf, n);
  const int rc = pclose(p);
  if (out) *out = s;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
  return files;
}

Verdict determinism(const std::string& cli, const fs::path& work) {
  Verdict v;
  if (cli.empty() || !fs::exists(cli)) {
    v.require(false, "CLI binary not given (--cli)");
    return v;
  }
  const fs::path base = work / "determinism";
  fs::remove_all(base);
  fs::create_directories(base);
  const fs::path ini = base / "small.ini";
  std::ofstream(ini) << "[data]\nn_train = 24\nn_heldout = 8\n"
                        "[hcr]\nsteps = 20\nbatch = 8\nqueue = 128\n"
                        "[generator]\nstage1_steps = 8\nstage2_steps = 4\n"
                        "[sampler]\nsteps = 8\n[edit]\nk_steps = 4\n"
                        "[eval]\nobjects = 2\nsamples = 256\nsweep_retriever_steps = 4\nsweep_generator_steps = 3\n";
  const std::vector<std::string> commands = {
      "synth",
      "train-retriever",
      "build-index",
      "train-gen",
      "generate --heldout 1 --name g1",
      "generate --synthetic-seed 44 --parts 3 --name g2",
      "edit --asset g1 --edit-op swap --target-parts 0 --label 0 --theta -1 --name e1",
      "edit --asset g1 --edit-op refine --target-parts 1 --alpha 0.4 --theta -1 --name e2",
      "edit --asset g2 --edit-op compose --target-parts \"0;2\" --label 1 --label 3 --theta -1 --name e3",
      "eval",
      "calibrate-theta",
  };
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* run : {"a", "b"}) {
    const fs::path out = base / run;
    for (const auto& c : commands) {
      std::string stdout_text;
      const int rc = run_cli(
          cli, "--quiet --config \"" + ini.string() + "\" --out \"" + out.string() + "\" " + c, &stdout_text);
      if (rc != 0) v.require(false, "'" + c + "' exited " + std::to_string(rc) + ": " + stdout_text);
    }
    // The serve command: one generate and one edit through HTTP.
    {
      RunConfig cfg = RunConfig::load(ini, std::nullopt);
      Service svc(cfg, Workspace{out});
      const int port = svc.start("127.0.0.1", 0);
      httplib::Client c("127.0.0.1", port);
      auto g = c.Post("/v1/generate", R"({"heldout":2,"parts":3,"seed":7})", "application/json");
      if (!g || g->status != 202) {
        v.require(false, "service generate failed");
      } else {
        svc.drain();
        const std::string id = nlohmann::json::parse(g->body)["asset_id"];
        auto e = c.Post("/v1/assets/" + id + "/edit",
                        R"({"op":"swap","target_parts":[1],"condition":{"label":2},"theta":-1})",
                        "application/json");
        v.require(e && e->status == 200, "service edit failed");
        std::ofstream(out / "service_mesh.json") << c.Get("/v1/assets/" + id + "/mesh")->body;
      }
      svc.stop();
    }
    trees.push_back(tree_bytes(out));
  }
  std::size_t differing = 0;
  std::string first;
  for (const auto& [name, bytes] : trees[0]) {
    const auto it = trees[1].find(name);
    if (it == trees[1].end() || it->second != bytes) {
      if (!differing++) first = name;
    }
  }
  differing += trees[1].size() > trees[0].size() ? trees[1].size() - trees[0].size() : 0;
  v.require(trees[0].size() > 20, fmt("only %zu artifacts written", trees[0].size()));
  v.require(differing == 0, fmt("%zu artifacts differ (first: %s)", differing, first.c_str()));
  v.note(fmt("%zu commands + serve, %zu artifacts byte-identical across two runs", commands.size(),
             trees[0].size()));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string cli_path, only;
  std::string work = (fs::temp_directory_path() / "partrag_acceptance").string();
  app.add_option("--cli", cli_path, "partrag CLI binary");
  app.add_option("--only", only, "run one criterion");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  Desk desk;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient-suite", [] { return gradient_suite(); }},
      {"queue-momentum-oracle", [] { return queue_and_momentum(); }},
      {"infonce-exactness", [] { return infonce_exactness(); }},
      {"retrieval-oracle", [] { return retrieval_oracle(); }},
      {"desk-retrieval-quality", [&] { return desk_retrieval(desk); }},
      {"flow-sanity", [&] { return flow_sanity(desk); }},
      {"cfg-identities", [&] { return cfg_identities(desk); }},
      {"editing-contracts", [&] { return editing_contracts(desk); }},
      {"metric-identities", [] { return metric_identities(); }},
      {"ablation-harness", [&] { return ablation_harness(desk, work); }},
      {"determinism", [&] { return determinism(cli_path, work); }},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && only != name) continue;
    const auto t0 = clk::now();
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    std::string detail;
    for (const auto& f : v.failures) detail += (detail.empty() ? "" : "; ") + f;
    if (v.failures.empty())
      for (const auto& n : v.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("%s %s (%.1f s): %s\n", v.failures.empty() ? "PASS" : "FAIL", name.c_str(), seconds_since(t0),
                detail.c_str());
    std::fflush(stdout);
    failed += !v.failures.empty();
  }
  return std::min(failed, 255);
}
