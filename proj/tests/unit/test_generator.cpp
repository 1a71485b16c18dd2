#include <cmath>
#include <vector>

#include "doctest.h"
#include "partrag/errors.hpp"
#include "partrag/generator.hpp"

using namespace partrag;

namespace {

DiTConfig small_config() {
  DiTConfig c;
  c.n_blocks = 2;
  c.global_blocks = {0};
  c.width = 8;
  c.heads = 2;
  c.max_parts = 4;
  c.tokens_per_part = 4;
  c.latent_dim = 8;
  c.context_dim = 6;
  c.time_freqs = 3;
  c.mlp_hidden = 12;
  return c;
}

ParameterSet small_model(const DiTConfig& c, std::uint64_t seed, bool live_output = true) {
  Rng rng(seed);
  ParameterSet ps;
  init_generator(ps, c, rng);
  // The zero-initialized output layer would hide every upstream gradient.
  if (live_output) ps.get("dit.out.w").value = Tensor::randn(c.width, c.channels(), rng, 0.5);
  return ps;
}

Tensor forward_velocity(const ParameterSet& ps, const DiTConfig& c, const Tensor& z, double t,
                        const Tensor& ctx, const std::vector<std::size_t>& ids,
                        Tensor* pose = nullptr) {
  Graph g;
  Binder b(g, ps);
  const DiTOutput out = dit_forward(b, c, g.constant(z), t, g.constant(ctx), ids);
  if (pose) *pose = out.pose.value();
  return out.velocity.value();
}

}  // namespace

TEST_CASE("config validation") {
  DiTConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.channels() == 2);
  const DiTConfig p = DiTConfig::paper();
  CHECK(p.n_blocks == 21);
  CHECK(p.global_blocks.size() == 11);
  CHECK(p.is_global(20));
  CHECK_FALSE(p.is_global(19));
  c.global_blocks = {6};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DiTConfig{};
  c.tokens_per_part = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("fuse_context shapes and order") {
  Rng rng(1);
  const Tensor q = Tensor::randn(64, 32, rng);
  const Tensor r1 = Tensor::randn(64, 32, rng), r2 = Tensor::randn(64, 32, rng),
               r3 = Tensor::randn(64, 32, rng);
  CHECK(fuse_context(q, {}).tokens.bit_equal(q));
  const FusedContext f = fuse_context(q, {&r1, &r2, &r3});
  CHECK(f.rows() == 256);
  const FusedContext swapped = fuse_context(q, {&r2, &r1, &r3});
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 32; ++c) {
      CHECK(f.tokens(64 + r, c) == swapped.tokens(128 + r, c));
      CHECK(f.tokens(128 + r, c) == swapped.tokens(64 + r, c));
    }
  const Tensor narrow(64, 16);
  CHECK_THROWS_AS(fuse_context(q, {&narrow}), DimensionError);
}

TEST_CASE("dit_forward is equivariant to part permutation") {
  const DiTConfig c = small_config();
  const ParameterSet ps = small_model(c, 2);
  Rng rng(3);
  const std::size_t tp = c.tokens_per_part;
  const Tensor z = Tensor::randn(3 * tp, c.channels(), rng);
  const Tensor ctx = Tensor::randn(10, c.context_dim, rng);
  const std::vector<std::size_t> ids{0, 1, 2}, perm{2, 0, 1};
  Tensor zp(3 * tp, c.channels());
  std::vector<std::size_t> idp;
  for (std::size_t i = 0; i < 3; ++i) {
    idp.push_back(ids[perm[i]]);
    for (std::size_t r = 0; r < tp; ++r)
      for (std::size_t k = 0; k < c.channels(); ++k) zp(i * tp + r, k) = z(perm[i] * tp + r, k);
  }
  Tensor pose, pose_p;
  const Tensor v = forward_velocity(ps, c, z, 0.4, ctx, ids, &pose);
  const Tensor vp = forward_velocity(ps, c, zp, 0.4, ctx, idp, &pose_p);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t r = 0; r < tp; ++r)
      for (std::size_t k = 0; k < c.channels(); ++k)
        CHECK(std::abs(vp(i * tp + r, k) - v(perm[i] * tp + r, k)) < 1e-12);
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(pose_p(i, k) - pose(perm[i], k)) < 1e-12);
  }
}

TEST_CASE("zero cross-attention projections ignore the context") {
  const DiTConfig c = small_config();
  ParameterSet ps = small_model(c, 4);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string& n = ps.at(i).name;
    if (n.ends_with("x.k") || n.ends_with("x.v"))
      std::fill(ps.at(i).value.data().begin(), ps.at(i).value.data().end(), 0.0);
  }
  Rng rng(5);
  const Tensor z = Tensor::randn(2 * c.tokens_per_part, c.channels(), rng);
  const Tensor a = forward_velocity(ps, c, z, 0.7, Tensor::randn(5, c.context_dim, rng), {0, 1});
  const Tensor b = forward_velocity(ps, c, z, 0.7, Tensor::randn(9, c.context_dim, rng), {0, 1});
  CHECK(a.bit_equal(b));
}

TEST_CASE("part-ID table bounds") {
  const DiTConfig c = small_config();
  const ParameterSet ps = small_model(c, 6);
  Rng rng(7);
  const Tensor ctx = Tensor::randn(4, c.context_dim, rng);
  const Tensor z5 = Tensor::randn(5 * c.tokens_per_part, c.channels(), rng);
  CHECK_THROWS_AS(forward_velocity(ps, c, z5, 0.5, ctx, {0, 1, 2, 3, 0}), ConfigError);
  const Tensor z1 = Tensor::randn(c.tokens_per_part, c.channels(), rng);
  CHECK_THROWS_AS(forward_velocity(ps, c, z1, 0.5, ctx, {4}), ConfigError);
  CHECK_THROWS_AS(forward_velocity(ps, c, z1, 0.5, ctx, {0, 1}), DimensionError);
}

TEST_CASE("dit_forward and flow loss gradients match central differences") {
  const DiTConfig c = small_config();
  ParameterSet ps = small_model(c, 8);
  Rng rng(9);
  const Tensor z0 = Tensor::randn(2 * c.tokens_per_part, c.channels(), rng);
  const Tensor eps = Tensor::randn(2 * c.tokens_per_part, c.channels(), rng);
  const Tensor ctx = Tensor::randn(6, c.context_dim, rng);
  const Tensor pose = Tensor::randn(2, 4, rng);
  Rng probe(10);
  const double err = grad_check(
      [&](Graph& g) {
        Binder b(g, ps);
        const FlowLoss fl = flow_loss(b, c, z0, eps, 0.35, g.constant(ctx), {0, 1}, pose);
        return ops::add(fl.flow, fl.pose);
      },
      ps, 3, probe);
  CHECK(err < 1e-4);

  // Gradient with respect to the noisy input and the null context row.
  const double err_in = grad_check(
      [&](Graph& g, Var zt) {
        Binder b(g, ps);
        const DiTOutput out = dit_forward(b, c, zt, 0.6, g.constant(ctx), {1, 0});
        return ops::add(ops::mean(ops::square(out.velocity)), ops::sum(out.pose));
      },
      z0);
  CHECK(err_in < 1e-4);
  const double err_null = grad_check(
      [&](Graph& g) {
        Binder b(g, ps);
        const FusedContext nc = null_context(ps, 5);
        return ops::mean(ops::square(
            dit_forward(b, c, g.constant(z0), 0.2, context_var(b, nc), {0, 1}).velocity));
      },
      ps, 2, probe);
  CHECK(err_null < 1e-4);
}

TEST_CASE("total loss is the plain sum and its gradient the sum of gradients") {
  const DiTConfig c = small_config();
  ParameterSet ps = small_model(c, 11);
  Rng rng(12);
  const Tensor z0 = Tensor::randn(c.tokens_per_part, c.channels(), rng);
  const Tensor eps = Tensor::randn(c.tokens_per_part, c.channels(), rng);
  const Tensor ctx = Tensor::randn(3, c.context_dim, rng);
  const Tensor pose = Tensor::randn(1, 4, rng);
  auto grads = [&](int which) {
    ps.zero_grad();
    Graph g;
    Binder b(g, ps);
    const FlowLoss fl = flow_loss(b, c, z0, eps, 0.5, g.constant(ctx), {0}, pose);
    Var loss = which == 0 ? fl.flow : which == 1 ? fl.pose : total_loss(fl.flow, fl.pose);
    g.backward(loss);
    g.accumulate_param_grads();
    std::vector<double> out;
    for (std::size_t i = 0; i < ps.size(); ++i)
      out.insert(out.end(), ps.at(i).grad.data().begin(), ps.at(i).grad.data().end());
    return out;
  };
  const auto ga = grads(0), gb = grads(1), gs = grads(2);
  for (std::size_t i = 0; i < gs.size(); ++i)
    CHECK(std::abs(gs[i] - (ga[i] + gb[i])) <= 1e-12 * (1.0 + std::abs(gs[i])));

  Graph g;
  Var f = g.constant(Tensor(1, 1, 0.75));
  CHECK(total_loss(f, Var{}).value()[0] == 0.75);
  CHECK(total_loss(f, g.constant(Tensor(1, 1, 0.0))).value()[0] == 0.75);
}

TEST_CASE("flow interpolation endpoints and the regression fixed point") {
  Rng rng(13);
  const Tensor z0 = Tensor::randn(8, 2, rng), eps = Tensor::randn(8, 2, rng);
  CHECK(interpolate(z0, eps, 0.0).bit_equal(z0));
  CHECK(interpolate(z0, eps, 1.0).bit_equal(eps));
  const Tensor z1 = interpolate(z0, eps, 1.0);
  for (std::size_t i = 0; i < z0.size(); ++i) CHECK(z1[i] - z0[i] == eps[i] - z0[i]);

  // Zero output layer predicts 0, which is exactly eps - Z_0 when Z_0 = eps.
  const DiTConfig c = small_config();
  ParameterSet ps = small_model(c, 14, false);
  const Tensor z = Tensor::randn(c.tokens_per_part, c.channels(), rng);
  Graph g;
  Binder b(g, ps);
  const FlowLoss fl = flow_loss(b, c, z, z, 0.3, g.constant(Tensor::randn(2, c.context_dim, rng)),
                                {0}, Tensor(1, 4));
  CHECK(fl.flow.value()[0] == 0.0);
}

TEST_CASE("Euler integration with oracle velocities") {
  Rng rng(15);
  const Tensor z0 = Tensor::randn(16, 2, rng), eps = Tensor::randn(16, 2, rng);
  for (std::size_t steps : {10u, 100u}) {
    const Tensor out = euler_integrate(eps, steps, [&](const Tensor&, double) {
      Tensor v = eps;
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = eps[i] - z0[i];
      return v;
    });
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - z0[i]) < 1e-12);
  }

  // Curved field: exact marginal velocity for Z_0 ~ N(mu, s^2); the flow map
  // sends z1 to mu + s z1, and Euler converges at first order.
  const double mu = 1.5, s = 0.3;
  auto field = [&](const Tensor& z, double t) {
    const double var = (1 - t) * (1 - t) * s * s + t * t;
    Tensor v = z;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double dz = z[i] - (1 - t) * mu;
      v[i] = t / var * dz - (mu + (1 - t) * s * s / var * dz);
    }
    return v;
  };
  auto err = [&](std::size_t steps) {
    const Tensor out = euler_integrate(eps, steps, field);
    double e = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) e = std::max(e, std::abs(out[i] - (mu + s * eps[i])));
    return e;
  };
  const double e10 = err(10), e100 = err(100);
  CHECK(e100 < e10);
  CHECK(e10 / e100 > 5.0);
  CHECK(e10 / e100 < 20.0);

  std::vector<Tensor> traj;
  euler_integrate(eps, 4, field, &traj);
  CHECK(traj.size() == 5);
  CHECK(traj[0].bit_equal(eps));
  CHECK_THROWS_AS(euler_integrate(eps, 0, field), ConfigError);
}

TEST_CASE("CFG identities are exact") {
  Rng rng(16);
  const Tensor vu = Tensor::randn(4, 2, rng), vc = Tensor::randn(4, 2, rng);
  CHECK(cfg_combine(vu, vc, 1.0).bit_equal(vc));
  CHECK(cfg_combine(vu, vc, 0.0).bit_equal(vu));
  const Tensor mid = cfg_combine(vu, vc, 2.0);
  CHECK(mid[3] == vu[3] + 2.0 * (vc[3] - vu[3]));

  const DiTConfig c = small_config();
  const ParameterSet ps = small_model(c, 17);
  const FusedContext ctx = fuse_context(Tensor::randn(6, c.context_dim, rng), {});
  SampleConfig sc;
  sc.steps = 6;
  sc.seed = 3;
  auto only = [&](const FusedContext& fc) {
    Rng r(sc.seed);
    const Tensor z1 = Tensor::randn(2 * c.tokens_per_part, c.channels(), r);
    return euler_integrate(z1, sc.steps, [&](const Tensor& z, double t) {
      return forward_velocity(ps, c, z, t, fc.tokens, {0, 1});
    });
  };
  sc.cfg_scale = 1.0;
  std::vector<Tensor> traj;
  const Tensor cond = sample_tokens(ps, c, ctx, 2, sc, &traj);
  CHECK(cond.bit_equal(only(ctx)));
  sc.cfg_scale = 0.0;
  CHECK(sample_tokens(ps, c, ctx, 2, sc).bit_equal(only(null_context(ps, ctx.rows()))));
  sc.cfg_scale = 1.5;
  const Tensor a = sample_tokens(ps, c, ctx, 2, sc), b = sample_tokens(ps, c, ctx, 2, sc);
  CHECK(a.bit_equal(b));
  CHECK_FALSE(a.bit_equal(cond));
  sc.cfg_scale = -0.5;
  CHECK_THROWS_AS(sample_tokens(ps, c, ctx, 2, sc), ConfigError);
}

TEST_CASE("latent and pose standardization round trips") {
  const DiTConfig c = small_config();
  ParameterSet ps = small_model(c, 18);
  Rng rng(19);
  std::vector<PartLatent> parts;
  for (int i = 0; i < 10; ++i)
    parts.push_back(PartLatent{Tensor::randn(1, c.latent_dim, rng), i % 3,
                               Pose{{rng.normal(), rng.normal(), rng.normal()}, rng.uniform(0.1, 1)}});
  fit_generator_stats(ps, parts);
  std::vector<Tensor> z{parts[0].z, parts[1].z};
  const Tensor tok = latents_to_tokens(ps, c, z);
  CHECK(tok.rows() == 2 * c.tokens_per_part);
  const auto back = tokens_to_latents(ps, c, tok);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < c.latent_dim; ++j) CHECK(std::abs(back[i][j] - z[i][j]) < 1e-12);
  // Token r of a part carries latent entries [r c, r c + c).
  const double m1 = ps.get("dit.stats.z_mean").value[3], s1 = ps.get("dit.stats.z_std").value[3];
  CHECK(std::abs(tok(1, 1) - (z[0][3] - m1) / s1) < 1e-15);

  const auto poses = targets_to_poses(ps, poses_to_targets(ps, {parts[2].transform}));
  for (int a = 0; a < 3; ++a)
    CHECK(std::abs(poses[0].translation[a] - parts[2].transform.translation[a]) < 1e-12);
  CHECK(std::abs(poses[0].scale - parts[2].transform.scale) < 1e-12);
}

TEST_CASE("stage-2 learning-rate tiers") {
  GeneratorTrainConfig cfg;
  CHECK(stage2_multiplier("hcr.patch.w1", cfg) == 0.0);
  CHECK(stage2_multiplier("hcr.part.w2", cfg) == 0.0);
  CHECK(stage2_multiplier("dit.stats.z_mean", cfg) == 0.0);
  CHECK(stage2_multiplier("dit.blk3.ls.q", cfg) == cfg.block_multiplier);
  CHECK(stage2_multiplier("hcr.head.img_part.w1", cfg) == cfg.new_multiplier);
  CHECK(stage2_multiplier("dit.pose.w1", cfg) == cfg.new_multiplier);
  CHECK(cfg.block_multiplier < cfg.new_multiplier);
}

TEST_CASE("training and sampling smoke run") {
  CorpusConfig cc;
  cc.n_train = 12;
  cc.n_heldout = 2;
  cc.max_parts = 4;
  const EncoderConfig enc;
  const Corpus corpus = build_corpus(cc, enc);
  Rng rng(20);
  const ParameterSet retriever = init_retriever(enc, rng);
  const RetrievalIndex index = build_index(retriever, corpus.train, enc);

  GeneratorTrainConfig gc;
  gc.dit.n_blocks = 2;
  gc.dit.global_blocks = {0};
  gc.stage1_steps = 3;
  gc.stage2_steps = 2;
  gc.batch = 3;
  gc.k = 2;
  gc.hcr.queue = 64;
  gc.log_every = 1;
  ParameterSet init;
  init_generator(init, gc.dit, rng);
  const auto a = train_generator(corpus, enc, retriever, index, gc, init);
  const auto b = train_generator(corpus, enc, retriever, index, gc, init);
  REQUIRE(a.log.size() == 5);
  CHECK(a.log[0].stage == 1);
  CHECK(a.log[4].stage == 2);
  CHECK(a.log[4].hcr > 0.0);
  CHECK(a.params.contains("hcr.head.img_part.w1"));
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i)
    CHECK(a.params.at(i).value.bit_equal(b.params.at(i).value));
  // Frozen encoder copy and stats never move after being set.
  CHECK(a.params.get("hcr.patch.w1").value.bit_equal(retriever.get("patch.w1").value));

  SampleConfig sc;
  sc.steps = 4;
  sc.k = 2;
  const SampleResult s = sample(a.params, gc.dit, retriever, index, corpus.heldout[0].views[0], 3,
                                sc, enc);
  CHECK(s.parts.size() == 3);
  CHECK(s.retrieved.size() == 2);
  for (const auto& m : s.meshes) {
    const Aabb box = m.bounds();
    for (int ax = 0; ax < 3; ++ax) {
      CHECK(box.lo[ax] >= -1.0 - 1e-9);
      CHECK(box.hi[ax] <= 1.0 + 1e-9);
    }
  }
  const SampleResult again = sample(a.params, gc.dit, retriever, index,
                                    corpus.heldout[0].views[0], 3, sc, enc);
  CHECK(again.parts[1].z.bit_equal(s.parts[1].z));

  ParameterSet other = retriever;
  other.at(0).value[0] += 1e-3;
  CHECK_THROWS_AS(sample(a.params, gc.dit, other, index, corpus.heldout[0].views[0], 3, sc, enc),
                  FingerprintError);
}
