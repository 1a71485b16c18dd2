#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "partrag/editor.hpp"
#include "partrag/errors.hpp"
#include "partrag/hcr.hpp"

using namespace partrag;

namespace {

struct Fixture {
  EncoderConfig enc;
  Corpus corpus;
  ParameterSet retriever;
  RetrievalIndex index;
  DiTConfig dit;
  ParameterSet gen;

  Fixture() {
    CorpusConfig cc;
    cc.n_train = 10;
    cc.n_heldout = 4;
    cc.max_parts = 6;
    corpus = build_corpus(cc, enc);
    Rng rng(3);
    retriever = init_retriever(enc, rng);
    index = build_index(retriever, corpus.train, enc);
    dit.n_blocks = 2;
    dit.global_blocks = {0};
    dit.width = 16;
    dit.tokens_per_part = 4;
    init_generator(gen, dit, rng);
    gen.get("dit.out.w").value = Tensor::randn(dit.width, dit.channels(), rng, 0.3);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

bool latents_equal(const PartLatent& a, const PartLatent& b) {
  return a.z.bit_equal(b.z) && a.part_id == b.part_id && a.transform == b.transform;
}

}  // namespace

TEST_CASE("op names") {
  CHECK(op_from_name("refine") == EditOp::refine);
  CHECK(op_name(EditOp::compose) == "compose");
  CHECK_THROWS_AS(op_from_name("merge"), EditError);
}

TEST_CASE("request validation") {
  const Tensor c(1, 4, 1.0);
  EditRequest r;
  r.targets = {EditTarget{{}, c}};
  CHECK_THROWS_AS(validate_request(r, 3), EditError);
  r.targets = {EditTarget{{3}, c}};
  CHECK_THROWS_AS(validate_request(r, 3), EditError);
  r.targets = {EditTarget{{1}, Tensor(1, 4)}};
  CHECK_THROWS_AS(validate_request(r, 3), EditError);
  r.targets = {EditTarget{{1}, c}, EditTarget{{2}, c}};
  CHECK_THROWS_AS(validate_request(r, 3), EditError);
  r.op = EditOp::compose;
  CHECK_NOTHROW(validate_request(r, 3));
  r.targets = {EditTarget{{0, 1}, c}, EditTarget{{1, 2}, c}};
  CHECK_THROWS_AS(validate_request(r, 3), EditError);
  r.targets = {};
  CHECK_NOTHROW(validate_request(r, 3));
  r.op = EditOp::refine;
  r.targets = {EditTarget{{0}, c}};
  r.alpha = 1.5;
  CHECK_THROWS_AS(validate_request(r, 3), EditError);
}

TEST_CASE("label condition is the normalized mean of stored part embeddings") {
  const auto& f = fixture();
  const int label = f.index.entries[0].parts[0].label;
  std::vector<double> sum(f.enc.width, 0.0);
  for (const auto& e : f.index.entries)
    for (const auto& p : e.parts)
      if (p.label == label)
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += p.embedding[i];
  double n = 0.0;
  for (double v : sum) n += v * v;
  const Tensor c = label_condition(f.index, label);
  for (std::size_t i = 0; i < sum.size(); ++i) CHECK(std::abs(c[i] - sum[i] / std::sqrt(n)) < 1e-12);
  CHECK_THROWS_AS(label_condition(f.index, 99), QueryError);
  CHECK(part_condition(f.index, 1, 0).bit_equal(f.index.entries[1].parts[0].embedding));
  CHECK_THROWS_AS(part_condition(f.index, 1, 50), QueryError);
  const Tensor rc = render_condition(f.retriever, f.corpus.heldout[0].views[0], f.enc);
  CHECK(rc.cols() == f.enc.width);
}

TEST_CASE("exemplar retrieval matches a full part-level sort") {
  const auto& f = fixture();
  Rng rng(4);
  struct Row {
    std::string id;
    std::size_t entry, part;
    double score;
  };
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor q = Tensor::randn(1, f.enc.width, rng);
    double qn = 0.0;
    for (double v : q.data()) qn += v * v;
    std::vector<Row> rows;
    for (std::size_t e = 0; e < f.index.size(); ++e)
      for (std::size_t p = 0; p < f.index.entries[e].parts.size(); ++p) {
        const Tensor& x = f.index.entries[e].parts[p].embedding;
        double d = 0.0, xn = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          d += q[i] * x[i];
          xn += x[i] * x[i];
        }
        rows.push_back({f.index.entries[e].asset_id, e, p, d / std::sqrt(qn * xn)});
      }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.id != b.id ? a.id < b.id : a.part < b.part;
    });
    const auto ex = retrieve_exemplars(f.index, q, 5);
    REQUIRE(ex.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(ex[i].hit.entry == rows[i].entry);
      CHECK(ex[i].hit.part == rows[i].part);
      CHECK(std::abs(ex[i].hit.score - rows[i].score) < 1e-9);
      CHECK(ex[i].latent.z.bit_equal(f.index.entries[rows[i].entry].parts[rows[i].part].latent.z));
    }
  }
  const auto self = retrieve_exemplars(f.index, f.index.entries[3].parts[1].embedding);
  CHECK(self.size() == 3);
  CHECK(self[0].hit.entry == 3);
  CHECK(self[0].hit.part == 1);
  CHECK_THROWS_AS(retrieve_exemplars(RetrievalIndex{}, f.index.entries[0].embedding), QueryError);
}

TEST_CASE("alignment keeps the target pose and refine interpolates") {
  Rng rng(5);
  const PartLatent target{Tensor::randn(1, 6, rng), 2, Pose{{0.1, -0.2, 0.3}, 0.4}};
  const PartLatent ex{Tensor::randn(1, 6, rng), 0, Pose{{0.9, 0.9, 0.9}, 1.0}};
  const PartLatent a = align_exemplar(ex, target);
  CHECK(a.z.bit_equal(ex.z));
  CHECK(a.part_id == 2);
  CHECK(a.transform == target.transform);
  CHECK(latents_equal(align_exemplar(target, target), target));

  const Tensor c1 = Tensor::randn(1, 6, rng), c2 = Tensor::randn(1, 6, rng);
  CHECK(refine_init(target.z, {c1, c2}, 0.0).bit_equal(target.z));
  const Tensor one = refine_init(target.z, {c1, c2}, 1.0);
  const Tensor mid = refine_init(target.z, {c1}, 0.5);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(std::abs(one[i] - (c1[i] + c2[i]) / 2) < 1e-15);
    CHECK(std::abs(mid[i] - (target.z[i] + c1[i]) / 2) < 1e-15);
  }
  CHECK_THROWS_AS(refine_init(target.z, {}, 0.5), EditError);
}

TEST_CASE("masked denoising freezes non-target parts bit-exactly") {
  const auto& f = fixture();
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto& obj = f.corpus.train[rng.below(f.corpus.train.size())];
    std::vector<PartLatent> parts;
    for (std::size_t i = 0; i < obj.n_parts(); ++i)
      parts.push_back(f.index.entries[0].parts[0].latent);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      parts[i].z = Tensor::randn(1, f.enc.width, rng);
      parts[i].part_id = static_cast<int>(i);
      parts[i].transform = Pose{{rng.normal(), rng.normal(), rng.normal()}, rng.uniform(0.1, 1)};
    }
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (rng.uniform() < 0.4) targets.push_back(i);
    const FusedContext ctx = fuse_context(Tensor::randn(3, f.dit.context_dim, rng), {});
    DenoiseStats st;
    const auto out = masked_denoise(f.gen, f.dit, parts, targets, ctx, 1 + rng.below(3), 0.5, 1.5,
                                    trial, &st);
    REQUIRE(out.size() == parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
      CHECK(out[i].transform == parts[i].transform);
      if (!std::binary_search(targets.begin(), targets.end(), i)) CHECK(latents_equal(out[i], parts[i]));
      else CHECK_FALSE(out[i].z.bit_equal(parts[i].z));
    }
    CHECK(st.channels_total == parts.size() * f.dit.tokens_per_part * f.dit.channels());
    CHECK(st.channels_updated * parts.size() == targets.size() * st.channels_total);
  }
}

TEST_CASE("masked denoising edge cases") {
  const auto& f = fixture();
  Rng rng(7);
  std::vector<PartLatent> parts(3, f.index.entries[0].parts[0].latent);
  for (std::size_t i = 0; i < 3; ++i) parts[i].part_id = static_cast<int>(i);
  const FusedContext ctx = fuse_context(Tensor::randn(3, f.dit.context_dim, rng), {});
  const auto same = masked_denoise(f.gen, f.dit, parts, {}, ctx, 20, 0.5, 1.5, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(latents_equal(same[i], parts[i]));
  // No re-noising and zero step size leaves the latents up to standardization round-off.
  const auto still = masked_denoise(f.gen, f.dit, parts, {0, 2}, ctx, 4, 0.0, 1.5, 1);
  for (std::size_t i = 0; i < f.enc.width; ++i) CHECK(std::abs(still[0].z[i] - parts[0].z[i]) < 1e-12);
  const auto a = masked_denoise(f.gen, f.dit, parts, {1}, ctx, 5, 0.5, 1.5, 9);
  const auto b = masked_denoise(f.gen, f.dit, parts, {1}, ctx, 5, 0.5, 1.5, 9);
  CHECK(a[1].z.bit_equal(b[1].z));
  CHECK_THROWS_AS(masked_denoise(f.gen, f.dit, parts, {1}, ctx, 0, 0.5, 1.5, 9), ConfigError);
}

TEST_CASE("boundary smoothing") {
  EditConfig cfg;
  const Mesh frozen = tessellate(PrimitiveSpec{PrimitiveKind::box, {0.5, 0.5, 0.5}, Pose{}, 0});
  SUBCASE("disjoint mesh is untouched") {
    const Mesh far = tessellate(
        PrimitiveSpec{PrimitiveKind::box, {0.2, 0.2, 0.2}, Pose{{0.9, 0, 0}, 1}, 0});
    const SmoothResult s = boundary_smooth(far, {frozen}, cfg);
    CHECK(s.seam.empty());
    CHECK(s.mesh == far);
  }
  SUBCASE("seam discontinuity never increases and frozen stays put") {
    Rng rng(8);
    std::size_t with_seam = 0;
    for (int trial = 0; trial < 40; ++trial) {
      const Vec3 c{0.5 + rng.uniform(0.1, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};
      const auto kind = static_cast<PrimitiveKind>(rng.below(4));
      const Mesh edited = tessellate(PrimitiveSpec{kind, {0.15, 0.15, 0.15}, Pose{c, 1.0}, 0});
      const Mesh frozen_copy = frozen;
      const SmoothResult s = boundary_smooth(edited, {frozen_copy}, cfg, trial);
      CHECK(frozen_copy == frozen);
      // Independent recomputation of the metric on both meshes.
      double before = 0.0, after = 0.0;
      for (std::uint32_t v : s.seam) {
        before += point_mesh_distance(edited.vertices[v], frozen);
        after += point_mesh_distance(s.mesh.vertices[v], frozen);
        CHECK(point_mesh_distance(edited.vertices[v], frozen) <= cfg.eps_seam);
      }
      CHECK(after <= before);
      if (!s.seam.empty()) {
        ++with_seam;
        CHECK(std::abs(s.before - before / s.seam.size()) < 1e-12);
        CHECK(std::abs(s.after - after / s.seam.size()) < 1e-12);
      }
      for (std::size_t v = 0; v < edited.vertices.size(); ++v) {
        const bool seam = std::find(s.seam.begin(), s.seam.end(), v) != s.seam.end();
        if (!seam && point_mesh_distance(edited.vertices[v], frozen) <= cfg.eps_seam)
          FAIL("seam vertex missed");
      }
    }
    CHECK(with_seam > 5);
  }
  SUBCASE("empty mesh is an error") {
    CHECK_THROWS_AS(boundary_smooth(Mesh{}, {frozen}, cfg), DegenerateInputError);
  }
}

TEST_CASE("edit operations") {
  const auto& f = fixture();
  const auto& obj = f.corpus.heldout[0];
  REQUIRE(obj.n_parts() >= 2);
  const EditableAsset asset = asset_from_object(f.retriever, f.index, obj, f.enc);
  const Tensor cond = label_condition(f.index, obj.spec.parts[0].label);
  EditRequest req;
  req.targets = {EditTarget{{0}, cond}};
  req.k_steps = 3;
  req.theta = -1.0;

  SUBCASE("swap") {
    const EditResult r = edit(req, asset, f.gen, f.dit, f.retriever, f.index);
    CHECK(r.accepted);
    CHECK(r.retries == 0);
    CHECK(r.exemplars.at(0).size() == 3);
    CHECK(r.parts[0].transform == asset.parts[0].transform);
    for (std::size_t i = 1; i < asset.parts.size(); ++i) CHECK(latents_equal(r.parts[i], asset.parts[i]));
    CHECK(r.channels_updated * asset.parts.size() == r.channels_total);
    CHECK(r.preservation_pre == 1.0);
    CHECK(r.preservation_post >= 0.98);
    CHECK(r.seam_after <= r.seam_before);
    const EditResult again = edit(req, asset, f.gen, f.dit, f.retriever, f.index);
    CHECK(again.to_json() == r.to_json());
  }
  SUBCASE("validation bounds") {
    req.theta = 1.0 + 1e-9;
    const EditResult r = edit(req, asset, f.gen, f.dit, f.retriever, f.index);
    CHECK_FALSE(r.accepted);
    CHECK(r.retries == 3);
    CHECK(r.attempts.size() == 3);
    for (std::size_t i = 0; i < asset.parts.size(); ++i) CHECK(latents_equal(r.parts[i], asset.parts[i]));
    CHECK(r.channels_updated == 0);
  }
  SUBCASE("refine with alpha 0 keeps geometry") {
    req.op = EditOp::refine;
    req.alpha = 0.0;
    const EditResult r = edit(req, asset, f.gen, f.dit, f.retriever, f.index);
    REQUIRE(r.accepted);
    const Mesh before = decode_part(f.retriever, asset.parts[0]);
    // The returned (smoothed) mesh, not just the latent.
    const Mesh& after = r.meshes[0];
    REQUIRE(before.vertices.size() == after.vertices.size());
    for (std::size_t v = 0; v < before.vertices.size(); ++v)
      CHECK(norm(before.vertices[v] - after.vertices[v]) < 1e-9);
  }
  SUBCASE("compose") {
    req.op = EditOp::compose;
    req.targets.push_back(EditTarget{{1}, label_condition(f.index, obj.spec.parts[1].label)});
    const EditResult r = edit(req, asset, f.gen, f.dit, f.retriever, f.index);
    CHECK(r.accepted);
    CHECK(r.edited == std::vector<std::size_t>{0, 1});
    CHECK(r.attempts[0].similarity.size() == 2);
    CHECK(r.channels_updated * asset.parts.size() == 2 * r.channels_total);
    for (std::size_t i = 2; i < asset.parts.size(); ++i) CHECK(latents_equal(r.parts[i], asset.parts[i]));

    req.targets[1].parts = {0};
    CHECK_THROWS_AS(edit(req, asset, f.gen, f.dit, f.retriever, f.index), EditError);
    req.targets.clear();
    const EditResult none = edit(req, asset, f.gen, f.dit, f.retriever, f.index);
    CHECK(none.accepted);
    for (std::size_t i = 0; i < asset.parts.size(); ++i) CHECK(latents_equal(none.parts[i], asset.parts[i]));
  }
}

TEST_CASE("mesh files") {
  const Mesh m = tessellate(PrimitiveSpec{PrimitiveKind::cylinder, {0.3, 0.5, 0.3}, Pose{}, 0});
  const std::string bytes = serialize_mesh(m);
  CHECK(bytes.substr(0, 4) == "PRTM");
  CHECK(deserialize_mesh(bytes) == m);
  CHECK_THROWS_AS(deserialize_mesh(bytes.substr(0, bytes.size() - 1)), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_mesh(bad), FormatError);
  bad = bytes;
  bad[bytes.size() - 4] = '\xff';
  CHECK_THROWS_AS(deserialize_mesh(bad), FormatError);
  const auto path = std::filesystem::temp_directory_path() / "partrag_test_mesh.prtm";
  save_mesh(path, m);
  CHECK(load_mesh(path) == m);
  std::filesystem::remove(path);
}

TEST_CASE("theta calibration keeps 90 percent") {
  const auto& f = fixture();
  EditConfig cfg;
  const std::vector<CorpusObject> objs(f.corpus.heldout.begin(), f.corpus.heldout.begin() + 2);
  const ThetaCalibration c = calibrate_theta(objs, f.gen, f.dit, f.retriever, f.index, f.enc, cfg);
  CHECK(c.similarity.size() == objs[0].n_parts() + objs[1].n_parts());
  CHECK(c.pass_rate(c.theta90) >= 0.9);
  CHECK(c.pass_rate(-1.0) == 1.0);
}
