#include "partrag/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "partrag/errors.hpp"

namespace partrag {

namespace {

constexpr std::size_t kDecoderOut = kPrimitiveKinds + 6;

Vec3 local_target_size(const PrimitiveSpec& p) {
  const PrimitiveSpec c = p.canonicalized();
  return c.size;
}

}  // namespace

PrimitiveSpec DecodedPrimitive::local() const {
  PrimitiveSpec p;
  p.kind = kind;
  p.size = size;
  p.pose.translation = offset;
  return p.canonicalized();
}

void init_encoders(ParameterSet& ps, const EncoderConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.width, h = cfg.hidden;
  ps.add("patch.w1", glorot(cfg.patch_dim(), h, rng));
  ps.add("patch.w2", glorot(h, d, rng));
  ps.add("patch.pos", Tensor::randn(cfg.tokens(), d, rng, 0.1));

  ps.add("part.w1", glorot(3, h, rng));
  ps.add("part.b1", Tensor(1, h));
  ps.add("part.w2", glorot(h, d, rng));
  ps.add("part.b2", Tensor(1, d));
  ps.add("part.w3", glorot(d, d, rng));
  ps.add("part.b3", Tensor(1, d));

  add_mlp(ps, "dec", d, h, kDecoderOut, rng);
}

Tensor patch_pixels(const DepthRender& r, const EncoderConfig& cfg) {
  if (r.height != cfg.render_size || r.width != cfg.render_size)
    throw DimensionError("patch_pixels: render " + std::to_string(r.height) + "x" +
                         std::to_string(r.width) + ", expected " +
                         std::to_string(cfg.render_size));
  const int p = cfg.patch;
  const auto g = static_cast<int>(cfg.grid());
  const double far = kCameraDistance + std::sqrt(3.0);
  const double span = 2.0 * std::sqrt(3.0);
  Tensor out(cfg.tokens(), cfg.patch_dim());
  for (int pr = 0; pr < g; ++pr) {
    for (int pc = 0; pc < g; ++pc) {
      auto row = out.row_span(static_cast<std::size_t>(pr * g + pc));
      std::size_t k = 0;
      for (int i = 0; i < p; ++i) {
        for (int j = 0; j < p; ++j) {
          const int rr = pr * p + i, cc = pc * p + j;
          if (r.mask_at(rr, cc) != 0) {
            row[k] = 1.0;
            row[k + 1] = (far - r.depth_at(rr, cc)) / span;
          }
          k += 2;
        }
      }
    }
  }
  return out;
}

Var encode_patches(Binder& b, Var pixels) {
  Var h = ops::gelu(ops::matmul(pixels, b("patch.w1")));
  return ops::add(ops::matmul(h, b("patch.w2")), b("patch.pos"));
}

Tensor encode_patches(const ParameterSet& ps, const DepthRender& r, const EncoderConfig& cfg) {
  Graph g;
  Binder b(g, ps);
  return encode_patches(b, g.constant(patch_pixels(r, cfg))).value();
}

std::vector<std::size_t> patch_membership(const DepthRender& r, std::size_t part,
                                          const EncoderConfig& cfg) {
  return patch_members(r, static_cast<std::int32_t>(part + 1), cfg.patch, cfg.membership);
}

std::vector<std::size_t> foreground_membership(const DepthRender& r, const EncoderConfig& cfg) {
  DepthRender fg = r;
  for (auto& m : fg.part_mask) m = m != 0 ? 1 : 0;
  return patch_members(fg, 1, cfg.patch, cfg.membership);
}

Var pool_part_features(Var tokens, const std::vector<std::size_t>& members) {
  if (members.empty()) throw PartInvisibleError("pool_part_features: no member patches");
  return ops::mean_rows(ops::gather_rows(tokens, members));
}

Tensor pool_part_features(const Tensor& tokens, const std::vector<std::size_t>& members) {
  Graph g;
  return pool_part_features(g.constant(tokens), members).value();
}

Var object_pool(const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("object_pool: no parts");
  return ops::mean_rows(ops::concat_rows(xs));
}

Tensor object_pool(const std::vector<Tensor>& xs) {
  Graph g;
  std::vector<Var> vs;
  for (const auto& x : xs) vs.push_back(g.constant(x));
  return object_pool(vs).value();
}

Var encode_part(Binder& b, Var points) {
  Var h = ops::relu(ops::linear(points, b("part.w1"), b("part.b1")));
  h = ops::relu(ops::linear(h, b("part.w2"), b("part.b2")));
  return ops::linear(ops::max_rows(h), b("part.w3"), b("part.b3"));
}

Tensor encode_part(const ParameterSet& ps, const Tensor& points) {
  Graph g;
  Binder b(g, ps);
  return encode_part(b, g.constant(points)).value();
}

Tensor local_part_points(const PrimitiveSpec& part, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const PointCloud pc = sample_points(part_frame(part).local, n, rng);
  Tensor t(n, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) t(i, c) = pc.points[i][c];
  return t;
}

DecoderVars decode_head(Binder& b, Var z) {
  Var out = mlp(b, "dec", z);
  DecoderVars d;
  d.logits = ops::slice_cols(out, 0, kPrimitiveKinds);
  d.size = ops::add_scalar(ops::softplus(ops::slice_cols(out, kPrimitiveKinds, 3)), 1e-3);
  d.offset = ops::slice_cols(out, kPrimitiveKinds + 3, 3);
  return d;
}

DecodedPrimitive decode_primitive(const ParameterSet& ps, const Tensor& z) {
  Graph g;
  Binder b(g, ps);
  const DecoderVars d = decode_head(b, g.constant(z));
  const Tensor& logits = d.logits.value();
  std::size_t best = 0;
  for (std::size_t k = 1; k < kPrimitiveKinds; ++k)
    if (logits[k] > logits[best]) best = k;
  DecodedPrimitive out;
  out.kind = static_cast<PrimitiveKind>(best);
  const Tensor& s = d.size.value();
  out.size = {s[0], s[1], s[2]};
  // Fold the symmetric extents the kind ignores into the ones it keeps.
  if (out.kind == PrimitiveKind::cylinder || out.kind == PrimitiveKind::cone) {
    out.size[0] = out.size[2] = 0.5 * (s[0] + s[2]);
  } else if (out.kind == PrimitiveKind::sphere) {
    const double r = (s[0] + s[1] + s[2]) / 3.0;
    out.size = {r, r, r};
  }
  const Tensor& o = d.offset.value();
  out.offset = {o[0], o[1], o[2]};
  return out;
}

Mesh decode_part(const ParameterSet& ps, const PartLatent& latent, int segments) {
  if (!(latent.transform.scale > 0.0))
    throw DegenerateInputError("decode_part: non-positive pose scale");
  return transformed(tessellate(decode_primitive(ps, latent.z).local(), segments),
                     latent.transform);
}

Var autoencode_loss(Binder& b, Var z, const std::vector<PrimitiveSpec>& local_targets) {
  Graph& g = b.graph();
  const std::size_t n = local_targets.size();
  if (z.rows() != n) throw DimensionError("autoencode_loss: latent/target count mismatch");
  const DecoderVars d = decode_head(b, z);
  std::vector<std::size_t> kinds(n);
  Tensor sizes(n, 3), offsets(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    kinds[i] = static_cast<std::size_t>(local_targets[i].kind);
    const Vec3 s = local_target_size(local_targets[i]);
    for (std::size_t c = 0; c < 3; ++c) {
      sizes(i, c) = s[c];
      offsets(i, c) = local_targets[i].pose.translation[c];
    }
  }
  Var ce = ops::cross_entropy(d.logits, kinds);
  Var size = ops::mse(d.size, g.constant(sizes));
  Var off = ops::mse(d.offset, g.constant(offsets));
  return ops::add(ce, ops::add(size, off));
}

}  // namespace partrag
