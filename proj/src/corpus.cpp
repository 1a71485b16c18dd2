#include "partrag/corpus.hpp"

#include <cstdio>

#include "partrag/errors.hpp"
#include "partrag/parallel.hpp"

namespace partrag {

std::size_t CorpusObject::pool_view(std::size_t part, std::size_t preferred) const {
  if (!members[preferred][part].empty()) return preferred;
  for (std::size_t v = 0; v < members.size(); ++v)
    if (!members[v][part].empty()) return v;
  throw PartInvisibleError(asset_id + ": part " + std::to_string(part) +
                           " has no member patch in any view");
}

std::string asset_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "a%05zu", index);
  return buf;
}

PartObjectSpec corpus_spec(const CorpusConfig& cfg, std::size_t index) {
  Rng rng = Rng(cfg.seed).fork(index);
  const auto span = static_cast<std::uint64_t>(cfg.max_parts - cfg.min_parts + 1);
  const int n = cfg.min_parts + static_cast<int>(rng.below(span));
  return sorted_parts(generate_object(rng.next_u64(), n, cfg.synth));
}

CorpusObject prepare_object(std::string asset_id, const PartObjectSpec& spec,
                            const EncoderConfig& enc, const SynthConfig& synth) {
  CorpusObject o;
  o.asset_id = std::move(asset_id);
  o.spec = spec;
  for (const auto& v : canonical_views(synth.elevation_deg, synth.views)) {
    o.views.push_back(render_depth(spec, v, enc.render_size));
    o.pixels.push_back(patch_pixels(o.views.back(), enc));
    std::vector<std::vector<std::size_t>> m;
    for (std::size_t i = 0; i < spec.parts.size(); ++i)
      m.push_back(patch_membership(o.views.back(), i, enc));
    o.members.push_back(std::move(m));
  }
  for (std::size_t i = 0; i < spec.parts.size(); ++i) {
    o.frames.push_back(part_frame(spec.parts[i]));
    o.points.push_back(local_part_points(spec.parts[i], enc.points_per_part,
                                         Rng::mix(spec.seed ^ (0x51ed27ULL * (i + 1)))));
  }
  return o;
}

std::vector<CorpusObject> prepare_objects(const std::vector<std::string>& ids,
                                          const std::vector<PartObjectSpec>& specs,
                                          const EncoderConfig& enc, const SynthConfig& synth) {
  std::vector<CorpusObject> out(specs.size());
  parallel_for(specs.size(),
               [&](std::size_t k) { out[k] = prepare_object(ids[k], specs[k], enc, synth); });
  return out;
}

Corpus build_corpus(const CorpusConfig& cfg, const EncoderConfig& enc) {
  const std::size_t total = cfg.n_train + cfg.n_heldout;
  std::vector<std::string> ids(total);
  std::vector<PartObjectSpec> specs(total);
  parallel_for(total, [&](std::size_t k) {
    ids[k] = asset_name(k);
    specs[k] = corpus_spec(cfg, k);
  });
  std::vector<CorpusObject> all = prepare_objects(ids, specs, enc, cfg.synth);
  Corpus c;
  c.train.assign(std::make_move_iterator(all.begin()),
                 std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cfg.n_train)));
  c.heldout.assign(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cfg.n_train)),
                   std::make_move_iterator(all.end()));
  return c;
}

}  // namespace partrag
