#include "partrag/index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "partrag/errors.hpp"
#include "partrag/hcr.hpp"
#include "partrag/parallel.hpp"

namespace partrag {

namespace {

constexpr std::uint32_t kIndexVersion = 1;

Tensor round_f32(Tensor t) {
  for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double cosine(const Tensor& unit_q, const Tensor& e) {
  double dot = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    dot += unit_q[i] * e[i];
    n2 += e[i] * e[i];
  }
  return n2 > 0.0 ? dot / std::sqrt(n2) : 0.0;
}

Tensor unit_query(const Tensor& q) {
  double n2 = 0.0;
  for (double v : q.data()) n2 += v * v;
  if (!(n2 > 0.0) || !std::isfinite(n2)) throw QueryError("query vector must be nonzero and finite");
  return l2_normalize(q.rank() == 1 ? Tensor({1, q.size()}, {q.data().begin(), q.data().end()})
                                    : q);
}

void write_block(ByteWriter& w, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.rows()));
  w.u32(static_cast<std::uint32_t>(t.cols()));
  for (double v : t.data()) w.f32(static_cast<float>(v));
}

Tensor read_block(ByteReader& r) {
  const std::size_t rows = r.u32(), cols = r.u32();
  if (rows * cols * 4 > r.remaining()) throw FormatError("index: truncated tensor block");
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = static_cast<double>(r.f32());
  return t;
}

}  // namespace

bool operator==(const RetrievalIndex& a, const RetrievalIndex& b) {
  return serialize_index(a) == serialize_index(b);
}

Tensor query_embedding(const ParameterSet& retriever, const DepthRender& r,
                       const EncoderConfig& enc) {
  const Tensor tokens = encode_patches(retriever, r, enc);
  const auto fg = foreground_membership(r, enc);
  if (fg.empty()) throw QueryError("query render has no foreground patch");
  return image_object_embedding(retriever, tokens, fg);
}

IndexEntry make_entry(const ParameterSet& retriever, const CorpusObject& object,
                      const EncoderConfig& enc) {
  IndexEntry e;
  e.asset_id = object.asset_id;
  Tensor sum(1, enc.width);
  for (std::size_t v = 0; v < object.views.size(); ++v) {
    Graph g;
    Binder b(g, retriever);
    const Tensor tokens = encode_patches(b, g.constant(object.pixels[v])).value();
    if (v == 0) e.tokens = round_f32(tokens);
    const auto fg = foreground_membership(object.views[v], enc);
    const Tensor emb = image_object_embedding(retriever, tokens, fg);
    for (std::size_t c = 0; c < enc.width; ++c) sum[c] += emb[c];
  }
  e.embedding = round_f32(l2_normalize(sum));
  for (std::size_t i = 0; i < object.n_parts(); ++i) {
    PartEntry p;
    p.label = object.spec.parts[i].label;
    p.latent.z = round_f32(encode_part(retriever, object.points[i]));
    p.latent.part_id = static_cast<int>(i);
    const Pose& t = object.frames[i].transform;
    p.latent.transform = Pose{{round_f32(t.translation[0]), round_f32(t.translation[1]),
                               round_f32(t.translation[2])},
                              round_f32(t.scale)};
    p.embedding = round_f32(shape_part_embedding(retriever, p.latent.z));
    e.parts.push_back(std::move(p));
  }
  return e;
}

RetrievalIndex build_index(const ParameterSet& retriever, const std::vector<CorpusObject>& objects,
                           const EncoderConfig& enc) {
  RetrievalIndex idx;
  idx.fingerprint = params_fingerprint(retriever);
  idx.entries.resize(objects.size());
  parallel_for(objects.size(),
               [&](std::size_t i) { idx.entries[i] = make_entry(retriever, objects[i], enc); });
  for (std::size_t i = 1; i < idx.entries.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (idx.entries[i].asset_id == idx.entries[j].asset_id)
        throw ConfigError("build_index: duplicate asset id " + idx.entries[i].asset_id);
  return idx;
}

std::vector<std::size_t> curate_kmeans(const Tensor& x, std::size_t target, std::uint64_t seed,
                                       KmeansTrace* trace) {
  const std::size_t n = x.rows(), d = x.cols();
  if (target == 0 || target > n)
    throw ConfigError("curate_kmeans: target " + std::to_string(target) + " not in [1, " +
                      std::to_string(n) + "]");
  if (target == n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  Rng rng(seed);
  Tensor c(target, d);
  auto set_centroid = [&](std::size_t k, std::size_t row) {
    std::copy(x.row_span(row).begin(), x.row_span(row).end(), c.row_span(k).begin());
  };

  // k-means++ seeding.
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);
  std::size_t first = rng.below(n);
  set_centroid(0, first);
  chosen[first] = true;
  for (std::size_t k = 1; k < target; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sq_dist(x.row_span(i), c.row_span(k - 1)));
      total += nearest[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += nearest[i];
        if (acc > u && nearest[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    if (pick == n) {
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (!chosen[i] && nearest[i] > 0.0) pick = i;
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (!chosen[i]) pick = i;
    }
    set_centroid(k, pick);
    chosen[pick] = true;
  }

  std::vector<std::size_t> assign(n, 0);
  std::vector<double> dist(n, 0.0);
  auto assign_all = [&]() {
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < target; ++k) {
        const double dd = sq_dist(x.row_span(i), c.row_span(k));
        if (dd < best) {
          best = dd;
          assign[i] = k;
        }
      }
      dist[i] = best;
      sse += best;
    }
    return sse;
  };

  for (int iter = 0; iter < 100; ++iter) {
    const double sse = assign_all();
    if (trace) trace->sse.push_back(sse);
    Tensor next(target, d);
    std::vector<std::size_t> count(target, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[assign[i]];
      auto row = next.row_span(assign[i]);
      auto xi = x.row_span(i);
      for (std::size_t j = 0; j < d; ++j) row[j] += xi[j];
    }
    for (std::size_t k = 0; k < target; ++k) {
      if (count[k] == 0) {
        // Empty cluster: restart it at the point farthest from its centroid.
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (dist[i] > dist[far]) far = i;
        std::copy(x.row_span(far).begin(), x.row_span(far).end(), next.row_span(k).begin());
        dist[far] = 0.0;
        continue;
      }
      for (auto& v : next.row_span(k)) v /= static_cast<double>(count[k]);
    }
    double shift = 0.0;
    for (std::size_t k = 0; k < target; ++k)
      shift = std::max(shift, std::sqrt(sq_dist(c.row_span(k), next.row_span(k))));
    c = std::move(next);
    if (shift < 1e-6) break;
  }
  if (trace) trace->sse.push_back(assign_all());

  std::vector<std::size_t> picked;
  std::vector<bool> used(n, false);
  for (std::size_t k = 0; k < target; ++k) {
    std::size_t best = n;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      const double dd = sq_dist(x.row_span(i), c.row_span(k));
      if (dd < bd) {
        bd = dd;
        best = i;
      }
    }
    used[best] = true;
    picked.push_back(best);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

std::vector<Hit> query_topk(const RetrievalIndex& index, const Tensor& q, std::size_t k,
                            const std::optional<std::string>& exclude) {
  if (index.entries.empty()) throw QueryError("query_topk: empty index");
  const Tensor u = unit_query(q);
  std::vector<Hit> hits;
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    if (exclude && index.entries[i].asset_id == *exclude) continue;
    if (index.entries[i].embedding.size() != u.size())
      throw DimensionError("query_topk: query width differs from index");
    hits.push_back({i, cosine(u, index.entries[i].embedding)});
  }
  if (k < 1 || k > hits.size())
    throw QueryError("query_topk: k=" + std::to_string(k) + " outside [1, " +
                     std::to_string(hits.size()) + "]");
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(),
                    [&](const Hit& a, const Hit& b) {
                      if (a.score != b.score) return a.score > b.score;
                      return index.entries[a.entry].asset_id < index.entries[b.entry].asset_id;
                    });
  hits.resize(k);
  return hits;
}

std::vector<PartHit> query_parts(const RetrievalIndex& index, const Tensor& q, std::size_t k) {
  if (index.entries.empty()) throw QueryError("query_parts: empty index");
  const Tensor u = unit_query(q);
  std::vector<PartHit> hits;
  for (std::size_t i = 0; i < index.entries.size(); ++i)
    for (std::size_t j = 0; j < index.entries[i].parts.size(); ++j)
      hits.push_back({i, j, cosine(u, index.entries[i].parts[j].embedding)});
  if (k < 1 || k > hits.size())
    throw QueryError("query_parts: k=" + std::to_string(k) + " outside [1, " +
                     std::to_string(hits.size()) + "]");
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(),
                    [&](const PartHit& a, const PartHit& b) {
                      if (a.score != b.score) return a.score > b.score;
                      const auto& ia = index.entries[a.entry].asset_id;
                      const auto& ib = index.entries[b.entry].asset_id;
                      if (ia != ib) return ia < ib;
                      return a.part < b.part;
                    });
  hits.resize(k);
  return hits;
}

void check_fingerprint(const RetrievalIndex& index, const Fingerprint& retriever) {
  if (index.fingerprint != retriever)
    throw FingerprintError("index built by retriever " + hex(index.fingerprint) +
                           ", loaded retriever is " + hex(retriever));
}

std::string serialize_index(const RetrievalIndex& index) {
  ByteWriter w;
  w.bytes("PRTI");
  w.u32(kIndexVersion);
  w.u32(static_cast<std::uint32_t>(index.entries.size()));
  w.bytes(std::string_view(reinterpret_cast<const char*>(index.fingerprint.data()),
                           index.fingerprint.size()));
  for (const auto& e : index.entries) {
    w.str(e.asset_id);
    write_block(w, e.embedding);
    write_block(w, e.tokens);
    w.u32(static_cast<std::uint32_t>(e.parts.size()));
    for (const auto& p : e.parts) {
      w.u32(static_cast<std::uint32_t>(p.label));
      write_block(w, p.embedding);
      write_block(w, p.latent.z);
      w.u32(static_cast<std::uint32_t>(p.latent.part_id));
      for (double t : p.latent.transform.translation) w.f32(static_cast<float>(t));
      w.f32(static_cast<float>(p.latent.transform.scale));
    }
  }
  return w.data();
}

RetrievalIndex deserialize_index(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != "PRTI") throw FormatError("index: bad magic");
  if (const auto v = r.u32(); v != kIndexVersion)
    throw FormatError("index: unsupported version " + std::to_string(v));
  RetrievalIndex idx;
  const std::uint32_t n = r.u32();
  const auto fp = r.bytes(32);
  std::copy(fp.begin(), fp.end(), reinterpret_cast<char*>(idx.fingerprint.data()));
  for (std::uint32_t i = 0; i < n; ++i) {
    IndexEntry e;
    e.asset_id = r.str();
    e.embedding = read_block(r);
    e.tokens = read_block(r);
    const std::uint32_t parts = r.u32();
    for (std::uint32_t j = 0; j < parts; ++j) {
      PartEntry p;
      p.label = static_cast<int>(r.u32());
      if (p.label < 0 || p.label >= static_cast<int>(kPartLabels.size()))
        throw FormatError("index: part label out of range");
      p.embedding = read_block(r);
      p.latent.z = read_block(r);
      p.latent.part_id = static_cast<int>(r.u32());
      for (auto& t : p.latent.transform.translation) t = static_cast<double>(r.f32());
      p.latent.transform.scale = static_cast<double>(r.f32());
      e.parts.push_back(std::move(p));
    }
    idx.entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("index: trailing bytes after last entry");
  return idx;
}

void save_index(const RetrievalIndex& index, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_index(index));
}

RetrievalIndex load_index(const std::filesystem::path& path) {
  return deserialize_index(read_file(path));
}

std::string index_manifest(const RetrievalIndex& index) {
  nlohmann::ordered_json j;
  j["format"] = "PRTI";
  j["version"] = kIndexVersion;
  j["fingerprint"] = hex(index.fingerprint);
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : index.entries) {
    nlohmann::ordered_json je;
    je["asset_id"] = e.asset_id;
    std::vector<std::string> labels;
    for (const auto& p : e.parts) labels.emplace_back(kPartLabels[static_cast<std::size_t>(p.label)]);
    je["part_labels"] = labels;
    j["entries"].push_back(je);
  }
  return j.dump(2) + "\n";
}

}  // namespace partrag
