#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "partrag/corpus.hpp"
#include "partrag/encoders.hpp"
#include "partrag/io.hpp"

namespace partrag {

struct PartEntry {
  int label = 0;
  Tensor embedding;  // 1 x d, shape-side part head
  PartLatent latent;
};

struct IndexEntry {
  std::string asset_id;
  Tensor embedding;  // 1 x d, image-side object head
  Tensor tokens;     // L x d, stored view 0
  std::vector<PartEntry> parts;
};

/// Entries hold values exactly representable as 32-bit floats, so the file
/// round trip is lossless.
struct RetrievalIndex {
  Fingerprint fingerprint{};
  std::vector<IndexEntry> entries;

  std::size_t size() const { return entries.size(); }
};

bool operator==(const RetrievalIndex& a, const RetrievalIndex& b);

/// Object embedding of a render: image object head over the mean of the
/// foreground patch tokens.
Tensor query_embedding(const ParameterSet& retriever, const DepthRender& r,
                       const EncoderConfig& enc);

IndexEntry make_entry(const ParameterSet& retriever, const CorpusObject& object,
                      const EncoderConfig& enc);
/// One entry per object, fingerprinted with the retriever checkpoint hash.
RetrievalIndex build_index(const ParameterSet& retriever, const std::vector<CorpusObject>& objects,
                           const EncoderConfig& enc);

/// Per-iteration record of the Lloyd objective (within-cluster SSE).
struct KmeansTrace {
  std::vector<double> sse;
};
/// Lloyd k-means (k-means++ seeding from `seed`, at most 100 iterations,
/// stop when every centroid moves less than 1e-6); returns, per cluster, the
/// input row nearest its centroid, sorted ascending and de-duplicated.
std::vector<std::size_t> curate_kmeans(const Tensor& embeddings, std::size_t target,
                                       std::uint64_t seed, KmeansTrace* trace = nullptr);

struct Hit {
  std::size_t entry = 0;
  double score = 0.0;
};
struct PartHit {
  std::size_t entry = 0;
  std::size_t part = 0;
  double score = 0.0;
};

/// Exact top-k by cosine, ties broken by ascending asset_id. `exclude`
/// drops one asset (used so a training object never retrieves itself).
std::vector<Hit> query_topk(const RetrievalIndex& index, const Tensor& q, std::size_t k,
                            const std::optional<std::string>& exclude = std::nullopt);
/// Same ranking over stored part embeddings; ties by (asset_id, part).
std::vector<PartHit> query_parts(const RetrievalIndex& index, const Tensor& q, std::size_t k);

/// Throws FingerprintError unless the index was built by `retriever`.
void check_fingerprint(const RetrievalIndex& index, const Fingerprint& retriever);

std::string serialize_index(const RetrievalIndex& index);
RetrievalIndex deserialize_index(std::string_view bytes);
void save_index(const RetrievalIndex& index, const std::filesystem::path& path);
RetrievalIndex load_index(const std::filesystem::path& path);
/// JSON summary (ids, part labels, fingerprint) for inspection.
std::string index_manifest(const RetrievalIndex& index);

}  // namespace partrag
