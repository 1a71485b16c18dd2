#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "partrag/encoders.hpp"
#include "partrag/synthdata.hpp"

namespace partrag {

struct CorpusConfig {
  std::uint64_t seed = 1;
  std::size_t n_train = 320;
  std::size_t n_heldout = 64;
  int min_parts = 2;
  int max_parts = 8;
  SynthConfig synth;
};

/// One object with everything training and indexing read from it. Parts are
/// in the canonical (label, y, x, z) order, so part i has part id i.
struct CorpusObject {
  std::string asset_id;
  PartObjectSpec spec;
  std::vector<DepthRender> views;
  std::vector<Tensor> pixels;                               // per view
  std::vector<std::vector<std::vector<std::size_t>>> members;  // [view][part]
  std::vector<Tensor> points;                               // per part, local frame
  std::vector<PartFrame> frames;                            // per part

  std::size_t n_parts() const { return spec.parts.size(); }
  /// `preferred` if the part has member patches there, else the first view
  /// that does.
  std::size_t pool_view(std::size_t part, std::size_t preferred) const;
};

struct Corpus {
  std::vector<CorpusObject> train;
  std::vector<CorpusObject> heldout;
};

std::string asset_name(std::size_t index);
/// Spec of the i-th corpus object (train objects first, then held-out).
PartObjectSpec corpus_spec(const CorpusConfig& cfg, std::size_t index);
CorpusObject prepare_object(std::string asset_id, const PartObjectSpec& spec,
                            const EncoderConfig& enc, const SynthConfig& synth);
/// Objects are prepared in parallel; the result does not depend on the
/// thread count.
std::vector<CorpusObject> prepare_objects(const std::vector<std::string>& ids,
                                          const std::vector<PartObjectSpec>& specs,
                                          const EncoderConfig& enc, const SynthConfig& synth);
Corpus build_corpus(const CorpusConfig& cfg, const EncoderConfig& enc);

}  // namespace partrag
