#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "partrag/corpus.hpp"
#include "partrag/encoders.hpp"
#include "partrag/module.hpp"
#include "partrag/optim.hpp"

namespace partrag {

struct HcrConfig {
  double tau = 0.07;
  double lambda_part = 0.03;
  double lambda_obj = 0.03;
  std::size_t queue = 512;  // K
  double momentum = 0.99;   // m
  std::size_t batch = 16;
};

enum class QueueSide { image, shape };

/// Fixed-capacity FIFO ring of unit-norm feature rows.
class MomentumQueue {
 public:
  MomentumQueue(std::size_t capacity, std::size_t dim, QueueSide side = QueueSide::image);

  /// Enqueues rows (B x dim); when full the oldest rows are overwritten.
  void push(const Tensor& rows);
  /// Rows oldest first, fill x dim.
  Tensor contents() const;
  std::size_t fill() const { return fill_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t head() const { return head_; }
  QueueSide side() const { return side_; }

 private:
  std::size_t capacity_, dim_;
  QueueSide side_;
  Tensor buffer_;
  std::size_t head_ = 0;
  std::size_t fill_ = 0;
};

/// positives[i] lists the key columns that are positives for query row i.
using Positives = std::vector<std::vector<std::size_t>>;
Positives identity_positives(std::size_t n);
Positives label_positives(const std::vector<int>& query_labels, const std::vector<int>& key_labels);

/// Mean over queries of the mean negative log-probability of their positives,
/// from logits whose rows are shifted by their maximum first.
Var info_nce_logits(Var logits, const Positives& positives);
/// Normalizes both sides, S = Q K^T / tau, then info_nce_logits.
Var info_nce(Var queries, Var keys, double tau, const Positives& positives);

/// Projection heads "head.img_part", "head.img_obj", "head.shp_part", "head.shp_obj".
void init_heads(ParameterSet& ps, std::size_t d, Rng& rng);
/// Encoders plus heads.
ParameterSet init_retriever(const EncoderConfig& enc, Rng& rng);

struct BatchItem {
  const CorpusObject* object = nullptr;
  std::size_t view = 0;
};

/// Un-normalized head outputs for a batch: one row per part (all objects'
/// parts concatenated) and one row per object.
struct HcrFeatures {
  Var img_part, shp_part, img_obj, shp_obj;
  Var latents;  // part latents z, one row per part
  std::vector<int> labels;
};
HcrFeatures hcr_features(Binder& b, const std::vector<BatchItem>& batch);

/// Momentum-side features, unit-normalized.
struct HcrKeys {
  Tensor img_part, shp_part, img_obj, shp_obj;
  std::vector<int> labels;
};
HcrKeys hcr_keys(const ParameterSet& momentum, const std::vector<BatchItem>& batch,
                 const std::string& prefix = {});

struct HcrQueues {
  HcrQueues(std::size_t capacity, std::size_t dim);
  MomentumQueue img_part, shp_part, img_obj, shp_obj;
  void enqueue(const HcrKeys& keys);
};

struct HcrLoss {
  Var total, part, obj;
};
/// lambda_part * L_part + lambda_obj * L_obj, each the mean of the
/// image->shape and shape->image directions. Queue rows join the keys once a
/// queue holds at least `batch` rows; queue rows are always negatives.
HcrLoss hcr_loss(const HcrFeatures& online, const HcrKeys& keys, const HcrQueues& queues,
                 const HcrConfig& cfg);

// ---------------------------------------------------------------------------
// Inference-side embeddings (unit norm, 1 x d).

Tensor image_part_embedding(const ParameterSet& ps, const Tensor& tokens,
                            const std::vector<std::size_t>& members);
Tensor image_object_embedding(const ParameterSet& ps, const Tensor& tokens,
                              const std::vector<std::size_t>& members);
Tensor shape_part_embedding(const ParameterSet& ps, const Tensor& z);

/// Held-out part-level recall@1: each part's image embedding (preferred view
/// 0) against the shape part embeddings of all parts of the other objects;
/// a hit when the nearest one carries the same label.
double part_recall_at1(const ParameterSet& ps, const std::vector<CorpusObject>& objects);

// ---------------------------------------------------------------------------

struct RetrieverTrainConfig {
  HcrConfig hcr;
  AdamWConfig opt{.lr = 1e-3, .weight_decay = 1e-4, .warmup_steps = 50};
  std::size_t steps = 1500;
  std::size_t log_every = 50;
  double ae_weight = 1.0;
  std::uint64_t seed = 1;
};

struct RetrieverLogRecord {
  std::size_t step = 0;
  double l_part = 0.0;
  double l_obj = 0.0;
  double l_ae = 0.0;
  double recall_at1 = 0.0;
  std::size_t queue_fill = 0;
};

struct RetrieverTrainResult {
  ParameterSet params;
  ParameterSet momentum;
  std::vector<RetrieverLogRecord> log;
};

/// Joint HCR + part autoencoding training. Records are passed to `on_log`
/// as they are produced.
RetrieverTrainResult train_retriever(
    const Corpus& corpus, const EncoderConfig& enc, const RetrieverTrainConfig& cfg,
    ParameterSet init, const std::function<void(const RetrieverLogRecord&)>& on_log = {});

}  // namespace partrag
