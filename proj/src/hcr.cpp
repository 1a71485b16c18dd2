#include "partrag/hcr.hpp"

#include <cmath>
#include <map>
#include <numeric>

#include "partrag/errors.hpp"
#include "partrag/parallel.hpp"

namespace partrag {

namespace {

Tensor stack_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw DimensionError("stack_rows: width mismatch");
  Tensor out(a.rows() + b.rows(), a.cols());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

Var contrast(Var queries, const Tensor& batch_keys, const MomentumQueue& queue, double tau,
             const Positives& pos) {
  Graph& g = *queries.graph;
  const bool warmed = queue.fill() >= batch_keys.rows();
  const Tensor keys = warmed ? stack_rows(batch_keys, queue.contents()) : batch_keys;
  return info_nce(queries, g.constant(keys), tau, pos);
}

}  // namespace

MomentumQueue::MomentumQueue(std::size_t capacity, std::size_t dim, QueueSide side)
    : capacity_(capacity), dim_(dim), side_(side), buffer_(capacity, dim) {
  if (capacity == 0) throw ConfigError("MomentumQueue: capacity must be positive");
}

void MomentumQueue::push(const Tensor& rows) {
  if (rows.rows() > capacity_)
    throw CapacityError("queue_push: batch of " + std::to_string(rows.rows()) +
                        " exceeds capacity " + std::to_string(capacity_));
  if (rows.cols() != dim_) throw DimensionError("queue_push: width " + shape_string(rows));
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    double n2 = 0.0;
    for (double v : rows.row_span(r)) n2 += v * v;
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-9)
      throw DegenerateInputError("queue_push: rows must be unit norm");
  }
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    auto src = rows.row_span(r);
    std::copy(src.begin(), src.end(), buffer_.row_span(head_).begin());
    head_ = (head_ + 1) % capacity_;
  }
  fill_ = std::min(capacity_, fill_ + rows.rows());
}

Tensor MomentumQueue::contents() const {
  Tensor out(fill_, dim_);
  const std::size_t start = (head_ + capacity_ - fill_) % capacity_;
  for (std::size_t i = 0; i < fill_; ++i) {
    auto src = buffer_.row_span((start + i) % capacity_);
    std::copy(src.begin(), src.end(), out.row_span(i).begin());
  }
  return out;
}

Positives identity_positives(std::size_t n) {
  Positives p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = {i};
  return p;
}

Positives label_positives(const std::vector<int>& query_labels,
                          const std::vector<int>& key_labels) {
  Positives p(query_labels.size());
  for (std::size_t i = 0; i < query_labels.size(); ++i)
    for (std::size_t j = 0; j < key_labels.size(); ++j)
      if (query_labels[i] == key_labels[j]) p[i].push_back(j);
  return p;
}

Var info_nce_logits(Var logits, const Positives& positives) {
  const std::size_t n = logits.rows(), m = logits.cols();
  if (positives.size() != n) throw DimensionError("info_nce: one positive list per query");
  Tensor w(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    if (positives[i].empty())
      throw ConfigError("info_nce: query " + std::to_string(i) + " has no positive key");
    const double share = 1.0 / (static_cast<double>(n) * static_cast<double>(positives[i].size()));
    for (std::size_t j : positives[i]) {
      if (j >= m) throw DimensionError("info_nce: positive index out of range");
      w(i, j) += share;
    }
  }
  Var lp = ops::log_softmax_rows(logits);
  return ops::scale(ops::sum(ops::mul(lp, logits.graph->constant(std::move(w)))), -1.0);
}

Var info_nce(Var queries, Var keys, double tau, const Positives& positives) {
  if (!(tau > 0.0)) throw ConfigError("info_nce: temperature must be positive");
  Var s = ops::matmul_nt(ops::l2_normalize_rows(queries), ops::l2_normalize_rows(keys));
  return info_nce_logits(ops::scale(s, 1.0 / tau), positives);
}

void init_heads(ParameterSet& ps, std::size_t d, Rng& rng) {
  for (const char* name : {"head.img_part", "head.img_obj", "head.shp_part", "head.shp_obj"})
    add_mlp(ps, name, d, d, d, rng);
}

ParameterSet init_retriever(const EncoderConfig& enc, Rng& rng) {
  ParameterSet ps;
  init_encoders(ps, enc, rng);
  init_heads(ps, enc.width, rng);
  return ps;
}

HcrFeatures hcr_features(Binder& b, const std::vector<BatchItem>& batch) {
  Graph& g = b.graph();
  std::vector<Var> xs, zs, x_obj, z_obj;
  HcrFeatures f;
  for (const auto& item : batch) {
    const CorpusObject& o = *item.object;
    std::map<std::size_t, Var> tokens;
    auto tokens_of = [&](std::size_t v) {
      auto it = tokens.find(v);
      if (it == tokens.end()) it = tokens.emplace(v, encode_patches(b, g.constant(o.pixels[v]))).first;
      return it->second;
    };
    std::vector<Var> ox, oz;
    for (std::size_t i = 0; i < o.n_parts(); ++i) {
      const std::size_t v = o.pool_view(i, item.view);
      ox.push_back(pool_part_features(tokens_of(v), o.members[v][i]));
      oz.push_back(encode_part(b, g.constant(o.points[i])));
      f.labels.push_back(o.spec.parts[i].label);
    }
    x_obj.push_back(object_pool(ox));
    z_obj.push_back(object_pool(oz));
    xs.insert(xs.end(), ox.begin(), ox.end());
    zs.insert(zs.end(), oz.begin(), oz.end());
  }
  f.latents = ops::concat_rows(zs);
  f.img_part = mlp(b, "head.img_part", ops::concat_rows(xs));
  f.shp_part = mlp(b, "head.shp_part", f.latents);
  f.img_obj = mlp(b, "head.img_obj", ops::concat_rows(x_obj));
  f.shp_obj = mlp(b, "head.shp_obj", ops::concat_rows(z_obj));
  return f;
}

HcrKeys hcr_keys(const ParameterSet& momentum, const std::vector<BatchItem>& batch,
                 const std::string& prefix) {
  Graph g;
  Binder b(g, momentum, prefix);
  const HcrFeatures f = hcr_features(b, batch);
  return HcrKeys{l2_normalize(f.img_part.value()), l2_normalize(f.shp_part.value()),
                 l2_normalize(f.img_obj.value()), l2_normalize(f.shp_obj.value()), f.labels};
}

HcrQueues::HcrQueues(std::size_t capacity, std::size_t dim)
    : img_part(capacity, dim, QueueSide::image), shp_part(capacity, dim, QueueSide::shape),
      img_obj(capacity, dim, QueueSide::image), shp_obj(capacity, dim, QueueSide::shape) {}

void HcrQueues::enqueue(const HcrKeys& keys) {
  img_part.push(keys.img_part);
  shp_part.push(keys.shp_part);
  img_obj.push(keys.img_obj);
  shp_obj.push(keys.shp_obj);
}

HcrLoss hcr_loss(const HcrFeatures& online, const HcrKeys& keys, const HcrQueues& queues,
                 const HcrConfig& cfg) {
  const Positives part_pos = label_positives(online.labels, keys.labels);
  const Positives obj_pos = identity_positives(online.img_obj.rows());
  HcrLoss l;
  l.part = ops::scale(
      ops::add(contrast(online.img_part, keys.shp_part, queues.shp_part, cfg.tau, part_pos),
               contrast(online.shp_part, keys.img_part, queues.img_part, cfg.tau, part_pos)),
      0.5);
  l.obj = ops::scale(
      ops::add(contrast(online.img_obj, keys.shp_obj, queues.shp_obj, cfg.tau, obj_pos),
               contrast(online.shp_obj, keys.img_obj, queues.img_obj, cfg.tau, obj_pos)),
      0.5);
  l.total = ops::add(ops::scale(l.part, cfg.lambda_part), ops::scale(l.obj, cfg.lambda_obj));
  return l;
}

Tensor image_part_embedding(const ParameterSet& ps, const Tensor& tokens,
                            const std::vector<std::size_t>& members) {
  Graph g;
  Binder b(g, ps);
  return l2_normalize(
      mlp(b, "head.img_part", pool_part_features(g.constant(tokens), members)).value());
}

Tensor image_object_embedding(const ParameterSet& ps, const Tensor& tokens,
                              const std::vector<std::size_t>& members) {
  Graph g;
  Binder b(g, ps);
  return l2_normalize(
      mlp(b, "head.img_obj", pool_part_features(g.constant(tokens), members)).value());
}

Tensor shape_part_embedding(const ParameterSet& ps, const Tensor& z) {
  Graph g;
  Binder b(g, ps);
  return l2_normalize(mlp(b, "head.shp_part", g.constant(z)).value());
}

double part_recall_at1(const ParameterSet& ps, const std::vector<CorpusObject>& objects) {
  struct Emb {
    std::vector<Tensor> img, shp;
  };
  std::vector<Emb> emb(objects.size());
  parallel_for(objects.size(), [&](std::size_t k) {
    const CorpusObject& o = objects[k];
    std::map<std::size_t, Tensor> tokens;
    for (std::size_t i = 0; i < o.n_parts(); ++i) {
      const std::size_t v = o.pool_view(i, 0);
      if (!tokens.count(v)) {
        Graph g;
        Binder b(g, ps);
        tokens.emplace(v, encode_patches(b, g.constant(o.pixels[v])).value());
      }
      emb[k].img.push_back(image_part_embedding(ps, tokens.at(v), o.members[v][i]));
      emb[k].shp.push_back(shape_part_embedding(ps, encode_part(ps, o.points[i])));
    }
  });
  std::size_t hits = 0, total = 0;
  for (std::size_t a = 0; a < objects.size(); ++a) {
    for (std::size_t i = 0; i < objects[a].n_parts(); ++i) {
      double best = -2.0;
      int best_label = -1;
      for (std::size_t b = 0; b < objects.size(); ++b) {
        if (b == a) continue;
        for (std::size_t j = 0; j < objects[b].n_parts(); ++j) {
          const auto x = emb[a].img[i].data();
          const auto y = emb[b].shp[j].data();
          const double s = std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
          if (s > best) {
            best = s;
            best_label = objects[b].spec.parts[j].label;
          }
        }
      }
      hits += best_label == objects[a].spec.parts[i].label ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

RetrieverTrainResult train_retriever(
    const Corpus& corpus, const EncoderConfig& enc, const RetrieverTrainConfig& cfg,
    ParameterSet init, const std::function<void(const RetrieverLogRecord&)>& on_log) {
  if (corpus.train.size() < cfg.hcr.batch)
    throw ConfigError("train_retriever: corpus smaller than one batch");
  RetrieverTrainResult res;
  res.params = std::move(init);
  res.momentum = res.params;
  AdamW opt(res.params, cfg.opt);
  HcrQueues queues(cfg.hcr.queue, enc.width);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    // Partial Fisher-Yates: the first `batch` slots become the batch.
    std::vector<BatchItem> batch;
    for (std::size_t i = 0; i < cfg.hcr.batch; ++i) {
      const std::size_t j = i + rng.below(order.size() - i);
      std::swap(order[i], order[j]);
      batch.push_back({&corpus.train[order[i]], rng.below(corpus.train[order[i]].views.size())});
    }

    Graph g;
    Binder b(g, res.params);
    const HcrFeatures f = hcr_features(b, batch);
    const HcrKeys keys = hcr_keys(res.momentum, batch);
    const HcrLoss hl = hcr_loss(f, keys, queues, cfg.hcr);
    std::vector<PrimitiveSpec> targets;
    for (const auto& item : batch)
      for (const auto& fr : item.object->frames) targets.push_back(fr.local);
    Var ae = autoencode_loss(b, f.latents, targets);
    Var total = ops::add(hl.total, ops::scale(ae, cfg.ae_weight));
    if (!std::isfinite(total.value()[0])) {
      std::string dump;
      for (const auto& item : batch)
        dump += " " + item.object->asset_id + "@view" + std::to_string(item.view);
      throw NumericalError("train_retriever: non-finite loss at step " + std::to_string(step) +
                           "; batch:" + dump);
    }
    g.backward(total);
    g.accumulate_param_grads();
    opt.step();
    momentum_update(res.momentum, res.params, cfg.hcr.momentum);
    queues.enqueue(keys);

    if (cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      RetrieverLogRecord rec;
      rec.step = step + 1;
      rec.l_part = hl.part.value()[0];
      rec.l_obj = hl.obj.value()[0];
      rec.l_ae = ae.value()[0];
      rec.recall_at1 = corpus.heldout.empty() ? 0.0 : part_recall_at1(res.params, corpus.heldout);
      rec.queue_fill = queues.shp_part.fill();
      res.log.push_back(rec);
      if (on_log) on_log(rec);
    }
  }
  return res;
}

}  // namespace partrag
