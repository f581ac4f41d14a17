#pragma once

// Evaluation metrics and protocol drivers: in-batch precision at 1, macro F1,
// RMSE, the single-relation transfer matrix, and matching against aggregated
// candidate profiles. Scores are computed in float64 and argmax ties break
// toward the smallest index so every metric is deterministic.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mxe/checkpoint.hpp"
#include "mxe/graph.hpp"
#include "mxe/text.hpp"
#include "mxe/trainer.hpp"

namespace mxe {

struct EvalBatch {
  Mat<double> queries;  // B x d, row i's true match is keys row i
  Mat<double> keys;
};

// Fraction of rows whose highest-scoring key is their own. Ties go to the
// smallest key index.
inline double prec_at_1(const EvalBatch& batch) {
  const auto& q = batch.queries;
  const auto& k = batch.keys;
  check_arg(q.rows() == k.rows() && q.cols() == k.cols(),
            "prec_at_1: query/key shape mismatch");
  check_arg(q.rows() >= 2, "prec_at_1: need at least two pairs");
  check_arg(q.allFinite() && k.allFinite(), "prec_at_1: non-finite embeddings");
  const Eigen::Index B = q.rows();
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < B; ++i) {
    Eigen::Index best = 0;
    double best_score = q.row(i).dot(k.row(0));
    for (Eigen::Index j = 1; j < B; ++j) {
      double s = q.row(i).dot(k.row(j));
      if (s > best_score) {
        best_score = s;
        best = j;
      }
    }
    if (best == i) ++hits;
  }
  return double(hits) / double(B);
}

// Unweighted mean over classes of per-class F1. A class absent from both
// predictions and labels contributes zero.
inline double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels,
                       int classes) {
  check_arg(classes >= 2, "macro_f1: need at least two classes");
  check_arg(preds.size() == labels.size() && !preds.empty(),
            "macro_f1: prediction/label length mismatch");
  std::vector<int64_t> tp(size_t(classes), 0), fp(size_t(classes), 0), fn(size_t(classes), 0);
  for (size_t i = 0; i < preds.size(); ++i) {
    check_arg(preds[i] >= 0 && preds[i] < classes, "macro_f1: prediction class out of range");
    check_arg(labels[i] >= 0 && labels[i] < classes, "macro_f1: label class out of range");
    if (preds[i] == labels[i]) {
      ++tp[size_t(preds[i])];
    } else {
      ++fp[size_t(preds[i])];
      ++fn[size_t(labels[i])];
    }
  }
  double total = 0.0;
  for (int c = 0; c < classes; ++c) {
    int64_t t = tp[size_t(c)];
    if (t == 0) continue;  // zero F1 whether the class is missed or absent
    double precision = double(t) / double(t + fp[size_t(c)]);
    double recall = double(t) / double(t + fn[size_t(c)]);
    total += 2.0 * precision * recall / (precision + recall);
  }
  return total / double(classes);
}

inline double rmse(const std::vector<double>& preds, const std::vector<double>& targets) {
  check_arg(preds.size() == targets.size() && !preds.empty(),
            "rmse: prediction/target length mismatch");
  double sq = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    check_arg(std::isfinite(preds[i]) && std::isfinite(targets[i]), "rmse: non-finite value");
    double d = preds[i] - targets[i];
    sq += d * d;
  }
  return std::sqrt(sq / double(preds.size()));
}

inline void write_metric(std::ostream& out, const std::string& name, double value) {
  out << name << '\t' << format_fixed6(value) << "\n";
}

namespace detail {

// Embeds both endpoints of held-out edges under one conditioning relation and
// scores them in batches. Node embeddings are cached across batches.
inline double heldout_edge_prec(const EncoderParams<float>& params,
                                const RelationPriorTable<float>& priors,
                                const RelationKind& prior_rel,
                                const std::vector<EdgePair>& pairs, const MultiplexGraph& g,
                                const Vocabulary& vocab, int batch_size) {
  check_arg(batch_size >= 2, "eval: batch size must be at least 2");
  check_arg(pairs.size() >= 2, "eval: insufficient held-out edges");
  const int d = params.config.hidden;
  std::map<uint64_t, Vec<float>> cache;
  auto embed = [&](uint64_t node) -> const Vec<float>& {
    auto it = cache.find(node);
    if (it == cache.end()) {
      TokenSequence seq = encode_text(vocab, g.node(node).text, params.config.max_len);
      it = cache.emplace(node, encode_conditioned(params, priors, prior_rel, seq)).first;
    }
    return it->second;
  };

  size_t done = 0, total = 0;
  double correct = 0.0;
  while (done < pairs.size()) {
    size_t b = std::min(size_t(batch_size), pairs.size() - done);
    if (b < 2) break;  // a trailing single pair cannot form an in-batch task
    EvalBatch batch;
    batch.queries.resize(Eigen::Index(b), d);
    batch.keys.resize(Eigen::Index(b), d);
    for (size_t i = 0; i < b; ++i) {
      batch.queries.row(Eigen::Index(i)) = embed(pairs[done + i].first).cast<double>();
      batch.keys.row(Eigen::Index(i)) = embed(pairs[done + i].second).cast<double>();
    }
    correct += prec_at_1(batch) * double(b);
    total += b;
    done += b;
  }
  check_arg(total > 0, "eval: no full batch could be formed");
  return correct / double(total);
}

}  // namespace detail

// Held-out in-batch precision for one relation of a graph, conditioning on
// that relation's prior from the checkpoint. The split is derived from the
// seed and the edge content, so the same flags always score the same edges.
inline double relation_heldout_precision(const Checkpoint& ck, const MultiplexGraph& g,
                                         const Vocabulary& vocab,
                                         const std::string& relation, int batch_size,
                                         double holdout_frac, uint64_t split_seed) {
  RelationKind prior_rel = ck.relation(relation);
  RelationKind graph_rel = g.relation_by_name(relation);
  EdgeSplit split = split_edges(g, holdout_frac, split_seed);
  return detail::heldout_edge_prec(ck.params, ck.priors, prior_rel,
                                   split.heldout[graph_rel.id], g, vocab, batch_size);
}

// Entry (k, l): a model trained on relation k alone, scored by in-batch
// precision at 1 on relation l's held-out edges, conditioning every encoding
// on relation k's prior (the only one that single-relation run trained).
inline Mat<double> cross_relation_matrix(const MultiplexGraph& g, const Vocabulary& vocab,
                                         const EncoderConfig& ecfg, const TrainConfig& tcfg,
                                         int eval_batch, double holdout_frac,
                                         uint64_t split_seed) {
  const size_t R = g.n_relations();
  check_arg(R >= 2, "cross_relation_matrix: need at least two relations");
  EdgeSplit split = split_edges(g, holdout_frac, split_seed);
  for (size_t l = 0; l < R; ++l)
    check_arg(split.heldout[l].size() >= 2,
              "cross_relation_matrix: relation " + g.relations[l].name +
                  " has too few held-out edges");

  Mat<double> matrix = Mat<double>::Zero(Eigen::Index(R), Eigen::Index(R));
  for (size_t k = 0; k < R; ++k) {
    auto model = train(split.train, vocab, ecfg, tcfg,
                       RelationWeights::one_hot(R, uint32_t(k)), "");
    for (size_t l = 0; l < R; ++l)
      matrix(Eigen::Index(k), Eigen::Index(l)) =
          detail::heldout_edge_prec(model.params, model.priors, g.relations[k],
                                    split.heldout[l], g, vocab, eval_batch);
  }
  return matrix;
}

struct CandidateProfile {
  uint64_t entity_id = 0;
  std::vector<std::string> docs;  // member documents, concatenated for embedding
};

// Matching against aggregated entity profiles: each candidate is embedded from
// the concatenation of its member documents truncated at long_max_len, queries
// are scored in batches against the profiles of the in-batch true entities.
inline double aggregate_candidate_matching(
    const Checkpoint& ck, const RelationKind& relation,
    const std::vector<std::pair<TokenSequence, uint64_t>>& queries,
    const std::vector<CandidateProfile>& candidates, int batch_size, const Vocabulary& vocab,
    int long_max_len) {
  check_arg(batch_size >= 2, "aggregate matching: batch size must be at least 2");
  check_arg(queries.size() >= 2, "aggregate matching: need at least two queries");
  check_arg(long_max_len + ck.params.config.prior_tokens <= ck.params.config.max_positions,
            "aggregate matching: long_max_len exceeds the position budget");

  std::map<uint64_t, Vec<float>> profile_emb;
  for (const auto& cand : candidates) {
    check_arg(!cand.docs.empty(), "aggregate matching: candidate has no documents");
    check_arg(!profile_emb.count(cand.entity_id),
              "aggregate matching: duplicate candidate entity " +
                  std::to_string(cand.entity_id));
    std::string joined;
    for (const auto& doc : cand.docs) {
      if (!joined.empty()) joined += ' ';
      joined += doc;
    }
    TokenSequence seq = encode_text(vocab, joined, long_max_len);
    profile_emb.emplace(cand.entity_id,
                        encode_conditioned(ck.params, ck.priors, relation, seq));
  }
  for (const auto& [seq, entity] : queries)
    check_arg(profile_emb.count(entity),
              "aggregate matching: true entity " + std::to_string(entity) +
                  " missing from candidates");

  const int d = ck.params.config.hidden;
  size_t done = 0, total = 0;
  double correct = 0.0;
  while (done < queries.size()) {
    size_t b = std::min(size_t(batch_size), queries.size() - done);
    if (b < 2) break;
    EvalBatch batch;
    batch.queries.resize(Eigen::Index(b), d);
    batch.keys.resize(Eigen::Index(b), d);
    for (size_t i = 0; i < b; ++i) {
      const auto& [seq, entity] = queries[done + i];
      batch.queries.row(Eigen::Index(i)) =
          encode_conditioned(ck.params, ck.priors, relation, seq).cast<double>();
      batch.keys.row(Eigen::Index(i)) = profile_emb.at(entity).cast<double>();
    }
    correct += prec_at_1(batch) * double(b);
    total += b;
    done += b;
  }
  check_arg(total > 0, "aggregate matching: no full batch could be formed");
  return correct / double(total);
}

}  // namespace mxe
