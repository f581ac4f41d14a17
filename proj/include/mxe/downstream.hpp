#pragma once

// Downstream inference and source-relation selection. A trained model answers
// queries either by conditioning on one relation's prior rows directly, or by
// mixing the whole prior pool through softmax attention against trainable
// query embeddings. Selection training updates only the query embeddings and
// the task head; the encoder and the prior pool are read-only throughout.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mxe/checkpoint.hpp"
#include "mxe/encoder.hpp"
#include "mxe/eval.hpp"
#include "mxe/graph.hpp"
#include "mxe/text.hpp"
#include "mxe/trainer.hpp"
#include "mxe/util.hpp"

namespace mxe {

struct TaskKind {
  enum class Type { matching, classification, regression };
  Type type = Type::matching;
  int classes = 0;  // classification only

  static TaskKind matching() { return {Type::matching, 0}; }
  static TaskKind classification(int n_classes) { return {Type::classification, n_classes}; }
  static TaskKind regression() { return {Type::regression, 0}; }

  void validate() const {
    if (type == Type::classification)
      check_arg(classes >= 2, "classification needs at least two classes");
  }
};

struct QueryEmbeddings {
  Mat<float> q;  // s x d, the only trainable tensor besides the task head
};

struct MixedPrior {
  Mat<float> alpha;  // s x (|R| * m), row-stochastic attention
  Mat<float> z;      // s x d mixed prior rows
};

struct TaskHeadParams {
  Mat<float> w;  // classification: d x C; regression: d x 1; matching: empty
  Vec<float> b;  // classification: C; regression: 1; matching: empty
};

// The pool of source relation prior rows, stacked relation-major: relation 0's
// m rows first, then relation 1's, and so on. A tied table repeats its shared
// group once per relation so pool indices always map to (relation, row).
inline Mat<float> prior_pool(const RelationPriorTable<float>& table) {
  check_arg(table.n_relations >= 1 && !table.groups.empty(), "prior pool is empty");
  const Eigen::Index m = table.groups[0].rows();
  const Eigen::Index d = table.groups[0].cols();
  Mat<float> pool(Eigen::Index(table.n_relations) * m, d);
  for (uint32_t r = 0; r < table.n_relations; ++r)
    pool.middleRows(Eigen::Index(r) * m, m) = table.rows_for(r);
  return pool;
}

// Per-query softmax attention over the pool rows and the mixed prior rows it
// produces. Pure function of (Q, pool); arithmetic in float64.
inline MixedPrior attention_mixup(const QueryEmbeddings& query,
                                  const RelationPriorTable<float>& table) {
  Mat<float> pool = prior_pool(table);
  check_arg(query.q.rows() >= 1, "attention_mixup: need at least one query row");
  check_arg(query.q.cols() == pool.cols(),
            "attention_mixup: query width does not match prior width");
  Mat<double> p = pool.cast<double>();
  Mat<double> q = query.q.cast<double>();
  Mat<double> logits = q * p.transpose();  // s x K
  Mat<double> alpha(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    double mx = logits.row(t).maxCoeff();
    double denom = 0.0;
    for (Eigen::Index i = 0; i < logits.cols(); ++i) {
      double e = std::exp(logits(t, i) - mx);
      alpha(t, i) = e;
      denom += e;
    }
    alpha.row(t) /= denom;
  }
  MixedPrior out;
  out.alpha = alpha.cast<float>();
  out.z = (alpha * p).cast<float>();
  return out;
}

// Relation-conditioned embedding of one document under a named relation.
inline Vec<float> direct_infer(const Checkpoint& ck, const RelationKind& relation,
                               const TokenSequence& seq) {
  check_arg(relation.id < ck.relation_names.size() &&
                ck.relation_names[relation.id] == relation.name,
            "direct_infer: relation does not belong to this checkpoint: " + relation.name);
  return encode_conditioned(ck.params, ck.priors, relation, seq);
}

inline Vec<float> direct_infer(const Checkpoint& ck, const std::string& relation_name,
                               const TokenSequence& seq) {
  return direct_infer(ck, ck.relation(relation_name), seq);
}

// Embedding of one document under the mixed prior selected by Q.
inline Vec<float> encode_target(const EncoderParams<float>& params,
                                const RelationPriorTable<float>& table,
                                const QueryEmbeddings& query, const TokenSequence& seq) {
  MixedPrior mixed = attention_mixup(query, table);
  return encode_with_prior_rows(params, mixed.z, seq).out;
}

inline Vec<float> encode_target(const Checkpoint& ck, const QueryEmbeddings& query,
                                const TokenSequence& seq) {
  return encode_target(ck.params, ck.priors, query, seq);
}

// Aggregated attention mass per source relation: mean over query rows of the
// mass landing on that relation's block of pool rows. Sums to 1.
inline std::vector<double> relation_weight_report(const MixedPrior& mixed,
                                                  size_t n_relations) {
  check_arg(n_relations >= 1, "relation_weight_report: no relations");
  check_arg(mixed.alpha.cols() % Eigen::Index(n_relations) == 0,
            "relation_weight_report: pool width is not a multiple of the relation count");
  const Eigen::Index m = mixed.alpha.cols() / Eigen::Index(n_relations);
  const Eigen::Index s = mixed.alpha.rows();
  std::vector<double> weights(n_relations, 0.0);
  for (size_t r = 0; r < n_relations; ++r) {
    double mass = 0.0;
    for (Eigen::Index t = 0; t < s; ++t)
      for (Eigen::Index i = 0; i < m; ++i)
        mass += double(mixed.alpha(t, Eigen::Index(r) * m + i));
    weights[r] = mass / double(s);
  }
  return weights;
}

inline void write_relation_weight_report(std::ostream& out,
                                         const std::vector<std::string>& relation_names,
                                         const std::vector<double>& weights) {
  check_arg(relation_names.size() == weights.size(),
            "relation weight report: name/weight count mismatch");
  for (size_t r = 0; r < weights.size(); ++r)
    out << relation_names[r] << '\t' << format_fixed6(weights[r]) << "\n";
}

// One labeled example. `text` is always set; `positive` is the matched
// document for matching tasks, `label` the class for classification, `target`
// the regressed value.
struct SelectionSample {
  TokenSequence text;
  TokenSequence positive;
  int label = 0;
  double target = 0.0;
};

struct SelectConfig {
  int epochs = 60;       // upper bound; early stopping usually ends sooner
  int batch_size = 16;
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  int patience = 5;      // evaluations without improvement before stopping
  int query_rows = 0;    // 0: match the prior token count
  uint64_t seed = 0;

  void validate() const {
    check_arg(epochs >= 1, "select config: epochs must be positive");
    check_arg(batch_size >= 2, "select config: batch size must be at least 2");
    check_arg(std::isfinite(lr) && lr >= 0.0, "select config: lr must be non-negative");
    check_arg(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
              "select config: betas must lie in [0, 1)");
    check_arg(adam_eps > 0.0, "select config: adam epsilon must be positive");
    check_arg(clip_norm > 0.0, "select config: clip norm must be positive");
    check_arg(patience >= 1, "select config: patience must be positive");
    check_arg(query_rows >= 0, "select config: query rows must be non-negative");
  }
};

struct SelectionResult {
  QueryEmbeddings query;
  TaskHeadParams head;
  double val_metric = 0.0;  // best validation value in the task's natural units
  int best_epoch = 0;       // 1-based epoch of the best validation value
  std::vector<double> val_history;
};

namespace detail {

// gradient of the mixup output z with respect to Q, given dL/dz
inline Mat<double> mixup_backward(const Mat<double>& pool, const Mat<double>& alpha,
                                  const Mat<double>& dz) {
  Mat<double> dalpha = dz * pool.transpose();  // s x K
  Mat<double> dlogits(alpha.rows(), alpha.cols());
  for (Eigen::Index t = 0; t < alpha.rows(); ++t) {
    double inner = alpha.row(t).dot(dalpha.row(t));
    dlogits.row(t) = (alpha.row(t).array() * (dalpha.row(t).array() - inner)).matrix();
  }
  return dlogits * pool;  // s x d
}

struct ValScore {
  double natural = 0.0;   // metric in task units
  double oriented = 0.0;  // higher is better
};

// Scores a labeled set under a fixed query and head: matching by in-batch
// precision at 1 over the whole set, classification by macro F1 of argmax
// predictions, regression by rmse (oriented as its negation).
inline ValScore selection_score(const EncoderParams<float>& params,
                                const RelationPriorTable<float>& table,
                                const TaskKind& task,
                                const std::vector<SelectionSample>& set,
                                const QueryEmbeddings& query, const TaskHeadParams& head) {
  const int d = params.config.hidden;
  MixedPrior mixed = attention_mixup(query, table);
  auto embed = [&](const TokenSequence& seq) {
    return encode_with_prior_rows(params, mixed.z, seq).out;
  };
  ValScore score;
  if (task.type == TaskKind::Type::matching) {
    EvalBatch batch;
    batch.queries.resize(Eigen::Index(set.size()), d);
    batch.keys.resize(Eigen::Index(set.size()), d);
    for (size_t i = 0; i < set.size(); ++i) {
      batch.queries.row(Eigen::Index(i)) = embed(set[i].text).cast<double>();
      batch.keys.row(Eigen::Index(i)) = embed(set[i].positive).cast<double>();
    }
    score.natural = prec_at_1(batch);
    score.oriented = score.natural;
  } else if (task.type == TaskKind::Type::classification) {
    std::vector<int> preds, labels;
    for (const auto& sample : set) {
      Vec<double> h = embed(sample.text).cast<double>();
      Vec<double> logits = head.w.cast<double>().transpose() * h + head.b.cast<double>();
      Eigen::Index best;
      logits.maxCoeff(&best);
      preds.push_back(int(best));
      labels.push_back(sample.label);
    }
    score.natural = macro_f1(preds, labels, task.classes);
    score.oriented = score.natural;
  } else {
    std::vector<double> preds, targets;
    Vec<double> w0 = head.w.col(0).cast<double>();
    for (const auto& sample : set) {
      Vec<double> h = embed(sample.text).cast<double>();
      preds.push_back(h.dot(w0) + double(head.b[0]));
      targets.push_back(sample.target);
    }
    score.natural = rmse(preds, targets);
    score.oriented = -score.natural;
  }
  return score;
}

}  // namespace detail

// Natural-unit score of a sample set under a fixed query and task head.
inline double evaluate_selection(const EncoderParams<float>& params,
                                 const RelationPriorTable<float>& table,
                                 const TaskKind& task,
                                 const std::vector<SelectionSample>& set,
                                 const QueryEmbeddings& query, const TaskHeadParams& head) {
  task.validate();
  check_arg(!set.empty(), "evaluate_selection: empty sample set");
  return detail::selection_score(params, table, task, set, query, head).natural;
}

inline double evaluate_selection(const Checkpoint& ck, const TaskKind& task,
                                 const std::vector<SelectionSample>& set,
                                 const QueryEmbeddings& query, const TaskHeadParams& head) {
  return evaluate_selection(ck.params, ck.priors, task, set, query, head);
}

// Trains Q (and the task head for supervised tasks) against a frozen encoder
// and prior pool. Matching uses in-batch contrastive loss over (text,
// positive) pairs, classification softmax cross-entropy, regression squared
// error. Validation runs once per epoch; training stops after `patience`
// evaluations without improvement and the best snapshot is returned.
inline SelectionResult train_selection(const EncoderParams<float>& params,
                                       const RelationPriorTable<float>& table,
                                       const TaskKind& task,
                                       const std::vector<SelectionSample>& train_set,
                                       const std::vector<SelectionSample>& val_set,
                                       const SelectConfig& cfg) {
  cfg.validate();
  task.validate();
  check_arg(!train_set.empty(), "train_selection: empty train set");
  check_arg(!val_set.empty(), "train_selection: empty validation set");
  const int d = params.config.hidden;
  const int s = cfg.query_rows > 0 ? cfg.query_rows : params.config.prior_tokens;
  const bool matching = task.type == TaskKind::Type::matching;
  const bool classify = task.type == TaskKind::Type::classification;

  auto check_samples = [&](const std::vector<SelectionSample>& set, const char* which) {
    for (const auto& sample : set) {
      check_arg(!sample.text.ids.empty(), std::string("train_selection: empty text in ") + which);
      if (matching)
        check_arg(!sample.positive.ids.empty(),
                  std::string("train_selection: matching sample lacks a positive in ") + which);
      if (classify)
        check_arg(sample.label >= 0 && sample.label < task.classes,
                  std::string("train_selection: label out of range in ") + which);
      if (task.type == TaskKind::Type::regression)
        check_arg(std::isfinite(sample.target),
                  std::string("train_selection: non-finite target in ") + which);
    }
  };
  check_samples(train_set, "train set");
  check_samples(val_set, "validation set");
  if (matching) {
    check_arg(train_set.size() >= 2, "train_selection: matching training needs two samples");
    check_arg(val_set.size() >= 2, "train_selection: matching validation needs two samples");
  }

  Mat<float> pool_f = prior_pool(table);
  Mat<double> pool = pool_f.cast<double>();

  // trainable state: Q always, plus the linear head for supervised tasks
  Rng rng(mix_seed(cfg.seed, 0x9e17, 0));
  QueryEmbeddings query;
  query.q.resize(s, d);
  for (Eigen::Index i = 0; i < query.q.size(); ++i)
    query.q.data()[i] = float(rng.normal() * 0.02);
  TaskHeadParams head;
  if (classify) {
    head.w.resize(d, task.classes);
    for (Eigen::Index i = 0; i < head.w.size(); ++i)
      head.w.data()[i] = float(rng.normal() * 0.02);
    head.b = Vec<float>::Zero(task.classes);
  } else if (task.type == TaskKind::Type::regression) {
    head.w.resize(d, 1);
    for (Eigen::Index i = 0; i < head.w.size(); ++i)
      head.w.data()[i] = float(rng.normal() * 0.02);
    head.b = Vec<float>::Zero(1);
  }

  auto encode_all = [&](const Mat<float>& z, const TokenSequence& seq) {
    return encode_with_prior_rows(params, z, seq);
  };

  auto evaluate = [&](const QueryEmbeddings& q_eval, const TaskHeadParams& h_eval) {
    return detail::selection_score(params, table, task, val_set, q_eval, h_eval);
  };

  TrainConfig adam_cfg;  // adam_step reads only the betas and epsilon
  adam_cfg.beta1 = cfg.beta1;
  adam_cfg.beta2 = cfg.beta2;
  adam_cfg.adam_eps = cfg.adam_eps;
  OptimizerState opt_state;

  SelectionResult best;
  best.query = query;
  best.head = head;
  double best_oriented = -std::numeric_limits<double>::infinity();
  int stale = 0;

  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 0x0c8e, uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    size_t done = 0;
    while (done < order.size()) {
      size_t b = std::min(size_t(cfg.batch_size), order.size() - done);
      if (matching && b < 2) break;  // contrastive batches need negatives
      MixedPrior mixed = attention_mixup(query, table);
      Mat<double> alpha = mixed.alpha.cast<double>();

      Mat<double> dz = Mat<double>::Zero(s, d);
      Mat<double> dw, db;
      if (head.w.size()) {
        dw = Mat<double>::Zero(head.w.rows(), head.w.cols());
        db = Mat<double>::Zero(head.b.size(), 1);
      }

      if (matching) {
        std::vector<SeqActivations<float>> act_q(b), act_k(b);
        Mat<double> hq(Eigen::Index(b), d), hk(Eigen::Index(b), d);
        for (size_t i = 0; i < b; ++i) {
          const auto& sample = train_set[order[done + i]];
          act_q[i] = encode_all(mixed.z, sample.text);
          act_k[i] = encode_all(mixed.z, sample.positive);
          hq.row(Eigen::Index(i)) = act_q[i].out.cast<double>();
          hk.row(Eigen::Index(i)) = act_k[i].out.cast<double>();
        }
        Mat<double> scores = hq * hk.transpose();
        Mat<double> dscores(scores.rows(), scores.cols());
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
          double mx = scores.row(i).maxCoeff();
          double denom = 0.0;
          for (Eigen::Index j = 0; j < scores.cols(); ++j) {
            dscores(i, j) = std::exp(scores(i, j) - mx);
            denom += dscores(i, j);
          }
          dscores.row(i) /= denom;
          dscores(i, i) -= 1.0;
        }
        dscores /= double(b);
        Mat<double> dhq = dscores * hk;
        Mat<double> dhk = dscores.transpose() * hq;
        BackwardOptions bopt;
        bopt.accumulate_params = false;
        for (size_t i = 0; i < b; ++i) {
          Vec<float> gq = dhq.row(Eigen::Index(i)).transpose().cast<float>();
          Vec<float> gk = dhk.row(Eigen::Index(i)).transpose().cast<float>();
          dz += backward_sequence<float>(params, act_q[i], gq, nullptr, bopt).cast<double>();
          dz += backward_sequence<float>(params, act_k[i], gk, nullptr, bopt).cast<double>();
        }
      } else {
        BackwardOptions bopt;
        bopt.accumulate_params = false;
        Mat<double> wd = head.w.cast<double>();
        for (size_t i = 0; i < b; ++i) {
          const auto& sample = train_set[order[done + i]];
          auto act = encode_all(mixed.z, sample.text);
          Vec<double> h = act.out.cast<double>();
          Vec<double> dh;
          if (classify) {
            Vec<double> logits = wd.transpose() * h + head.b.cast<double>();
            double mx = logits.maxCoeff();
            Vec<double> p = (logits.array() - mx).exp();
            p /= p.sum();
            Vec<double> dlogits = p;
            dlogits[sample.label] -= 1.0;
            dlogits /= double(b);
            dw += h * dlogits.transpose();
            db += dlogits;
            dh = wd * dlogits;
          } else {
            double pred = h.dot(wd.col(0)) + double(head.b[0]);
            double dpred = 2.0 * (pred - sample.target) / double(b);
            dw.col(0) += dpred * h;
            db(0, 0) += dpred;
            dh = dpred * wd.col(0);
          }
          Vec<float> dh_f = dh.cast<float>();
          dz += backward_sequence<float>(params, act, dh_f, nullptr, bopt).cast<double>();
        }
      }

      Mat<double> dq = detail::mixup_backward(pool, alpha, dz);
      Mat<float> dq_f = dq.cast<float>();
      Mat<float> dw_f;
      Vec<float> db_f;
      std::vector<TensorRef<float>> prefs = {ref_of("query", query.q)};
      std::vector<TensorRef<float>> grefs = {ref_of("query", dq_f)};
      if (head.w.size()) {
        dw_f = dw.cast<float>();
        db_f = db.col(0).cast<float>();
        prefs.push_back(ref_of("head.w", head.w));
        prefs.push_back(ref_of("head.b", head.b));
        grefs.push_back(ref_of("head.w", dw_f));
        grefs.push_back(ref_of("head.b", db_f));
      }
      clip_gradient_norm(grefs, cfg.clip_norm);
      adam_step(prefs, grefs, opt_state, adam_cfg, cfg.lr);
      done += b;
    }

    detail::ValScore score = evaluate(query, head);
    best.val_history.push_back(score.natural);
    if (score.oriented > best_oriented) {
      best_oriented = score.oriented;
      best.val_metric = score.natural;
      best.best_epoch = epoch;
      best.query = query;
      best.head = head;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  return best;
}

inline SelectionResult train_selection(const Checkpoint& ck, const TaskKind& task,
                                       const std::vector<SelectionSample>& train_set,
                                       const std::vector<SelectionSample>& val_set,
                                       const SelectConfig& cfg) {
  return train_selection(ck.params, ck.priors, task, train_set, val_set, cfg);
}

// ---- task dataset files ----
// matching: "query_node<TAB>positive_node"; classification: "node<TAB>label";
// regression: "node<TAB>value". Node ids refer to the graph.

inline std::vector<SelectionSample> load_matching_set(const std::string& path,
                                                      const MultiplexGraph& g,
                                                      const Vocabulary& vocab, int max_len) {
  std::vector<SelectionSample> out;
  size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split(line, '\t');
    std::string where = path + ":" + std::to_string(lineno);
    check_arg(fields.size() == 2, where + ": expected query<TAB>positive");
    SelectionSample sample;
    sample.text = encode_text(vocab, g.node(parse_u64(fields[0], where)).text, max_len);
    sample.positive = encode_text(vocab, g.node(parse_u64(fields[1], where)).text, max_len);
    out.push_back(std::move(sample));
  }
  check_arg(!out.empty(), path + ": empty dataset");
  return out;
}

inline std::vector<SelectionSample> load_classification_set(const std::string& path,
                                                            const MultiplexGraph& g,
                                                            const Vocabulary& vocab,
                                                            int max_len, int classes) {
  std::vector<SelectionSample> out;
  size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split(line, '\t');
    std::string where = path + ":" + std::to_string(lineno);
    check_arg(fields.size() == 2, where + ": expected node<TAB>label");
    SelectionSample sample;
    sample.text = encode_text(vocab, g.node(parse_u64(fields[0], where)).text, max_len);
    uint64_t label = parse_u64(fields[1], where);
    check_arg(label < uint64_t(classes), where + ": label out of range");
    sample.label = int(label);
    out.push_back(std::move(sample));
  }
  check_arg(!out.empty(), path + ": empty dataset");
  return out;
}

inline std::vector<SelectionSample> load_regression_set(const std::string& path,
                                                        const MultiplexGraph& g,
                                                        const Vocabulary& vocab, int max_len) {
  std::vector<SelectionSample> out;
  size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split(line, '\t');
    std::string where = path + ":" + std::to_string(lineno);
    check_arg(fields.size() == 2, where + ": expected node<TAB>value");
    SelectionSample sample;
    sample.text = encode_text(vocab, g.node(parse_u64(fields[0], where)).text, max_len);
    sample.target = parse_f64(fields[1], where);
    out.push_back(std::move(sample));
  }
  check_arg(!out.empty(), path + ": empty dataset");
  return out;
}

}  // namespace mxe
