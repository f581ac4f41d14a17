#pragma once

// Multi-relation contrastive training: round-robin batches over relations,
// per-relation loss weights, Adam with linear warmup then linear decay, and
// global gradient norm clipping. Relations whose weight is exactly zero
// contribute nothing to the objective, so they are excluded from the
// round-robin rather than burning batches on zero gradients.

#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mxe/checkpoint.hpp"
#include "mxe/encoder.hpp"
#include "mxe/graph.hpp"
#include "mxe/text.hpp"
#include "mxe/util.hpp"

namespace mxe {

struct RelationWeights {
  std::vector<double> w;  // indexed by relation id

  static RelationWeights uniform(size_t n_relations) {
    return {std::vector<double>(n_relations, 1.0)};
  }
  static RelationWeights one_hot(size_t n_relations, uint32_t hot) {
    check_arg(hot < n_relations, "one_hot: relation id out of range");
    RelationWeights r{std::vector<double>(n_relations, 0.0)};
    r.w[hot] = 1.0;
    return r;
  }
  void validate(size_t n_relations) const {
    check_arg(w.size() == n_relations, "relation weights: need one weight per relation");
    for (double x : w)
      check_arg(std::isfinite(x) && x >= 0.0, "relation weights: finite and non-negative");
  }
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double peak_lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  int warmup_epochs = 4;
  float dropout = 0.1f;
  uint64_t seed = 0;
  int cycles_per_epoch = 0;  // 0: min trained-relation edge count / batch_size

  void validate() const {
    check_arg(epochs >= 1, "train config: epochs must be positive");
    check_arg(batch_size >= 2, "train config: batch size must be at least 2");
    check_arg(std::isfinite(peak_lr) && peak_lr > 0.0, "train config: peak lr must be positive");
    check_arg(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
              "train config: betas must lie in [0, 1)");
    check_arg(adam_eps > 0.0, "train config: adam epsilon must be positive");
    check_arg(std::isfinite(clip_norm) && clip_norm > 0.0,
              "train config: clip norm must be positive");
    check_arg(warmup_epochs >= 0 && warmup_epochs <= epochs,
              "train config: warmup epochs must lie in [0, epochs]");
    check_arg(dropout >= 0.0f && dropout < 1.0f, "train config: dropout must lie in [0, 1)");
    check_arg(cycles_per_epoch >= 0, "train config: cycles per epoch must be non-negative");
  }
};

struct OptimizerState {
  int64_t step = 0;
  std::vector<std::vector<double>> m, v;  // first/second moments per tensor
};

// Mean over rows of -log softmax(row)[diagonal], computed with per-row max
// subtraction. This is the in-batch contrastive loss on a square score matrix
// whose diagonal holds the true pairs.
inline double infonce_in_batch(const Mat<double>& scores) {
  check_arg(scores.rows() == scores.cols(), "infonce: score matrix must be square");
  check_arg(scores.rows() >= 2, "infonce: need at least two pairs");
  check_arg(scores.allFinite(), "infonce: non-finite scores");
  const Eigen::Index B = scores.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    double mx = scores.row(i).maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < B; ++j) denom += std::exp(scores(i, j) - mx);
    total += std::log(denom) - (scores(i, i) - mx);
  }
  return total / double(B);
}

// Weighted sum of per-relation losses, the training objective's outer sum.
inline double multi_relation_loss(const std::vector<double>& per_relation,
                                  const RelationWeights& weights) {
  check_arg(per_relation.size() == weights.w.size(),
            "multi_relation_loss: a weight is missing for some relation");
  double total = 0.0;
  for (size_t i = 0; i < per_relation.size(); ++i) {
    check_arg(std::isfinite(per_relation[i]), "multi_relation_loss: non-finite loss");
    total += weights.w[i] * per_relation[i];
  }
  return total;
}

// Scales all gradients by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm.
template <class T>
inline double clip_gradient_norm(std::vector<TensorRef<T>>& refs, double max_norm) {
  check_arg(max_norm > 0.0, "clip: max norm must be positive");
  double sq = 0.0;
  for (const auto& r : refs)
    for (size_t i = 0; i < r.size; ++i) {
      double g = double(r.data[i]);
      check_arg(std::isfinite(g), "clip: non-finite gradient in " + r.name);
      sq += g * g;
    }
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    T scale = T(max_norm / norm);
    for (auto& r : refs)
      for (size_t i = 0; i < r.size; ++i) r.data[i] *= scale;
  }
  return norm;
}

template <class T>
inline double clip_gradient_norm(ModelGrads<T>& grads, double max_norm) {
  auto refs = collect_tensors(grads.enc, &grads.priors);
  return clip_gradient_norm(refs, max_norm);
}

// Bias-corrected Adam over a flat tensor list. Moments are kept in float64
// whatever the parameter type; a zero gradient leaves parameters bit-identical.
template <class T>
inline void adam_step(std::vector<TensorRef<T>>& params, const std::vector<TensorRef<T>>& grads,
                      OptimizerState& state, const TrainConfig& cfg, double lr) {
  check_arg(params.size() == grads.size(), "adam: parameter/gradient tensor count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size, 0.0);
      state.v.emplace_back(p.size, 0.0);
    }
  }
  check_arg(state.m.size() == params.size(), "adam: state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (size_t t = 0; t < params.size(); ++t) {
    check_arg(params[t].size == grads[t].size && params[t].name == grads[t].name,
              "adam: tensor shape mismatch at " + params[t].name);
    check_arg(state.m[t].size() == params[t].size, "adam: moment shape mismatch");
    T* p = params[t].data;
    const T* g = grads[t].data;
    double* m = state.m[t].data();
    double* v = state.v[t].data();
    for (size_t i = 0; i < params[t].size; ++i) {
      double gi = double(g[i]);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
      p[i] = T(double(p[i]) - update);
    }
  }
}

template <class T>
inline void adam_step(EncoderParams<T>& params, RelationPriorTable<T>& priors,
                      const ModelGrads<T>& grads, OptimizerState& state, const TrainConfig& cfg,
                      double lr) {
  auto prefs = collect_tensors(params, &priors.groups);
  auto& mut = const_cast<ModelGrads<T>&>(grads);
  auto grefs = collect_tensors(mut.enc, &mut.priors);
  adam_step(prefs, grefs, state, cfg, lr);
}

// Linear ramp 0 -> peak over the warmup steps, then linear decay peak -> 0 at
// total_steps. With no warmup the rate starts at peak.
inline double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak) {
  check_arg(step >= 0 && step <= total_steps, "lr_schedule: step out of range");
  check_arg(warmup_steps >= 0 && warmup_steps <= total_steps,
            "lr_schedule: warmup longer than the run");
  check_arg(std::isfinite(peak) && peak > 0.0, "lr_schedule: peak must be positive");
  if (warmup_steps > 0 && step <= warmup_steps)
    return peak * double(step) / double(warmup_steps);
  if (total_steps > warmup_steps)
    return peak * double(total_steps - step) / double(total_steps - warmup_steps);
  return peak;
}

struct TrainResult {
  EncoderParams<float> params;
  RelationPriorTable<float> priors;
  std::vector<std::string> relation_names;
  std::vector<uint32_t> trained;               // relation ids in round-robin order
  std::vector<double> step0_loss;              // first-batch loss per relation (NaN if untrained)
  std::vector<std::vector<double>> epoch_loss; // [epoch][relation id] mean loss (NaN if untrained)
  int cycles_per_epoch = 0;
  int64_t steps = 0;
};

// Trains the shared encoder plus relation priors on all weighted relations.
// Each epoch runs `cycles_per_epoch` round-robin cycles, one batch per trained
// relation per cycle. Relations with fewer edges than a batch are skipped with
// a log note; relations with weight zero are excluded from the rotation.
// Writes a checkpoint to out_path unless it is empty. Fully deterministic in
// (graph, vocabulary, configs, weights, seed).
inline TrainResult train(const MultiplexGraph& g, const Vocabulary& vocab,
                         const EncoderConfig& encoder_cfg, const TrainConfig& cfg,
                         const RelationWeights& weights, const std::string& out_path,
                         std::ostream* log = nullptr) {
  cfg.validate();
  weights.validate(g.n_relations());
  EncoderConfig ecfg = encoder_cfg;
  ecfg.dropout = cfg.dropout;
  ecfg.validate();
  check_arg(g.n_relations() >= 1, "train: graph has no relations");

  const size_t B = size_t(cfg.batch_size);
  std::vector<uint32_t> usable, trained;
  for (const auto& rel : g.relations) {
    if (g.edges[rel.id].pairs.size() < B) {
      if (log)
        (*log) << "# skip relation " << rel.name << ": " << g.edges[rel.id].pairs.size()
               << " edges < batch " << B << "\n";
      continue;
    }
    usable.push_back(rel.id);
    if (weights.w[rel.id] > 0.0)
      trained.push_back(rel.id);
    else if (log)
      (*log) << "# skip relation " << rel.name << ": weight 0\n";
  }
  check_arg(!usable.empty(), "train: no relation has enough edges for a batch");

  int cycles = cfg.cycles_per_epoch;
  if (cycles == 0 && !trained.empty()) {
    size_t min_edges = std::numeric_limits<size_t>::max();
    for (uint32_t r : trained) min_edges = std::min(min_edges, g.edges[r].pairs.size());
    cycles = int(min_edges / B);
  }
  const int64_t total_steps = int64_t(cfg.epochs) * cycles * int64_t(trained.size());
  const int64_t warmup_steps = int64_t(cfg.warmup_epochs) * cycles * int64_t(trained.size());

  if (log) {
    (*log) << "# train epochs=" << cfg.epochs << " batch=" << cfg.batch_size
           << " lr=" << format_sig9(cfg.peak_lr) << " warmup=" << cfg.warmup_epochs
           << " clip=" << format_sig9(cfg.clip_norm) << " dropout=" << format_sig9(cfg.dropout)
           << " seed=" << cfg.seed << " cycles=" << cycles << " relations=";
    for (size_t i = 0; i < trained.size(); ++i)
      (*log) << (i ? "," : "") << g.relations[trained[i]].name;
    (*log) << "\n";
  }

  auto [params, priors] = init_params<float>(ecfg, vocab.size(), uint32_t(g.n_relations()),
                                             cfg.seed);

  // tokenize every node once; training batches reuse the encoded sequences
  std::vector<TokenSequence> encoded(g.nodes.size());
  for (size_t i = 0; i < g.nodes.size(); ++i)
    encoded[i] = encode_text(vocab, g.nodes[i].text, ecfg.max_len);
  auto seq_of = [&](uint64_t node_id) -> const TokenSequence& {
    return encoded[g.node_index.at(node_id)];
  };

  const double nan = std::numeric_limits<double>::quiet_NaN();
  TrainResult out;
  out.relation_names.reserve(g.n_relations());
  for (const auto& rel : g.relations) out.relation_names.push_back(rel.name);
  out.trained = trained;
  out.step0_loss.assign(g.n_relations(), nan);
  out.cycles_per_epoch = cycles;

  OptimizerState opt_state;
  int64_t global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<double> sum(g.n_relations(), 0.0);
    std::vector<int> count(g.n_relations(), 0);
    for (int cycle = 0; cycle < cycles; ++cycle) {
      uint64_t cycle_seed =
          mix_seed(cfg.seed, 0xba7c, uint64_t(epoch) * uint64_t(cycles) + uint64_t(cycle));
      for (uint32_t r : trained) {
        const RelationKind& rel = g.relations[r];
        auto samples = sample_positive_pairs(g, rel, B, cycle_seed);
        std::vector<std::pair<TokenSequence, TokenSequence>> batch;
        batch.reserve(B);
        for (const auto& s : samples) batch.emplace_back(seq_of(s.src), seq_of(s.dst));

        BatchOptions bopt;
        bopt.train = cfg.dropout > 0.0f;
        bopt.dropout_seed = mix_seed(cfg.seed, 0xd408, uint64_t(global_step));
        auto result = batch_forward_backward(params, priors, rel, batch, weights.w[r], bopt);

        double raw = double(result.raw_loss);
        if (std::isnan(out.step0_loss[r])) out.step0_loss[r] = raw;
        sum[r] += raw;
        count[r] += 1;

        clip_gradient_norm(result.grads, cfg.clip_norm);
        double lr = lr_schedule(global_step + 1, total_steps + 1, warmup_steps, cfg.peak_lr);
        adam_step(params, priors, result.grads, opt_state, cfg, lr);
        ++global_step;
      }
    }
    std::vector<double> means(g.n_relations(), nan);
    for (uint32_t r : trained) {
      means[r] = sum[r] / double(count[r]);
      if (log)
        (*log) << (epoch + 1) << '\t' << g.relations[r].name << '\t' << format_fixed6(means[r])
               << "\n";
    }
    out.epoch_loss.push_back(std::move(means));
  }

  out.steps = global_step;
  out.params = std::move(params);
  out.priors = std::move(priors);
  if (!out_path.empty()) save_checkpoint(out_path, out.params, out.priors, out.relation_names);
  return out;
}

}  // namespace mxe
