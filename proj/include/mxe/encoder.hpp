#pragma once

// Relation-conditioned text encoder: a pre-LN transformer shared by every
// relation, conditioned by prepending per-relation prior rows to the token
// embeddings. The embedding of a document is the final-norm CLS hidden state.
//
// Sequences are processed at their true length (prior rows + non-PAD tokens),
// so attention is exactly (m + p)^2 for a p-token document and PAD never
// influences any output or gradient. Backward passes are exact analytic
// gradients validated against finite differences.

#include <optional>
#include <type_traits>

#include "mxe/graph.hpp"
#include "mxe/tensor.hpp"
#include "mxe/text.hpp"
#include "mxe/util.hpp"

namespace mxe {

enum class PriorInit { zero, normal, word };

inline PriorInit prior_init_from_string(const std::string& s) {
  if (s == "zero") return PriorInit::zero;
  if (s == "normal") return PriorInit::normal;
  if (s == "word") return PriorInit::word;
  throw std::invalid_argument("unknown prior init '" + s + "' (zero|normal|word)");
}

struct EncoderConfig {
  int layers = 2;
  int hidden = 32;         // d; prior rows share this width
  int heads = 4;
  int ffn = 64;
  int max_positions = 64;  // learned position rows for the token stream
  int prior_tokens = 5;    // m rows per relation
  int max_len = 32;        // token budget per document, CLS included
  float dropout = 0.1f;    // applied in training forward passes only
  PriorInit prior_init = PriorInit::normal;
  bool tied_priors = false;  // ablation: one shared prior group for all relations

  void validate() const {
    check_arg(layers >= 1, "encoder: layers must be >= 1");
    check_arg(hidden >= 1 && heads >= 1 && hidden % heads == 0,
              "encoder: heads must divide hidden");
    check_arg(ffn >= 1, "encoder: ffn width must be >= 1");
    check_arg(prior_tokens >= 1, "encoder: prior_tokens must be >= 1");
    check_arg(max_len >= 2, "encoder: max_len must be >= 2");
    check_arg(max_positions >= max_len, "encoder: max_positions must cover max_len");
    check_arg(dropout >= 0.0f && dropout < 1.0f, "encoder: dropout must be in [0, 1)");
  }
};

template <class T>
struct LayerParams {
  Mat<T> wq, wk, wv, wo;  // hidden x hidden
  Vec<T> bq, bk, bv, bo;
  Mat<T> w1, w2;          // hidden x ffn, ffn x hidden
  Vec<T> b1, b2;
  Vec<T> ln1_g, ln1_b, ln2_g, ln2_b;
};

template <class T>
struct EncoderParams {
  EncoderConfig config;
  int vocab_rows = 0;
  Mat<T> tok_emb;  // vocab_rows x hidden
  Mat<T> pos_emb;  // max_positions x hidden
  std::vector<LayerParams<T>> layers;
  Vec<T> lnf_g, lnf_b;  // final norm applied to the CLS row
};

template <class T>
struct RelationPriorTable {
  std::vector<Mat<T>> groups;  // prior_tokens x hidden each
  bool tied = false;
  uint32_t n_relations = 0;
  PriorInit init_mode = PriorInit::normal;

  const Mat<T>& rows_for(uint32_t relation_id) const {
    check_arg(relation_id < n_relations,
              "relation id " + std::to_string(relation_id) + " out of range");
    return groups[tied ? 0 : relation_id];
  }
};

template <class T>
using Embedding = Vec<T>;

// ---- named tensor traversal (fixed order shared by optimizer/checkpoint) ----

template <class T>
inline std::vector<TensorRef<T>> collect_tensors(EncoderParams<T>& p,
                                                 std::vector<Mat<T>>* prior_groups) {
  std::vector<TensorRef<T>> out;
  out.push_back(ref_of("tok_emb", p.tok_emb));
  out.push_back(ref_of("pos_emb", p.pos_emb));
  for (size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    std::string pre = "layer" + std::to_string(i) + ".";
    out.push_back(ref_of(pre + "wq", l.wq));
    out.push_back(ref_of(pre + "bq", l.bq));
    out.push_back(ref_of(pre + "wk", l.wk));
    out.push_back(ref_of(pre + "bk", l.bk));
    out.push_back(ref_of(pre + "wv", l.wv));
    out.push_back(ref_of(pre + "bv", l.bv));
    out.push_back(ref_of(pre + "wo", l.wo));
    out.push_back(ref_of(pre + "bo", l.bo));
    out.push_back(ref_of(pre + "ln1.g", l.ln1_g));
    out.push_back(ref_of(pre + "ln1.b", l.ln1_b));
    out.push_back(ref_of(pre + "w1", l.w1));
    out.push_back(ref_of(pre + "b1", l.b1));
    out.push_back(ref_of(pre + "w2", l.w2));
    out.push_back(ref_of(pre + "b2", l.b2));
    out.push_back(ref_of(pre + "ln2.g", l.ln2_g));
    out.push_back(ref_of(pre + "ln2.b", l.ln2_b));
  }
  out.push_back(ref_of("final_ln.g", p.lnf_g));
  out.push_back(ref_of("final_ln.b", p.lnf_b));
  if (prior_groups)
    for (size_t g = 0; g < prior_groups->size(); ++g)
      out.push_back(ref_of("priors." + std::to_string(g), (*prior_groups)[g]));
  return out;
}

template <class T>
inline int64_t encoder_param_count(const EncoderParams<T>& p) {
  int64_t n = 0;
  auto refs = collect_tensors(const_cast<EncoderParams<T>&>(p),
                              static_cast<std::vector<Mat<T>>*>(nullptr));
  for (const auto& r : refs) n += int64_t(r.size);
  return n;
}

template <class T>
inline int64_t prior_param_count(const RelationPriorTable<T>& t) {
  int64_t n = 0;
  for (const auto& g : t.groups) n += g.size();
  return n;
}

// ---- initialization ----

// All weight matrices and embeddings draw N(0, 0.02^2) from one sequential
// stream; biases start at zero and layer norms at identity. Prior rows draw
// after the encoder, so a seed fixes the encoder regardless of relation count
// or prior init mode.
template <class T>
inline std::pair<EncoderParams<T>, RelationPriorTable<T>> init_params(
    const EncoderConfig& config, int vocab_rows, uint32_t n_relations, uint64_t seed,
    std::optional<PriorInit> prior_init_override = std::nullopt) {
  config.validate();
  check_arg(vocab_rows >= 3, "init: vocabulary must include the reserved rows");
  check_arg(n_relations >= 1, "init: need at least one relation");
  const int d = config.hidden;
  Rng rng(mix_seed(seed, 0x1e17, 0));
  auto draw = [&rng](auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = T(rng.normal() * 0.02);
  };

  EncoderParams<T> p;
  p.config = config;
  if (prior_init_override) p.config.prior_init = *prior_init_override;
  p.vocab_rows = vocab_rows;
  p.tok_emb.resize(vocab_rows, d);
  draw(p.tok_emb);
  p.pos_emb.resize(config.max_positions, d);
  draw(p.pos_emb);
  p.layers.resize(size_t(config.layers));
  for (auto& l : p.layers) {
    l.wq.resize(d, d); l.wk.resize(d, d); l.wv.resize(d, d); l.wo.resize(d, d);
    draw(l.wq); draw(l.wk); draw(l.wv); draw(l.wo);
    l.w1.resize(d, config.ffn); l.w2.resize(config.ffn, d);
    draw(l.w1); draw(l.w2);
    l.bq = Vec<T>::Zero(d); l.bk = Vec<T>::Zero(d); l.bv = Vec<T>::Zero(d);
    l.bo = Vec<T>::Zero(d); l.b1 = Vec<T>::Zero(config.ffn); l.b2 = Vec<T>::Zero(d);
    l.ln1_g = Vec<T>::Ones(d); l.ln1_b = Vec<T>::Zero(d);
    l.ln2_g = Vec<T>::Ones(d); l.ln2_b = Vec<T>::Zero(d);
  }
  p.lnf_g = Vec<T>::Ones(d);
  p.lnf_b = Vec<T>::Zero(d);

  RelationPriorTable<T> table;
  table.tied = p.config.tied_priors;
  table.n_relations = n_relations;
  table.init_mode = p.config.prior_init;
  size_t n_groups = table.tied ? 1 : n_relations;
  for (size_t g = 0; g < n_groups; ++g) {
    Mat<T> rows(config.prior_tokens, d);
    switch (table.init_mode) {
      case PriorInit::zero:
        rows.setZero();
        break;
      case PriorInit::normal:
        draw(rows);
        break;
      case PriorInit::word: {
        // copy randomly chosen non-reserved token rows
        uint64_t lo = vocab_rows > 3 ? 3 : 0;
        for (int r = 0; r < config.prior_tokens; ++r)
          rows.row(r) = p.tok_emb.row(Eigen::Index(lo + rng.below(uint64_t(vocab_rows) - lo)));
        break;
      }
    }
    table.groups.push_back(std::move(rows));
  }
  return {std::move(p), std::move(table)};
}

// Gradients for the encoder plus every prior group, shaped like the params.
template <class T>
struct ModelGrads {
  EncoderParams<T> enc;
  std::vector<Mat<T>> priors;
};

template <class T>
inline ModelGrads<T> zero_grads(const EncoderParams<T>& p, const RelationPriorTable<T>& t) {
  ModelGrads<T> g;
  g.enc.config = p.config;
  g.enc.vocab_rows = p.vocab_rows;
  g.enc.tok_emb = Mat<T>::Zero(p.tok_emb.rows(), p.tok_emb.cols());
  g.enc.pos_emb = Mat<T>::Zero(p.pos_emb.rows(), p.pos_emb.cols());
  g.enc.layers.resize(p.layers.size());
  for (size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    auto& o = g.enc.layers[i];
    o.wq = Mat<T>::Zero(l.wq.rows(), l.wq.cols());
    o.wk = Mat<T>::Zero(l.wk.rows(), l.wk.cols());
    o.wv = Mat<T>::Zero(l.wv.rows(), l.wv.cols());
    o.wo = Mat<T>::Zero(l.wo.rows(), l.wo.cols());
    o.bq = Vec<T>::Zero(l.bq.size()); o.bk = Vec<T>::Zero(l.bk.size());
    o.bv = Vec<T>::Zero(l.bv.size()); o.bo = Vec<T>::Zero(l.bo.size());
    o.w1 = Mat<T>::Zero(l.w1.rows(), l.w1.cols());
    o.w2 = Mat<T>::Zero(l.w2.rows(), l.w2.cols());
    o.b1 = Vec<T>::Zero(l.b1.size()); o.b2 = Vec<T>::Zero(l.b2.size());
    o.ln1_g = Vec<T>::Zero(l.ln1_g.size()); o.ln1_b = Vec<T>::Zero(l.ln1_b.size());
    o.ln2_g = Vec<T>::Zero(l.ln2_g.size()); o.ln2_b = Vec<T>::Zero(l.ln2_b.size());
  }
  g.enc.lnf_g = Vec<T>::Zero(p.lnf_g.size());
  g.enc.lnf_b = Vec<T>::Zero(p.lnf_b.size());
  for (const auto& grp : t.groups) g.priors.push_back(Mat<T>::Zero(grp.rows(), grp.cols()));
  return g;
}

// ---- forward ----

constexpr double kLayerNormEps = 1e-5;

template <class T>
inline T gelu(T x) {
  return x * T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <class T>
inline T gelu_grad(T x) {
  T phi = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  T dens = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
  return phi + x * dens;
}

struct ForwardOptions {
  bool train = false;        // enables dropout
  uint64_t dropout_seed = 0;
  uint64_t stream = 0;       // distinguishes sequences within one step
};

// Everything backward needs, kept per sequence.
template <class T>
struct SeqActivations {
  int n = 0;          // prior rows + attn_len
  int s = 0;          // prior rows
  int cls = 0;        // row index of CLS (== s)
  std::vector<int32_t> tok_ids;  // the attn_len token ids actually encoded
  Mat<T> x0;          // input after dropout
  Mat<T> drop0;
  struct Layer {
    Mat<T> ln1_out; Vec<T> ln1_mu, ln1_rstd;
    Mat<T> q, k, v;
    Mat<T> probs;     // heads stacked: (H*n) x n
    Mat<T> ctx;
    Mat<T> drop_attn;
    Mat<T> x1;        // after attention residual
    Mat<T> ln2_out; Vec<T> ln2_mu, ln2_rstd;
    Mat<T> ffn_pre, ffn_act;
    Mat<T> drop_ffn;
    Mat<T> x2;        // after ffn residual
  };
  std::vector<Layer> layers;
  T lnf_mu = T(0), lnf_rstd = T(0);
  Embedding<T> out;   // the document embedding
};

namespace detail {

template <class T>
inline void layer_norm_rows(const Mat<T>& x, const Vec<T>& g, const Vec<T>& b, Mat<T>& y,
                            Vec<T>& mu, Vec<T>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  y.resize(n, d);
  mu.resize(n);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    T m = x.row(i).mean();
    T var = (x.row(i).array() - m).square().mean();
    T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    mu[i] = m;
    rstd[i] = r;
    y.row(i) = (((x.row(i).array() - m) * r) * g.transpose().array() + b.transpose().array())
                   .matrix();
  }
}

// dx for one row given upstream dy; accumulates dg/db
template <class T>
inline void layer_norm_row_backward(const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& x,
                                    T mu, T rstd, const Vec<T>& g,
                                    const Eigen::Matrix<T, 1, Eigen::Dynamic>& dy,
                                    Eigen::Matrix<T, 1, Eigen::Dynamic>& dx, Vec<T>* dg,
                                    Vec<T>* db) {
  const Eigen::Index d = x.size();
  Eigen::Matrix<T, 1, Eigen::Dynamic> xhat = ((x.array() - mu) * rstd).matrix();
  if (dg) dg->noalias() += (dy.array() * xhat.array()).matrix().transpose();
  if (db) db->noalias() += dy.transpose();
  Eigen::Matrix<T, 1, Eigen::Dynamic> dxhat = (dy.array() * g.transpose().array()).matrix();
  T m1 = dxhat.sum() / T(d);
  T m2 = (dxhat.array() * xhat.array()).sum() / T(d);
  dx = ((dxhat.array() - m1 - xhat.array() * m2) * rstd).matrix();
}

template <class T>
inline Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, float rate, Rng& rng) {
  Mat<T> m(rows, cols);
  T keep_scale = T(1) / T(1.0f - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = rng.uniform() < double(rate) ? T(0) : keep_scale;
  return m;
}

template <class T>
inline void check_finite_block(const Mat<T>& x, int layer_index) {
  if (!x.allFinite())
    throw std::runtime_error("non-finite activation in encoder layer " +
                             std::to_string(layer_index));
}

}  // namespace detail

// Runs the transformer over [prior_rows ; CLS + tokens]. prior_rows may come
// from the relation table or from a mixed target prior.
template <class T>
inline SeqActivations<T> encode_with_prior_rows(const EncoderParams<T>& p,
                                                const Mat<T>& prior_rows,
                                                const TokenSequence& seq,
                                                const ForwardOptions& opt = {}) {
  const EncoderConfig& cfg = p.config;
  const int d = cfg.hidden;
  const int s = int(prior_rows.rows());
  check_arg(s >= 1, "encode: need at least one prior row");
  check_arg(prior_rows.cols() == d, "encode: prior row width must match hidden size");
  check_arg(seq.attn_len >= 1 && size_t(seq.attn_len) <= seq.ids.size(),
            "encode: attn_len out of range");
  check_arg(int(seq.ids.size()) + s <= cfg.max_positions,
            "encode: sequence plus prior rows exceeds max_positions");
  for (int32_t id : seq.ids)
    check_arg(id >= 0 && id < p.vocab_rows, "encode: token id out of vocabulary range");

  SeqActivations<T> act;
  act.s = s;
  act.cls = s;
  act.n = s + seq.attn_len;
  act.tok_ids.assign(seq.ids.begin(), seq.ids.begin() + seq.attn_len);
  const int n = act.n;

  bool dropping = opt.train && cfg.dropout > 0.0f;
  Rng drop_rng(mix_seed(opt.dropout_seed, opt.stream, 0xd0));

  Mat<T> x(n, d);
  x.topRows(s) = prior_rows;  // prior rows carry no position embedding
  for (int j = 0; j < seq.attn_len; ++j)
    x.row(s + j) = p.tok_emb.row(act.tok_ids[size_t(j)]) + p.pos_emb.row(j);
  if (dropping) {
    act.drop0 = detail::dropout_mask<T>(n, d, cfg.dropout, drop_rng);
    x.array() *= act.drop0.array();
  }
  act.x0 = x;

  const int H = cfg.heads;
  const int dh = d / H;
  const T scale = T(1) / std::sqrt(T(dh));
  act.layers.resize(size_t(cfg.layers));
  for (int li = 0; li < cfg.layers; ++li) {
    const auto& l = p.layers[size_t(li)];
    auto& a = act.layers[size_t(li)];

    detail::layer_norm_rows(x, l.ln1_g, l.ln1_b, a.ln1_out, a.ln1_mu, a.ln1_rstd);
    a.q.noalias() = a.ln1_out * l.wq;
    a.q.rowwise() += l.bq.transpose();
    a.k.noalias() = a.ln1_out * l.wk;
    a.k.rowwise() += l.bk.transpose();
    a.v.noalias() = a.ln1_out * l.wv;
    a.v.rowwise() += l.bv.transpose();

    a.probs.resize(H * n, n);
    a.ctx.resize(n, d);
    for (int h = 0; h < H; ++h) {
      auto qh = a.q.middleCols(h * dh, dh);
      auto kh = a.k.middleCols(h * dh, dh);
      auto vh = a.v.middleCols(h * dh, dh);
      Mat<T> sc = qh * kh.transpose() * scale;
      for (int i = 0; i < n; ++i) {
        T mx = sc.row(i).maxCoeff();
        Eigen::Array<T, 1, Eigen::Dynamic> e = (sc.row(i).array() - mx).exp();
        a.probs.row(h * n + i) = (e / e.sum()).matrix();
      }
      a.ctx.middleCols(h * dh, dh).noalias() = a.probs.middleRows(h * n, n) * vh;
    }
    Mat<T> attn_out = a.ctx * l.wo;
    attn_out.rowwise() += l.bo.transpose();
    if (dropping) {
      a.drop_attn = detail::dropout_mask<T>(n, d, cfg.dropout, drop_rng);
      attn_out.array() *= a.drop_attn.array();
    }
    a.x1 = x + attn_out;

    detail::layer_norm_rows(a.x1, l.ln2_g, l.ln2_b, a.ln2_out, a.ln2_mu, a.ln2_rstd);
    a.ffn_pre.noalias() = a.ln2_out * l.w1;
    a.ffn_pre.rowwise() += l.b1.transpose();
    a.ffn_act = a.ffn_pre.unaryExpr([](T u) { return gelu(u); });
    Mat<T> ffn_out = a.ffn_act * l.w2;
    ffn_out.rowwise() += l.b2.transpose();
    if (dropping) {
      a.drop_ffn = detail::dropout_mask<T>(n, d, cfg.dropout, drop_rng);
      ffn_out.array() *= a.drop_ffn.array();
    }
    a.x2 = a.x1 + ffn_out;
    detail::check_finite_block(a.x2, li);
    x = a.x2;
  }

  // final norm on the CLS row only; other rows are never read
  const auto cls_row = x.row(act.cls);
  T m = cls_row.mean();
  T var = (cls_row.array() - m).square().mean();
  act.lnf_mu = m;
  act.lnf_rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
  act.out = (((cls_row.array() - m) * act.lnf_rstd) * p.lnf_g.transpose().array() +
             p.lnf_b.transpose().array())
                .matrix()
                .transpose();
  check_arg(act.out.allFinite(), "encode: non-finite embedding");
  return act;
}

template <class T>
inline SeqActivations<T> encode_conditioned_full(const EncoderParams<T>& p,
                                                 const RelationPriorTable<T>& table,
                                                 const RelationKind& relation,
                                                 const TokenSequence& seq,
                                                 const ForwardOptions& opt = {}) {
  return encode_with_prior_rows(p, table.rows_for(relation.id), seq, opt);
}

template <class T>
inline Embedding<T> encode_conditioned(const EncoderParams<T>& p,
                                       const RelationPriorTable<T>& table,
                                       const RelationKind& relation, const TokenSequence& seq,
                                       const ForwardOptions& opt = {}) {
  return encode_conditioned_full(p, table, relation, seq, opt).out;
}

template <class T>
inline T similarity(const Embedding<T>& a, const Embedding<T>& b) {
  check_arg(a.size() == b.size(), "similarity: dimension mismatch");
  return a.dot(b);
}

// ---- backward ----

struct BackwardOptions {
  bool accumulate_params = true;  // off when only the prior-row input gradient matters
};

// Propagates d(loss)/d(embedding) back through the stored activations.
// Returns the gradient on the prior input rows; token/position/parameter
// gradients accumulate into `grads` when enabled.
template <class T>
inline Mat<T> backward_sequence(const EncoderParams<T>& p, const SeqActivations<T>& act,
                                const Embedding<T>& dout, ModelGrads<T>* grads,
                                const BackwardOptions& opt = {}) {
  const EncoderConfig& cfg = p.config;
  const int d = cfg.hidden;
  const int n = act.n;
  const int H = cfg.heads;
  const int dh = d / H;
  const T scale = T(1) / std::sqrt(T(dh));
  const bool acc = opt.accumulate_params && grads != nullptr;
  check_arg(dout.size() == d, "backward: gradient width mismatch");

  using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;

  // final norm on the CLS row
  Mat<T> dx = Mat<T>::Zero(n, d);
  {
    const Mat<T>& top = act.layers.back().x2;
    Row xhat = ((top.row(act.cls).array() - act.lnf_mu) * act.lnf_rstd).matrix();
    Row dy = dout.transpose();
    if (acc) {
      grads->enc.lnf_g.noalias() += (dy.array() * xhat.array()).matrix().transpose();
      grads->enc.lnf_b.noalias() += dy.transpose();
    }
    Row dxhat = (dy.array() * p.lnf_g.transpose().array()).matrix();
    T m1 = dxhat.sum() / T(d);
    T m2 = (dxhat.array() * xhat.array()).sum() / T(d);
    dx.row(act.cls) = ((dxhat.array() - m1 - xhat.array() * m2) * act.lnf_rstd).matrix();
  }

  for (int li = cfg.layers - 1; li >= 0; --li) {
    const auto& l = p.layers[size_t(li)];
    const auto& a = act.layers[size_t(li)];
    LayerParams<T>* gl = acc ? &grads->enc.layers[size_t(li)] : nullptr;

    // ffn block: x2 = x1 + drop ⊙ (gelu(ln2(x1) w1 + b1) w2 + b2)
    Mat<T> dffn_out = dx;
    if (a.drop_ffn.size()) dffn_out.array() *= a.drop_ffn.array();
    if (acc) {
      gl->w2.noalias() += a.ffn_act.transpose() * dffn_out;
      gl->b2.noalias() += dffn_out.colwise().sum().transpose();
    }
    Mat<T> dact = dffn_out * l.w2.transpose();
    Mat<T> dpre = (dact.array() * a.ffn_pre.unaryExpr([](T u) { return gelu_grad(u); }).array())
                      .matrix();
    if (acc) {
      gl->w1.noalias() += a.ln2_out.transpose() * dpre;
      gl->b1.noalias() += dpre.colwise().sum().transpose();
    }
    Mat<T> dln2 = dpre * l.w1.transpose();
    for (int i = 0; i < n; ++i) {
      Row dy = dln2.row(i);
      Row dxi;
      detail::layer_norm_row_backward<T>(a.x1.row(i), a.ln2_mu[i], a.ln2_rstd[i], l.ln2_g, dy,
                                         dxi, gl ? &gl->ln2_g : nullptr,
                                         gl ? &gl->ln2_b : nullptr);
      dx.row(i) += dxi;  // dx now holds d/d(x1): residual + ffn path
    }

    // attention block: x1 = x + drop ⊙ (ctx wo + bo)
    Mat<T> dattn_out = dx;
    if (a.drop_attn.size()) dattn_out.array() *= a.drop_attn.array();
    if (acc) {
      gl->wo.noalias() += a.ctx.transpose() * dattn_out;
      gl->bo.noalias() += dattn_out.colwise().sum().transpose();
    }
    Mat<T> dctx = dattn_out * l.wo.transpose();
    Mat<T> dq(n, d), dk(n, d), dv(n, d);
    for (int h = 0; h < H; ++h) {
      auto ph = a.probs.middleRows(h * n, n);
      auto vh = a.v.middleCols(h * dh, dh);
      auto qh = a.q.middleCols(h * dh, dh);
      auto kh = a.k.middleCols(h * dh, dh);
      Mat<T> dch = dctx.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() = ph.transpose() * dch;
      Mat<T> dp = dch * vh.transpose();
      Mat<T> ds(n, n);
      for (int i = 0; i < n; ++i) {
        T dot = (dp.row(i).array() * ph.row(i).array()).sum();
        ds.row(i) = (ph.row(i).array() * (dp.row(i).array() - dot)).matrix() * scale;
      }
      dq.middleCols(h * dh, dh).noalias() = ds * kh;
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qh;
    }
    if (acc) {
      gl->wq.noalias() += a.ln1_out.transpose() * dq;
      gl->bq.noalias() += dq.colwise().sum().transpose();
      gl->wk.noalias() += a.ln1_out.transpose() * dk;
      gl->bk.noalias() += dk.colwise().sum().transpose();
      gl->wv.noalias() += a.ln1_out.transpose() * dv;
      gl->bv.noalias() += dv.colwise().sum().transpose();
    }
    Mat<T> dln1 = dq * l.wq.transpose() + dk * l.wk.transpose() + dv * l.wv.transpose();
    const Mat<T>& xin = (li == 0) ? act.x0 : act.layers[size_t(li - 1)].x2;
    for (int i = 0; i < n; ++i) {
      Row dy = dln1.row(i);
      Row dxi;
      detail::layer_norm_row_backward<T>(xin.row(i), a.ln1_mu[i], a.ln1_rstd[i], l.ln1_g, dy,
                                         dxi, gl ? &gl->ln1_g : nullptr,
                                         gl ? &gl->ln1_b : nullptr);
      dx.row(i) += dxi;  // dx now holds d/d(layer input)
    }
  }

  if (act.drop0.size()) dx.array() *= act.drop0.array();
  if (acc) {
    for (size_t j = 0; j < act.tok_ids.size(); ++j) {
      grads->enc.tok_emb.row(act.tok_ids[j]) += dx.row(act.s + Eigen::Index(j));
      grads->enc.pos_emb.row(Eigen::Index(j)) += dx.row(act.s + Eigen::Index(j));
    }
  }
  return dx.topRows(act.s);
}

// ---- precision widening ----

// loss arithmetic never runs below float64, and a long double model keeps
// long double losses (what the finite-difference oracle relies on)
template <class T>
using LossAcc = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

// batch gradients accumulate one precision level above the pipeline type, so
// small entries produced by cancellation stay accurate relative to their size
template <class T>
using GradAcc =
    std::conditional_t<std::is_same_v<T, float>, double, long double>;

template <class To, class From>
inline EncoderParams<To> cast_params(const EncoderParams<From>& p) {
  EncoderParams<To> o;
  o.config = p.config;
  o.vocab_rows = p.vocab_rows;
  o.tok_emb = p.tok_emb.template cast<To>();
  o.pos_emb = p.pos_emb.template cast<To>();
  o.layers.resize(p.layers.size());
  for (size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    auto& t = o.layers[i];
    t.wq = l.wq.template cast<To>(); t.bq = l.bq.template cast<To>();
    t.wk = l.wk.template cast<To>(); t.bk = l.bk.template cast<To>();
    t.wv = l.wv.template cast<To>(); t.bv = l.bv.template cast<To>();
    t.wo = l.wo.template cast<To>(); t.bo = l.bo.template cast<To>();
    t.w1 = l.w1.template cast<To>(); t.b1 = l.b1.template cast<To>();
    t.w2 = l.w2.template cast<To>(); t.b2 = l.b2.template cast<To>();
    t.ln1_g = l.ln1_g.template cast<To>(); t.ln1_b = l.ln1_b.template cast<To>();
    t.ln2_g = l.ln2_g.template cast<To>(); t.ln2_b = l.ln2_b.template cast<To>();
  }
  o.lnf_g = p.lnf_g.template cast<To>();
  o.lnf_b = p.lnf_b.template cast<To>();
  return o;
}

template <class To, class From>
inline SeqActivations<To> cast_activations(const SeqActivations<From>& a) {
  SeqActivations<To> o;
  o.n = a.n; o.s = a.s; o.cls = a.cls; o.tok_ids = a.tok_ids;
  o.x0 = a.x0.template cast<To>();
  if (a.drop0.size()) o.drop0 = a.drop0.template cast<To>();
  o.layers.resize(a.layers.size());
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const auto& l = a.layers[i];
    auto& t = o.layers[i];
    t.ln1_out = l.ln1_out.template cast<To>();
    t.ln1_mu = l.ln1_mu.template cast<To>();
    t.ln1_rstd = l.ln1_rstd.template cast<To>();
    t.q = l.q.template cast<To>(); t.k = l.k.template cast<To>(); t.v = l.v.template cast<To>();
    t.probs = l.probs.template cast<To>();
    t.ctx = l.ctx.template cast<To>();
    if (l.drop_attn.size()) t.drop_attn = l.drop_attn.template cast<To>();
    t.x1 = l.x1.template cast<To>();
    t.ln2_out = l.ln2_out.template cast<To>();
    t.ln2_mu = l.ln2_mu.template cast<To>();
    t.ln2_rstd = l.ln2_rstd.template cast<To>();
    t.ffn_pre = l.ffn_pre.template cast<To>();
    t.ffn_act = l.ffn_act.template cast<To>();
    if (l.drop_ffn.size()) t.drop_ffn = l.drop_ffn.template cast<To>();
    t.x2 = l.x2.template cast<To>();
  }
  o.lnf_mu = To(a.lnf_mu);
  o.lnf_rstd = To(a.lnf_rstd);
  o.out = a.out.template cast<To>();
  return o;
}

template <class T>
struct BatchResult {
  LossAcc<T> loss = 0;      // relation weight applied
  LossAcc<T> raw_loss = 0;  // unweighted mean InfoNCE
  ModelGrads<T> grads;
};

struct BatchOptions {
  bool train = false;
  uint64_t dropout_seed = 0;
  bool compute_grads = true;
};

// One contrastive step on positive pairs of one relation: every src in the
// batch scores against every dst, the matching dst is the positive and the
// rest are in-batch negatives. Score/softmax arithmetic runs in float64
// whatever T is. A zero relation weight yields zero loss and zero gradients.
template <class T>
inline BatchResult<T> batch_forward_backward(
    const EncoderParams<T>& p, const RelationPriorTable<T>& table, const RelationKind& relation,
    const std::vector<std::pair<TokenSequence, TokenSequence>>& batch, double relation_weight,
    const BatchOptions& opt = {}) {
  using Acc = LossAcc<T>;
  const size_t B = batch.size();
  check_arg(B >= 2, "batch_forward_backward: need at least two pairs for in-batch negatives");
  check_arg(std::isfinite(relation_weight) && relation_weight >= 0.0,
            "batch_forward_backward: relation weight must be finite and non-negative");
  const Mat<T>& prior_rows = table.rows_for(relation.id);
  const int d = p.config.hidden;

  std::vector<SeqActivations<T>> src_act(B), dst_act(B);
  Mat<Acc> hs(B, d), hd(B, d);
  for (size_t i = 0; i < B; ++i) {
    ForwardOptions fo;
    fo.train = opt.train;
    fo.dropout_seed = opt.dropout_seed;
    fo.stream = 2 * i;
    src_act[i] = encode_with_prior_rows(p, prior_rows, batch[i].first, fo);
    fo.stream = 2 * i + 1;
    dst_act[i] = encode_with_prior_rows(p, prior_rows, batch[i].second, fo);
    hs.row(Eigen::Index(i)) = src_act[i].out.template cast<Acc>().transpose();
    hd.row(Eigen::Index(i)) = dst_act[i].out.template cast<Acc>().transpose();
  }

  Mat<Acc> scores = hs * hd.transpose();
  check_io(scores.allFinite(), "batch_forward_backward: non-finite similarity scores");
  Mat<Acc> probs(B, B);
  Acc raw = 0;
  for (size_t i = 0; i < B; ++i) {
    Acc mx = scores.row(Eigen::Index(i)).maxCoeff();
    Eigen::Array<Acc, 1, Eigen::Dynamic> e =
        (scores.row(Eigen::Index(i)).array() - mx).exp();
    Acc z = e.sum();
    probs.row(Eigen::Index(i)) = (e / z).matrix();
    raw += mx + std::log(z) - scores(Eigen::Index(i), Eigen::Index(i));
  }
  raw /= Acc(B);

  BatchResult<T> out;
  out.raw_loss = raw;
  out.loss = Acc(relation_weight) * raw;
  out.grads = zero_grads(p, table);
  if (!opt.compute_grads || relation_weight == 0.0) return out;

  Mat<Acc> dscores = probs;
  dscores.diagonal().array() -= Acc(1);
  dscores *= Acc(relation_weight) / Acc(B);
  Mat<Acc> dhs = dscores * hd;
  Mat<Acc> dhd = dscores.transpose() * hs;

  // the backward runs on a widened shadow of the pipeline state
  using W = GradAcc<T>;
  EncoderParams<W> pw = cast_params<W>(p);
  RelationPriorTable<W> tw;
  tw.tied = table.tied;
  tw.n_relations = table.n_relations;
  tw.init_mode = table.init_mode;
  for (const auto& grp : table.groups) tw.groups.push_back(grp.template cast<W>());
  ModelGrads<W> acc_grads = zero_grads(pw, tw);

  size_t group = table.tied ? 0 : relation.id;
  for (size_t i = 0; i < B; ++i) {
    Embedding<W> gs = dhs.row(Eigen::Index(i)).transpose().template cast<W>();
    Embedding<W> gd = dhd.row(Eigen::Index(i)).transpose().template cast<W>();
    auto sw = cast_activations<W>(src_act[i]);
    auto dw = cast_activations<W>(dst_act[i]);
    acc_grads.priors[group] += backward_sequence(pw, sw, gs, &acc_grads);
    acc_grads.priors[group] += backward_sequence(pw, dw, gd, &acc_grads);
  }
  auto dst_refs = collect_tensors(out.grads.enc, &out.grads.priors);
  auto src_refs = collect_tensors(acc_grads.enc, &acc_grads.priors);
  for (size_t t = 0; t < dst_refs.size(); ++t)
    for (size_t i = 0; i < dst_refs[t].size; ++i)
      dst_refs[t].data[i] = T(src_refs[t].data[i]);
  return out;
}

// ---- gradient verification ----

// Compares the analytic gradient of the contrastive batch loss against a
// central finite difference, both anchored at the T-quantized parameter point.
//
// The comparison arithmetic is widened (analytic side one precision level up,
// difference quotient in long double) so that the residual reflects only the
// O(eps^2) truncation of the central difference. At pipeline precision the
// small-gradient entries are dominated by forward rounding noise (measured
// ~1e-2 relative at float32), which would mask real derivation errors; a
// derivation bug shows up at any precision, so widening keeps the check
// meaningful while the tolerances stay far below the failure size of an
// actual math error.
template <class T>
inline double check_gradients(const EncoderConfig& config, int vocab_rows, uint32_t n_relations,
                              uint64_t seed, const RelationKind& relation,
                              const std::vector<std::pair<TokenSequence, TokenSequence>>& batch,
                              double epsilon, double relation_weight = 1.0) {
  check_arg(epsilon > 0.0, "check_gradients: epsilon must be positive");
  auto [p, table] = init_params<T>(config, vocab_rows, n_relations, seed);
  int64_t total = encoder_param_count(p) + prior_param_count(table);
  check_arg(total <= 10000, "check_gradients: model too large (" + std::to_string(total) +
                                " parameters, limit 10000)");

  using W = GradAcc<T>;
  EncoderParams<W> pa = cast_params<W>(p);
  RelationPriorTable<W> ta;
  ta.tied = table.tied;
  ta.n_relations = table.n_relations;
  ta.init_mode = table.init_mode;
  for (const auto& grp : table.groups) ta.groups.push_back(grp.template cast<W>());

  BatchOptions opt;  // dropout off: the loss must be a deterministic function of params
  auto analytic = batch_forward_backward(pa, ta, relation, batch, relation_weight, opt);

  EncoderParams<long double> pw = cast_params<long double>(p);
  RelationPriorTable<long double> tablew;
  tablew.tied = table.tied;
  tablew.n_relations = table.n_relations;
  tablew.init_mode = table.init_mode;
  for (const auto& grp : table.groups)
    tablew.groups.push_back(grp.template cast<long double>());
  auto refs_w = collect_tensors(pw, &tablew.groups);
  auto grefs = collect_tensors(analytic.grads.enc, &analytic.grads.priors);

  BatchOptions fd_opt;
  fd_opt.compute_grads = false;
  const long double eps = epsilon;
  double worst = 0.0;
  for (size_t t = 0; t < refs_w.size(); ++t) {
    for (size_t i = 0; i < refs_w[t].size; ++i) {
      long double keep = refs_w[t].data[i];
      refs_w[t].data[i] = keep + eps;
      long double up =
          batch_forward_backward(pw, tablew, relation, batch, relation_weight, fd_opt).loss;
      refs_w[t].data[i] = keep - eps;
      long double dn =
          batch_forward_backward(pw, tablew, relation, batch, relation_weight, fd_opt).loss;
      refs_w[t].data[i] = keep;
      double numeric = double((up - dn) / (2.0L * eps));
      double analytic_v = double(grefs[t].data[i]);
      double rel = std::abs(analytic_v - numeric) /
                   std::max({std::abs(analytic_v), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace mxe
