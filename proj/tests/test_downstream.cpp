#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mxe/downstream.hpp"
#include "mxe/synthetic.hpp"

using namespace mxe;

namespace {

struct ToySetup {
  SyntheticGraph sg;
  Vocabulary vocab;
  EncoderConfig ecfg;
  Checkpoint ck;
};

EncoderConfig toy_encoder() {
  EncoderConfig c;
  c.layers = 1;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 32;
  c.max_positions = 16;
  c.prior_tokens = 2;
  c.max_len = 8;
  c.dropout = 0.0f;
  return c;
}

// one trained toy checkpoint shared across test cases
const ToySetup& toy() {
  static ToySetup t = [] {
    SyntheticConfig cfg;
    cfg.nodes = 40;
    cfg.relations = 2;
    cfg.clusters = 4;
    cfg.edges_per_relation = 60;
    cfg.filler_vocab = 8;
    cfg.filler_tokens = 1;
    cfg.seed = 41;
    ToySetup t;
    t.sg = make_synthetic_graph(cfg);
    std::vector<std::string> corpus;
    for (const auto& n : t.sg.graph.nodes) corpus.push_back(n.text);
    t.vocab = build_vocabulary(corpus, 1, 0);
    t.ecfg = toy_encoder();
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.peak_lr = 3e-3;
    tc.warmup_epochs = 0;
    tc.dropout = 0.0f;
    tc.cycles_per_epoch = 3;
    tc.seed = 9;
    auto result = train(t.sg.graph, t.vocab, t.ecfg, tc, RelationWeights::uniform(2), "");
    t.ck = parse_checkpoint(
        serialize_checkpoint(result.params, result.priors, result.relation_names));
    return t;
  }();
  return t;
}

TokenSequence toy_seq(uint64_t node) {
  const auto& t = toy();
  return encode_text(t.vocab, t.sg.graph.node(node).text, t.ecfg.max_len);
}

// matching samples from a relation's edge list
std::vector<SelectionSample> edge_samples(size_t relation, size_t from, size_t count) {
  const auto& t = toy();
  const auto& pairs = t.sg.graph.edges[relation].pairs;
  REQUIRE(from + count <= pairs.size());
  std::vector<SelectionSample> out;
  for (size_t i = from; i < from + count; ++i) {
    SelectionSample s;
    s.text = toy_seq(pairs[i].first);
    s.positive = toy_seq(pairs[i].second);
    out.push_back(std::move(s));
  }
  return out;
}

RelationPriorTable<float> two_row_table() {
  RelationPriorTable<float> table;
  table.n_relations = 2;
  table.tied = false;
  Mat<float> a(1, 2), b(1, 2);
  a << 1.0f, 0.0f;
  b << 0.0f, 1.0f;
  table.groups = {a, b};
  return table;
}

}  // namespace

TEST_CASE("prior pool stacks relation blocks in order") {
  RelationPriorTable<float> table;
  table.n_relations = 2;
  table.tied = false;
  Mat<float> g0(1, 2), g1(1, 2);
  g0 << 1.0f, 2.0f;
  g1 << 3.0f, 4.0f;
  table.groups = {g0, g1};
  Mat<float> pool = prior_pool(table);
  REQUIRE(pool.rows() == 2);
  REQUIRE(pool(0, 0) == 1.0f);
  REQUIRE(pool(0, 1) == 2.0f);
  REQUIRE(pool(1, 0) == 3.0f);
  REQUIRE(pool(1, 1) == 4.0f);

  RelationPriorTable<float> tied;
  tied.n_relations = 3;
  tied.tied = true;
  Mat<float> shared(1, 2);
  shared << 5.0f, 6.0f;
  tied.groups = {shared};
  Mat<float> tp = prior_pool(tied);
  REQUIRE(tp.rows() == 3);
  for (int r = 0; r < 3; ++r) {
    REQUIRE(tp(r, 0) == 5.0f);
    REQUIRE(tp(r, 1) == 6.0f);
  }
}

TEST_CASE("attention mixup on a hand-built two-relation pool") {
  auto table = two_row_table();
  QueryEmbeddings query;
  query.q.resize(1, 2);
  query.q << 10.0f, 0.0f;
  MixedPrior mixed = attention_mixup(query, table);
  REQUIRE(mixed.alpha.rows() == 1);
  REQUIRE(mixed.alpha.cols() == 2);
  // logits (10, 0): softmax e^10/(e^10+1) and 1/(e^10+1)
  REQUIRE(double(mixed.alpha(0, 0)) == Catch::Approx(0.9999546021312976).margin(1e-6));
  REQUIRE(double(mixed.alpha(0, 1)) == Catch::Approx(4.5397868702434395e-05).margin(1e-9));
  REQUIRE(double(mixed.z(0, 0)) == Catch::Approx(0.9999546021312976).margin(1e-6));
  REQUIRE(double(mixed.z(0, 1)) == Catch::Approx(4.5397868702434395e-05).margin(1e-9));
}

TEST_CASE("attention mixup with a zero query is the pool mean") {
  auto table = two_row_table();
  QueryEmbeddings query;
  query.q = Mat<float>::Zero(2, 2);
  MixedPrior mixed = attention_mixup(query, table);
  for (Eigen::Index t = 0; t < 2; ++t) {
    REQUIRE(mixed.alpha(t, 0) == 0.5f);
    REQUIRE(mixed.alpha(t, 1) == 0.5f);
    REQUIRE(mixed.z(t, 0) == 0.5f);
    REQUIRE(mixed.z(t, 1) == 0.5f);
  }
}

TEST_CASE("attention mixup rows are stochastic and z stays in the hull") {
  Rng rng(81);
  RelationPriorTable<float> table;
  table.n_relations = 3;
  table.tied = false;
  for (int r = 0; r < 3; ++r) {
    Mat<float> g(2, 4);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = float(rng.normal());
    table.groups.push_back(g);
  }
  QueryEmbeddings query;
  query.q.resize(3, 4);
  for (Eigen::Index i = 0; i < query.q.size(); ++i) query.q.data()[i] = float(rng.normal());

  MixedPrior mixed = attention_mixup(query, table);
  Mat<float> pool = prior_pool(table);
  REQUIRE(mixed.alpha.rows() == 3);
  REQUIRE(mixed.alpha.cols() == 6);
  for (Eigen::Index t = 0; t < mixed.alpha.rows(); ++t) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < mixed.alpha.cols(); ++i) {
      REQUIRE(mixed.alpha(t, i) >= 0.0f);
      sum += double(mixed.alpha(t, i));
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
    for (Eigen::Index c = 0; c < pool.cols(); ++c) {
      double lo = double(pool.col(c).minCoeff()) - 1e-6;
      double hi = double(pool.col(c).maxCoeff()) + 1e-6;
      REQUIRE(double(mixed.z(t, c)) >= lo);
      REQUIRE(double(mixed.z(t, c)) <= hi);
    }
  }
}

TEST_CASE("attention mixup ignores a constant shift of a query's logits") {
  // the pool carries an all-ones coordinate, so moving the query along it
  // shifts every logit of that row by the same integer amount exactly
  RelationPriorTable<float> table;
  table.n_relations = 2;
  table.tied = false;
  Mat<float> g0(2, 3), g1(2, 3);
  g0 << 2, -1, 1, 0, 3, 1;
  g1 << -2, 1, 1, 4, 0, 1;
  table.groups = {g0, g1};

  QueryEmbeddings base, shifted;
  base.q.resize(1, 3);
  base.q << 2.0f, -3.0f, 0.0f;
  shifted.q = base.q;
  shifted.q(0, 2) = 7.0f;

  MixedPrior a = attention_mixup(base, table);
  MixedPrior b = attention_mixup(shifted, table);
  for (Eigen::Index i = 0; i < a.alpha.cols(); ++i)
    REQUIRE(a.alpha(0, i) == b.alpha(0, i));
}

TEST_CASE("direct inference is relation-conditioned encoding") {
  const auto& t = toy();
  TokenSequence seq = toy_seq(3);
  RelationKind rel = t.ck.relation("rel1");
  Vec<float> a = direct_infer(t.ck, rel, seq);
  Vec<float> b = direct_infer(t.ck, "rel1", seq);
  Vec<float> c = encode_conditioned(t.ck.params, t.ck.priors, rel, seq);
  REQUIRE(a.size() == t.ecfg.hidden);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    REQUIRE(a[i] == b[i]);
    REQUIRE(a[i] == c[i]);
  }

  REQUIRE_THROWS_WITH(direct_infer(t.ck, "nope", seq),
                      Catch::Matchers::ContainsSubstring("rel0"));
  RelationKind foreign{7, "other"};
  REQUIRE_THROWS_AS(direct_infer(t.ck, foreign, seq), std::invalid_argument);
}

TEST_CASE("a saturated query recovers direct inference") {
  // Q rows proportional to relation 1's own prior rows, scaled so the
  // matching logit is 50: the softmax collapses onto that relation and the
  // mixed rows reproduce its prior, so the embeddings must agree closely.
  const auto& t = toy();
  const int m = t.ecfg.prior_tokens;
  Mat<float> pool = prior_pool(t.ck.priors);
  QueryEmbeddings query;
  query.q.resize(m, t.ecfg.hidden);
  for (int row = 0; row < m; ++row) {
    Vec<float> p = pool.row(1 * m + row).transpose();
    query.q.row(row) = (50.0f / p.squaredNorm()) * p.transpose();
  }

  MixedPrior mixed = attention_mixup(query, t.ck.priors);
  auto weights = relation_weight_report(mixed, 2);
  REQUIRE(weights[1] > 0.999);

  TokenSequence seq = toy_seq(11);
  Vec<float> mixed_emb = encode_target(t.ck, query, seq);
  Vec<float> direct = direct_infer(t.ck, "rel1", seq);
  REQUIRE(mixed_emb.size() == direct.size());
  double max_diff = 0.0;
  for (Eigen::Index i = 0; i < direct.size(); ++i)
    max_diff = std::max(max_diff, std::abs(double(mixed_emb[i]) - double(direct[i])));
  REQUIRE(max_diff < 1e-3);
}

TEST_CASE("encode_target is pure") {
  const auto& t = toy();
  QueryEmbeddings query;
  query.q.resize(2, t.ecfg.hidden);
  Rng rng(82);
  for (Eigen::Index i = 0; i < query.q.size(); ++i)
    query.q.data()[i] = float(rng.normal() * 0.02);
  TokenSequence seq = toy_seq(5);
  Vec<float> a = encode_target(t.ck, query, seq);
  Vec<float> b = encode_target(t.ck, query, seq);
  for (Eigen::Index i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("relation weight report aggregates block mass") {
  MixedPrior mixed;
  mixed.alpha.resize(2, 4);
  mixed.alpha << 0.125f, 0.25f, 0.375f, 0.25f,
                 0.25f, 0.25f, 0.25f, 0.25f;
  auto w = relation_weight_report(mixed, 2);
  REQUIRE(w.size() == 2);
  REQUIRE(w[0] == 0.4375);
  REQUIRE(w[1] == 0.5625);

  // one row per relation: each weight is the column mean
  auto fine = relation_weight_report(mixed, 4);
  REQUIRE(fine == std::vector<double>{0.1875, 0.25, 0.3125, 0.25});
  REQUIRE(fine[0] + fine[1] + fine[2] + fine[3] == 1.0);

  REQUIRE_THROWS_AS(relation_weight_report(mixed, 3), std::invalid_argument);

  std::ostringstream out;
  write_relation_weight_report(out, {"rel0", "rel1"}, {0.4375, 0.5625});
  REQUIRE(out.str() == "rel0\t0.437500\nrel1\t0.562500\n");
}

TEST_CASE("selection training leaves the encoder untouched") {
  const auto& t = toy();
  std::string before =
      serialize_checkpoint(t.ck.params, t.ck.priors, t.ck.relation_names);
  SelectConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 3;
  auto result = train_selection(t.ck, TaskKind::matching(), edge_samples(0, 0, 16),
                                edge_samples(0, 16, 8), cfg);
  std::string after =
      serialize_checkpoint(t.ck.params, t.ck.priors, t.ck.relation_names);
  REQUIRE(before == after);
  REQUIRE(result.query.q.rows() == t.ecfg.prior_tokens);
  REQUIRE(result.query.q.cols() == t.ecfg.hidden);
  REQUIRE(result.head.w.size() == 0);
  REQUIRE(result.val_history.size() >= 1);
}

TEST_CASE("selection with zero learning rate freezes the query") {
  const auto& t = toy();
  SelectConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 8;
  cfg.lr = 0.0;
  cfg.patience = 3;
  cfg.seed = 12;
  auto train_set = edge_samples(0, 0, 16);
  auto val_set = edge_samples(0, 16, 8);
  auto result = train_selection(t.ck, TaskKind::matching(), train_set, val_set, cfg);

  // the query must still be the seeded initial draw
  Rng rng(mix_seed(cfg.seed, 0x9e17, 0));
  Mat<float> expect(t.ecfg.prior_tokens, t.ecfg.hidden);
  for (Eigen::Index i = 0; i < expect.size(); ++i)
    expect.data()[i] = float(rng.normal() * 0.02);
  for (Eigen::Index i = 0; i < expect.size(); ++i)
    REQUIRE(result.query.q.data()[i] == expect.data()[i]);

  // early stopping after one best epoch plus `patience` stale evaluations
  REQUIRE(result.best_epoch == 1);
  REQUIRE(result.val_history.size() == size_t(1 + cfg.patience));
  for (double v : result.val_history) REQUIRE(v == result.val_history[0]);

  // the reported metric is the validation precision of the frozen query
  QueryEmbeddings init_q;
  init_q.q = expect;
  MixedPrior mixed = attention_mixup(init_q, t.ck.priors);
  EvalBatch batch;
  batch.queries.resize(Eigen::Index(val_set.size()), t.ecfg.hidden);
  batch.keys.resize(Eigen::Index(val_set.size()), t.ecfg.hidden);
  for (size_t i = 0; i < val_set.size(); ++i) {
    batch.queries.row(Eigen::Index(i)) =
        encode_with_prior_rows(t.ck.params, mixed.z, val_set[i].text)
            .out.cast<double>();
    batch.keys.row(Eigen::Index(i)) =
        encode_with_prior_rows(t.ck.params, mixed.z, val_set[i].positive)
            .out.cast<double>();
  }
  REQUIRE(result.val_metric == prec_at_1(batch));
}

TEST_CASE("selection training is deterministic") {
  const auto& t = toy();
  SelectConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 21;
  auto train_set = edge_samples(0, 0, 16);
  auto val_set = edge_samples(0, 16, 8);
  auto a = train_selection(t.ck, TaskKind::matching(), train_set, val_set, cfg);
  auto b = train_selection(t.ck, TaskKind::matching(), train_set, val_set, cfg);
  REQUIRE(a.val_history == b.val_history);
  REQUIRE(a.best_epoch == b.best_epoch);
  for (Eigen::Index i = 0; i < a.query.q.size(); ++i)
    REQUIRE(a.query.q.data()[i] == b.query.q.data()[i]);

  SelectConfig other = cfg;
  other.seed = 22;
  auto c = train_selection(t.ck, TaskKind::matching(), train_set, val_set, other);
  bool same = true;
  for (Eigen::Index i = 0; i < a.query.q.size() && same; ++i)
    same = a.query.q.data()[i] == c.query.q.data()[i];
  REQUIRE_FALSE(same);
}

TEST_CASE("selection trains a classification head") {
  const auto& t = toy();
  std::vector<SelectionSample> train_set, val_set;
  for (uint64_t v = 0; v < 32; ++v) {
    SelectionSample s;
    s.text = toy_seq(v);
    s.label = int(t.sg.cluster_of[0][size_t(v)] % 2);
    (v < 24 ? train_set : val_set).push_back(std::move(s));
  }
  SelectConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 5;
  auto result = train_selection(t.ck, TaskKind::classification(2), train_set, val_set, cfg);
  REQUIRE(result.head.w.rows() == t.ecfg.hidden);
  REQUIRE(result.head.w.cols() == 2);
  REQUIRE(result.head.b.size() == 2);
  REQUIRE(result.val_metric >= 0.0);
  REQUIRE(result.val_metric <= 1.0);
  REQUIRE(result.val_history.size() >= 1);

  auto again = train_selection(t.ck, TaskKind::classification(2), train_set, val_set, cfg);
  REQUIRE(again.val_history == result.val_history);
}

TEST_CASE("selection trains a regression head") {
  const auto& t = toy();
  std::vector<SelectionSample> train_set, val_set;
  for (uint64_t v = 0; v < 32; ++v) {
    SelectionSample s;
    s.text = toy_seq(v);
    s.target = double(t.sg.cluster_of[0][size_t(v)]);
    (v < 24 ? train_set : val_set).push_back(std::move(s));
  }
  SelectConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 6;
  auto result = train_selection(t.ck, TaskKind::regression(), train_set, val_set, cfg);
  REQUIRE(result.head.w.cols() == 1);
  REQUIRE(std::isfinite(result.val_metric));
  REQUIRE(result.val_metric >= 0.0);  // rmse in natural units
  // oriented internally as -rmse: the best epoch has the smallest history value
  double lowest = *std::min_element(result.val_history.begin(), result.val_history.end());
  REQUIRE(result.val_metric == lowest);
}

TEST_CASE("selection validates its inputs") {
  const auto& t = toy();
  SelectConfig cfg;
  cfg.epochs = 1;
  auto val_set = edge_samples(0, 16, 8);
  REQUIRE_THROWS_AS(train_selection(t.ck, TaskKind::matching(), {}, val_set, cfg),
                    std::invalid_argument);

  // matching sample without a positive
  std::vector<SelectionSample> missing(2);
  missing[0].text = toy_seq(0);
  missing[1].text = toy_seq(1);
  REQUIRE_THROWS_AS(train_selection(t.ck, TaskKind::matching(), missing, val_set, cfg),
                    std::invalid_argument);

  // classification label outside the class range
  std::vector<SelectionSample> bad_label(1);
  bad_label[0].text = toy_seq(0);
  bad_label[0].label = 2;
  REQUIRE_THROWS_AS(
      train_selection(t.ck, TaskKind::classification(2), bad_label, bad_label, cfg),
      std::invalid_argument);

  SelectConfig bad = cfg;
  bad.batch_size = 1;
  REQUIRE_THROWS_AS(train_selection(t.ck, TaskKind::matching(), edge_samples(0, 0, 4),
                                    val_set, bad),
                    std::invalid_argument);
  bad = cfg;
  bad.patience = 0;
  REQUIRE_THROWS_AS(train_selection(t.ck, TaskKind::matching(), edge_samples(0, 0, 4),
                                    val_set, bad),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(TaskKind::classification(1).validate(), std::invalid_argument);
}

TEST_CASE("task dataset loaders") {
  const auto& t = toy();
  std::string dir = "downstream_sets";
  std::filesystem::create_directories(dir);

  {
    std::ofstream f(dir + "/match.tsv");
    f << "0\t1\n\n2\t3\n";
  }
  auto match = load_matching_set(dir + "/match.tsv", t.sg.graph, t.vocab, t.ecfg.max_len);
  REQUIRE(match.size() == 2);
  REQUIRE(match[0].text.ids == toy_seq(0).ids);
  REQUIRE(match[0].positive.ids == toy_seq(1).ids);
  REQUIRE(match[1].text.ids == toy_seq(2).ids);

  {
    std::ofstream f(dir + "/cls.tsv");
    f << "0\t1\n1\t0\n";
  }
  auto cls = load_classification_set(dir + "/cls.tsv", t.sg.graph, t.vocab,
                                     t.ecfg.max_len, 2);
  REQUIRE(cls.size() == 2);
  REQUIRE(cls[0].label == 1);
  REQUIRE(cls[1].label == 0);
  {
    std::ofstream f(dir + "/cls_bad.tsv");
    f << "0\t5\n";
  }
  REQUIRE_THROWS_AS(load_classification_set(dir + "/cls_bad.tsv", t.sg.graph, t.vocab,
                                            t.ecfg.max_len, 2),
                    std::invalid_argument);

  {
    std::ofstream f(dir + "/reg.tsv");
    f << "0\t1.5\n1\t-2.25\n";
  }
  auto reg = load_regression_set(dir + "/reg.tsv", t.sg.graph, t.vocab, t.ecfg.max_len);
  REQUIRE(reg.size() == 2);
  REQUIRE(reg[0].target == 1.5);
  REQUIRE(reg[1].target == -2.25);
  {
    std::ofstream f(dir + "/reg_bad.tsv");
    f << "0\tpotato\n";
  }
  REQUIRE_THROWS_AS(load_regression_set(dir + "/reg_bad.tsv", t.sg.graph, t.vocab,
                                        t.ecfg.max_len),
                    std::invalid_argument);

  {
    std::ofstream f(dir + "/unknown.tsv");
    f << "9999\t0\n";
  }
  REQUIRE_THROWS_AS(load_matching_set(dir + "/unknown.tsv", t.sg.graph, t.vocab,
                                      t.ecfg.max_len),
                    std::invalid_argument);

  {
    std::ofstream f(dir + "/empty.tsv");
    f << "\n";
  }
  REQUIRE_THROWS_AS(load_matching_set(dir + "/empty.tsv", t.sg.graph, t.vocab,
                                      t.ecfg.max_len),
                    std::invalid_argument);
}
