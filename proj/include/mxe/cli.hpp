#pragma once
// Command line front end: train, eval, infer, select, analyze-shift, gen.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mxe/downstream.hpp"
#include "mxe/eval.hpp"
#include "mxe/synthetic.hpp"

namespace mxe {

// ---- key=value plumbing ----

// Ordered key=value pairs; blank lines and '#' comments are skipped, values
// may contain further '=' characters.
inline std::vector<std::pair<std::string, std::string>> read_key_values(
    const std::string& path) {
  std::vector<std::pair<std::string, std::string>> out;
  size_t lineno = 0;
  for (const auto& raw : read_lines(path)) {
    ++lineno;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    check_arg(eq != std::string::npos && eq > 0,
              path + ":" + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::pair<std::string, std::string> parse_assignment(const std::string& s) {
  size_t eq = s.find('=');
  check_arg(eq != std::string::npos && eq > 0, "expected key=value, got '" + s + "'");
  return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

// Graph manifests name the node file and one edge file per relation:
//   nodes=PATH
//   edge.RELATION=PATH
inline MultiplexGraph load_graph_manifest(const std::string& path, LoadOptions opts = {}) {
  std::string nodes_path;
  std::map<std::string, std::string> edge_paths;
  for (const auto& [key, value] : read_key_values(path)) {
    if (key == "nodes") {
      nodes_path = value;
    } else if (key.rfind("edge.", 0) == 0) {
      std::string name = key.substr(5);
      check_arg(!name.empty(), path + ": empty relation name in '" + key + "'");
      check_arg(!edge_paths.count(name), path + ": duplicate relation '" + name + "'");
      edge_paths[name] = value;
    } else {
      throw std::invalid_argument(path + ": unknown graph key '" + key + "'");
    }
  }
  check_arg(!nodes_path.empty(), path + ": missing nodes= entry");
  return load_graph(nodes_path, edge_paths, opts);
}

// ---- training run configuration ----

// Everything cmd_train needs, merged from the config file and --set overrides.
struct TrainSettings {
  std::string graph_path;
  std::string out_path;
  std::string log_path;       // empty: out_path + ".log"
  size_t vocab_min_freq = 1;
  size_t vocab_max_size = 0;  // 0: uncapped
  EncoderConfig encoder;
  TrainConfig train;
  std::map<std::string, double> weights;  // per relation name; unnamed default 1
};

namespace detail {

inline int parse_int(const std::string& value, const std::string& key, int lo) {
  uint64_t v = parse_u64(value, "config key '" + key + "'");
  check_arg(v <= uint64_t(std::numeric_limits<int>::max()) && int(v) >= lo,
            "config key '" + key + "': value out of range: " + value);
  return int(v);
}

inline bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "0" || value == "false") return false;
  if (value == "1" || value == "true") return true;
  throw std::invalid_argument("config key '" + key + "': expected 0/1, got '" + value + "'");
}

}  // namespace detail

// One settings key. Unknown keys are errors so typos cannot silently fall
// back to defaults.
inline void apply_setting(TrainSettings& s, const std::string& key,
                          const std::string& value) {
  using detail::parse_bool;
  using detail::parse_int;
  auto f64 = [&] { return parse_f64(value, "config key '" + key + "'"); };
  if (key == "graph") s.graph_path = value;
  else if (key == "out") s.out_path = value;
  else if (key == "log") s.log_path = value;
  else if (key == "vocab.min_freq") s.vocab_min_freq = size_t(parse_int(value, key, 1));
  else if (key == "vocab.max_size") s.vocab_max_size = size_t(parse_int(value, key, 0));
  else if (key == "encoder.layers") s.encoder.layers = parse_int(value, key, 1);
  else if (key == "encoder.hidden") s.encoder.hidden = parse_int(value, key, 1);
  else if (key == "encoder.heads") s.encoder.heads = parse_int(value, key, 1);
  else if (key == "encoder.ffn") s.encoder.ffn = parse_int(value, key, 1);
  else if (key == "encoder.max_positions") s.encoder.max_positions = parse_int(value, key, 1);
  else if (key == "encoder.prior_tokens") s.encoder.prior_tokens = parse_int(value, key, 1);
  else if (key == "encoder.max_len") s.encoder.max_len = parse_int(value, key, 2);
  else if (key == "encoder.prior_init") s.encoder.prior_init = prior_init_from_string(value);
  else if (key == "encoder.tied") s.encoder.tied_priors = parse_bool(value, key);
  else if (key == "train.epochs") s.train.epochs = parse_int(value, key, 1);
  else if (key == "train.batch_size") s.train.batch_size = parse_int(value, key, 2);
  else if (key == "train.peak_lr") s.train.peak_lr = f64();
  else if (key == "train.beta1") s.train.beta1 = f64();
  else if (key == "train.beta2") s.train.beta2 = f64();
  else if (key == "train.adam_eps") s.train.adam_eps = f64();
  else if (key == "train.clip_norm") s.train.clip_norm = f64();
  else if (key == "train.warmup_epochs") s.train.warmup_epochs = parse_int(value, key, 0);
  else if (key == "train.dropout") s.train.dropout = float(f64());
  else if (key == "train.seed") s.train.seed = parse_u64(value, "config key '" + key + "'");
  else if (key == "train.cycles_per_epoch") s.train.cycles_per_epoch = parse_int(value, key, 0);
  else if (key.rfind("weight.", 0) == 0 && key.size() > 7) s.weights[key.substr(7)] = f64();
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

// ---- subcommand bodies ----

inline int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
                     std::ostream& out) {
  auto file_entries = read_key_values(config_path);
  TrainSettings s;
  for (const auto& [k, v] : file_entries) apply_setting(s, k, v);
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& sv : sets) {
    auto [k, v] = parse_assignment(sv);
    apply_setting(s, k, v);
    overrides.emplace_back(k, v);
  }
  check_arg(!s.graph_path.empty(), config_path + ": missing graph= entry");
  check_arg(!s.out_path.empty(), config_path + ": missing out= entry");

  MultiplexGraph g = load_graph_manifest(s.graph_path);
  RelationWeights weights = RelationWeights::uniform(g.n_relations());
  for (const auto& [name, value] : s.weights)
    weights.w[g.relation_by_name(name).id] = value;

  std::vector<std::string> corpus;
  for (const auto& n : g.nodes) corpus.push_back(n.text);
  Vocabulary vocab = build_vocabulary(corpus, s.vocab_min_freq, s.vocab_max_size);

  std::string log_path = s.log_path.empty() ? s.out_path + ".log" : s.log_path;
  std::ofstream log(log_path, std::ios::binary);
  check_io(log.good(), "cannot write training log: " + log_path);
  log << "# run config=" << config_path;
  for (const auto& [k, v] : file_entries) log << ' ' << k << '=' << v;
  log << " |";
  for (const auto& [k, v] : overrides) log << ' ' << k << '=' << v;
  log << "\n";

  train(g, vocab, s.encoder, s.train, weights, s.out_path, &log);
  check_io(bool(log), "failed writing training log: " + log_path);
  save_vocabulary(s.out_path + ".vocab", vocab);

  out << "checkpoint\t" << s.out_path << "\n";
  out << "vocab\t" << s.out_path << ".vocab\n";
  out << "log\t" << log_path << "\n";
  return 0;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& graph_path,
                    const std::string& relation, int batch_size, double holdout,
                    uint64_t split_seed, std::ostream& out) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Vocabulary vocab = load_vocabulary(ckpt_path + ".vocab");
  MultiplexGraph g = load_graph_manifest(graph_path);
  double value =
      relation_heldout_precision(ck, g, vocab, relation, batch_size, holdout, split_seed);
  write_metric(out, "PREC@1", value);
  return 0;
}

inline int cmd_infer(const std::string& ckpt_path, const std::string& relation,
                     bool text_given, const std::string& text,
                     const std::string& nodes_file, const std::string& out_path,
                     std::ostream& out) {
  check_arg(text_given != !nodes_file.empty(),
            "infer: provide exactly one of --text or --nodes-file");
  Checkpoint ck = load_checkpoint(ckpt_path);
  Vocabulary vocab = load_vocabulary(ckpt_path + ".vocab");
  RelationKind rel = ck.relation(relation);
  const int max_len = ck.params.config.max_len;

  std::vector<std::pair<std::string, TokenSequence>> rows;
  if (text_given) {
    rows.emplace_back("0", encode_text(vocab, text, max_len));
  } else {
    size_t lineno = 0;
    for (const auto& line : read_lines(nodes_file)) {
      ++lineno;
      if (trim(line).empty()) continue;
      size_t tab = line.find('\t');
      check_arg(tab != std::string::npos,
                nodes_file + ":" + std::to_string(lineno) + ": expected id<TAB>text");
      rows.emplace_back(line.substr(0, tab),
                        encode_text(vocab, line.substr(tab + 1), max_len));
    }
    check_arg(!rows.empty(), nodes_file + ": no input rows");
  }

  std::ofstream file;
  if (out_path != "-") {
    file.open(out_path, std::ios::binary);
    check_io(file.good(), "cannot write embeddings: " + out_path);
  }
  std::ostream& dst = out_path == "-" ? out : file;
  for (const auto& [id, seq] : rows) {
    Vec<float> emb = direct_infer(ck, rel, seq);
    dst << id;
    for (Eigen::Index i = 0; i < emb.size(); ++i) dst << '\t' << format_sig9(double(emb[i]));
    dst << "\n";
  }
  if (out_path != "-") check_io(bool(file), "failed writing embeddings: " + out_path);
  return 0;
}

inline const char* task_metric_name(const TaskKind& task) {
  switch (task.type) {
    case TaskKind::Type::matching: return "PREC@1";
    case TaskKind::Type::classification: return "MACRO_F1";
    default: return "RMSE";
  }
}

inline int cmd_select(const std::string& ckpt_path, const std::string& graph_path,
                      const std::string& task_kind, int classes,
                      const std::string& train_path, const std::string& val_path,
                      const std::string& test_path, const std::string& report_path,
                      const SelectConfig& cfg, std::ostream& out) {
  TaskKind task;
  if (task_kind == "matching") task = TaskKind::matching();
  else if (task_kind == "classification") task = TaskKind::classification(classes);
  else if (task_kind == "regression") task = TaskKind::regression();
  else throw std::invalid_argument("unknown task kind '" + task_kind +
                                   "' (matching|classification|regression)");
  task.validate();

  Checkpoint ck = load_checkpoint(ckpt_path);
  Vocabulary vocab = load_vocabulary(ckpt_path + ".vocab");
  MultiplexGraph g = load_graph_manifest(graph_path);
  const int max_len = ck.params.config.max_len;

  auto load = [&](const std::string& path) {
    switch (task.type) {
      case TaskKind::Type::matching: return load_matching_set(path, g, vocab, max_len);
      case TaskKind::Type::classification:
        return load_classification_set(path, g, vocab, max_len, task.classes);
      default: return load_regression_set(path, g, vocab, max_len);
    }
  };
  auto train_set = load(train_path);
  auto val_set = load(val_path);
  auto test_set = load(test_path);

  SelectionResult result = train_selection(ck, task, train_set, val_set, cfg);
  double test_metric = evaluate_selection(ck, task, test_set, result.query, result.head);
  write_metric(out, task_metric_name(task), test_metric);

  if (!report_path.empty()) {
    MixedPrior mixed = attention_mixup(result.query, ck.priors);
    auto weights = relation_weight_report(mixed, ck.relation_names.size());
    std::ofstream report(report_path, std::ios::binary);
    check_io(report.good(), "cannot write report: " + report_path);
    write_relation_weight_report(report, ck.relation_names, weights);
    check_io(bool(report), "failed writing report: " + report_path);
  }
  return 0;
}

inline int cmd_analyze_shift(const std::string& graph_path, size_t subsample,
                             uint64_t seed, const std::string& out_path,
                             std::ostream& out) {
  MultiplexGraph g = load_graph_manifest(graph_path);
  if (subsample > 0) g = induced_subgraph(g, subsample, seed);
  auto m = shift_matrix(g);
  std::ofstream file;
  if (out_path != "-") {
    file.open(out_path, std::ios::binary);
    check_io(file.good(), "cannot write shift matrix: " + out_path);
  }
  std::ostream& dst = out_path == "-" ? out : file;
  write_shift_matrix(dst, g, m);
  if (out_path != "-") check_io(bool(file), "failed writing shift matrix: " + out_path);
  return 0;
}

inline int cmd_gen(const std::string& dir, const SyntheticConfig& cfg, std::ostream& out) {
  std::filesystem::create_directories(dir);
  SyntheticGraph sg = make_synthetic_graph(cfg);
  write_graph_files(dir, sg.graph);
  out << "graph\t" << dir << "/graph.cfg\n";
  return 0;
}

}  // namespace mxe

#include "CLI11.hpp"

namespace mxe {

// Parses `args` (program name excluded) and dispatches. All output goes to
// the given streams so tests can run the driver in-process.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"relation-conditioned text embeddings over multiplex graphs"};
  app.name("mxe");
  app.require_subcommand(1);

  auto* t = app.add_subcommand("train", "train an encoder and write a checkpoint");
  std::string config;
  std::vector<std::string> sets;
  t->add_option("--config", config, "key=value run configuration file")->required();
  t->add_option("--set", sets, "override one config entry (key=value), repeatable");

  auto* e = app.add_subcommand("eval", "held-out in-batch precision for one relation");
  std::string e_ckpt, e_graph, e_rel;
  int e_batch = 64;
  double e_holdout = 0.2;
  uint64_t e_seed = 0;
  e->add_option("--checkpoint", e_ckpt, "checkpoint path")->required();
  e->add_option("--graph", e_graph, "graph manifest")->required();
  e->add_option("--relation", e_rel, "relation to score")->required();
  e->add_option("--batch-size", e_batch, "evaluation batch size");
  e->add_option("--holdout", e_holdout, "held-out edge fraction");
  e->add_option("--split-seed", e_seed, "held-out split seed");

  auto* i = app.add_subcommand("infer", "export relation-conditioned embeddings");
  std::string i_ckpt, i_rel, i_text, i_nodes, i_out = "-";
  i->add_option("--checkpoint", i_ckpt, "checkpoint path")->required();
  i->add_option("--relation", i_rel, "conditioning relation")->required();
  auto* i_text_opt = i->add_option("--text", i_text, "embed one document");
  i->add_option("--nodes-file", i_nodes, "embed id<TAB>text rows from a file");
  i->add_option("--out", i_out, "output path, - for stdout");

  auto* s = app.add_subcommand("select", "learn source-relation attention for a task");
  std::string s_ckpt, s_graph, s_kind, s_train, s_val, s_test, s_report;
  int s_classes = 0;
  SelectConfig s_cfg;
  s->add_option("--checkpoint", s_ckpt, "checkpoint path")->required();
  s->add_option("--graph", s_graph, "graph manifest")->required();
  s->add_option("--task-kind", s_kind, "matching|classification|regression")->required();
  s->add_option("--classes", s_classes, "class count for classification");
  s->add_option("--train", s_train, "training samples")->required();
  s->add_option("--val", s_val, "validation samples")->required();
  s->add_option("--test", s_test, "test samples")->required();
  s->add_option("--report", s_report, "relation weight report path");
  s->add_option("--epochs", s_cfg.epochs, "selection epochs");
  s->add_option("--batch-size", s_cfg.batch_size, "selection batch size");
  s->add_option("--lr", s_cfg.lr, "selection learning rate");
  s->add_option("--patience", s_cfg.patience, "early stopping patience");
  s->add_option("--query-rows", s_cfg.query_rows, "query rows, 0 matches prior rows");
  s->add_option("--seed", s_cfg.seed, "selection seed");

  auto* a = app.add_subcommand("analyze-shift", "relation overlap matrix");
  std::string a_graph, a_out = "-";
  size_t a_sub = 0;
  uint64_t a_seed = 0;
  a->add_option("--graph", a_graph, "graph manifest")->required();
  a->add_option("--subsample", a_sub, "induced subgraph node count, 0 keeps all");
  a->add_option("--seed", a_seed, "subsample seed");
  a->add_option("--out", a_out, "output path, - for stdout");

  auto* gn = app.add_subcommand("gen", "write a synthetic clustered benchmark graph");
  std::string g_dir;
  SyntheticConfig g_cfg;
  gn->add_option("--out-dir", g_dir, "output directory")->required();
  gn->add_option("--nodes", g_cfg.nodes, "node count");
  gn->add_option("--relations", g_cfg.relations, "relation count");
  gn->add_option("--clusters", g_cfg.clusters, "clusters per relation");
  gn->add_option("--edges", g_cfg.edges_per_relation, "edges per relation");
  gn->add_option("--filler-vocab", g_cfg.filler_vocab, "filler token vocabulary");
  gn->add_option("--filler-tokens", g_cfg.filler_tokens, "filler tokens per node");
  gn->add_option("--seed", g_cfg.seed, "generation seed");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& pe) {
    if (pe.get_exit_code() == 0) return app.exit(pe, out, err);
    err << "usage error: " << pe.what() << "\n";
    err << app.help();
    return 2;
  }

  try {
    if (t->parsed()) return cmd_train(config, sets, out);
    if (e->parsed()) return cmd_eval(e_ckpt, e_graph, e_rel, e_batch, e_holdout, e_seed, out);
    if (i->parsed())
      return cmd_infer(i_ckpt, i_rel, i_text_opt->count() > 0, i_text, i_nodes, i_out, out);
    if (s->parsed())
      return cmd_select(s_ckpt, s_graph, s_kind, s_classes, s_train, s_val, s_test,
                        s_report, s_cfg, out);
    if (a->parsed()) return cmd_analyze_shift(a_graph, a_sub, a_seed, a_out, out);
    if (gn->parsed()) return cmd_gen(g_dir, g_cfg, out);
  } catch (const std::invalid_argument& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;  // unreachable with require_subcommand(1)
}

}  // namespace mxe
