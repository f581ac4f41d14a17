#pragma once

// Multiplex graph store: one shared node set carrying text, plus one undirected
// edge set per relation. Edges are canonicalized (src < dst), deduplicated and
// kept sorted, which makes the Jaccard overlap between relations a linear merge
// and keeps every sampling routine deterministic for a given seed.

#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "mxe/util.hpp"

namespace mxe {

struct RelationKind {
  uint32_t id = 0;      // dense index, assigned in sorted-name order
  std::string name;
};

struct NodeRecord {
  uint64_t node_id = 0;
  std::string text;
};

using EdgePair = std::pair<uint64_t, uint64_t>;

inline EdgePair canonical_edge(uint64_t a, uint64_t b) {
  return a < b ? EdgePair{a, b} : EdgePair{b, a};
}

struct EdgeList {
  RelationKind relation;
  std::vector<EdgePair> pairs;  // canonical, sorted, unique

  bool contains(EdgePair e) const {
    return std::binary_search(pairs.begin(), pairs.end(), e);
  }
};

struct PairSample {
  RelationKind relation;
  uint64_t src = 0;
  uint64_t dst = 0;
};

struct MultiplexGraph {
  std::vector<NodeRecord> nodes;
  std::unordered_map<uint64_t, size_t> node_index;  // node_id -> position in nodes
  std::vector<RelationKind> relations;
  std::vector<EdgeList> edges;  // indexed by relation id

  size_t n_nodes() const { return nodes.size(); }
  size_t n_relations() const { return relations.size(); }

  const NodeRecord& node(uint64_t id) const {
    auto it = node_index.find(id);
    check_arg(it != node_index.end(), "unknown node id: " + std::to_string(id));
    return nodes[it->second];
  }

  const RelationKind& relation_by_name(const std::string& name) const {
    for (const auto& r : relations)
      if (r.name == name) return r;
    std::string avail;
    for (const auto& r : relations) avail += (avail.empty() ? "" : ", ") + r.name;
    throw std::invalid_argument("unknown relation '" + name + "' (available: " + avail + ")");
  }

  const EdgeList& edges_of(const RelationKind& r) const {
    check_arg(r.id < edges.size() && edges[r.id].relation.name == r.name,
              "relation does not belong to this graph: " + r.name);
    return edges[r.id];
  }
};

struct LoadOptions {
  // 0 keeps everything; otherwise each relation keeps its first N edges in
  // file order after canonicalization/dedup (a convenience cap, not a sample).
  size_t max_edges_per_relation = 0;
};

// Builds and validates a graph from in-memory parts. Edge lists may be in any
// order and may contain duplicates or reversed pairs; self-loops are dropped.
inline MultiplexGraph make_graph(std::vector<NodeRecord> nodes,
                                 const std::map<std::string, std::vector<EdgePair>>& edge_sets,
                                 LoadOptions opts = {}) {
  check_arg(edge_sets.size() > 1, "a multiplex graph needs more than one relation, got " +
                                      std::to_string(edge_sets.size()));
  MultiplexGraph g;
  g.nodes = std::move(nodes);
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    check_arg(!trim(g.nodes[i].text).empty(),
              "node " + std::to_string(g.nodes[i].node_id) + " has empty text");
    bool fresh = g.node_index.emplace(g.nodes[i].node_id, i).second;
    check_arg(fresh, "duplicate node id: " + std::to_string(g.nodes[i].node_id));
  }
  uint32_t rid = 0;
  for (const auto& [name, raw] : edge_sets) {  // std::map iterates sorted by name
    RelationKind rel{rid++, name};
    EdgeList list;
    list.relation = rel;
    list.pairs.reserve(raw.size());
    std::set<EdgePair> distinct;
    for (const auto& [a, b] : raw) {
      check_arg(g.node_index.count(a), "relation " + name + ": edge endpoint " +
                                           std::to_string(a) + " is not a node");
      check_arg(g.node_index.count(b), "relation " + name + ": edge endpoint " +
                                           std::to_string(b) + " is not a node");
      if (a == b) continue;  // self-loops carry no pair signal
      EdgePair e = canonical_edge(a, b);
      // dedup against earlier occurrences; file order decides which survive a cap
      if (distinct.insert(e).second &&
          (opts.max_edges_per_relation == 0 || list.pairs.size() < opts.max_edges_per_relation))
        list.pairs.push_back(e);
    }
    std::sort(list.pairs.begin(), list.pairs.end());
    g.relations.push_back(rel);
    g.edges.push_back(std::move(list));
  }
  return g;
}

// nodes file: one "id<TAB>text" record per line; edge files: "src<TAB>dst".
inline MultiplexGraph load_graph(const std::string& nodes_path,
                                 const std::map<std::string, std::string>& edge_paths,
                                 LoadOptions opts = {}) {
  std::vector<NodeRecord> nodes;
  size_t lineno = 0;
  for (const auto& line : read_lines(nodes_path)) {
    ++lineno;
    if (trim(line).empty()) continue;
    size_t tab = line.find('\t');
    check_arg(tab != std::string::npos,
              nodes_path + ":" + std::to_string(lineno) + ": expected id<TAB>text");
    NodeRecord rec;
    rec.node_id = parse_u64(line.substr(0, tab), nodes_path + ":" + std::to_string(lineno));
    rec.text = line.substr(tab + 1);
    check_arg(!trim(rec.text).empty(),
              nodes_path + ":" + std::to_string(lineno) + ": empty node text");
    nodes.push_back(std::move(rec));
  }
  std::map<std::string, std::vector<EdgePair>> edge_sets;
  for (const auto& [name, path] : edge_paths) {
    std::vector<EdgePair> pairs;
    lineno = 0;
    for (const auto& line : read_lines(path)) {
      ++lineno;
      if (trim(line).empty()) continue;
      auto fields = split(line, '\t');
      check_arg(fields.size() == 2,
                path + ":" + std::to_string(lineno) + ": expected src<TAB>dst");
      pairs.emplace_back(parse_u64(fields[0], path + ":" + std::to_string(lineno)),
                         parse_u64(fields[1], path + ":" + std::to_string(lineno)));
    }
    edge_sets[name] = std::move(pairs);
  }
  return make_graph(std::move(nodes), edge_sets, opts);
}

// Draws batch_size positive pairs from one relation, all with distinct src
// endpoints so a batch never scores a node against itself on the query side.
inline std::vector<PairSample> sample_positive_pairs(const MultiplexGraph& g,
                                                     const RelationKind& relation,
                                                     size_t batch_size, uint64_t seed) {
  const EdgeList& list = g.edges_of(relation);
  check_arg(batch_size >= 2, "batch_size must be at least 2");
  check_arg(list.pairs.size() >= batch_size,
            "relation " + relation.name + " has " + std::to_string(list.pairs.size()) +
                " edges, need at least " + std::to_string(batch_size));
  Rng rng(mix_seed(seed, relation.id, 0x5a));
  std::vector<uint32_t> order(list.pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = uint32_t(i);

  std::vector<PairSample> out;
  std::unordered_set<uint64_t> seen_src;
  size_t scanned = 0;
  while (out.size() < batch_size && scanned < order.size()) {
    size_t j = scanned + size_t(rng.below(order.size() - scanned));
    std::swap(order[scanned], order[j]);
    const EdgePair& e = list.pairs[order[scanned]];
    ++scanned;
    if (seen_src.insert(e.first).second)
      out.push_back({relation, e.first, e.second});
  }
  check_arg(out.size() == batch_size,
            "relation " + relation.name + ": cannot fill a batch of " +
                std::to_string(batch_size) + " pairs with distinct src endpoints");
  return out;
}

// |E_k ∩ E_l| / |E_k ∪ E_l| over canonical edge sets; 1 when both are empty.
inline double jaccard_shift(const MultiplexGraph& g, const RelationKind& rk,
                            const RelationKind& rl) {
  const auto& a = g.edges_of(rk).pairs;
  const auto& b = g.edges_of(rl).pairs;
  if (rk.id == rl.id) return 1.0;
  size_t inter = 0, i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) ++i;
    else if (b[j] < a[i]) ++j;
    else { ++inter; ++i; ++j; }
  }
  size_t uni = a.size() + b.size() - inter;
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

inline std::vector<std::vector<double>> shift_matrix(const MultiplexGraph& g) {
  size_t n = g.n_relations();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 1.0));
  for (size_t k = 0; k < n; ++k)
    for (size_t l = k + 1; l < n; ++l)
      m[k][l] = m[l][k] = jaccard_shift(g, g.relations[k], g.relations[l]);
  return m;
}

// header line of relation names, then one 6-decimal row per relation
inline void write_shift_matrix(std::ostream& out, const MultiplexGraph& g,
                               const std::vector<std::vector<double>>& m) {
  for (size_t k = 0; k < g.n_relations(); ++k)
    out << (k ? "\t" : "") << g.relations[k].name;
  out << "\n";
  for (const auto& row : m) {
    for (size_t l = 0; l < row.size(); ++l)
      out << (l ? "\t" : "") << format_fixed6(row[l]);
    out << "\n";
  }
}

// Uniform node subsample; keeps original ids, keeps all relations, keeps the
// edges whose endpoints both survive.
inline MultiplexGraph induced_subgraph(const MultiplexGraph& g, size_t node_count,
                                       uint64_t seed) {
  check_arg(node_count >= 1 && node_count <= g.n_nodes(),
            "subgraph node count must be in [1, " + std::to_string(g.n_nodes()) + "]");
  Rng rng(mix_seed(seed, 0x1d, g.n_nodes()));
  std::vector<size_t> idx(g.n_nodes());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle_prefix(idx, node_count);

  MultiplexGraph out;
  out.relations = g.relations;
  std::unordered_set<uint64_t> kept;
  for (size_t i = 0; i < node_count; ++i) {
    out.nodes.push_back(g.nodes[idx[i]]);
    out.node_index.emplace(g.nodes[idx[i]].node_id, i);
    kept.insert(g.nodes[idx[i]].node_id);
  }
  for (const auto& list : g.edges) {
    EdgeList sub;
    sub.relation = list.relation;
    for (const auto& e : list.pairs)
      if (kept.count(e.first) && kept.count(e.second)) sub.pairs.push_back(e);
    out.edges.push_back(std::move(sub));  // source order was sorted, subset stays sorted
  }
  return out;
}

inline uint64_t edge_content_hash(const std::vector<EdgePair>& pairs) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [a, b] : pairs) { eat(a); eat(b); }
  return h;
}

struct EdgeSplit {
  MultiplexGraph train;
  std::vector<std::vector<EdgePair>> heldout;  // per relation id, shuffled order
};

// Deterministic held-out split. The per-relation shuffle is keyed by the edge
// content rather than the relation id, so two relations with identical edge
// sets receive identical splits.
inline EdgeSplit split_edges(const MultiplexGraph& g, double holdout_frac, uint64_t seed) {
  check_arg(holdout_frac >= 0.0 && holdout_frac < 1.0, "holdout fraction must be in [0, 1)");
  EdgeSplit out;
  out.train.nodes = g.nodes;
  out.train.node_index = g.node_index;
  out.train.relations = g.relations;
  for (const auto& list : g.edges) {
    std::vector<EdgePair> shuffled = list.pairs;
    Rng rng(mix_seed(seed, edge_content_hash(list.pairs), 0x51));
    rng.shuffle(shuffled);
    size_t held = size_t(holdout_frac * double(shuffled.size()));
    EdgeList train_list;
    train_list.relation = list.relation;
    train_list.pairs.assign(shuffled.begin() + held, shuffled.end());
    std::sort(train_list.pairs.begin(), train_list.pairs.end());
    out.heldout.emplace_back(shuffled.begin(), shuffled.begin() + held);
    out.train.edges.push_back(std::move(train_list));
  }
  return out;
}

}  // namespace mxe
