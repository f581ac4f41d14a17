#pragma once

// Deterministic synthetic multiplex graph for demos and trend experiments.
// Each relation partitions the same node set into its own random clusters and
// draws edges inside clusters only. A node's text carries one factor token per
// relation identifying its cluster there, plus filler tokens, so each relation
// is predictable from text through a different latent factor.

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mxe/graph.hpp"
#include "mxe/util.hpp"

namespace mxe {

struct SyntheticConfig {
  size_t nodes = 300;
  size_t relations = 3;
  size_t clusters = 10;            // per relation
  size_t edges_per_relation = 600;
  size_t filler_vocab = 30;
  size_t filler_tokens = 3;
  uint64_t seed = 1;

  void validate() const {
    check_arg(nodes >= 4, "synthetic: need at least 4 nodes");
    check_arg(relations >= 1 && relations <= 9, "synthetic: 1..9 relations");
    check_arg(clusters >= 2 && clusters * 2 <= nodes,
              "synthetic: need at least 2 clusters with 2+ expected members");
    check_arg(edges_per_relation >= 1, "synthetic: need edges");
  }
};

struct SyntheticGraph {
  MultiplexGraph graph;
  // cluster_of[relation id][node id] -> cluster index
  std::vector<std::vector<uint32_t>> cluster_of;
};

inline SyntheticGraph make_synthetic_graph(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0x5e17, 0));

  std::vector<std::vector<uint32_t>> cluster_of(cfg.relations,
                                                std::vector<uint32_t>(cfg.nodes, 0));
  std::vector<std::vector<std::vector<uint64_t>>> members(
      cfg.relations, std::vector<std::vector<uint64_t>>(cfg.clusters));
  for (size_t r = 0; r < cfg.relations; ++r)
    for (size_t v = 0; v < cfg.nodes; ++v) {
      uint32_t c = uint32_t(rng.below(cfg.clusters));
      cluster_of[r][v] = c;
      members[r][c].push_back(v);
    }

  std::vector<NodeRecord> nodes;
  for (size_t v = 0; v < cfg.nodes; ++v) {
    std::string text = "n" + std::to_string(v);
    for (size_t r = 0; r < cfg.relations; ++r)
      text += " r" + std::to_string(r) + "c" + std::to_string(cluster_of[r][v]);
    for (size_t k = 0; k < cfg.filler_tokens; ++k)
      text += " f" + std::to_string(rng.below(cfg.filler_vocab));
    nodes.push_back({uint64_t(v), std::move(text)});
  }

  std::map<std::string, std::vector<EdgePair>> edge_sets;
  for (size_t r = 0; r < cfg.relations; ++r) {
    std::set<EdgePair> edges;
    size_t attempts = 0, cap = cfg.edges_per_relation * 200;
    while (edges.size() < cfg.edges_per_relation && attempts++ < cap) {
      uint64_t a = rng.below(cfg.nodes);
      const auto& club = members[r][cluster_of[r][a]];
      if (club.size() < 2) continue;
      uint64_t b = club[size_t(rng.below(club.size()))];
      if (a == b) continue;
      edges.insert(canonical_edge(a, b));
    }
    check_arg(edges.size() == cfg.edges_per_relation,
              "synthetic: cluster structure too sparse for the requested edge count");
    edge_sets["rel" + std::to_string(r)] =
        std::vector<EdgePair>(edges.begin(), edges.end());
  }

  SyntheticGraph out;
  out.graph = make_graph(std::move(nodes), edge_sets);
  out.cluster_of = std::move(cluster_of);
  return out;
}

// Writes nodes.tsv, one <name>.tsv per relation, and graph.cfg listing them in
// the key=value form the command line tools read.
inline void write_graph_files(const std::string& dir, const MultiplexGraph& g) {
  auto open = [](const std::string& path) {
    std::ofstream f(path);
    check_io(bool(f), "cannot open '" + path + "' for writing");
    return f;
  };
  {
    auto f = open(dir + "/nodes.tsv");
    for (const auto& n : g.nodes) f << n.node_id << '\t' << n.text << '\n';
    check_io(bool(f), "write failed in '" + dir + "'");
  }
  auto cfgf = open(dir + "/graph.cfg");
  cfgf << "nodes=" << dir << "/nodes.tsv\n";
  for (const auto& list : g.edges) {
    std::string path = dir + "/" + list.relation.name + ".tsv";
    auto f = open(path);
    for (const auto& [a, b] : list.pairs) f << a << '\t' << b << '\n';
    check_io(bool(f), "write failed in '" + dir + "'");
    cfgf << "edge." << list.relation.name << "=" << path << "\n";
  }
  check_io(bool(cfgf), "write failed in '" + dir + "'");
}

}  // namespace mxe
