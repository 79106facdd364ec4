#include "s3t/topology.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace s3t {

void SkeletonGraph::validate() const {
  if (n_nodes <= 0) fail<ConfigError>("graph must have at least one node");
  if (root < 0 || root >= n_nodes) {
    fail<ConfigError>("graph root ", root, " out of range for ", n_nodes, " nodes");
  }
  if (static_cast<Index>(edges.size()) != n_nodes - 1) {
    fail<ConfigError>("graph with ", n_nodes, " nodes needs ", n_nodes - 1,
                      " edges, got ", edges.size());
  }
  std::vector<Index> incoming(static_cast<std::size_t>(n_nodes), 0);
  for (auto [src, tgt] : edges) {
    if (src < 0 || src >= n_nodes || tgt < 0 || tgt >= n_nodes) {
      fail<ConfigError>("graph edge (", src, ", ", tgt, ") references a node outside [0, ",
                        n_nodes, ")");
    }
    if (src == tgt) fail<ConfigError>("graph edge (", src, ", ", tgt, ") is a self loop");
    incoming[static_cast<std::size_t>(tgt)] += 1;
  }
  if (incoming[static_cast<std::size_t>(root)] != 0) {
    fail<ConfigError>("graph root ", root, " must have no incoming edge");
  }
  for (Index v = 0; v < n_nodes; ++v) {
    if (v == root) continue;
    if (incoming[static_cast<std::size_t>(v)] != 1) {
      fail<ConfigError>("graph node ", v, " has ", incoming[static_cast<std::size_t>(v)],
                        " incoming edges; a tree node needs exactly one");
    }
  }
  // Edge count + in-degree constraints make the graph a forest rooted at
  // `root` union possible cycles; walking up from every node rules those out.
  const auto parent = parents();
  for (Index v = 0; v < n_nodes; ++v) {
    Index cur = v, hops = 0;
    while (cur != root) {
      cur = parent[static_cast<std::size_t>(cur)];
      if (cur < 0 || ++hops > n_nodes) {
        fail<ConfigError>("graph is not connected to the root (node ", v, ")");
      }
    }
  }
}

std::vector<Index> SkeletonGraph::parents() const {
  std::vector<Index> parent(static_cast<std::size_t>(n_nodes), -1);
  for (auto [src, tgt] : edges) parent[static_cast<std::size_t>(tgt)] = src;
  return parent;
}

SkeletonGraph chain_graph(Index k) {
  if (k < 1) fail<ConfigError>("chain(k) requires k >= 1, got ", k);
  SkeletonGraph g;
  g.n_nodes = k;
  g.root = 0;
  for (Index i = 0; i + 1 < k; ++i) g.edges.emplace_back(i, i + 1);
  return g;
}

SkeletonGraph star_graph(Index k) {
  if (k < 1) fail<ConfigError>("star(k) requires k >= 1, got ", k);
  SkeletonGraph g;
  g.n_nodes = k;
  g.root = 0;
  for (Index i = 1; i < k; ++i) g.edges.emplace_back(Index(0), i);
  return g;
}

SkeletonGraph ntu25_graph() {
  // 25-joint Kinect v2 skeleton, zero-based, rooted at the spine base.
  SkeletonGraph g;
  g.n_nodes = 25;
  g.root = 0;
  g.edges = {
      {0, 1},   {1, 20},  {20, 2},  {2, 3},            // spine and head
      {20, 4},  {4, 5},   {5, 6},   {6, 7},  {7, 21}, {7, 22},   // left arm
      {20, 8},  {8, 9},   {9, 10},  {10, 11}, {11, 23}, {11, 24},  // right arm
      {0, 12},  {12, 13}, {13, 14}, {14, 15},          // left leg
      {0, 16},  {16, 17}, {17, 18}, {18, 19},          // right leg
  };
  return g;
}

SkeletonGraph parse_graph_spec(const std::string& spec) {
  auto parse_k = [&](const std::string& prefix) -> Index {
    std::string inner = spec.substr(prefix.size(), spec.size() - prefix.size() - 1);
    try {
      std::size_t pos = 0;
      long long k = std::stoll(inner, &pos);
      if (pos != inner.size()) throw std::invalid_argument(inner);
      return static_cast<Index>(k);
    } catch (const std::exception&) {
      fail<ConfigError>("bad node count '", inner, "' in graph spec '", spec, "'");
    }
  };

  SkeletonGraph g;
  if (spec == "ntu25") {
    g = ntu25_graph();
  } else if (spec.rfind("chain(", 0) == 0 && spec.back() == ')') {
    g = chain_graph(parse_k("chain("));
  } else if (spec.rfind("star(", 0) == 0 && spec.back() == ')') {
    g = star_graph(parse_k("star("));
  } else {
    std::ifstream f(spec);
    if (!f) {
      fail<ConfigError>("graph spec '", spec,
                        "' is not a preset (ntu25, chain(k), star(k)) or a readable file");
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    g = graph_from_json(ss.str());
  }
  g.validate();
  return g;
}

SkeletonGraph graph_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    fail<ConfigError>("graph JSON parse error: ", e.what());
  }
  for (auto& [key, val] : j.items()) {
    if (key != "n_nodes" && key != "root" && key != "edges") {
      fail<ConfigError>("unknown key '", key, "' in graph JSON");
    }
  }
  if (!j.contains("n_nodes") || !j.contains("root") || !j.contains("edges")) {
    fail<ConfigError>("graph JSON requires n_nodes, root and edges");
  }
  SkeletonGraph g;
  try {
    g.n_nodes = j.at("n_nodes").get<Index>();
    g.root = j.at("root").get<Index>();
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2) {
        fail<ConfigError>("graph edge must be a [src, tgt] pair");
      }
      g.edges.emplace_back(e[0].get<Index>(), e[1].get<Index>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail<ConfigError>("graph JSON type error: ", e.what());
  }
  g.validate();
  return g;
}

std::string graph_to_json(const SkeletonGraph& g) {
  nlohmann::json j;
  j["n_nodes"] = g.n_nodes;
  j["root"] = g.root;
  j["edges"] = nlohmann::json::array();
  for (auto [src, tgt] : g.edges) j["edges"].push_back({src, tgt});
  return j.dump(2);
}

Tensor<double> build_base_topology_f64(const SkeletonGraph& g) {
  g.validate();
  const Index N = g.n_nodes;
  Tensor<double> adj({N, N});
  for (Index i = 0; i < N; ++i) adj.at2(i, i) = 1.0;
  for (auto [src, tgt] : g.edges) {
    adj.at2(src, tgt) = 1.0;
    adj.at2(tgt, src) = 1.0;
  }
  std::vector<double> inv_sqrt_deg(static_cast<std::size_t>(N));
  for (Index i = 0; i < N; ++i) {
    double deg = 0;
    for (Index j = 0; j < N; ++j) deg += adj.at2(i, j);
    inv_sqrt_deg[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(deg);
  }
  Tensor<double> out({N, N});
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < N; ++j)
      out.at2(i, j) = adj.at2(i, j) * inv_sqrt_deg[static_cast<std::size_t>(i)] *
                      inv_sqrt_deg[static_cast<std::size_t>(j)];
  return out;
}

}  // namespace s3t
