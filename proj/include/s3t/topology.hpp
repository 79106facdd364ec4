#pragma once

#include <string>
#include <utility>
#include <vector>

#include "s3t/tensor.hpp"

namespace s3t {

// Anatomical skeleton tree. Edges are oriented away from the root
// (source = parent, target = child); every non-root node has exactly one
// incoming edge.
struct SkeletonGraph {
  Index n_nodes = 0;
  Index root = 0;
  std::vector<std::pair<Index, Index>> edges;

  void validate() const;

  // parent[v] for every non-root v; parent[root] = -1.
  std::vector<Index> parents() const;
};

SkeletonGraph chain_graph(Index k);
SkeletonGraph star_graph(Index k);
SkeletonGraph ntu25_graph();

// Accepts "ntu25", "chain(k)", "star(k)", or a path to a graph JSON file.
SkeletonGraph parse_graph_spec(const std::string& spec);

SkeletonGraph graph_from_json(const std::string& json_text);
std::string graph_to_json(const SkeletonGraph& g);

// Symmetrically normalized adjacency with self loops:
//   a_base = D^{-1/2} (A + I) D^{-1/2},  D = degree of A + I.
// Symmetric, non-negative, spectrum within [-1, 1].
Tensor<double> build_base_topology_f64(const SkeletonGraph& g);

template <typename Scalar = float>
Tensor<Scalar> build_base_topology(const SkeletonGraph& g) {
  Tensor<double> a = build_base_topology_f64(g);
  Tensor<Scalar> out(a.shape());
  for (Index i = 0; i < a.size(); ++i) out[i] = static_cast<Scalar>(a[i]);
  return out;
}

// First spatial difference along oriented bones: out[..., child] =
// x[..., child] - x[..., parent]; the root channel is zeroed.
template <typename Scalar>
Tensor<Scalar> spatial_gradient(const Tensor<Scalar>& x, const SkeletonGraph& g) {
  check_rank(x, 4, "spatial_gradient input");
  if (x.dim(3) != g.n_nodes) {
    fail<ShapeError>("spatial_gradient: input has ", x.dim(3), " nodes, graph has ",
                     g.n_nodes);
  }
  const Index T = x.dim(0), B = x.dim(1), C = x.dim(2);
  const auto parent = g.parents();
  Tensor<Scalar> out(x.shape());
  for (Index t = 0; t < T; ++t)
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c) {
        const Scalar* row = x.data() + x.flat4(t, b, c, 0);
        Scalar* orow = out.data() + out.flat4(t, b, c, 0);
        for (Index n = 0; n < g.n_nodes; ++n) {
          orow[n] = parent[static_cast<std::size_t>(n)] < 0
                        ? Scalar(0)
                        : row[n] - row[parent[static_cast<std::size_t>(n)]];
        }
      }
  return out;
}

// Adjoint of spatial_gradient, for the backward pass.
template <typename Scalar>
void spatial_gradient_adjoint(const Tensor<Scalar>& grad_out,
                              const SkeletonGraph& g, Tensor<Scalar>& grad_in) {
  check_same_shape(grad_out, grad_in, "spatial_gradient_adjoint");
  const Index T = grad_out.dim(0), B = grad_out.dim(1), C = grad_out.dim(2);
  const auto parent = g.parents();
  for (Index t = 0; t < T; ++t)
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c) {
        const Scalar* grow = grad_out.data() + grad_out.flat4(t, b, c, 0);
        Scalar* irow = grad_in.data() + grad_in.flat4(t, b, c, 0);
        for (Index n = 0; n < g.n_nodes; ++n) {
          Index p = parent[static_cast<std::size_t>(n)];
          if (p < 0) continue;
          irow[n] += grow[n];
          irow[p] -= grow[n];
        }
      }
}

}  // namespace s3t
