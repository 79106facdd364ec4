#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "s3t/topology.hpp"
#include "test_util.hpp"

using namespace s3t;

TEST_CASE("two-node chain normalizes to all one-half entries") {
  auto a = build_base_topology(chain_graph(2));
  for (Index i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(0.5f));
}

TEST_CASE("three-node chain middle row matches hand values") {
  auto a = build_base_topology(chain_graph(3));
  // degrees with self loops: 2, 3, 2
  CHECK(a.at2(1, 0) == doctest::Approx(1.0 / std::sqrt(6.0)).epsilon(1e-6));
  CHECK(a.at2(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(a.at2(1, 2) == doctest::Approx(1.0 / std::sqrt(6.0)).epsilon(1e-6));
  CHECK(a.at2(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(a.at2(0, 2) == 0.0f);
}

TEST_CASE("star hub and leaf entries") {
  auto a = build_base_topology(star_graph(5));
  // hub degree 5 (4 leaves + self), leaf degree 2
  CHECK(a.at2(0, 0) == doctest::Approx(1.0 / 5.0).epsilon(1e-6));
  CHECK(a.at2(0, 3) == doctest::Approx(1.0 / std::sqrt(10.0)).epsilon(1e-6));
  CHECK(a.at2(2, 2) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(a.at2(1, 2) == 0.0f);
}

TEST_CASE("base topology is symmetric with spectrum in [-1, 1]") {
  for (const auto& g : {chain_graph(7), star_graph(6), ntu25_graph()}) {
    auto a = build_base_topology(g);
    const Index N = g.n_nodes;
    Eigen::MatrixXd m(N, N);
    for (Index i = 0; i < N; ++i)
      for (Index j = 0; j < N; ++j) {
        m(i, j) = a.at2(i, j);
        CHECK(a.at2(i, j) == a.at2(j, i));
        CHECK(a.at2(i, j) >= 0.0f);
      }
    // entries are stored in float32, so allow single-precision slack
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    CHECK(es.eigenvalues().minCoeff() >= -1.0 - 1e-6);
    CHECK(es.eigenvalues().maxCoeff() <= 1.0 + 1e-6);
  }
}

TEST_CASE("ntu25 preset shape") {
  auto g = ntu25_graph();
  CHECK(g.n_nodes == 25);
  CHECK(g.edges.size() == 24);
  CHECK(g.root == 0);
  CHECK_NOTHROW(g.validate());
  // every node reachable, root's children are spine and both hips
  auto parent = g.parents();
  CHECK(parent[0] == -1);
  int root_children = 0;
  for (auto [src, tgt] : g.edges)
    if (src == 0) ++root_children;
  CHECK(root_children == 3);
}

TEST_CASE("graph validation rejects malformed trees") {
  SkeletonGraph two_parents;
  two_parents.n_nodes = 3;
  two_parents.root = 0;
  two_parents.edges = {{0, 2}, {1, 2}};
  CHECK_THROWS_AS(two_parents.validate(), ConfigError);

  SkeletonGraph cycle;
  cycle.n_nodes = 3;
  cycle.root = 0;
  cycle.edges = {{1, 2}, {2, 1}};
  CHECK_THROWS_AS(cycle.validate(), ConfigError);

  SkeletonGraph into_root;
  into_root.n_nodes = 2;
  into_root.root = 0;
  into_root.edges = {{1, 0}};
  CHECK_THROWS_AS(into_root.validate(), ConfigError);

  SkeletonGraph bad_ref;
  bad_ref.n_nodes = 2;
  bad_ref.root = 0;
  bad_ref.edges = {{0, 5}};
  CHECK_THROWS_AS(bad_ref.validate(), ConfigError);
}

TEST_CASE("graph JSON round trip preserves structure") {
  auto g = ntu25_graph();
  auto text = graph_to_json(g);
  auto g2 = graph_from_json(text);
  CHECK(g2.n_nodes == g.n_nodes);
  CHECK(g2.root == g.root);
  REQUIRE(g2.edges.size() == g.edges.size());
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    CHECK(g2.edges[i] == g.edges[i]);
  }
}

TEST_CASE("graph JSON rejects unknown keys and bad syntax") {
  CHECK_THROWS_AS(graph_from_json("{"), ConfigError);
  CHECK_THROWS_AS(
      graph_from_json(R"({"n_nodes": 2, "root": 0, "edges": [[0,1]], "extra": 1})"),
      ConfigError);
  CHECK_THROWS_AS(graph_from_json(R"({"n_nodes": 2, "root": 0})"), ConfigError);
}

TEST_CASE("parse_graph_spec handles presets") {
  CHECK(parse_graph_spec("chain(9)").n_nodes == 9);
  CHECK(parse_graph_spec("star(4)").edges.size() == 3);
  CHECK(parse_graph_spec("ntu25").n_nodes == 25);
  CHECK_THROWS_AS(parse_graph_spec("chain(x)"), ConfigError);
  CHECK_THROWS_AS(parse_graph_spec("no_such_file.json"), ConfigError);
}

TEST_CASE("spatial_gradient on a chain is the adjacent difference, root zero") {
  auto g = chain_graph(4);
  auto x = Tensor<float>::from_data({1, 1, 1, 4}, {1.f, 4.f, 9.f, 16.f});
  auto d = spatial_gradient(x, g);
  CHECK(d[0] == 0.f);
  CHECK(d[1] == 3.f);
  CHECK(d[2] == 5.f);
  CHECK(d[3] == 7.f);
}

TEST_CASE("spatial_gradient on a star measures offsets from the hub") {
  auto g = star_graph(4);
  auto x = Tensor<float>::from_data({1, 1, 1, 4}, {10.f, 11.f, 13.f, 17.f});
  auto d = spatial_gradient(x, g);
  CHECK(d[0] == 0.f);
  CHECK(d[1] == 1.f);
  CHECK(d[2] == 3.f);
  CHECK(d[3] == 7.f);
}

TEST_CASE("spatial_gradient adjoint satisfies the dot-product identity") {
  Rng rng(101);
  auto g = ntu25_graph();
  auto x = s3t::testing::random_tensor<double>({2, 2, 3, 25}, rng);
  auto y = s3t::testing::random_tensor<double>({2, 2, 3, 25}, rng);
  auto ax = spatial_gradient(x, g);
  Tensor<double> aty(x.shape());
  spatial_gradient_adjoint(y, g, aty);
  double lhs = 0, rhs = 0;
  for (Index i = 0; i < x.size(); ++i) {
    lhs += ax[i] * y[i];
    rhs += x[i] * aty[i];
  }
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("spatial_gradient checks the node axis") {
  auto g = chain_graph(4);
  Tensor<float> x({1, 1, 1, 5});
  CHECK_THROWS_AS(spatial_gradient(x, g), ShapeError);
}
