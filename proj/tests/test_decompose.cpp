#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "corgcn/decompose.hpp"

using corgcn::BatchPlan;
using corgcn::DecomposedGraphSet;
using corgcn::Graph;
using corgcn::NoGradGuard;
using corgcn::ProjectedFeatures;
using corgcn::PrototypeSet;
using corgcn::Rng;
using corgcn::Tape;
using corgcn::Tensor;
using corgcn::ValueMatrix;

namespace {

PrototypeSet prototypes_from(std::size_t k, std::size_t d, std::vector<double> values) {
  PrototypeSet p;
  p.vectors = Tensor::from_values(k, d, std::move(values), true);
  return p;
}

ValueMatrix matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  ValueMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.values = std::move(values);
  return m;
}

}  // namespace

TEST_SUITE("decompose") {

TEST_CASE("projection coefficients are cosines") {
  Tape tape;
  SUBCASE("parallel vectors give coefficient 1 and an unchanged row") {
    const Tensor features = Tensor::from_values(1, 2, {2.0, 0.0}, true);
    const PrototypeSet prototypes = prototypes_from(1, 2, {5.0, 0.0});
    const ProjectedFeatures proj = corgcn::project_features(tape, features, prototypes);
    CHECK(proj.coefficients.at(0, 0) == doctest::Approx(1.0));
    CHECK(proj.views[0].at(0, 0) == doctest::Approx(2.0));
    CHECK(proj.views[0].at(0, 1) == doctest::Approx(0.0));
  }
  SUBCASE("orthogonal vectors give a zero view row") {
    const Tensor features = Tensor::from_values(1, 2, {1.0, 0.0}, true);
    const PrototypeSet prototypes = prototypes_from(1, 2, {0.0, 3.0});
    const ProjectedFeatures proj = corgcn::project_features(tape, features, prototypes);
    CHECK(proj.coefficients.at(0, 0) == doctest::Approx(0.0));
    CHECK(proj.views[0].at(0, 0) == doctest::Approx(0.0));
  }
  SUBCASE("hand value 0.8 for [1,2] against [2,1]") {
    const Tensor features = Tensor::from_values(1, 2, {1.0, 2.0}, true);
    const PrototypeSet prototypes = prototypes_from(1, 2, {2.0, 1.0});
    const ProjectedFeatures proj = corgcn::project_features(tape, features, prototypes);
    CHECK(proj.coefficients.at(0, 0) == doctest::Approx(0.8).epsilon(1e-12));
  }
  SUBCASE("zero-norm rows give coefficient 0") {
    const Tensor features = Tensor::from_values(1, 2, {0.0, 0.0}, true);
    const PrototypeSet prototypes = prototypes_from(1, 2, {1.0, 1.0});
    const ProjectedFeatures proj = corgcn::project_features(tape, features, prototypes);
    CHECK(proj.coefficients.at(0, 0) == 0.0);
  }
}

TEST_CASE("projection is scale-covariant") {
  Tape tape;
  Rng rng(13);
  const Tensor features = Tensor::randn(4, 3, 1.0, rng, true);
  const PrototypeSet prototypes = PrototypeSet::init(2, 3, rng);
  const ProjectedFeatures base = corgcn::project_features(tape, features, prototypes);

  const double c = 3.7;
  std::vector<double> scaled(features.data().begin(), features.data().end());
  for (auto& v : scaled) v *= c;
  const Tensor scaled_features = Tensor::from_values(4, 3, std::move(scaled), true);
  const ProjectedFeatures after = corgcn::project_features(tape, scaled_features, prototypes);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(after.coefficients.at(i, k) ==
            doctest::Approx(base.coefficients.at(i, k)).epsilon(1e-10));
    }
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(after.views[0].at(i, j) == doctest::Approx(c * base.views[0].at(i, j)).epsilon(1e-10));
    }
  }
}

TEST_CASE("view similarity block is cosine of aggregated rows") {
  const Graph g = Graph::from_edges(2, {});
  SUBCASE("identical aggregated rows score one") {
    const auto projected = corgcn::project_feature_values(
        matrix(2, 2, {1.0, 1.0, 1.0, 1.0}), matrix(1, 2, {1.0, 1.0}));
    const std::vector<std::size_t> batch = {0, 1};
    const auto blocks = corgcn::view_similarity(projected, g, batch);
    REQUIRE(blocks.size() == 1);
    CHECK(blocks[0][0 * 2 + 1] == doctest::Approx(1.0));
  }
  SUBCASE("zero rows score zero against everything") {
    const auto projected = corgcn::project_feature_values(
        matrix(2, 2, {0.0, 0.0, 1.0, 1.0}), matrix(1, 2, {1.0, 1.0}));
    const std::vector<std::size_t> batch = {0, 1};
    const auto blocks = corgcn::view_similarity(projected, g, batch);
    CHECK(blocks[0][0 * 2 + 1] == doctest::Approx(0.0));
    CHECK(blocks[0][1 * 2 + 0] == doctest::Approx(0.0));
  }
  SUBCASE("degenerate one-node batch") {
    const auto projected = corgcn::project_feature_values(
        matrix(2, 2, {1.0, 2.0, 0.5, 0.5}), matrix(1, 2, {1.0, 1.0}));
    const std::vector<std::size_t> batch = {0};
    const auto blocks = corgcn::view_similarity(projected, g, batch);
    REQUIRE(blocks[0].size() == 1);
    CHECK(blocks[0][0] == doctest::Approx(1.0));
  }
}

TEST_CASE("top-lambda keeps the highest scores with ties to the lower index") {
  const BatchPlan plan = BatchPlan::single(4);
  SUBCASE("row scores 0.9, 0.2, 0.6 keep candidates 1 and 3 at lambda 2") {
    // block for batch {0,1,2,3}; row 0 scores against 1,2,3 are 0.9, 0.2, 0.6
    std::vector<double> block = {
        1.0, 0.9, 0.2, 0.6,
        0.9, 1.0, 0.1, 0.0,
        0.2, 0.1, 1.0, 0.3,
        0.6, 0.0, 0.3, 1.0,
    };
    const std::vector<std::vector<double>> blocks = {block};
    const auto result = corgcn::topk_adjacency(blocks, plan, 4, 2);
    CHECK(result.directed[0] == std::vector<std::size_t>{1, 3});
  }
  SUBCASE("tie at the boundary goes to the lower node index") {
    std::vector<double> block = {
        1.0, 0.5, 0.5, 0.5,
        0.5, 1.0, 0.5, 0.5,
        0.5, 0.5, 1.0, 0.5,
        0.5, 0.5, 0.5, 1.0,
    };
    const std::vector<std::vector<double>> blocks = {block};
    const auto result = corgcn::topk_adjacency(blocks, plan, 4, 2);
    CHECK(result.directed[0] == std::vector<std::size_t>{1, 2});
    CHECK(result.directed[3] == std::vector<std::size_t>{0, 1});
  }
  SUBCASE("lambda saturates to the complete graph") {
    std::vector<double> block(16, 0.1);
    const std::vector<std::vector<double>> blocks = {block};
    const auto result = corgcn::topk_adjacency(blocks, plan, 4, 10);
    CHECK(result.graph.edge_count() == 6);
    for (std::size_t u = 0; u < 4; ++u) CHECK(result.directed[u].size() == 3);
  }
}

TEST_CASE("pre-symmetrization out-degree is exact and the result is clean") {
  Rng rng(2718);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 3 + rng.uniform_int(25);
    const std::size_t lambda = 1 + rng.uniform_int(6);
    std::vector<double> block(n * n);
    for (auto& v : block) v = rng.uniform();
    const BatchPlan plan = BatchPlan::single(n);
    const std::vector<std::vector<double>> blocks = {block};
    const auto result = corgcn::topk_adjacency(blocks, plan, n, lambda);

    const std::size_t expected = std::min(lambda, n - 1);
    for (std::size_t u = 0; u < n; ++u) {
      CHECK(result.directed[u].size() == expected);
      for (std::size_t v : result.directed[u]) CHECK(v != u);  // self excluded
    }
    // final graph symmetric and self-loop-free by construction
    for (std::size_t u = 0; u < n; ++u) {
      for (std::size_t v : result.graph.neighbors(u)) {
        CHECK(v != u);
        CHECK(result.graph.has_edge(v, u));
      }
    }
  }
}

TEST_CASE("batched plans only compare nodes within a batch") {
  Rng rng(5);
  const std::size_t n = 10;
  const BatchPlan plan = BatchPlan::contiguous(n, 5);
  REQUIRE(plan.batches.size() == 2);
  std::vector<std::vector<double>> blocks;
  for (const auto& batch : plan.batches) {
    std::vector<double> block(batch.size() * batch.size());
    for (auto& v : block) v = rng.uniform();
    blocks.push_back(std::move(block));
  }
  const auto result = corgcn::topk_adjacency(blocks, plan, n, 3);
  for (std::size_t u = 0; u < n; ++u) {
    CHECK(result.directed[u].size() == 3);
    for (std::size_t v : result.directed[u]) {
      CHECK((u < 5) == (v < 5));  // candidates stay inside the batch
    }
  }
}

TEST_CASE("identical prototypes produce identical learned views") {
  Rng rng(31);
  const std::size_t n = 12, d = 4;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (int e = 0; e < 20; ++e) edges.emplace_back(rng.uniform_int(n), rng.uniform_int(n));
  const Graph g = Graph::from_edges(n, edges);
  std::vector<double> features(n * d);
  for (auto& v : features) v = rng.normal();
  std::vector<double> proto_row(d);
  for (auto& v : proto_row) v = rng.normal();
  std::vector<double> prototypes;
  prototypes.insert(prototypes.end(), proto_row.begin(), proto_row.end());
  prototypes.insert(prototypes.end(), proto_row.begin(), proto_row.end());

  const auto cdg = corgcn::build_cdg(g, matrix(n, d, features), matrix(2, d, prototypes), 3,
                                     BatchPlan::single(n));
  REQUIRE(cdg.views.size() == 3);
  CHECK(cdg.views[1].adjacency.columns == cdg.views[2].adjacency.columns);
  CHECK(cdg.views[1].adjacency.row_offsets == cdg.views[2].adjacency.row_offsets);
}

TEST_CASE("build_cdg produces K+1 views with view 0 the original graph") {
  Rng rng(17);
  const std::size_t n = 8, d = 3;
  const Graph g = Graph::from_edges(n, {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {1, 2}});
  std::vector<double> features(n * d);
  for (auto& v : features) v = rng.normal();
  std::vector<double> prototypes(1 * d);
  for (auto& v : prototypes) v = rng.normal();

  const auto cdg = corgcn::build_cdg(g, matrix(n, d, features), matrix(1, d, prototypes), 2,
                                     BatchPlan::single(n));
  CHECK(cdg.views.size() == 2);  // one label -> two views
  CHECK(cdg.label_views() == 1);
  CHECK(cdg.views[0].adjacency.columns == g.columns);

  // saturating lambda with one full batch gives the complete learned view
  const auto saturated = corgcn::build_cdg(g, matrix(n, d, features), matrix(1, d, prototypes),
                                           n + 5, BatchPlan::single(n));
  CHECK(saturated.views[1].adjacency.edge_count() == n * (n - 1) / 2);
}

TEST_CASE("merge_views unions every adjacency") {
  const Graph g = Graph::from_edges(4, {{0, 1}});
  DecomposedGraphSet cdg;
  cdg.views.resize(3);
  cdg.views[0].adjacency = g;
  cdg.views[1].adjacency = Graph::from_edges(4, {{1, 2}});
  cdg.views[2].adjacency = Graph::from_edges(4, {{2, 3}});
  const auto merged = corgcn::merge_views(cdg);
  REQUIRE(merged.views.size() == 3);
  for (const auto& view : merged.views) {
    CHECK(view.adjacency.edge_count() == 3);
    CHECK(view.adjacency.has_edge(0, 1));
    CHECK(view.adjacency.has_edge(1, 2));
    CHECK(view.adjacency.has_edge(2, 3));
  }
}

TEST_CASE("default batch plan switches to blocks past the threshold") {
  const BatchPlan small = BatchPlan::default_plan(100, 1024);
  CHECK(small.batches.size() == 1);
  const BatchPlan large = BatchPlan::default_plan(20001, 1024);
  CHECK(large.batches.size() == 20);  // ceil(20001 / 1024)
  std::size_t covered = 0;
  for (const auto& b : large.batches) covered += b.size();
  CHECK(covered == 20001);
}

}  // TEST_SUITE
