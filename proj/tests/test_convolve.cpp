#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "corgcn/convolve.hpp"
#include "corgcn/graph.hpp"
#include "support/gradcheck.hpp"

using corgcn::DecomposedGraphSet;
using corgcn::Graph;
using corgcn::NoGradGuard;
using corgcn::Rng;
using corgcn::Tape;
using corgcn::Tensor;

namespace {

DecomposedGraphSet views_of(const std::vector<Graph>& graphs) {
  DecomposedGraphSet cdg;
  for (const auto& g : graphs) {
    corgcn::GraphView view;
    view.adjacency = g;
    view.normalized = corgcn::normalize_adjacency(g);
    cdg.views.push_back(std::move(view));
  }
  return cdg;
}

Tensor identity(std::size_t d) {
  std::vector<double> values(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) values[i * d + i] = 1.0;
  return Tensor::from_values(d, d, std::move(values), true);
}

}  // namespace

TEST_SUITE("convolve") {

TEST_CASE("isolated node with identity weight passes through") {
  Tape tape;
  const auto cdg = views_of({Graph::from_edges(1, {})});
  const Tensor stack0 = Tensor::from_values(1, 3, {0.5, 1.5, 2.5});
  const Tensor w = identity(3);
  const Tensor weights[] = {w};
  const Tensor stack[] = {stack0};
  const auto out = corgcn::intra_label_layer(tape, stack, cdg, weights);
  for (std::size_t j = 0; j < 3; ++j) CHECK(out[0].at(0, j) == doctest::Approx(stack0.at(0, j)));
}

TEST_CASE("triangle with identical rows and identity weight preserves the rows") {
  Tape tape;
  const auto cdg = views_of({Graph::from_edges(3, {{0, 1}, {1, 2}, {0, 2}})});
  const Tensor stack0 = Tensor::from_values(3, 2, {2.0, 0.5, 2.0, 0.5, 2.0, 0.5});
  const Tensor w = identity(2);
  const Tensor weights[] = {w};
  const Tensor stack[] = {stack0};
  const auto out = corgcn::intra_label_layer(tape, stack, cdg, weights);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out[0].at(i, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out[0].at(i, 1) == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("zero stack maps to zero") {
  Tape tape;
  Rng rng(4);
  const auto cdg = views_of({Graph::from_edges(3, {{0, 1}, {1, 2}})});
  const Tensor stack0 = Tensor::zeros(3, 4);
  const Tensor w = Tensor::randn(4, 4, 1.0, rng, true);
  const Tensor weights[] = {w};
  const Tensor stack[] = {stack0};
  const auto out = corgcn::intra_label_layer(tape, stack, cdg, weights);
  for (double v : out[0].data()) CHECK(v == 0.0);
}

TEST_CASE("single label view attends trivially: output is input times the value weight") {
  Tape tape;
  Rng rng(9);
  const std::size_t n = 4, d = 3;
  const Tensor view0 = Tensor::randn(n, d, 1.0, rng, false);
  const Tensor view1 = Tensor::randn(n, d, 1.0, rng, false);
  const Tensor prototypes = Tensor::randn(1, d, 1.0, rng, true);
  const Tensor wq = Tensor::randn(d, d, 1.0, rng, true);
  const Tensor wk = Tensor::randn(d, d, 1.0, rng, true);
  const Tensor wv = Tensor::randn(d, d, 1.0, rng, true);
  const Tensor stack[] = {view0, view1};
  const auto out = corgcn::inter_label_propagation(tape, stack, prototypes, wq, wk, wv);
  CHECK(out[0].same_storage(view0));  // view 0 passes through untouched
  const Tensor expected = tape.matmul(view1, wv);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(out[1].at(i, j) == doctest::Approx(expected.at(i, j)).epsilon(1e-12));
}

TEST_CASE("attention matches the hand-evaluated two-view example") {
  Tape tape;
  // d=1, prototypes [1] and [0], node view values 2 and 0, identity weights
  const Tensor view0 = Tensor::from_values(1, 1, {0.0});
  const Tensor view1 = Tensor::from_values(1, 1, {2.0});
  const Tensor view2 = Tensor::from_values(1, 1, {0.0});
  const Tensor prototypes = Tensor::from_values(2, 1, {1.0, 0.0}, true);
  const Tensor w = identity(1);
  const Tensor stack[] = {view0, view1, view2};
  const auto out = corgcn::inter_label_propagation(tape, stack, prototypes, w, w, w);
  const double softmax_hot = std::exp(2.0) / (std::exp(2.0) + 1.0);
  CHECK(softmax_hot == doctest::Approx(0.8808).epsilon(1e-3));
  CHECK(out[1].at(0, 0) == doctest::Approx(softmax_hot * 2.0).epsilon(1e-9));
  CHECK(out[1].at(0, 0) == doctest::Approx(1.7616).epsilon(1e-3));
  // the zero prototype scores both views equally: uniform average
  CHECK(out[2].at(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("equal logits average the views uniformly") {
  Tape tape;
  Rng rng(15);
  const std::size_t n = 3, d = 2, k = 4;
  std::vector<Tensor> stack;
  stack.push_back(Tensor::randn(n, d, 1.0, rng, false));
  for (std::size_t v = 0; v < k; ++v) stack.push_back(Tensor::randn(n, d, 1.0, rng, false));
  // zero query weight: all logits are 0, softmax uniform, value weight identity
  const Tensor prototypes = Tensor::randn(k, d, 1.0, rng, true);
  const Tensor wq = Tensor::zeros(d, d, true);
  const Tensor wk = identity(d);
  const Tensor wv = identity(d);
  const auto out = corgcn::inter_label_propagation(tape, stack, prototypes, wq, wk, wv);
  for (std::size_t a = 1; a <= k; ++a) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t b = 1; b <= k; ++b) mean += stack[b].at(i, j) / k;
        CHECK(out[a].at(i, j) == doctest::Approx(mean).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("attention rows sum to one and shifting logits changes nothing") {
  Tape tape;
  const Tensor logits = Tensor::from_values(2, 3, {0.1, 2.0, -1.0, 5.0, 5.0, 5.0}, true);
  const Tensor attn = tape.row_softmax(logits);
  for (std::size_t i = 0; i < 2; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) sum += attn.at(i, j);
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
  const Tensor shifted = tape.row_softmax(tape.affine(logits, 1.0, 42.0));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(shifted.at(i, j) == doctest::Approx(attn.at(i, j)).epsilon(1e-12));
}

TEST_CASE("aggregation and prediction edge cases") {
  Tape tape;
  const std::size_t n = 2, d = 2, k = 1;
  SUBCASE("all-zero views predict sigmoid(bias)") {
    const Tensor view0 = Tensor::zeros(n, d);
    const Tensor view1 = Tensor::zeros(n, d);
    const Tensor prototypes = Tensor::from_values(k, d, {1.0, 0.0}, true);
    const Tensor wcls = Tensor::zeros(2 * d, 3, true);
    const Tensor bias = Tensor::from_values(1, 3, {0.3, -0.2, 0.0}, true);
    const Tensor stack[] = {view0, view1};
    const Tensor probs = corgcn::aggregate_and_predict(tape, stack, prototypes, wcls, bias);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(probs.at(i, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-0.3))));
      CHECK(probs.at(i, 1) == doctest::Approx(1.0 / (1.0 + std::exp(0.2))));
      CHECK(probs.at(i, 2) == doctest::Approx(0.5));
    }
  }
  SUBCASE("a view parallel to its prototype contributes itself") {
    const Tensor view0 = Tensor::zeros(n, d);
    const Tensor view1 = Tensor::from_values(n, d, {3.0, 0.0, 0.0, 2.0});
    const Tensor prototypes = Tensor::from_values(k, d, {1.0, 0.0}, true);
    Tensor wcls = Tensor::zeros(2 * d, 1, true);
    wcls.raw()[2] = 1.0;  // reads the first aggregated coordinate
    const Tensor bias = Tensor::zeros(1, 1, true);
    const Tensor stack[] = {view0, view1};
    const Tensor probs = corgcn::aggregate_and_predict(tape, stack, prototypes, wcls, bias);
    // node 0: cos=1, aggregated [3,0] -> logit 3; node 1: cos=0 -> logit 0
    CHECK(probs.at(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))).epsilon(1e-9));
    CHECK(probs.at(1, 0) == doctest::Approx(0.5).epsilon(1e-9));
  }
  SUBCASE("zero classifier gives one half everywhere") {
    Rng rng(2);
    const Tensor view0 = Tensor::randn(n, d, 1.0, rng, false);
    const Tensor view1 = Tensor::randn(n, d, 1.0, rng, false);
    const Tensor prototypes = Tensor::randn(k, d, 1.0, rng, true);
    const Tensor wcls = Tensor::zeros(2 * d, 4, true);
    const Tensor bias = Tensor::zeros(1, 4, true);
    const Tensor stack[] = {view0, view1};
    const Tensor probs = corgcn::aggregate_and_predict(tape, stack, prototypes, wcls, bias);
    for (double v : probs.data()) CHECK(v == doctest::Approx(0.5));
  }
}

TEST_CASE("full stack is permutation-equivariant") {
  Rng rng(600);
  const std::size_t n = 7, d = 3, k = 2;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (int e = 0; e < 12; ++e) edges.emplace_back(rng.uniform_int(n), rng.uniform_int(n));
  const Graph g0 = Graph::from_edges(n, edges);
  const Graph g1 = Graph::from_edges(n, {{0, 1}, {2, 3}, {4, 5}, {5, 6}});
  const Graph g2 = Graph::from_edges(n, {{0, 2}, {1, 3}, {2, 4}, {3, 5}});

  std::vector<Tensor> stack;
  for (std::size_t v = 0; v <= k; ++v) stack.push_back(Tensor::randn(n, d, 1.0, rng, false));
  const Tensor prototypes = Tensor::randn(k, d, 1.0, rng, false);
  const Tensor w = Tensor::randn(d, d, 1.0, rng, false);
  const Tensor wq = Tensor::randn(d, d, 1.0, rng, false);
  const Tensor wk = Tensor::randn(d, d, 1.0, rng, false);
  const Tensor wv = Tensor::randn(d, d, 1.0, rng, false);
  const Tensor wcls = Tensor::randn(2 * d, k, 1.0, rng, false);
  const Tensor bias = Tensor::randn(1, k, 1.0, rng, false);

  const auto run = [&](const std::vector<Graph>& graphs, const std::vector<Tensor>& input) {
    Tape tape;
    const auto cdg = views_of(graphs);
    const Tensor weights[] = {w};
    auto hidden = corgcn::intra_label_layer(tape, input, cdg, weights);
    hidden = corgcn::inter_label_propagation(tape, hidden, prototypes, wq, wk, wv);
    return corgcn::aggregate_and_predict(tape, hidden, prototypes, wcls, bias);
  };

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);

  const auto permute_graph = [&](const Graph& g) {
    std::vector<std::pair<std::size_t, std::size_t>> pe;
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t v : g.neighbors(u))
        if (u < v) pe.emplace_back(perm[u], perm[v]);
    return Graph::from_edges(n, pe);
  };
  const auto permute_rows = [&](const Tensor& t) {
    std::vector<double> values(t.size());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < t.cols(); ++j)
        values[perm[i] * t.cols() + j] = t.at(i, j);
    return Tensor::from_values(n, t.cols(), std::move(values), false);
  };

  const Tensor base = run({g0, g1, g2}, stack);
  std::vector<Tensor> permuted_stack;
  for (const auto& t : stack) permuted_stack.push_back(permute_rows(t));
  const Tensor permuted =
      run({permute_graph(g0), permute_graph(g1), permute_graph(g2)}, permuted_stack);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j)
      CHECK(permuted.at(perm[i], j) == doctest::Approx(base.at(i, j)).epsilon(1e-9));
}

TEST_CASE("gradients of a BCE loss through the whole module match finite differences") {
  Rng rng(1234);
  const std::size_t n = 6, d = 5, k = 3;
  std::vector<std::pair<std::size_t, std::size_t>> edges = {{0, 1}, {1, 2}, {3, 4}, {4, 5}, {0, 5}};
  std::vector<Graph> graphs = {Graph::from_edges(n, edges)};
  for (std::size_t v = 0; v < k; ++v) {
    std::vector<std::pair<std::size_t, std::size_t>> learned;
    for (int e = 0; e < 8; ++e) learned.emplace_back(rng.uniform_int(n), rng.uniform_int(n));
    graphs.push_back(Graph::from_edges(n, learned));
  }
  const auto cdg = views_of(graphs);

  std::vector<Tensor> stack;
  for (std::size_t v = 0; v <= k; ++v) stack.push_back(Tensor::randn(n, d, 1.0, rng, false));
  Tensor prototypes = Tensor::randn(k, d, 1.0, rng, true);
  Tensor w1 = Tensor::randn(d, d, 0.7, rng, true);
  Tensor w2 = Tensor::randn(d, d, 0.7, rng, true);
  Tensor wq = Tensor::randn(d, d, 0.7, rng, true);
  Tensor wk = Tensor::randn(d, d, 0.7, rng, true);
  Tensor wv = Tensor::randn(d, d, 0.7, rng, true);
  Tensor wcls = Tensor::randn(2 * d, k, 0.7, rng, true);
  Tensor bias = Tensor::zeros(1, k, true);

  std::vector<double> targets(n * k);
  for (auto& t : targets) t = rng.uniform() < 0.5 ? 1.0 : 0.0;
  const Tensor y = Tensor::from_values(n, k, targets);
  const Tensor one_minus_y = Tensor::from_values(n, k, [&] {
    std::vector<double> v(n * k);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 - targets[i];
    return v;
  }());

  Tape tape;
  const auto build = [&](Tape& t) {
    const Tensor weights1[] = {w1};
    const Tensor weights2[] = {w2};
    auto hidden = corgcn::intra_label_layer(t, stack, cdg, weights1);
    hidden = corgcn::inter_label_propagation(t, hidden, prototypes, wq, wk, wv);
    hidden = corgcn::intra_label_layer(t, hidden, cdg, weights2);
    hidden = corgcn::inter_label_propagation(t, hidden, prototypes, wq, wk, wv);
    const Tensor probs = corgcn::aggregate_and_predict(t, hidden, prototypes, wcls, bias);
    const Tensor p = t.clamp(probs, 1e-7, 1.0 - 1e-7);
    const Tensor ll = t.add(t.mul(y, t.log(p)), t.mul(one_minus_y, t.log(t.affine(p, -1.0, 1.0))));
    return t.affine(t.sum(ll), -1.0 / static_cast<double>(n * k), 0.0);
  };
  const auto result = testsupport::check_gradients(
      {prototypes, w1, w2, wq, wk, wv, wcls, bias},
      [&]() { tape.backward(build(tape)); },
      [&]() {
        NoGradGuard guard(tape);
        return build(tape).value();
      });
  CHECK(result.max_rel_error < 1e-4);
}

}  // TEST_SUITE
