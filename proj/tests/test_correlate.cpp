#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "corgcn/correlate.hpp"
#include "support/gradcheck.hpp"

using corgcn::ClassWeights;
using corgcn::Decoder;
using corgcn::LabelMatrix;
using corgcn::NoGradGuard;
using corgcn::PrototypeSet;
using corgcn::Rng;
using corgcn::Tape;
using corgcn::Tensor;

namespace {

LabelMatrix make_labels(std::size_t n, std::size_t k,
                        const std::vector<std::vector<std::size_t>>& positives) {
  LabelMatrix labels;
  labels.n = n;
  labels.k = k;
  labels.values.assign(n * k, 0);
  labels.labeled.assign(n, 0);
  for (std::size_t i = 0; i < positives.size(); ++i) {
    for (std::size_t j : positives[i]) labels.values[i * k + j] = 1;
    labels.labeled[i] = positives[i].empty() ? 0 : 1;
  }
  return labels;
}

PrototypeSet prototypes_from(std::size_t k, std::size_t d, std::vector<double> values) {
  PrototypeSet p;
  p.vectors = Tensor::from_values(k, d, std::move(values), true);
  return p;
}

}  // namespace

TEST_SUITE("correlate") {

TEST_CASE("contrastive loss matches the closed form for one node, two labels") {
  Tape tape;
  // feature [1, 0], prototypes [1,0] and [0,0]: dot products are 1 and 0
  const Tensor features = Tensor::from_values(1, 2, {1.0, 0.0}, true);
  const PrototypeSet prototypes = prototypes_from(2, 2, {1.0, 0.0, 0.0, 0.0});
  const LabelMatrix labels = make_labels(1, 2, {{0}});
  const std::vector<std::size_t> batch = {0};
  const Tensor loss = corgcn::contrastive_loss(tape, features, prototypes, labels, batch);
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(loss.value() == doctest::Approx(expected).epsilon(1e-10));
  CHECK(expected == doctest::Approx(0.3133).epsilon(1e-3));
}

TEST_CASE("contrastive loss is log K under uniform dot products") {
  Tape tape;
  const std::size_t k = 5;
  const Tensor features = Tensor::from_values(1, 3, {0.0, 0.0, 0.0}, true);
  Rng rng(1);
  const PrototypeSet prototypes = PrototypeSet::init(k, 3, rng);
  const LabelMatrix labels = make_labels(1, k, {{2}});
  const std::vector<std::size_t> batch = {0};
  const Tensor loss = corgcn::contrastive_loss(tape, features, prototypes, labels, batch);
  CHECK(loss.value() == doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-10));
}

TEST_CASE("two equal-scoring positives average to the single-positive loss") {
  Tape tape;
  // prototypes 0 and 1 coincide, so their log-softmax scores tie
  const Tensor features = Tensor::from_values(1, 2, {0.4, -0.3}, true);
  const PrototypeSet prototypes = prototypes_from(3, 2, {0.7, 0.1, 0.7, 0.1, -0.5, 0.9});
  const std::vector<std::size_t> batch = {0};

  const Tensor both = corgcn::contrastive_loss(tape, features, prototypes,
                                               make_labels(1, 3, {{0, 1}}), batch);
  const Tensor first = corgcn::contrastive_loss(tape, features, prototypes,
                                                make_labels(1, 3, {{0}}), batch);
  const Tensor second = corgcn::contrastive_loss(tape, features, prototypes,
                                                 make_labels(1, 3, {{1}}), batch);
  CHECK(both.value() ==
        doctest::Approx(0.5 * (first.value() + second.value())).epsilon(1e-12));
}

TEST_CASE("contrastive loss is invariant to batch order") {
  Tape tape;
  Rng rng(7);
  const Tensor features = Tensor::randn(6, 4, 1.0, rng, true);
  const PrototypeSet prototypes = PrototypeSet::init(3, 4, rng);
  const LabelMatrix labels = make_labels(6, 3, {{0}, {1}, {2}, {0, 1}, {1, 2}, {0, 2}});
  const std::vector<std::size_t> forward_batch = {0, 1, 2, 3, 4, 5};
  const std::vector<std::size_t> reversed = {5, 4, 3, 2, 1, 0};
  const double a =
      corgcn::contrastive_loss(tape, features, prototypes, labels, forward_batch).value();
  const double b =
      corgcn::contrastive_loss(tape, features, prototypes, labels, reversed).value();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("contrastive loss rejects nodes without positives") {
  Tape tape;
  Rng rng(3);
  const Tensor features = Tensor::randn(2, 3, 1.0, rng, true);
  const PrototypeSet prototypes = PrototypeSet::init(2, 3, rng);
  const LabelMatrix labels = make_labels(2, 2, {{0}, {}});
  const std::vector<std::size_t> batch = {0, 1};
  CHECK_THROWS_AS(corgcn::contrastive_loss(tape, features, prototypes, labels, batch),
                  std::invalid_argument);
}

TEST_CASE("class weights follow inverse square-root counts") {
  SUBCASE("counts 1 and 4") {
    const LabelMatrix labels = make_labels(5, 2, {{0}, {1}, {1}, {1}, {1}});
    const std::vector<std::size_t> train = {0, 1, 2, 3, 4};
    const auto w = corgcn::class_weights(labels, train);
    CHECK(w.rho[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(w.rho[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("equal counts are uniform") {
    const LabelMatrix labels = make_labels(4, 2, {{0}, {1}, {0}, {1}});
    const std::vector<std::size_t> train = {0, 1, 2, 3};
    const auto w = corgcn::class_weights(labels, train);
    CHECK(w.rho[0] == doctest::Approx(0.5));
    CHECK(w.rho[1] == doctest::Approx(0.5));
  }
  SUBCASE("counts 1,1,4 give 0.4,0.4,0.2") {
    const LabelMatrix labels =
        make_labels(6, 3, {{0}, {1}, {2}, {2}, {2}, {2}});
    const std::vector<std::size_t> train = {0, 1, 2, 3, 4, 5};
    const auto w = corgcn::class_weights(labels, train);
    CHECK(w.rho[0] == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(w.rho[1] == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(w.rho[2] == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("zero-count class substitutes count one") {
    const LabelMatrix labels = make_labels(2, 2, {{0}, {0}});
    const std::vector<std::size_t> train = {0, 1};
    const auto w = corgcn::class_weights(labels, train);  // warns on stderr
    const double r0 = std::sqrt(1.0 / 2.0), r1 = 1.0;
    CHECK(w.rho[0] == doctest::Approx(r0 / (r0 + r1)).epsilon(1e-12));
    CHECK(w.rho[1] == doctest::Approx(r1 / (r0 + r1)).epsilon(1e-12));
  }
}

TEST_CASE("class weights form a probability vector with rarer classes heavier") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 30, k = 4;
    std::vector<std::vector<std::size_t>> positives(n);
    for (std::size_t i = 0; i < n; ++i) {
      positives[i].push_back(rng.uniform_int(k));
      if (rng.uniform() < 0.7) positives[i].push_back(0);  // class 0 frequent
    }
    const LabelMatrix labels = make_labels(n, k, positives);
    std::vector<std::size_t> train(n);
    std::iota(train.begin(), train.end(), 0);
    const auto w = corgcn::class_weights(labels, train);
    double sum = 0.0;
    for (double r : w.rho) {
      CHECK(r > 0.0);
      sum += r;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));

    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) counts[j] += labels.values[i * k + j];
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b)
        if (counts[a] < counts[b]) CHECK(w.rho[a] > w.rho[b]);
  }
}

TEST_CASE("focal loss equals log 2 when every probability is one half") {
  Tape tape;
  Rng rng(5);
  const std::size_t n = 3, k = 4, d = 2;
  const Tensor features = Tensor::zeros(n, d, true);
  PrototypeSet prototypes = prototypes_from(k, d, std::vector<double>(k * d, 0.0));
  Decoder decoder;
  decoder.weight = Tensor::zeros(d, k, true);
  decoder.bias = Tensor::zeros(1, k, true);  // sigmoid(0) = 0.5 everywhere
  const LabelMatrix labels = make_labels(n, k, {{0}, {1, 2}, {3}});
  ClassWeights rho;
  rho.rho = {0.25, 0.25, 0.25, 0.25};
  const std::vector<std::size_t> batch = {0, 1, 2};
  const Tensor loss = corgcn::focal_likelihood_loss(tape, features, prototypes, labels, decoder,
                                                    rho, 0.0, batch);
  CHECK(loss.value() == doctest::Approx(std::log(2.0)).epsilon(1e-10));
}

TEST_CASE("focal loss matches the plug-in value at p = 0.9, gamma = 2") {
  Tape tape;
  const std::size_t d = 2;
  const Tensor features = Tensor::zeros(1, d, true);
  PrototypeSet prototypes = prototypes_from(1, d, {0.0, 0.0});

  // zero decoder weight, bias at logit(0.9): both sides predict 0.9
  const double logit = std::log(0.9 / 0.1);
  Decoder decoder;
  decoder.weight = Tensor::zeros(d, 1, true);
  decoder.bias = Tensor::from_values(1, 1, {logit}, true);
  LabelMatrix labels;
  labels.n = 1;
  labels.k = 1;
  labels.values = {1};
  labels.labeled = {1};
  ClassWeights rho;
  rho.rho = {1.0};
  const std::vector<std::size_t> batch = {0};
  const Tensor loss = corgcn::focal_likelihood_loss(tape, features, prototypes, labels, decoder,
                                                    rho, 2.0, batch);
  const double per_term = 0.01 * std::log(0.9);
  CHECK(loss.value() == doctest::Approx(-0.5 * (2.0 * per_term)).epsilon(1e-10));
}

TEST_CASE("focal loss vanishes as predictions become perfect") {
  Tape tape;
  const std::size_t d = 2, k = 2;
  const Tensor features = Tensor::from_values(1, d, {1.0, 1.0}, true);
  PrototypeSet prototypes = prototypes_from(k, d, {1.0, 1.0, 0.0, 0.0});
  Decoder decoder;
  // huge positive logit for class 0, huge negative for class 1
  decoder.weight = Tensor::from_values(d, k, {20.0, -20.0, 20.0, -20.0}, true);
  decoder.bias = Tensor::zeros(1, k, true);
  const LabelMatrix labels = make_labels(1, k, {{0}});
  ClassWeights rho;
  rho.rho = {0.5, 0.5};
  const std::vector<std::size_t> batch = {0};
  const Tensor loss = corgcn::focal_likelihood_loss(tape, features, prototypes, labels, decoder,
                                                    rho, 3.0, batch);
  CHECK(loss.value() >= 0.0);
  CHECK(loss.value() < 1e-9);
}

TEST_CASE("gamma zero reduces the focal loss to weighted binary cross-entropy") {
  Tape tape;
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 7, k = 3, d = 4;
    const Tensor features = Tensor::randn(n, d, 1.0, rng, true);
    const PrototypeSet prototypes = PrototypeSet::init(k, d, rng);
    const Decoder decoder = Decoder::init(d, k, rng);
    std::vector<std::vector<std::size_t>> positives(n);
    for (std::size_t i = 0; i < n; ++i) positives[i].push_back(rng.uniform_int(k));
    const LabelMatrix labels = make_labels(n, k, positives);
    std::vector<std::size_t> batch(n);
    std::iota(batch.begin(), batch.end(), 0);
    ClassWeights rho;
    rho.rho = {0.5, 0.3, 0.2};

    const double focal =
        corgcn::focal_likelihood_loss(tape, features, prototypes, labels, decoder, rho, 0.0,
                                      batch)
            .value();

    // direct weighted BCE over both decoder inputs
    NoGradGuard guard(tape);
    const auto bce_side = [&](const Tensor& inputs) {
      const Tensor p = decoder.probabilities(tape, inputs);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const double q = std::clamp(p.at(i, j), 1e-7, 1.0 - 1e-7);
          const double matched = labels.values[i * k + j] ? q : 1.0 - q;
          acc += rho.rho[j] * std::log(matched);
        }
      }
      return acc;
    };
    std::vector<double> label_rows(n * k);
    for (std::size_t i = 0; i < n * k; ++i) label_rows[i] = labels.values[i];
    const Tensor label_embed =
        tape.matmul(Tensor::from_values(n, k, label_rows), prototypes.vectors);
    const double direct =
        -(bce_side(features) + bce_side(label_embed)) / (2.0 * static_cast<double>(n));
    CHECK(focal == doctest::Approx(direct).epsilon(1e-9));
  }
}

TEST_CASE("loss gradients agree with finite differences") {
  Tape tape;
  Rng rng(77);
  const std::size_t n = 5, k = 3, d = 4;
  Tensor features = Tensor::randn(n, d, 1.0, rng, true);
  PrototypeSet prototypes = PrototypeSet::init(k, d, rng);
  Decoder decoder = Decoder::init(d, k, rng);
  const LabelMatrix labels = make_labels(n, k, {{0}, {1}, {2}, {0, 2}, {1, 2}});
  const std::vector<std::size_t> batch = {0, 1, 2, 3, 4};
  ClassWeights rho;
  rho.rho = {0.4, 0.35, 0.25};

  const auto build = [&](Tape& t) {
    const Tensor cmi = corgcn::contrastive_loss(t, features, prototypes, labels, batch);
    const Tensor lm = corgcn::focal_likelihood_loss(t, features, prototypes, labels, decoder,
                                                    rho, 2.0, batch);
    return t.add(cmi, lm);
  };
  const auto result = testsupport::check_gradients(
      {features, prototypes.vectors, decoder.weight, decoder.bias},
      [&]() { tape.backward(build(tape)); },
      [&]() {
        NoGradGuard guard(tape);
        return build(tape).value();
      });
  CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("clustering recovers the separated 2-partition") {
  // prototypes at (0,0), (0,1), (10,10), (10,11)
  const std::vector<double> vectors = {0, 0, 0, 1, 10, 10, 10, 11};
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto result = corgcn::cluster_vectors(vectors, 4, 2, 2, seed);
    CHECK(result.assignment[0] == result.assignment[1]);
    CHECK(result.assignment[2] == result.assignment[3]);
    CHECK(result.assignment[0] != result.assignment[2]);
    const std::size_t low = result.assignment[0];
    const std::size_t high = result.assignment[2];
    CHECK(result.centroids[low * 2 + 0] == doctest::Approx(0.0));
    CHECK(result.centroids[low * 2 + 1] == doctest::Approx(0.5));
    CHECK(result.centroids[high * 2 + 0] == doctest::Approx(10.0));
    CHECK(result.centroids[high * 2 + 1] == doctest::Approx(10.5));
  }
}

TEST_CASE("single cluster is the global mean") {
  const std::vector<double> vectors = {1, 2, 3, 4, 5, 6};
  const auto result = corgcn::cluster_vectors(vectors, 3, 2, 1, 0);
  CHECK(result.centroids[0] == doctest::Approx(3.0));
  CHECK(result.centroids[1] == doctest::Approx(4.0));
}

TEST_CASE("clustering objective never increases across iterations") {
  Rng rng(404);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t count = 5 + rng.uniform_int(30);
    const std::size_t dim = 1 + rng.uniform_int(8);
    const std::size_t clusters = 1 + rng.uniform_int(count < 8 ? count - 1 : 7);
    std::vector<double> vectors(count * dim);
    for (auto& v : vectors) v = rng.normal();
    const auto result = corgcn::cluster_vectors(vectors, count, dim, clusters, trial);
    for (std::size_t i = 1; i < result.objective.size(); ++i) {
      CHECK(result.objective[i] <= result.objective[i - 1] + 1e-9);
    }
  }
}

TEST_CASE("clustering is deterministic for a fixed seed") {
  Rng rng(11);
  std::vector<double> vectors(20 * 3);
  for (auto& v : vectors) v = rng.normal();
  const auto a = corgcn::cluster_vectors(vectors, 20, 3, 4, 99);
  const auto b = corgcn::cluster_vectors(vectors, 20, 3, 4, 99);
  CHECK(a.assignment == b.assignment);
  CHECK(a.centroids == b.centroids);
}

TEST_CASE("empty clusters are reseeded with the farthest member") {
  // k=3 over two natural groups: every cluster must end up nonempty
  const std::vector<double> vectors = {0, 0.1, 0.2, 10, 10.1, 10.2};
  const auto result = corgcn::cluster_vectors(vectors, 6, 1, 3, 1);
  std::vector<std::size_t> sizes(3, 0);
  for (auto a : result.assignment) ++sizes[a];
  for (auto s : sizes) CHECK(s > 0);
}

TEST_CASE("macro_prototypes validates its arguments and keeps the map") {
  Rng rng(8);
  PrototypeSet prototypes = PrototypeSet::init(6, 3, rng);
  CHECK_THROWS_AS(corgcn::macro_prototypes(prototypes, 6, 0), std::invalid_argument);
  CHECK_THROWS_AS(corgcn::macro_prototypes(prototypes, 0, 0), std::invalid_argument);
  const auto result = corgcn::macro_prototypes(prototypes, 2, 0);
  CHECK(result.prototypes.kind == PrototypeSet::Kind::macro);
  CHECK(result.prototypes.count() == 2);
  CHECK(result.prototypes.vectors.requires_grad());
  CHECK(result.prototypes.label_to_macro.size() == 6);
  for (auto m : result.prototypes.label_to_macro) CHECK(m < 2);
}

TEST_CASE("macro label matrix is the union of mapped positives") {
  LabelMatrix labels = make_labels(2, 4, {{0, 1}, {2, 3}});
  const std::vector<std::size_t> map = {0, 1, 1, 0};
  const LabelMatrix macro = corgcn::macro_labels(labels, map, 2);
  CHECK(macro.k == 2);
  CHECK(macro.is_positive(0, 0));
  CHECK(macro.is_positive(0, 1));
  CHECK(macro.is_positive(1, 0));
  CHECK(macro.is_positive(1, 1));
}

}  // TEST_SUITE
