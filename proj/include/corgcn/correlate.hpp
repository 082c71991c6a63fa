#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "corgcn/graph.hpp"
#include "corgcn/tensor.hpp"

namespace corgcn {

// Trainable per-label anchor vectors. A macro set is the k-means reduction of
// a pre-trained original set; `label_to_macro` then maps each original label
// to its macro index.
struct PrototypeSet {
  enum class Kind { original, macro };

  Tensor vectors;  // count-by-dim
  Kind kind = Kind::original;
  std::vector<std::size_t> label_to_macro;  // size = original label count when macro

  std::size_t count() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }

  // i.i.d. N(0, 1/dim) entries.
  static PrototypeSet init(std::size_t count, std::size_t dim, Rng& rng);
};

// Affine map dim -> k followed by sigmoid; the likelihood head for both
// transformed node features and summed positive prototypes.
struct Decoder {
  Tensor weight;  // dim-by-k
  Tensor bias;    // 1-by-k

  static Decoder init(std::size_t dim, std::size_t k, Rng& rng);
  Tensor probabilities(Tape& tape, const Tensor& inputs) const;
  std::size_t out_dim() const { return weight.cols(); }
};

struct ClassWeights {
  std::vector<double> rho;  // positive, sums to 1, larger for rarer classes
};

// sqrt(1 / count_k), normalized to sum 1 over classes. Classes with zero
// training positives are counted as 1 and a warning is written to stderr.
ClassWeights class_weights(const LabelMatrix& labels, std::span<const std::size_t> train);

// Mean over batch nodes and their positive labels of
// -log softmax(features_i . prototypes)[p], softmax taken over all labels.
// Throws if a batch node has no positive label.
Tensor contrastive_loss(Tape& tape, const Tensor& features, const PrototypeSet& prototypes,
                        const LabelMatrix& labels, std::span<const std::size_t> batch);

// Focal-style likelihood loss over both the transformed-feature side and the
// summed-positive-prototype side; probabilities are clamped to
// [1e-7, 1 - 1e-7] before logs. Positive quantity, zero for perfect
// predictions.
Tensor focal_likelihood_loss(Tape& tape, const Tensor& features,
                             const PrototypeSet& prototypes, const LabelMatrix& labels,
                             const Decoder& decoder, const ClassWeights& weights,
                             double gamma, std::span<const std::size_t> batch);

struct ClusterResult {
  std::vector<double> centroids;        // clusters-by-dim
  std::vector<std::size_t> assignment;  // size = vector count
  std::vector<double> objective;        // sum of Euclidean distances, one entry per iteration
  std::size_t iterations = 0;
};

// Lloyd clustering of row vectors. Assignment ties go to the lower centroid
// index; an empty cluster is reseeded at the vector farthest from its current
// centroid. A centroid only moves to its cluster mean when that does not
// increase the cluster's distance sum, which keeps `objective` non-increasing.
// Deterministic for a fixed seed; stops when assignments stabilize or after
// `max_iterations`.
ClusterResult cluster_vectors(std::span<const double> vectors, std::size_t count,
                              std::size_t dim, std::size_t clusters, std::uint64_t seed,
                              std::size_t max_iterations = 300);

struct MacroResult {
  PrototypeSet prototypes;              // kind == macro, trainable centroid tensor
  std::vector<double> objective;        // clustering objective per iteration
};

// Clusters a pre-trained prototype set into k_prime macro prototypes.
// Requires 1 <= k_prime < count().
MacroResult macro_prototypes(const PrototypeSet& pretrained, std::size_t k_prime,
                             std::uint64_t seed);

// Labels mapped through a macro assignment: node i is positive for macro
// class c when any of its positive labels maps to c.
LabelMatrix macro_labels(const LabelMatrix& labels, std::span<const std::size_t> label_to_macro,
                         std::size_t k_prime);

}  // namespace corgcn
