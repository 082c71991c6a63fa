#include "corgcn/correlate.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace corgcn {

PrototypeSet PrototypeSet::init(std::size_t count, std::size_t dim, Rng& rng) {
  if (count < 2) throw std::invalid_argument("prototypes: need at least 2 labels");
  PrototypeSet p;
  p.vectors = Tensor::randn(count, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng, true);
  return p;
}

Decoder Decoder::init(std::size_t dim, std::size_t k, Rng& rng) {
  Decoder d;
  d.weight = Tensor::randn(dim, k, 1.0 / std::sqrt(static_cast<double>(dim)), rng, true);
  d.bias = Tensor::zeros(1, k, true);
  return d;
}

Tensor Decoder::probabilities(Tape& tape, const Tensor& inputs) const {
  return tape.sigmoid(tape.add_rowvec(tape.matmul(inputs, weight), bias));
}

ClassWeights class_weights(const LabelMatrix& labels, std::span<const std::size_t> train) {
  std::vector<std::size_t> counts(labels.k, 0);
  for (std::size_t i : train)
    for (std::size_t j = 0; j < labels.k; ++j) counts[j] += labels.values[i * labels.k + j];
  ClassWeights w;
  w.rho.resize(labels.k);
  double total = 0.0;
  for (std::size_t j = 0; j < labels.k; ++j) {
    if (counts[j] == 0) {
      std::cerr << "warning: class " << j << " has no positive training example; "
                << "using count 1 for its weight\n";
      counts[j] = 1;
    }
    w.rho[j] = std::sqrt(1.0 / static_cast<double>(counts[j]));
    total += w.rho[j];
  }
  for (auto& r : w.rho) r /= total;
  return w;
}

Tensor contrastive_loss(Tape& tape, const Tensor& features, const PrototypeSet& prototypes,
                        const LabelMatrix& labels, std::span<const std::size_t> batch) {
  if (batch.empty()) throw std::invalid_argument("contrastive_loss: empty batch");
  const std::size_t k = prototypes.count();
  if (labels.k != k) throw std::invalid_argument("contrastive_loss: label count mismatch");

  // weight[i][p] = 1/|positives_i| for positive labels, 0 elsewhere
  std::vector<double> weights(batch.size() * k, 0.0);
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const std::size_t node = batch[bi];
    const std::size_t n_pos = labels.positive_count(node);
    if (n_pos == 0) {
      throw std::invalid_argument("contrastive_loss: batch node " + std::to_string(node) +
                                  " has no positive label");
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (labels.is_positive(node, j)) {
        weights[bi * k + j] = 1.0 / static_cast<double>(n_pos);
      }
    }
  }
  const Tensor weight_matrix = Tensor::from_values(batch.size(), k, std::move(weights));

  const Tensor gathered = tape.gather_rows(features, batch);
  const Tensor logits = tape.matmul_nt(gathered, prototypes.vectors);
  const Tensor log_probs = tape.row_log_softmax(logits);
  const Tensor weighted = tape.mul(weight_matrix, log_probs);
  return tape.affine(tape.sum(weighted), -1.0 / static_cast<double>(batch.size()), 0.0);
}

namespace {

constexpr double kProbClamp = 1e-7;

// p = p_hat where the target is positive, 1 - p_hat elsewhere; then the focal
// term rho * (1 - p)^gamma * log p with p clamped away from {0, 1}.
Tensor focal_term(Tape& tape, const Tensor& probs, const Tensor& target_matrix,
                  const Tensor& rho_matrix, double gamma) {
  const Tensor matched = tape.add(tape.mul(target_matrix, probs),
                                  tape.mul(tape.affine(target_matrix, -1.0, 1.0),
                                           tape.affine(probs, -1.0, 1.0)));
  const Tensor clamped = tape.clamp(matched, kProbClamp, 1.0 - kProbClamp);
  const Tensor focal = tape.pow(tape.affine(clamped, -1.0, 1.0), gamma);
  return tape.mul(rho_matrix, tape.mul(focal, tape.log(clamped)));
}

}  // namespace

Tensor focal_likelihood_loss(Tape& tape, const Tensor& features,
                             const PrototypeSet& prototypes, const LabelMatrix& labels,
                             const Decoder& decoder, const ClassWeights& weights,
                             double gamma, std::span<const std::size_t> batch) {
  if (batch.empty()) throw std::invalid_argument("focal_likelihood_loss: empty batch");
  if (gamma < 0.0) throw std::invalid_argument("focal_likelihood_loss: gamma must be >= 0");
  const std::size_t k = prototypes.count();
  if (labels.k != k || weights.rho.size() != k || decoder.out_dim() != k) {
    throw std::invalid_argument("focal_likelihood_loss: label count mismatch");
  }

  std::vector<double> targets(batch.size() * k);
  std::vector<double> rho_tile(batch.size() * k);
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    for (std::size_t j = 0; j < k; ++j) {
      targets[bi * k + j] = labels.is_positive(batch[bi], j) ? 1.0 : 0.0;
      rho_tile[bi * k + j] = weights.rho[j];
    }
  }
  const Tensor target_matrix = Tensor::from_values(batch.size(), k, std::move(targets));
  const Tensor rho_matrix = Tensor::from_values(batch.size(), k, std::move(rho_tile));

  const Tensor node_side = decoder.probabilities(tape, tape.gather_rows(features, batch));
  // Sum of the node's positive prototypes, differentiable through the
  // prototype vectors.
  const Tensor prototype_sum = tape.matmul(target_matrix, prototypes.vectors);
  const Tensor label_side = decoder.probabilities(tape, prototype_sum);

  const Tensor total =
      tape.add(focal_term(tape, node_side, target_matrix, rho_matrix, gamma),
               focal_term(tape, label_side, target_matrix, rho_matrix, gamma));
  return tape.affine(tape.sum(total), -1.0 / (2.0 * static_cast<double>(batch.size())), 0.0);
}

// ---------------------------------------------------------------------------
// k-means

namespace {

double distance(const double* a, const double* b, std::size_t dim) {
  double sq = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    const double diff = a[d] - b[d];
    sq += diff * diff;
  }
  return std::sqrt(sq);
}

}  // namespace

ClusterResult cluster_vectors(std::span<const double> vectors, std::size_t count,
                              std::size_t dim, std::size_t clusters, std::uint64_t seed,
                              std::size_t max_iterations) {
  if (count == 0 || dim == 0 || vectors.size() != count * dim) {
    throw std::invalid_argument("cluster_vectors: bad matrix shape");
  }
  if (clusters == 0 || clusters > count) {
    throw std::invalid_argument("cluster_vectors: cluster count out of range");
  }

  ClusterResult result;
  result.centroids.resize(clusters * dim);
  result.assignment.assign(count, 0);

  // Initial centroids: a random sample of distinct input vectors.
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  for (std::size_t c = 0; c < clusters; ++c) {
    std::copy_n(vectors.data() + order[c] * dim, dim, result.centroids.data() + c * dim);
  }

  std::vector<std::size_t> previous(count, count);  // sentinel: differs from any assignment
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    // Assignment step; ties go to the lower centroid index.
    for (std::size_t v = 0; v < count; ++v) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_c = 0;
      for (std::size_t c = 0; c < clusters; ++c) {
        const double d = distance(vectors.data() + v * dim, result.centroids.data() + c * dim, dim);
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      result.assignment[v] = best_c;
    }

    // Reseed each empty cluster at the vector farthest from its own centroid;
    // that vector's distance drops to zero, so the objective cannot rise.
    std::vector<std::size_t> sizes(clusters, 0);
    for (std::size_t v = 0; v < count; ++v) ++sizes[result.assignment[v]];
    for (std::size_t c = 0; c < clusters; ++c) {
      if (sizes[c] > 0) continue;
      double worst = -1.0;
      std::size_t worst_v = 0;
      for (std::size_t v = 0; v < count; ++v) {
        if (sizes[result.assignment[v]] <= 1) continue;  // keep other clusters nonempty
        const double d = distance(vectors.data() + v * dim,
                                  result.centroids.data() + result.assignment[v] * dim, dim);
        if (d > worst) {
          worst = d;
          worst_v = v;
        }
      }
      --sizes[result.assignment[worst_v]];
      result.assignment[worst_v] = c;
      sizes[c] = 1;
      std::copy_n(vectors.data() + worst_v * dim, dim, result.centroids.data() + c * dim);
    }

    const bool stable = result.assignment == previous;
    previous = result.assignment;

    // Update step: move a centroid to its cluster mean unless that would
    // increase the cluster's distance sum (the mean minimizes squared
    // distance, not distance, so the guard is occasionally needed).
    std::vector<double> mean(dim);
    for (std::size_t c = 0; c < clusters; ++c) {
      std::fill(mean.begin(), mean.end(), 0.0);
      std::size_t members = 0;
      for (std::size_t v = 0; v < count; ++v) {
        if (result.assignment[v] != c) continue;
        ++members;
        for (std::size_t d = 0; d < dim; ++d) mean[d] += vectors[v * dim + d];
      }
      for (std::size_t d = 0; d < dim; ++d) mean[d] /= static_cast<double>(members);
      double old_sum = 0.0, new_sum = 0.0;
      for (std::size_t v = 0; v < count; ++v) {
        if (result.assignment[v] != c) continue;
        old_sum += distance(vectors.data() + v * dim, result.centroids.data() + c * dim, dim);
        new_sum += distance(vectors.data() + v * dim, mean.data(), dim);
      }
      if (new_sum <= old_sum) {
        std::copy_n(mean.data(), dim, result.centroids.data() + c * dim);
      }
    }

    double objective = 0.0;
    for (std::size_t v = 0; v < count; ++v) {
      objective += distance(vectors.data() + v * dim,
                            result.centroids.data() + result.assignment[v] * dim, dim);
    }
    result.objective.push_back(objective);
    result.iterations = iter + 1;
    if (stable) break;
  }
  return result;
}

MacroResult macro_prototypes(const PrototypeSet& pretrained, std::size_t k_prime,
                             std::uint64_t seed) {
  const std::size_t k = pretrained.count();
  if (k_prime < 1 || k_prime >= k) {
    throw std::invalid_argument("macro_prototypes: need 1 <= k_prime < label count");
  }
  const auto values = pretrained.vectors.data();
  auto clustered = cluster_vectors(values, k, pretrained.dim(), k_prime, seed);

  MacroResult out;
  out.prototypes.kind = PrototypeSet::Kind::macro;
  out.prototypes.vectors =
      Tensor::from_values(k_prime, pretrained.dim(), std::move(clustered.centroids), true);
  out.prototypes.label_to_macro = std::move(clustered.assignment);
  out.objective = std::move(clustered.objective);
  return out;
}

LabelMatrix macro_labels(const LabelMatrix& labels, std::span<const std::size_t> label_to_macro,
                         std::size_t k_prime) {
  if (label_to_macro.size() != labels.k) {
    throw std::invalid_argument("macro_labels: assignment size mismatch");
  }
  LabelMatrix out;
  out.n = labels.n;
  out.k = k_prime;
  out.values.assign(labels.n * k_prime, 0);
  out.labeled = labels.labeled;
  for (std::size_t i = 0; i < labels.n; ++i) {
    for (std::size_t j = 0; j < labels.k; ++j) {
      if (labels.values[i * labels.k + j]) out.values[i * k_prime + label_to_macro[j]] = 1;
    }
  }
  return out;
}

}  // namespace corgcn
