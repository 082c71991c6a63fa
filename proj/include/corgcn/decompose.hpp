#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "corgcn/correlate.hpp"
#include "corgcn/graph.hpp"
#include "corgcn/tensor.hpp"

namespace corgcn {

// Node partition used for similarity blocks. Graph construction compares
// nodes within a batch only.
struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;

  static BatchPlan single(std::size_t n);
  static BatchPlan contiguous(std::size_t n, std::size_t batch_size);
  // One full batch up to 20k nodes, contiguous blocks beyond that.
  static BatchPlan default_plan(std::size_t n, std::size_t batch_size);
};

// Differentiable per-label projection: coefficient w[i][k] is the cosine of
// transformed feature i and prototype k (0 when either row is zero), and view
// k holds rows w[i][k] * feature_i.
struct ProjectedFeatures {
  Tensor coefficients;        // n-by-k
  std::vector<Tensor> views;  // k tensors, each n-by-dim
};

ProjectedFeatures project_features(Tape& tape, const Tensor& features,
                                   const PrototypeSet& prototypes);

// ---------------------------------------------------------------------------
// Detached structure path. Graph construction is a structural step: scores
// feed neighbor selection only and carry no gradients, so it runs on plain
// value matrices.

struct ValueMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  static ValueMatrix from_tensor(const Tensor& t);
  static ValueMatrix from_features(const FeatureMatrix& f);
};

struct ProjectedValues {
  ValueMatrix features;      // n-by-dim transformed features
  ValueMatrix coefficients;  // n-by-k cosines
};

ProjectedValues project_feature_values(const ValueMatrix& features,
                                       const ValueMatrix& prototypes);

// Per-view similarity blocks for one batch: each block is b-by-b cosine
// scores of the neighbor-mean-aggregated projected view restricted to the
// batch. Zero aggregated rows score 0 against everything.
std::vector<std::vector<double>> view_similarity(const ProjectedValues& projected,
                                                 const Graph& graph,
                                                 std::span<const std::size_t> batch);

// Aggregated single view used internally and by the shared-structure ablation.
std::vector<double> aggregate_view(const Graph& graph, const ValueMatrix& features,
                                   const ValueMatrix& coefficients, std::size_t view);
std::vector<double> similarity_block(std::span<const double> aggregated, std::size_t dim,
                                     std::span<const std::size_t> batch);

struct ViewTopk {
  // Per node, the selected out-neighbors before symmetrization; exactly
  // min(lambda, batch size - 1) entries for every node covered by the plan.
  std::vector<std::vector<std::size_t>> directed;
  Graph graph;  // union-symmetrized, self-loop-free
};

// Keeps the lambda highest-scoring candidates per row (self excluded, ties to
// the lower node index) and symmetrizes by union. blocks[i] holds the scores
// among plan.batches[i].
ViewTopk topk_adjacency(std::span<const std::vector<double>> blocks, const BatchPlan& plan,
                        std::size_t n, std::size_t lambda);

struct GraphView {
  Graph adjacency;
  SparseMatrix normalized;
};

// View 0 carries the original graph; views 1..k carry one learned graph per
// label. Message-passing features are recomputed on the tape each forward
// pass and are not stored here.
struct DecomposedGraphSet {
  std::vector<GraphView> views;

  std::size_t label_views() const { return views.empty() ? 0 : views.size() - 1; }
};

// Full construction: per-label projection of the transformed features,
// neighbor-mean aggregation, batched cosine scores, top-lambda selection.
DecomposedGraphSet build_cdg(const Graph& graph, const ValueMatrix& transformed,
                             const ValueMatrix& prototypes, std::size_t lambda,
                             const BatchPlan& plan);

// One structure learned from `source` (for decomposition driven by raw
// features) and shared by all label views.
DecomposedGraphSet build_cdg_shared_structure(const Graph& graph, const ValueMatrix& source,
                                              std::size_t label_views, std::size_t lambda,
                                              const BatchPlan& plan);

// Original topology in every view (structure decomposition disabled).
DecomposedGraphSet replicate_original(const Graph& graph, std::size_t label_views);

// Every view replaced by the edge-union of all views (unified message
// passing).
DecomposedGraphSet merge_views(const DecomposedGraphSet& cdg);

}  // namespace corgcn
