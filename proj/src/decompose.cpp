#include "corgcn/decompose.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "corgcn/kernels.hpp"

namespace corgcn {

BatchPlan BatchPlan::single(std::size_t n) {
  BatchPlan plan;
  plan.batches.emplace_back(n);
  std::iota(plan.batches.back().begin(), plan.batches.back().end(), 0);
  return plan;
}

BatchPlan BatchPlan::contiguous(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch plan: batch size must be positive");
  BatchPlan plan;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    std::vector<std::size_t> batch(end - start);
    std::iota(batch.begin(), batch.end(), start);
    plan.batches.push_back(std::move(batch));
  }
  return plan;
}

BatchPlan BatchPlan::default_plan(std::size_t n, std::size_t batch_size) {
  return n <= 20000 ? single(n) : contiguous(n, batch_size);
}

ProjectedFeatures project_features(Tape& tape, const Tensor& features,
                                   const PrototypeSet& prototypes) {
  if (features.cols() != prototypes.dim()) {
    throw std::invalid_argument("project_features: dimension mismatch");
  }
  ProjectedFeatures out;
  out.coefficients = tape.matmul_nt(tape.l2_normalize_rows(features),
                                    tape.l2_normalize_rows(prototypes.vectors));
  out.views.reserve(prototypes.count());
  for (std::size_t k = 0; k < prototypes.count(); ++k) {
    out.views.push_back(
        tape.scale_rows(features, tape.slice_cols(out.coefficients, k, k + 1)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detached structure path

ValueMatrix ValueMatrix::from_tensor(const Tensor& t) {
  ValueMatrix m;
  m.rows = t.rows();
  m.cols = t.cols();
  m.values.assign(t.data().begin(), t.data().end());
  return m;
}

ValueMatrix ValueMatrix::from_features(const FeatureMatrix& f) {
  ValueMatrix m;
  m.rows = f.n;
  m.cols = f.f;
  m.values = f.values;
  return m;
}

namespace {

// Rows scaled to unit norm; zero rows stay zero.
std::vector<double> normalized_rows(std::span<const double> values, std::size_t rows,
                                    std::size_t cols) {
  std::vector<double> out(values.begin(), values.end());
  for (std::size_t i = 0; i < rows; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sq += out[i * cols + j] * out[i * cols + j];
    if (sq == 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] *= inv;
  }
  return out;
}

}  // namespace

ProjectedValues project_feature_values(const ValueMatrix& features,
                                       const ValueMatrix& prototypes) {
  if (features.cols != prototypes.cols) {
    throw std::invalid_argument("project_feature_values: dimension mismatch");
  }
  ProjectedValues out;
  out.features = features;
  out.coefficients.rows = features.rows;
  out.coefficients.cols = prototypes.rows;
  out.coefficients.values.resize(features.rows * prototypes.rows);
  const auto nf = normalized_rows(features.values, features.rows, features.cols);
  const auto np = normalized_rows(prototypes.values, prototypes.rows, prototypes.cols);
  kernels::matmul_nt(nf.data(), np.data(), out.coefficients.values.data(), features.rows,
                     features.cols, prototypes.rows);
  return out;
}

std::vector<double> aggregate_view(const Graph& graph, const ValueMatrix& features,
                                   const ValueMatrix& coefficients, std::size_t view) {
  const std::size_t n = features.rows, d = features.cols;
  std::vector<double> projected(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = coefficients.values[i * coefficients.cols + view];
    for (std::size_t j = 0; j < d; ++j) projected[i * d + j] = w * features.values[i * d + j];
  }
  return neighbor_mean(graph, projected, d);
}

std::vector<double> similarity_block(std::span<const double> aggregated, std::size_t dim,
                                     std::span<const std::size_t> batch) {
  const std::size_t b = batch.size();
  std::vector<double> rows(b * dim);
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(aggregated.data() + batch[i] * dim, dim, rows.data() + i * dim);
  }
  const auto normalized = normalized_rows(rows, b, dim);
  std::vector<double> block(b * b);
  kernels::matmul_nt(normalized.data(), normalized.data(), block.data(), b, dim, b);
  return block;
}

std::vector<std::vector<double>> view_similarity(const ProjectedValues& projected,
                                                 const Graph& graph,
                                                 std::span<const std::size_t> batch) {
  std::vector<std::vector<double>> blocks;
  blocks.reserve(projected.coefficients.cols);
  for (std::size_t k = 0; k < projected.coefficients.cols; ++k) {
    const auto aggregated = aggregate_view(graph, projected.features, projected.coefficients, k);
    blocks.push_back(similarity_block(aggregated, projected.features.cols, batch));
  }
  return blocks;
}

namespace {

// Top-lambda rows of one score block appended into the per-node selection.
void select_block(std::span<const double> block, std::span<const std::size_t> batch,
                  std::size_t lambda, std::vector<std::vector<std::size_t>>& selection) {
  const std::size_t b = batch.size();
  if (b <= 1) return;
  const std::size_t effective = std::min(lambda, b - 1);
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < b; ++i) {
    candidates.clear();
    for (std::size_t j = 0; j < b; ++j)
      if (j != i) candidates.push_back(j);
    const double* row = block.data() + i * b;
    std::nth_element(candidates.begin(), candidates.begin() + (effective - 1), candidates.end(),
                     [&](std::size_t a, std::size_t c) {
                       if (row[a] != row[c]) return row[a] > row[c];
                       return batch[a] < batch[c];  // ties: lower node index wins
                     });
    auto& chosen = selection[batch[i]];
    chosen.clear();
    for (std::size_t t = 0; t < effective; ++t) chosen.push_back(batch[candidates[t]]);
    std::sort(chosen.begin(), chosen.end());
  }
}

}  // namespace

ViewTopk topk_adjacency(std::span<const std::vector<double>> blocks, const BatchPlan& plan,
                        std::size_t n, std::size_t lambda) {
  if (lambda == 0) throw std::invalid_argument("topk_adjacency: lambda must be >= 1");
  if (blocks.size() != plan.batches.size()) {
    throw std::invalid_argument("topk_adjacency: one score block per batch required");
  }
  ViewTopk result;
  result.directed.assign(n, {});
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const auto& batch = plan.batches[bi];
    if (blocks[bi].size() != batch.size() * batch.size()) {
      throw std::invalid_argument("topk_adjacency: block shape mismatch");
    }
    select_block(blocks[bi], batch, lambda, result.directed);
  }
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v : result.directed[u]) edges.emplace_back(u, v);
  result.graph = Graph::from_edges(n, edges);
  return result;
}

// ---------------------------------------------------------------------------
// Assembly

namespace {

GraphView make_view(Graph adjacency) {
  GraphView view;
  view.normalized = normalize_adjacency(adjacency);
  view.adjacency = std::move(adjacency);
  return view;
}

}  // namespace

DecomposedGraphSet build_cdg(const Graph& graph, const ValueMatrix& transformed,
                             const ValueMatrix& prototypes, std::size_t lambda,
                             const BatchPlan& plan) {
  const auto projected = project_feature_values(transformed, prototypes);
  DecomposedGraphSet cdg;
  cdg.views.reserve(prototypes.rows + 1);
  cdg.views.push_back(make_view(graph));
  const std::size_t d = transformed.cols;
  for (std::size_t k = 0; k < prototypes.rows; ++k) {
    const auto aggregated = aggregate_view(graph, projected.features, projected.coefficients, k);
    std::vector<std::vector<double>> blocks;
    blocks.reserve(plan.batches.size());
    for (const auto& batch : plan.batches) {
      blocks.push_back(similarity_block(aggregated, d, batch));
    }
    cdg.views.push_back(make_view(topk_adjacency(blocks, plan, graph.n, lambda).graph));
  }
  return cdg;
}

DecomposedGraphSet build_cdg_shared_structure(const Graph& graph, const ValueMatrix& source,
                                              std::size_t label_views, std::size_t lambda,
                                              const BatchPlan& plan) {
  const auto aggregated = neighbor_mean(graph, source.values, source.cols);
  std::vector<std::vector<double>> blocks;
  blocks.reserve(plan.batches.size());
  for (const auto& batch : plan.batches) {
    blocks.push_back(similarity_block(aggregated, source.cols, batch));
  }
  const GraphView learned = make_view(topk_adjacency(blocks, plan, graph.n, lambda).graph);
  DecomposedGraphSet cdg;
  cdg.views.reserve(label_views + 1);
  cdg.views.push_back(make_view(graph));
  for (std::size_t k = 0; k < label_views; ++k) cdg.views.push_back(learned);
  return cdg;
}

DecomposedGraphSet replicate_original(const Graph& graph, std::size_t label_views) {
  DecomposedGraphSet cdg;
  const GraphView original = make_view(graph);
  cdg.views.assign(label_views + 1, original);
  return cdg;
}

DecomposedGraphSet merge_views(const DecomposedGraphSet& cdg) {
  std::vector<Graph> graphs;
  graphs.reserve(cdg.views.size());
  for (const auto& view : cdg.views) graphs.push_back(view.adjacency);
  const GraphView merged = make_view(graph_union(graphs));
  DecomposedGraphSet out;
  out.views.assign(cdg.views.size(), merged);
  return out;
}

}  // namespace corgcn
