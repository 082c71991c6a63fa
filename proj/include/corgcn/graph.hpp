#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "corgcn/tensor.hpp"

namespace corgcn {

// Undirected graph in compressed-row form. Stored deduplicated and
// symmetric, with no self-loops; column indices ascend within each row.
struct Graph {
  std::size_t n = 0;
  std::vector<std::size_t> row_offsets;  // size n+1
  std::vector<std::size_t> columns;

  // Number of undirected edges (half the stored entry count).
  std::size_t edge_count() const { return columns.size() / 2; }
  std::size_t degree(std::size_t v) const { return row_offsets[v + 1] - row_offsets[v]; }
  std::span<const std::size_t> neighbors(std::size_t v) const {
    return {columns.data() + row_offsets[v], columns.data() + row_offsets[v + 1]};
  }
  bool has_edge(std::size_t u, std::size_t v) const;

  // Symmetrizes, deduplicates, and drops self-loops.
  static Graph from_edges(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges);
};

// Edge-set union of several graphs over the same node set.
Graph graph_union(std::span<const Graph> graphs);

// CSR matrix with values; structurally symmetric where produced by
// normalize_adjacency (self-loop entries included).
struct SparseMatrix {
  std::size_t n = 0;
  std::vector<std::size_t> row_offsets;
  std::vector<std::size_t> columns;
  std::vector<double> values;
};

struct FeatureMatrix {
  std::size_t n = 0;
  std::size_t f = 0;
  std::vector<double> values;  // row-major n-by-f

  std::span<const double> row(std::size_t i) const { return {values.data() + i * f, f}; }
};

struct LabelMatrix {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::uint8_t> values;   // row-major n-by-k, each 0/1
  std::vector<std::uint8_t> labeled;  // n flags; an all-zero label row is unlabeled

  bool is_positive(std::size_t node, std::size_t label) const {
    return values[node * k + label] != 0;
  }
  std::vector<std::size_t> labeled_indices() const;
  std::size_t positive_count(std::size_t node) const;
};

struct Split {
  std::vector<std::size_t> train, val, test;
};

struct Dataset {
  Graph graph;
  FeatureMatrix features;
  LabelMatrix labels;
  std::optional<Split> split;  // from split.json when present
};

// Reads features.csv / edges.csv / labels.csv (and split.json if present)
// from `dir`. Throws std::runtime_error on missing files or malformed rows.
Dataset load_dataset(const std::filesystem::path& dir);

// Writes the three CSV files (no split.json) into `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);

// Edge list in the edges.csv format, one direction per undirected edge.
void write_edges_csv(const std::filesystem::path& path, const Graph& graph);

// Deterministic 6:2:2 split over the labeled nodes; floor sizes for val and
// test, remainder to train. Throws when any part would be empty.
Split make_split(const LabelMatrix& labels, std::uint64_t seed);

// D^{-1/2} (A + I) D^{-1/2} with degrees taken on A + I.
SparseMatrix normalize_adjacency(const Graph& graph);

// Row i of the result is the mean of values over {neighbors(i)} + {i},
// i.e. divisor degree(i) + 1.
std::vector<double> neighbor_mean(const Graph& graph, std::span<const double> values,
                                  std::size_t dim);

// Sparse-times-dense message passing, recorded on the tape. The matrix is a
// structural constant; gradients flow through the dense operand only. The
// matrix must outlive any backward pass that consumes the result.
Tensor spmm(Tape& tape, const SparseMatrix& matrix, const Tensor& dense);

}  // namespace corgcn
