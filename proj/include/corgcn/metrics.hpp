#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "corgcn/graph.hpp"

namespace corgcn {

// All values are fractions in [0, 1]; presentation layers scale to percent.
struct MetricsReport {
  double ranking_loss = 0.0;
  double hamming_loss = 0.0;
  double macro_auc = 0.0;
  double micro_auc = 0.0;
  double macro_ap = 0.0;
  double micro_ap = 0.0;
  double lrap = 0.0;
};

// Computes the seven multi-label metrics over an n-by-k score/target block.
//
// Conventions (pinned here because the literature varies):
//  - Ranking loss: per node, the fraction of (positive, negative) label pairs
//    ordered incorrectly; ties count 1/2. Nodes without both a positive and a
//    negative are skipped.
//  - Hamming loss: disagreement after thresholding scores at 0.5 (> 0.5 is
//    positive), over every node and label.
//  - Macro-AUC: unweighted mean of per-class AUC with midrank tie handling;
//    classes lacking a positive or a negative are skipped.
//  - Micro-AUC: AUC over all flattened (node, label) cells.
//  - AP (macro per class / micro flattened): step-wise sum (R_i - R_{i-1}) P_i
//    over descending distinct score thresholds; classes without positives are
//    skipped in the macro mean.
//  - LRAP: per node, mean over positives p of
//    (#positives ranked at or above p) / rank(p) with optimistic tie ranks;
//    nodes without both a positive and a negative are skipped.
MetricsReport compute_metrics(std::span<const double> scores,
                              std::span<const std::uint8_t> targets, std::size_t rows,
                              std::size_t k);

// Per-class AUC values; NaN marks classes without both a positive and a
// negative example.
std::vector<double> per_class_auc(std::span<const double> scores,
                                  std::span<const std::uint8_t> targets, std::size_t rows,
                                  std::size_t k);

struct AmbiguityRow {
  double bucket = 0.0;        // feature table: cosine-bin midpoint; topology: shared count
  double mean_shared = 0.0;   // mean shared-label count in the bucket
  std::size_t count = 0;      // pairs (feature table) or edges (topology table)
};

struct AmbiguityTables {
  std::vector<AmbiguityRow> feature;   // 10 equal-width cosine bins over [-1, 1]
  std::vector<AmbiguityRow> topology;  // one row per observed shared-label count
};

// Fig-style ambiguity statistics: (a) labeled node pairs bucketed by feature
// cosine similarity with the mean shared-label count per bucket, sampling up
// to `max_pairs` pairs; (b) the distribution of shared-label counts over edges
// whose endpoints are both labeled.
AmbiguityTables ambiguity_stats(const Graph& graph, const FeatureMatrix& features,
                                const LabelMatrix& labels, std::uint64_t seed = 0,
                                std::size_t max_pairs = 100000);

}  // namespace corgcn
