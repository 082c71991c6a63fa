#include "corgcn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace corgcn {

namespace {

// AUC via the rank-sum statistic with midranks, which matches pairwise
// counting with half credit for ties.
double binary_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) {
        pos_rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::numeric_limits<double>::quiet_NaN();
  return (pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Step-wise average precision over descending distinct thresholds.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) n_pos += l;
  if (n_pos == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  double recall_prev = 0.0;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) ++tp; else ++fp;
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    ap += (recall - recall_prev) * precision;
    recall_prev = recall;
    i = j;
  }
  return ap;
}

}  // namespace

MetricsReport compute_metrics(std::span<const double> scores,
                              std::span<const std::uint8_t> targets, std::size_t rows,
                              std::size_t k) {
  if (rows == 0 || k == 0) throw std::invalid_argument("compute_metrics: empty test set");
  if (scores.size() != rows * k || targets.size() != rows * k) {
    throw std::invalid_argument("compute_metrics: shape mismatch");
  }
  for (double s : scores) {
    if (std::isnan(s)) throw std::invalid_argument("compute_metrics: NaN score");
  }

  MetricsReport r;

  // Hamming loss over every cell.
  std::size_t disagreements = 0;
  for (std::size_t i = 0; i < rows * k; ++i) {
    const bool pred = scores[i] > 0.5;
    if (pred != (targets[i] != 0)) ++disagreements;
  }
  r.hamming_loss = static_cast<double>(disagreements) / static_cast<double>(rows * k);

  // Ranking loss and LRAP, per eligible row.
  double ranking_sum = 0.0, lrap_sum = 0.0;
  std::size_t eligible = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    const double* s = scores.data() + i * k;
    const std::uint8_t* y = targets.data() + i * k;
    std::size_t n_pos = 0;
    for (std::size_t j = 0; j < k; ++j) n_pos += y[j];
    if (n_pos == 0 || n_pos == k) continue;
    ++eligible;

    double bad = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      if (!y[p]) continue;
      for (std::size_t q = 0; q < k; ++q) {
        if (y[q]) continue;
        if (s[p] < s[q]) bad += 1.0;
        else if (s[p] == s[q]) bad += 0.5;
      }
    }
    ranking_sum += bad / (static_cast<double>(n_pos) * static_cast<double>(k - n_pos));

    double lrap_node = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      if (!y[p]) continue;
      std::size_t rank = 1, pos_at_or_above = 1;
      for (std::size_t q = 0; q < k; ++q) {
        if (s[q] > s[p]) {
          ++rank;
          if (y[q]) ++pos_at_or_above;
        }
      }
      lrap_node += static_cast<double>(pos_at_or_above) / static_cast<double>(rank);
    }
    lrap_sum += lrap_node / static_cast<double>(n_pos);
  }
  r.ranking_loss = eligible ? ranking_sum / static_cast<double>(eligible) : 0.0;
  r.lrap = eligible ? lrap_sum / static_cast<double>(eligible) : 0.0;

  // Macro metrics per class.
  std::vector<double> col_scores(rows);
  std::vector<std::uint8_t> col_targets(rows);
  double auc_sum = 0.0, ap_sum = 0.0;
  std::size_t auc_classes = 0, ap_classes = 0;
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < rows; ++i) {
      col_scores[i] = scores[i * k + j];
      col_targets[i] = targets[i * k + j];
    }
    const double auc = binary_auc(col_scores, col_targets);
    if (!std::isnan(auc)) {
      auc_sum += auc;
      ++auc_classes;
    }
    const double ap = average_precision(col_scores, col_targets);
    if (!std::isnan(ap)) {
      ap_sum += ap;
      ++ap_classes;
    }
  }
  r.macro_auc = auc_classes ? auc_sum / static_cast<double>(auc_classes) : 0.0;
  r.macro_ap = ap_classes ? ap_sum / static_cast<double>(ap_classes) : 0.0;

  // Micro metrics over the flattened block.
  const double micro_auc = binary_auc(scores, targets);
  const double micro_ap = average_precision(scores, targets);
  r.micro_auc = std::isnan(micro_auc) ? 0.0 : micro_auc;
  r.micro_ap = std::isnan(micro_ap) ? 0.0 : micro_ap;
  return r;
}

std::vector<double> per_class_auc(std::span<const double> scores,
                                  std::span<const std::uint8_t> targets, std::size_t rows,
                                  std::size_t k) {
  if (scores.size() != rows * k || targets.size() != rows * k) {
    throw std::invalid_argument("per_class_auc: shape mismatch");
  }
  std::vector<double> out(k);
  std::vector<double> col_scores(rows);
  std::vector<std::uint8_t> col_targets(rows);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < rows; ++i) {
      col_scores[i] = scores[i * k + j];
      col_targets[i] = targets[i * k + j];
    }
    out[j] = binary_auc(col_scores, col_targets);
  }
  return out;
}

AmbiguityTables ambiguity_stats(const Graph& graph, const FeatureMatrix& features,
                                const LabelMatrix& labels, std::uint64_t seed,
                                std::size_t max_pairs) {
  const auto labeled = labels.labeled_indices();
  if (labeled.empty()) throw std::invalid_argument("ambiguity_stats: no labeled nodes");

  const auto shared_count = [&](std::size_t u, std::size_t v) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < labels.k; ++j)
      c += labels.values[u * labels.k + j] & labels.values[v * labels.k + j];
    return c;
  };
  const auto feature_cosine = [&](std::size_t u, std::size_t v) {
    double dot = 0.0, nu = 0.0, nv = 0.0;
    const auto ru = features.row(u), rv = features.row(v);
    for (std::size_t d = 0; d < features.f; ++d) {
      dot += ru[d] * rv[d];
      nu += ru[d] * ru[d];
      nv += rv[d] * rv[d];
    }
    if (nu == 0.0 || nv == 0.0) return 0.0;
    return dot / (std::sqrt(nu) * std::sqrt(nv));
  };

  constexpr std::size_t kBins = 10;
  std::vector<double> shared_sum(kBins, 0.0);
  std::vector<std::size_t> bin_count(kBins, 0);
  const auto add_pair = [&](std::size_t u, std::size_t v) {
    const double cos = feature_cosine(u, v);
    auto bin = static_cast<std::size_t>((cos + 1.0) / 0.2);
    bin = std::min(bin, kBins - 1);
    shared_sum[bin] += static_cast<double>(shared_count(u, v));
    ++bin_count[bin];
  };

  const std::size_t total_pairs = labeled.size() * (labeled.size() - 1) / 2;
  if (total_pairs <= max_pairs) {
    for (std::size_t a = 0; a < labeled.size(); ++a)
      for (std::size_t b = a + 1; b < labeled.size(); ++b) add_pair(labeled[a], labeled[b]);
  } else {
    Rng rng(seed);
    for (std::size_t t = 0; t < max_pairs; ++t) {
      const std::size_t a = static_cast<std::size_t>(rng.uniform_int(labeled.size()));
      std::size_t b = static_cast<std::size_t>(rng.uniform_int(labeled.size() - 1));
      if (b >= a) ++b;
      add_pair(labeled[a], labeled[b]);
    }
  }

  AmbiguityTables tables;
  for (std::size_t bin = 0; bin < kBins; ++bin) {
    AmbiguityRow row;
    row.bucket = -1.0 + 0.2 * (static_cast<double>(bin) + 0.5);  // bin midpoint
    row.count = bin_count[bin];
    row.mean_shared = bin_count[bin] ? shared_sum[bin] / static_cast<double>(bin_count[bin]) : 0.0;
    tables.feature.push_back(row);
  }

  std::map<std::size_t, std::size_t> histogram;
  for (std::size_t u = 0; u < graph.n; ++u) {
    if (!labels.labeled[u]) continue;
    for (std::size_t v : graph.neighbors(u)) {
      if (v <= u || !labels.labeled[v]) continue;
      ++histogram[shared_count(u, v)];
    }
  }
  for (const auto& [shared, count] : histogram) {
    AmbiguityRow row;
    row.bucket = static_cast<double>(shared);
    row.mean_shared = static_cast<double>(shared);
    row.count = count;
    tables.topology.push_back(row);
  }
  return tables;
}

}  // namespace corgcn
