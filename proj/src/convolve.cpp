#include "corgcn/convolve.hpp"

#include <cmath>
#include <stdexcept>

namespace corgcn {

std::vector<Tensor> intra_label_layer(Tape& tape, std::span<const Tensor> stack,
                                      const DecomposedGraphSet& cdg,
                                      std::span<const Tensor> weights) {
  if (stack.size() != cdg.views.size()) {
    throw std::invalid_argument("intra_label_layer: stack/view count mismatch");
  }
  if (weights.size() != 1 && weights.size() != stack.size()) {
    throw std::invalid_argument("intra_label_layer: need one shared or one per-view weight");
  }
  std::vector<Tensor> out;
  out.reserve(stack.size());
  for (std::size_t v = 0; v < stack.size(); ++v) {
    const Tensor& w = weights.size() == 1 ? weights[0] : weights[v];
    out.push_back(tape.relu(tape.matmul(spmm(tape, cdg.views[v].normalized, stack[v]), w)));
  }
  return out;
}

std::vector<Tensor> inter_label_propagation(Tape& tape, std::span<const Tensor> stack,
                                            const Tensor& prototypes, const Tensor& query_weight,
                                            const Tensor& key_weight, const Tensor& value_weight) {
  if (stack.size() < 2) {
    throw std::invalid_argument("inter_label_propagation: no label views in the stack");
  }
  const std::size_t k = stack.size() - 1;
  if (prototypes.rows() != k) {
    throw std::invalid_argument("inter_label_propagation: prototype/view count mismatch");
  }
  const double inv_sqrt_dim = 1.0 / std::sqrt(static_cast<double>(query_weight.cols()));

  const Tensor queries = tape.matmul(prototypes, query_weight);  // k-by-dim
  // logits[b] column a holds (view_b W_key)[i] . (prototype_a W_query)
  std::vector<Tensor> logits;
  logits.reserve(k);
  for (std::size_t b = 0; b < k; ++b) {
    logits.push_back(tape.matmul_nt(tape.matmul(stack[b + 1], key_weight), queries));
  }

  std::vector<Tensor> out(stack.size());
  out[0] = stack[0];
  std::vector<Tensor> columns(k);
  std::vector<Tensor> attn_columns(k);
  std::vector<Tensor> sources(stack.begin() + 1, stack.end());
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) columns[b] = tape.slice_cols(logits[b], a, a + 1);
    const Tensor attention =
        tape.row_softmax(tape.affine(tape.concat_cols(columns), inv_sqrt_dim, 0.0));
    for (std::size_t b = 0; b < k; ++b) attn_columns[b] = tape.slice_cols(attention, b, b + 1);
    const Tensor combined = tape.row_weighted_sum(sources, attn_columns);
    out[a + 1] = tape.matmul(combined, value_weight);
  }
  return out;
}

Tensor aggregate_and_predict(Tape& tape, std::span<const Tensor> stack,
                             const Tensor& prototypes, const Tensor& classifier_weight,
                             const Tensor& classifier_bias) {
  if (stack.size() < 2) {
    throw std::invalid_argument("aggregate_and_predict: no label views in the stack");
  }
  const std::size_t k = stack.size() - 1;
  if (prototypes.rows() != k) {
    throw std::invalid_argument("aggregate_and_predict: prototype/view count mismatch");
  }
  const Tensor unit_prototypes = tape.l2_normalize_rows(prototypes);
  std::vector<Tensor> similarities(k);
  std::vector<Tensor> sources(stack.begin() + 1, stack.end());
  for (std::size_t v = 0; v < k; ++v) {
    const std::size_t row[] = {v};
    similarities[v] = tape.matmul_nt(tape.l2_normalize_rows(stack[v + 1]),
                                     tape.gather_rows(unit_prototypes, row));
  }
  const Tensor weighted = tape.row_weighted_sum(sources, similarities);
  const Tensor representation = tape.concat_cols(stack[0], weighted);
  return tape.sigmoid(
      tape.add_rowvec(tape.matmul(representation, classifier_weight), classifier_bias));
}

}  // namespace corgcn
