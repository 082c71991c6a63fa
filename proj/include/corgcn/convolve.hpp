#pragma once

#include <span>
#include <vector>

#include "corgcn/correlate.hpp"
#include "corgcn/decompose.hpp"
#include "corgcn/tensor.hpp"

namespace corgcn {

// One graph-convolution layer applied per view: relu(A_hat_v * stack_v * W).
// `weights` holds either a single matrix shared by every view or one matrix
// per view.
std::vector<Tensor> intra_label_layer(Tape& tape, std::span<const Tensor> stack,
                                      const DecomposedGraphSet& cdg,
                                      std::span<const Tensor> weights);

// Per-node attention across the label views (views 1..k of the stack; view 0
// passes through). For node i, attention logits between prototype rows and
// view representations are scaled by 1/sqrt(dim) and softmax-normalized over
// source views; each target view becomes the attention-weighted combination
// of the source views times `value_weight`.
std::vector<Tensor> inter_label_propagation(Tape& tape, std::span<const Tensor> stack,
                                            const Tensor& prototypes, const Tensor& query_weight,
                                            const Tensor& key_weight, const Tensor& value_weight);

// Final representation [view0 || sum_k cos(view_k, prototype_k) * view_k]
// followed by the sigmoid classifier. Requires at least one label view.
Tensor aggregate_and_predict(Tape& tape, std::span<const Tensor> stack,
                             const Tensor& prototypes, const Tensor& classifier_weight,
                             const Tensor& classifier_bias);

}  // namespace corgcn
