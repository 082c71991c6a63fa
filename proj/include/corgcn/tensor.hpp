#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "corgcn/rng.hpp"

namespace corgcn {

class Tape;

// Dense row-major matrix of 64-bit floats with an optional gradient buffer.
// Tensors are cheap shared handles; copying a Tensor aliases the same storage.
// Once a tensor has been recorded as an operand on a tape its values must not
// be mutated until backward() has consumed the tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor full(std::size_t rows, std::size_t cols, double value, bool requires_grad = false);
  static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // i.i.d. N(0, stddev^2) entries.
  static Tensor randn(std::size_t rows, std::size_t cols, double stddev, Rng& rng,
                      bool requires_grad = true);

  bool defined() const { return impl_ != nullptr; }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;
  bool requires_grad() const;
  bool is_scalar() const { return size() == 1; }

  double value() const;                 // scalar tensors only
  double at(std::size_t r, std::size_t c) const;

  // The handle has shallow-const semantics: a const Tensor still exposes the
  // shared mutable storage, like any reference-counted tensor handle.
  std::span<const double> data() const;
  std::span<double> raw() const;        // mutable; callers own the aliasing rules
  std::span<const double> grad() const; // empty when !requires_grad
  std::span<double> grad_raw() const;
  void zero_grad() const;
  void accumulate_grad(std::span<const double> g) const;

  Tensor detached() const;              // value copy, no grad, off-tape

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  struct Impl {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;
    std::vector<double> grad;  // sized iff requires_grad
    bool requires_grad = false;
    const Tape* tape = nullptr;     // stamp: which tape recorded this result
    std::uint64_t tape_epoch = 0;
  };
  std::shared_ptr<Impl> impl_;
  Impl& impl() const;
  void enable_grad();
};

// Reverse-mode tape. Operations record their vector-Jacobian products in
// execution order; backward() replays them in exact reverse order, which is a
// reverse topological order by construction. Gradient contributions are
// accumulated additively across fan-out. The tape API is single-threaded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Dropout and other train-only ops consult this flag.
  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }

  // While disabled, ops run forward-only and record nothing.
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  Tensor matmul(const Tensor& a, const Tensor& b);
  // a (m-by-k) times b-transposed (n-by-k) -> m-by-n.
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  // scale * x + shift, elementwise.
  Tensor affine(const Tensor& x, double scale, double shift);
  // x (n-by-c) plus a 1-by-c row broadcast over all rows.
  Tensor add_rowvec(const Tensor& x, const Tensor& row);
  // Row i of x scaled by coeffs[i]; coeffs is n-by-1.
  Tensor scale_rows(const Tensor& x, const Tensor& coeffs);
  // sum_b coeffs[b][i] * mats[b][i,:] for each row i.
  Tensor row_weighted_sum(std::span<const Tensor> mats, std::span<const Tensor> coeffs);
  Tensor row_softmax(const Tensor& x);
  Tensor row_log_softmax(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor relu(const Tensor& x);
  Tensor log(const Tensor& x);
  Tensor exp(const Tensor& x);
  Tensor pow(const Tensor& x, double exponent);
  Tensor clamp(const Tensor& x, double lo, double hi);
  Tensor concat_cols(std::span<const Tensor> parts);
  Tensor concat_cols(const Tensor& a, const Tensor& b);
  Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
  Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);
  // Rows scaled to unit L2 norm; all-zero rows stay zero (gradient zero there).
  Tensor l2_normalize_rows(const Tensor& x);
  // Inverted-scaling dropout; identity outside training mode.
  Tensor dropout(const Tensor& x, double rate, Rng& rng);

  // Extension point for ops defined outside this module (sparse message
  // passing lives in the graph module). `vjp` receives the recorded output and
  // must accumulate into the inputs' grads.
  Tensor make_result(std::size_t rows, std::size_t cols, std::vector<double> values,
                     std::span<const Tensor> inputs,
                     std::function<void(const Tensor& out)> vjp);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, populating the
  // grad of every requires_grad tensor reachable from `loss`. Clears the tape.
  void backward(const Tensor& loss);

  std::size_t recorded_ops() const { return nodes_.size(); }
  // Drop all recorded nodes without running backward.
  void reset();

 private:
  struct Node {
    std::function<void()> apply;
  };
  bool should_record(std::span<const Tensor> inputs) const;
  Tensor finalize(Tensor out, std::span<const Tensor> inputs, std::function<void()> apply);

  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
  bool training_ = false;
  bool grad_enabled_ = true;
};

// RAII guard: disables gradient recording for the enclosing scope.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

}  // namespace corgcn
