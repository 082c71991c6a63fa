#include "corgcn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "corgcn/kernels.hpp"

namespace corgcn {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument("tensor op " + op + ": " + what);
}

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << t.rows() << "x" << t.cols();
  return os.str();
}

void check_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("tensor op ") + op +
                               " produced a non-finite value");
    }
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return *impl_;
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  return from_values(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, double value, bool requires_grad) {
  return from_values(rows, cols, std::vector<double>(rows * cols, value), requires_grad);
}

Tensor Tensor::from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                           bool requires_grad) {
  if (rows * cols != values.size()) {
    throw std::invalid_argument("tensor: shape does not match value count");
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->rows = rows;
  t.impl_->cols = cols;
  t.impl_->data = std::move(values);
  if (requires_grad) t.enable_grad();
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values(1, 1, {value}, requires_grad);
}

Tensor Tensor::randn(std::size_t rows, std::size_t cols, double stddev, Rng& rng,
                     bool requires_grad) {
  std::vector<double> values(rows * cols);
  for (auto& v : values) v = stddev * rng.normal();
  return from_values(rows, cols, std::move(values), requires_grad);
}

std::size_t Tensor::rows() const { return impl().rows; }
std::size_t Tensor::cols() const { return impl().cols; }
std::size_t Tensor::size() const { return impl().data.size(); }
bool Tensor::requires_grad() const { return impl().requires_grad; }

double Tensor::value() const {
  if (size() != 1) throw std::logic_error("value() called on non-scalar tensor");
  return impl().data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  auto& im = impl();
  if (r >= im.rows || c >= im.cols) throw std::out_of_range("tensor index out of range");
  return im.data[r * im.cols + c];
}

std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::raw() const { return impl().data; }

std::span<const double> Tensor::grad() const { return impl().grad; }
std::span<double> Tensor::grad_raw() const {
  if (!impl().requires_grad) throw std::logic_error("grad access on non-grad tensor");
  return impl().grad;
}

void Tensor::zero_grad() const {
  if (impl().requires_grad) std::fill(impl().grad.begin(), impl().grad.end(), 0.0);
}

void Tensor::accumulate_grad(std::span<const double> g) const {
  auto& im = impl();
  if (!im.requires_grad) return;
  if (g.size() != im.grad.size()) throw std::invalid_argument("gradient size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) im.grad[i] += g[i];
}

Tensor Tensor::detached() const {
  auto& im = impl();
  return from_values(im.rows, im.cols, im.data, false);
}

void Tensor::enable_grad() {
  auto& im = impl();
  im.requires_grad = true;
  im.grad.assign(im.data.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Tape

bool Tape::should_record(std::span<const Tensor> inputs) const {
  if (!grad_enabled_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

Tensor Tape::finalize(Tensor out, std::span<const Tensor> inputs, std::function<void()> apply) {
  if (!should_record(inputs)) return out;
  out.enable_grad();
  out.impl_->tape = this;
  out.impl_->tape_epoch = epoch_;
  nodes_.push_back({std::move(apply)});
  return out;
}

Tensor Tape::make_result(std::size_t rows, std::size_t cols, std::vector<double> values,
                         std::span<const Tensor> inputs,
                         std::function<void(const Tensor& out)> vjp) {
  check_finite("custom", values);
  Tensor out = Tensor::from_values(rows, cols, std::move(values));
  return finalize(out, inputs, [out, vjp = std::move(vjp)]() { vjp(out); });
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (!loss.is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
  auto* im = loss.impl_.get();
  if (im->tape != this || im->tape_epoch != epoch_) {
    throw std::runtime_error(
        "backward: loss is not on the active tape (missing forward pass?)");
  }
  loss.impl_->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->apply();
  reset();
}

void Tape::reset() {
  nodes_.clear();
  ++epoch_;
}

// ---------------------------------------------------------------------------
// Ops

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    fail("matmul", "inner dimensions disagree: " + shape_str(a) + " * " + shape_str(b));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> values(m * n);
  kernels::matmul(a.data().data(), b.data().data(), values.data(), m, k, n);
  check_finite("matmul", values);
  Tensor out = Tensor::from_values(m, n, std::move(values));
  const Tensor inputs[] = {a, b};
  return finalize(out, inputs, [a, b, out, m, k, n]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      // dA = g * B^T
      kernels::matmul_nt(g.data(), b.data().data(), a.grad_raw().data(), m, n, k, true);
    }
    if (b.requires_grad()) {
      // dB = A^T * g
      kernels::matmul_tn(a.data().data(), g.data(), b.grad_raw().data(), m, k, n, true);
    }
  });
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    fail("matmul_nt", "inner dimensions disagree: " + shape_str(a) + " * " + shape_str(b) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> values(m * n);
  kernels::matmul_nt(a.data().data(), b.data().data(), values.data(), m, k, n);
  check_finite("matmul_nt", values);
  Tensor out = Tensor::from_values(m, n, std::move(values));
  const Tensor inputs[] = {a, b};
  return finalize(out, inputs, [a, b, out, m, k, n]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      // dA = g * B   (g is m-by-n, B is n-by-k)
      kernels::matmul(g.data(), b.data().data(), a.grad_raw().data(), m, n, k, true);
    }
    if (b.requires_grad()) {
      // dB = g^T * A (n-by-m times m-by-k)
      kernels::matmul_tn(g.data(), a.data().data(), b.grad_raw().data(), m, n, k, true);
    }
  });
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> values(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = av[i] + bv[i];
  check_finite("add", values);
  Tensor out = Tensor::from_values(a.rows(), a.cols(), std::move(values));
  const Tensor inputs[] = {a, b};
  return finalize(out, inputs, [a, b, out]() mutable {
    a.accumulate_grad(out.grad());
    b.accumulate_grad(out.grad());
  });
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> values(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = av[i] - bv[i];
  check_finite("sub", values);
  Tensor out = Tensor::from_values(a.rows(), a.cols(), std::move(values));
  const Tensor inputs[] = {a, b};
  return finalize(out, inputs, [a, b, out]() mutable {
    a.accumulate_grad(out.grad());
    if (b.requires_grad()) {
      auto g = out.grad();
      auto gb = b.grad_raw();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> values(a.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = av[i] * bv[i];
  check_finite("mul", values);
  Tensor out = Tensor::from_values(a.rows(), a.cols(), std::move(values));
  const Tensor inputs[] = {a, b};
  return finalize(out, inputs, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad_raw();
      auto bv = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_raw();
      auto av = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Tensor Tape::affine(const Tensor& x, double scale, double shift) {
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = scale * xv[i] + shift;
  check_finite("affine", values);
  Tensor out = Tensor::from_values(x.rows(), x.cols(), std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, scale]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
  });
}

Tensor Tape::add_rowvec(const Tensor& x, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    fail("add_rowvec", "expected 1x" + std::to_string(x.cols()) + " row, got " + shape_str(row));
  }
  std::vector<double> values(x.size());
  auto xv = x.data(), rv = row.data();
  const std::size_t n = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) values[i * c + j] = xv[i * c + j] + rv[j];
  check_finite("add_rowvec", values);
  Tensor out = Tensor::from_values(n, c, std::move(values));
  const Tensor inputs[] = {x, row};
  return finalize(out, inputs, [x, row, out, n, c]() mutable {
    auto g = out.grad();
    x.accumulate_grad(g);
    if (row.requires_grad()) {
      auto gr = row.grad_raw();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
    }
  });
}

Tensor Tape::scale_rows(const Tensor& x, const Tensor& coeffs) {
  if (coeffs.rows() != x.rows() || coeffs.cols() != 1) {
    fail("scale_rows", "expected " + std::to_string(x.rows()) + "x1 coefficients, got " +
                           shape_str(coeffs));
  }
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> values(x.size());
  auto xv = x.data(), cv = coeffs.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = cv[i];
    for (std::size_t j = 0; j < c; ++j) values[i * c + j] = w * xv[i * c + j];
  }
  check_finite("scale_rows", values);
  Tensor out = Tensor::from_values(n, c, std::move(values));
  const Tensor inputs[] = {x, coeffs};
  return finalize(out, inputs, [x, coeffs, out, n, c]() mutable {
    auto g = out.grad();
    if (x.requires_grad()) {
      auto gx = x.grad_raw();
      auto cv = coeffs.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double w = cv[i];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += w * g[i * c + j];
      }
    }
    if (coeffs.requires_grad()) {
      auto gc = coeffs.grad_raw();
      auto xv = x.data();
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * xv[i * c + j];
        gc[i] += acc;
      }
    }
  });
}

Tensor Tape::row_weighted_sum(std::span<const Tensor> mats, std::span<const Tensor> coeffs) {
  if (mats.empty() || mats.size() != coeffs.size()) {
    fail("row_weighted_sum", "need equal, nonzero numbers of matrices and coefficient columns");
  }
  const std::size_t n = mats[0].rows(), c = mats[0].cols();
  for (const auto& m : mats) require_same_shape("row_weighted_sum", mats[0], m);
  for (const auto& w : coeffs) {
    if (w.rows() != n || w.cols() != 1) fail("row_weighted_sum", "coefficient shape mismatch");
  }
  std::vector<double> values(n * c, 0.0);
  for (std::size_t b = 0; b < mats.size(); ++b) {
    auto mv = mats[b].data();
    auto wv = coeffs[b].data();
    for (std::size_t i = 0; i < n; ++i) {
      const double w = wv[i];
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) values[i * c + j] += w * mv[i * c + j];
    }
  }
  check_finite("row_weighted_sum", values);
  Tensor out = Tensor::from_values(n, c, std::move(values));
  std::vector<Tensor> inputs(mats.begin(), mats.end());
  inputs.insert(inputs.end(), coeffs.begin(), coeffs.end());
  std::vector<Tensor> ms(mats.begin(), mats.end());
  std::vector<Tensor> ws(coeffs.begin(), coeffs.end());
  return finalize(out, inputs, [ms, ws, out, n, c]() mutable {
    auto g = out.grad();
    for (std::size_t b = 0; b < ms.size(); ++b) {
      if (ms[b].requires_grad()) {
        auto gm = ms[b].grad_raw();
        auto wv = ws[b].data();
        for (std::size_t i = 0; i < n; ++i) {
          const double w = wv[i];
          if (w == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += w * g[i * c + j];
        }
      }
      if (ws[b].requires_grad()) {
        auto gw = ws[b].grad_raw();
        auto mv = ms[b].data();
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * mv[i * c + j];
          gw[i] += acc;
        }
      }
    }
  });
}

Tensor Tape::row_softmax(const Tensor& x) {
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      values[i * c + j] = std::exp(row[j] - mx);
      sum += values[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) values[i * c + j] /= sum;
  }
  check_finite("row_softmax", values);
  Tensor out = Tensor::from_values(n, c, std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, n, c]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto y = out.data();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

Tensor Tape::row_log_softmax(const Tensor& x) {
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) values[i * c + j] = row[j] - lse;
  }
  check_finite("row_log_softmax", values);
  Tensor out = Tensor::from_values(n, c, std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, n, c]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto y = out.data();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < n; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gsum;
    }
  });
}

Tensor Tape::sigmoid(const Tensor& x) {
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = xv[i];
    values[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                         : std::exp(v) / (1.0 + std::exp(v));
  }
  check_finite("sigmoid", values);
  Tensor out = Tensor::from_values(x.rows(), x.cols(), std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto y = out.data();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor Tape::relu(const Tensor& x) {
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor out = Tensor::from_values(x.rows(), x.cols(), std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto xv = x.data();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

Tensor Tape::log(const Tensor& x) {
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (xv[i] <= 0.0) fail("log", "argument must be positive");
    values[i] = std::log(xv[i]);
  }
  check_finite("log", values);
  Tensor out = Tensor::from_values(x.rows(), x.cols(), std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto xv = x.data();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
}

Tensor Tape::exp(const Tensor& x) {
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::exp(xv[i]);
  check_finite("exp", values);
  Tensor out = Tensor::from_values(x.rows(), x.cols(), std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto y = out.data();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  });
}

Tensor Tape::pow(const Tensor& x, double exponent) {
  std::vector<double> values(x.size());
  auto xv = x.data();
  const bool integral = exponent == std::floor(exponent) && exponent >= 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!integral && xv[i] < 0.0) fail("pow", "negative base with fractional exponent");
    values[i] = std::pow(xv[i], exponent);
  }
  check_finite("pow", values);
  Tensor out = Tensor::from_values(x.rows(), x.cols(), std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, exponent]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto xv = x.data();
    auto gx = x.grad_raw();
    if (exponent == 0.0) return;  // constant 1, zero derivative
    for (std::size_t i = 0; i < g.size(); ++i)
      gx[i] += g[i] * exponent * std::pow(xv[i], exponent - 1.0);
  });
}

Tensor Tape::clamp(const Tensor& x, double lo, double hi) {
  if (!(lo < hi)) fail("clamp", "requires lo < hi");
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::clamp(xv[i], lo, hi);
  Tensor out = Tensor::from_values(x.rows(), x.cols(), std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, lo, hi]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto xv = x.data();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) gx[i] += g[i];
  });
}

Tensor Tape::concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) fail("concat_cols", "no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) fail("concat_cols", "row counts disagree");
    total += p.cols();
  }
  std::vector<double> values(n * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto pv = p.data();
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) values[i * total + offset + j] = pv[i * c + j];
    offset += c;
  }
  Tensor out = Tensor::from_values(n, total, std::move(values));
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return finalize(out, inputs, [inputs, out, n, total]() mutable {
    auto g = out.grad();
    std::size_t offset = 0;
    for (auto& p : inputs) {
      const std::size_t c = p.cols();
      if (p.requires_grad()) {
        auto gp = p.grad_raw();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + offset + j];
      }
      offset += c;
    }
  });
}

Tensor Tape::concat_cols(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_cols(std::span<const Tensor>(parts));
}

Tensor Tape::slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.cols()) fail("slice_cols", "bad column range");
  const std::size_t n = x.rows(), c = x.cols(), w = end - begin;
  std::vector<double> values(n * w);
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) values[i * w + j] = xv[i * c + begin + j];
  Tensor out = Tensor::from_values(n, w, std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, begin, n, c, w]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += g[i * w + j];
  });
}

Tensor Tape::gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t c = x.cols();
  std::vector<double> values(rows.size() * c);
  auto xv = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) fail("gather_rows", "row index out of range");
    std::copy_n(xv.data() + rows[i] * c, c, values.data() + i * c);
  }
  Tensor out = Tensor::from_values(rows.size(), c, std::move(values));
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, idx = std::move(idx), c]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += g[i * c + j];
  });
}

Tensor Tape::sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  if (!std::isfinite(acc)) throw std::runtime_error("tensor op sum produced a non-finite value");
  Tensor out = Tensor::scalar(acc);
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out]() mutable {
    if (!x.requires_grad()) return;
    const double g = out.grad()[0];
    auto gx = x.grad_raw();
    for (auto& v : gx) v += g;
  });
}

Tensor Tape::mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  acc /= static_cast<double>(x.size());
  if (!std::isfinite(acc)) throw std::runtime_error("tensor op mean produced a non-finite value");
  Tensor out = Tensor::scalar(acc);
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out]() mutable {
    if (!x.requires_grad()) return;
    const double g = out.grad()[0] / static_cast<double>(x.size());
    auto gx = x.grad_raw();
    for (auto& v : gx) v += g;
  });
}

Tensor Tape::l2_normalize_rows(const Tensor& x) {
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> values(x.size());
  std::vector<double> norms(n);
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += xv[i * c + j] * xv[i * c + j];
    const double norm = std::sqrt(sq);
    norms[i] = norm;
    if (norm == 0.0) {
      for (std::size_t j = 0; j < c; ++j) values[i * c + j] = 0.0;
    } else {
      for (std::size_t j = 0; j < c; ++j) values[i * c + j] = xv[i * c + j] / norm;
    }
  }
  check_finite("l2_normalize_rows", values);
  Tensor out = Tensor::from_values(n, c, std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, norms = std::move(norms), n, c]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto y = out.data();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < n; ++i) {
      if (norms[i] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] += (g[i * c + j] - dot * y[i * c + j]) / norms[i];
    }
  });
}

Tensor Tape::dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) fail("dropout", "rate must be in [0, 1)");
  if (!training_ || rate == 0.0) return x;
  const double keep = 1.0 - rate;
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  std::vector<double> values(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = xv[i] * mask[i];
  Tensor out = Tensor::from_values(x.rows(), x.cols(), std::move(values));
  const Tensor inputs[] = {x};
  return finalize(out, inputs, [x, out, mask = std::move(mask)]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto gx = x.grad_raw();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

}  // namespace corgcn
