#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Every tensor is two-dimensional (a scalar is 1 x 1). A Tape records one
// backward closure per primitive application; Tape::backward replays them in
// exact reverse order. Leaf tensors (parameters) keep their grad buffers
// across tapes; the optimizer clears them.

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mdistill/error.hpp"
#include "mdistill/rng.hpp"

namespace mdistill {

struct TensorData {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData>()) {}

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    Tensor t;
    t.d_->rows = rows;
    t.d_->cols = cols;
    t.d_->value.assign(rows * cols, 0.0);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values,
                     bool requires_grad = false) {
    require(values.size() == rows * cols, ErrorCode::ShapeMismatch,
            "value count does not match shape");
    Tensor t;
    t.d_->rows = rows;
    t.d_->cols = cols;
    t.d_->value = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from(1, 1, {v}, requires_grad); }

  std::size_t rows() const noexcept { return d_->rows; }
  std::size_t cols() const noexcept { return d_->cols; }
  std::size_t size() const noexcept { return d_->value.size(); }
  std::array<std::size_t, 2> shape() const noexcept { return {d_->rows, d_->cols}; }

  bool requires_grad() const noexcept { return d_->requires_grad; }
  void set_requires_grad(bool on) { d_->requires_grad = on; }

  double operator()(std::size_t r, std::size_t c) const { return d_->value[r * d_->cols + c]; }
  double& at(std::size_t r, std::size_t c) { return d_->value[r * d_->cols + c]; }
  double item() const {
    require(size() == 1, ErrorCode::NotScalar, "item() on non-scalar tensor");
    return d_->value[0];
  }

  std::vector<double>& values() noexcept { return d_->value; }
  const std::vector<double>& values() const noexcept { return d_->value; }
  /// Empty until something has flowed into this tensor during backward.
  const std::vector<double>& grad() const noexcept { return d_->grad; }
  std::vector<double>& grad_mut() noexcept { return d_->grad; }
  void zero_grad() { d_->grad.assign(d_->value.size(), 0.0); }

  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> mat() const {
    return {d_->value.data(), static_cast<Eigen::Index>(d_->rows), static_cast<Eigen::Index>(d_->cols)};
  }

  /// Detached deep copy.
  Tensor clone() const {
    return from(rows(), cols(), values(), false);
  }

  std::shared_ptr<TensorData> data() const noexcept { return d_; }
  bool same(const Tensor& o) const noexcept { return d_ == o.d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

class Tape {
 public:
  void record(std::function<void()> backward_op) { ops_.push_back(std::move(backward_op)); }
  std::size_t size() const noexcept { return ops_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void backward(const Tensor& loss) {
    require(!consumed_, ErrorCode::TapeConsumed, "backward already ran on this tape");
    require(loss.size() == 1, ErrorCode::NotScalar, "backward needs a scalar loss");
    consumed_ = true;
    auto d = loss.data();
    d->ensure_grad();
    d->grad[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

namespace detail {

using MapRM = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMapRM = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline MapRM map(std::vector<double>& v, std::size_t r, std::size_t c) {
  return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
inline CMapRM cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

inline bool& grad_disabled() {
  thread_local bool off = false;
  return off;
}

inline Tensor make_output(std::size_t rows, std::size_t cols, std::initializer_list<const Tensor*> inputs) {
  Tensor out = Tensor::zeros(rows, cols);
  bool rg = false;
  for (const Tensor* t : inputs) rg = rg || t->requires_grad();
  rg = rg && !grad_disabled();
  out.set_requires_grad(rg);
  return out;
}

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, std::string(op) + " produced a non-finite value");
  }
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::ShapeMismatch,
          std::string(op) + ": shapes differ");
}

/// Grad buffer of an input that wants gradient, or nullptr.
inline std::vector<double>* grad_sink(const std::shared_ptr<TensorData>& d) {
  if (!d->requires_grad) return nullptr;
  d->ensure_grad();
  return &d->grad;
}

}  // namespace detail

/// While alive, primitives produce outputs that record nothing on the tape.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), ErrorCode::ShapeMismatch, "matmul: inner dimensions differ");
  Tensor out = detail::make_output(a.rows(), b.cols(), {&a, &b});
  detail::map(out.values(), out.rows(), out.cols()).noalias() = a.mat() * b.mat();
  detail::check_finite(out, "matmul");
  if (out.requires_grad()) {
    tape.record([A = a.data(), B = b.data(), O = out.data()] {
      if (O->grad.empty()) return;
      auto g = detail::cmap(O->grad, O->rows, O->cols);
      if (auto* ga = detail::grad_sink(A)) {
        detail::map(*ga, A->rows, A->cols).noalias() += g * detail::cmap(B->value, B->rows, B->cols).transpose();
      }
      if (auto* gb = detail::grad_sink(B)) {
        detail::map(*gb, B->rows, B->cols).noalias() += detail::cmap(A->value, A->rows, A->cols).transpose() * g;
      }
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  Tensor out = detail::make_output(a.cols(), a.rows(), {&a});
  detail::map(out.values(), out.rows(), out.cols()) = a.mat().transpose();
  if (out.requires_grad()) {
    tape.record([A = a.data(), O = out.data()] {
      if (O->grad.empty()) return;
      if (auto* ga = detail::grad_sink(A)) {
        detail::map(*ga, A->rows, A->cols) += detail::cmap(O->grad, O->rows, O->cols).transpose();
      }
    });
  }
  return out;
}

namespace detail {

template <typename Fwd>
Tensor binary_elementwise(Tape& tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                          double sign_b) {
  check_same_shape(a, b, name);
  Tensor out = make_output(a.rows(), a.cols(), {&a, &b});
  auto& o = out.values();
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(av[i], bv[i]);
  check_finite(out, name);
  if (out.requires_grad()) {
    tape.record([A = a.data(), B = b.data(), O = out.data(), sign_b] {
      if (O->grad.empty()) return;
      if (auto* ga = grad_sink(A)) {
        for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += O->grad[i];
      }
      if (auto* gb = grad_sink(B)) {
        for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += sign_b * O->grad[i];
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(tape, a, b, "add", [](double x, double y) { return x + y; }, 1.0);
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(tape, a, b, "sub", [](double x, double y) { return x - y; }, -1.0);
}

/// Elementwise (Hadamard) product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = detail::make_output(a.rows(), a.cols(), {&a, &b});
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
  detail::check_finite(out, "mul");
  if (out.requires_grad()) {
    tape.record([A = a.data(), B = b.data(), O = out.data()] {
      if (O->grad.empty()) return;
      if (auto* ga = detail::grad_sink(A)) {
        for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += O->grad[i] * B->value[i];
      }
      if (auto* gb = detail::grad_sink(B)) {
        for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += O->grad[i] * A->value[i];
      }
    });
  }
  return out;
}

inline Tensor scalar_mul(Tape& tape, const Tensor& a, double s) {
  Tensor out = detail::make_output(a.rows(), a.cols(), {&a});
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = s * a.values()[i];
  detail::check_finite(out, "scalar_mul");
  if (out.requires_grad()) {
    tape.record([A = a.data(), O = out.data(), s] {
      if (O->grad.empty()) return;
      if (auto* ga = detail::grad_sink(A)) {
        for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += s * O->grad[i];
      }
    });
  }
  return out;
}

inline Tensor add_scalar(Tape& tape, const Tensor& a, double s) {
  Tensor out = detail::make_output(a.rows(), a.cols(), {&a});
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] + s;
  detail::check_finite(out, "add_scalar");
  if (out.requires_grad()) {
    tape.record([A = a.data(), O = out.data()] {
      if (O->grad.empty()) return;
      if (auto* ga = detail::grad_sink(A)) {
        for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += O->grad[i];
      }
    });
  }
  return out;
}

/// X (r x c) plus the row vector b (1 x c) added to every row. This is the
/// only broadcasting primitive.
inline Tensor add_row(Tape& tape, const Tensor& x, const Tensor& b) {
  require(b.rows() == 1 && b.cols() == x.cols(), ErrorCode::ShapeMismatch, "add_row: bias must be 1 x cols");
  Tensor out = detail::make_output(x.rows(), x.cols(), {&x, &b});
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = x.values()[i] + b.values()[i % c];
  detail::check_finite(out, "add_row");
  if (out.requires_grad()) {
    tape.record([X = x.data(), B = b.data(), O = out.data()] {
      if (O->grad.empty()) return;
      if (auto* gx = detail::grad_sink(X)) {
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += O->grad[i];
      }
      if (auto* gb = detail::grad_sink(B)) {
        const std::size_t c = O->cols;
        for (std::size_t i = 0; i < O->grad.size(); ++i) (*gb)[i % c] += O->grad[i];
      }
    });
  }
  return out;
}

/// Concatenation along axis 0 (stack rows) or axis 1 (join columns).
inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat: no inputs");
  require(axis == 0 || axis == 1, ErrorCode::ShapeMismatch, "concat: axis must be 0 or 1");
  std::size_t rows = 0, cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    rg = rg || p.requires_grad();
    if (axis == 0) {
      require(p.cols() == parts[0].cols(), ErrorCode::ShapeMismatch, "concat: column counts differ");
      rows += p.rows();
      cols = p.cols();
    } else {
      require(p.rows() == parts[0].rows(), ErrorCode::ShapeMismatch, "concat: row counts differ");
      cols += p.cols();
      rows = p.rows();
    }
  }
  rg = rg && !detail::grad_disabled();
  Tensor out = Tensor::zeros(rows, cols);
  out.set_requires_grad(rg);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      std::copy(p.values().begin(), p.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(offset * cols));
      offset += p.rows();
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < p.cols(); ++c) out.at(r, offset + c) = p(r, c);
      }
      offset += p.cols();
    }
  }
  if (rg) {
    std::vector<std::shared_ptr<TensorData>> ins;
    for (const auto& p : parts) ins.push_back(p.data());
    tape.record([ins = std::move(ins), O = out.data(), axis] {
      if (O->grad.empty()) return;
      std::size_t offset = 0;
      for (const auto& in : ins) {
        auto* g = detail::grad_sink(in);
        if (axis == 0) {
          if (g) {
            for (std::size_t i = 0; i < in->value.size(); ++i) (*g)[i] += O->grad[offset * O->cols + i];
          }
          offset += in->rows;
        } else {
          if (g) {
            for (std::size_t r = 0; r < in->rows; ++r) {
              for (std::size_t c = 0; c < in->cols; ++c) (*g)[r * in->cols + c] += O->grad[r * O->cols + offset + c];
            }
          }
          offset += in->cols;
        }
      }
    });
  }
  return out;
}

/// Columns [begin, begin + count) of x.
inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
  require(begin + count <= x.cols(), ErrorCode::ShapeMismatch, "slice_cols: out of range");
  Tensor out = detail::make_output(x.rows(), count, {&x});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = x(r, begin + c);
  }
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data(), begin] {
      if (O->grad.empty()) return;
      if (auto* g = detail::grad_sink(X)) {
        for (std::size_t r = 0; r < O->rows; ++r) {
          for (std::size_t c = 0; c < O->cols; ++c) (*g)[r * X->cols + begin + c] += O->grad[r * O->cols + c];
        }
      }
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out = detail::make_output(x.rows(), x.cols(), {&x});
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data()] {
      if (O->grad.empty()) return;
      if (auto* g = detail::grad_sink(X)) {
        for (std::size_t i = 0; i < g->size(); ++i) {
          if (X->value[i] > 0.0) (*g)[i] += O->grad[i];
        }
      }
    });
  }
  return out;
}

/// Max over consecutive groups of `group` rows: (g*n) x c -> n x c. Gradient
/// goes to the recorded argmax, the first row of the group on ties.
inline Tensor max_pool_rows(Tape& tape, const Tensor& x, std::size_t group) {
  require(group >= 1 && x.rows() % group == 0, ErrorCode::ShapeMismatch,
          "max_pool_rows: rows must be a multiple of the group size");
  const std::size_t n = x.rows() / group, c = x.cols();
  Tensor out = detail::make_output(n, c, {&x});
  std::vector<std::size_t> argmax(n * c);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = b * group;
      double bv = x(best, j);
      for (std::size_t r = 1; r < group; ++r) {
        const double v = x(b * group + r, j);
        if (v > bv) {
          bv = v;
          best = b * group + r;
        }
      }
      out.at(b, j) = bv;
      argmax[b * c + j] = best;
    }
  }
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data(), argmax = std::move(argmax)] {
      if (O->grad.empty()) return;
      if (auto* g = detail::grad_sink(X)) {
        const std::size_t c = O->cols;
        for (std::size_t i = 0; i < argmax.size(); ++i) (*g)[argmax[i] * c + i % c] += O->grad[i];
      }
    });
  }
  return out;
}

/// Max over rows (axis 0, result 1 x c) or columns (axis 1, result r x 1).
inline Tensor max_reduce(Tape& tape, const Tensor& x, int axis) {
  require(axis == 0 || axis == 1, ErrorCode::ShapeMismatch, "max_reduce: axis must be 0 or 1");
  if (axis == 0) return max_pool_rows(tape, x, x.rows());
  Tensor out = detail::make_output(x.rows(), 1, {&x});
  std::vector<std::size_t> argmax(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < x.cols(); ++c) {
      if (x(r, c) > x(r, best)) best = c;
    }
    argmax[r] = best;
    out.at(r, 0) = x(r, best);
  }
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data(), argmax = std::move(argmax)] {
      if (O->grad.empty()) return;
      if (auto* g = detail::grad_sink(X)) {
        for (std::size_t r = 0; r < argmax.size(); ++r) (*g)[r * X->cols + argmax[r]] += O->grad[r];
      }
    });
  }
  return out;
}

/// Mean over rows (axis 0), columns (axis 1) or everything (axis -1).
inline Tensor mean_reduce(Tape& tape, const Tensor& x, int axis) {
  require(axis >= -1 && axis <= 1, ErrorCode::ShapeMismatch, "mean_reduce: axis must be -1, 0 or 1");
  const std::size_t r = x.rows(), c = x.cols();
  const std::size_t orows = axis == 1 || axis == -1 ? (axis == -1 ? 1 : r) : 1;
  const std::size_t ocols = axis == 0 ? c : 1;
  Tensor out = detail::make_output(orows, ocols, {&x});
  const double inv = 1.0 / static_cast<double>(axis == 0 ? r : axis == 1 ? c : r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t o = axis == 0 ? j : axis == 1 ? i : 0;
      out.values()[o] += x(i, j) * inv;
    }
  }
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data(), axis, inv] {
      if (O->grad.empty()) return;
      if (auto* g = detail::grad_sink(X)) {
        for (std::size_t i = 0; i < X->rows; ++i) {
          for (std::size_t j = 0; j < X->cols; ++j) {
            const std::size_t o = axis == 0 ? j : axis == 1 ? i : 0;
            (*g)[i * X->cols + j] += O->grad[o] * inv;
          }
        }
      }
    });
  }
  return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& x) {
  return scalar_mul(tape, mean_reduce(tape, x, -1), static_cast<double>(x.size()));
}

/// Row-wise softmax of x / temperature.
inline Tensor softmax_rows(Tape& tape, const Tensor& x, double temperature = 1.0) {
  require(temperature > 0.0, ErrorCode::BadTemperature, "softmax temperature must be positive");
  Tensor out = detail::make_output(x.rows(), x.cols(), {&x});
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x(r, j) / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out.at(r, j) = std::exp(x(r, j) / temperature - mx);
      s += out(r, j);
    }
    for (std::size_t j = 0; j < c; ++j) out.at(r, j) /= s;
  }
  detail::check_finite(out, "softmax_rows");
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data(), temperature] {
      if (O->grad.empty()) return;
      if (auto* g = detail::grad_sink(X)) {
        const std::size_t c = O->cols;
        for (std::size_t r = 0; r < O->rows; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += O->grad[r * c + j] * O->value[r * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            (*g)[r * c + j] += O->value[r * c + j] * (O->grad[r * c + j] - dot) / temperature;
          }
        }
      }
    });
  }
  return out;
}

/// Row-wise log(softmax(x / temperature)), computed stably.
inline Tensor log_softmax_rows(Tape& tape, const Tensor& x, double temperature = 1.0) {
  require(temperature > 0.0, ErrorCode::BadTemperature, "softmax temperature must be positive");
  Tensor out = detail::make_output(x.rows(), x.cols(), {&x});
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x(r, j) / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x(r, j) / temperature - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out.at(r, j) = x(r, j) / temperature - lse;
  }
  detail::check_finite(out, "log_softmax_rows");
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data(), temperature] {
      if (O->grad.empty()) return;
      if (auto* g = detail::grad_sink(X)) {
        const std::size_t c = O->cols;
        for (std::size_t r = 0; r < O->rows; ++r) {
          double gs = 0.0;
          for (std::size_t j = 0; j < c; ++j) gs += O->grad[r * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            (*g)[r * c + j] += (O->grad[r * c + j] - std::exp(O->value[r * c + j]) * gs) / temperature;
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

template <typename Fwd, typename Deriv>
Tensor unary(Tape& tape, const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor out = make_output(x.rows(), x.cols(), {&x});
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = fwd(x.values()[i]);
  check_finite(out, name);
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data(), deriv] {
      if (O->grad.empty()) return;
      if (auto* g = grad_sink(X)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += O->grad[i] * deriv(X->value[i], O->value[i]);
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor log(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, "log", [](double v) { return std::log(v); },
                       [](double in, double) { return 1.0 / in; });
}

inline Tensor exp(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, "exp", [](double v) { return std::exp(v); },
                       [](double, double out) { return out; });
}

inline Tensor square(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, "square", [](double v) { return v * v; },
                       [](double in, double) { return 2.0 * in; });
}

inline Tensor sqrt(Tape& tape, const Tensor& x) {
  return detail::unary(tape, x, "sqrt", [](double v) { return std::sqrt(v); },
                       [](double, double out) { return 0.5 / out; });
}

/// Rows of x selected by `indices` (repeats allowed; gradients accumulate).
inline Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<std::size_t>& indices) {
  const std::size_t c = x.cols();
  Tensor out = detail::make_output(indices.size(), c, {&x});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < x.rows(), ErrorCode::ShapeMismatch, "gather_rows: index out of range");
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c,
                out.values().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  if (out.requires_grad()) {
    tape.record([X = x.data(), O = out.data(), indices] {
      if (O->grad.empty()) return;
      if (auto* g = detail::grad_sink(X)) {
        const std::size_t c = O->cols;
        for (std::size_t i = 0; i < indices.size(); ++i) {
          for (std::size_t j = 0; j < c; ++j) (*g)[indices[i] * c + j] += O->grad[i * c + j];
        }
      }
    });
  }
  return out;
}

/// Row-wise normalization over the channel axis followed by a per-channel
/// affine map: y = (x - mean) / sqrt(var + eps) * gamma + beta.
inline Tensor layer_norm_rows(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps = 1e-5) {
  const std::size_t r = x.rows(), c = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == c && beta.rows() == 1 && beta.cols() == c,
          ErrorCode::ShapeMismatch, "layer_norm_rows: gamma/beta must be 1 x cols");
  Tensor out = detail::make_output(r, c, {&x, &gamma, &beta});
  std::vector<double> xhat(r * c), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x(i, j) - mean) * inv_std[i];
      out.at(i, j) = xhat[i * c + j] * gamma.values()[j] + beta.values()[j];
    }
  }
  detail::check_finite(out, "layer_norm_rows");
  if (out.requires_grad()) {
    tape.record([X = x.data(), G = gamma.data(), B = beta.data(), O = out.data(), xhat = std::move(xhat),
                 inv_std = std::move(inv_std)] {
      if (O->grad.empty()) return;
      const std::size_t r = O->rows, c = O->cols;
      if (auto* gg = detail::grad_sink(G)) {
        for (std::size_t i = 0; i < r * c; ++i) (*gg)[i % c] += O->grad[i] * xhat[i];
      }
      if (auto* gb = detail::grad_sink(B)) {
        for (std::size_t i = 0; i < r * c; ++i) (*gb)[i % c] += O->grad[i];
      }
      if (auto* gx = detail::grad_sink(X)) {
        std::vector<double> dxhat(c);
        for (std::size_t i = 0; i < r; ++i) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            dxhat[j] = O->grad[i * c + j] * G->value[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[i * c + j];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            (*gx)[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
          }
        }
      }
    });
  }
  return out;
}

/// Per-block Gram matrices. y stacks blocks of `block` rows; the output
/// stacks Y_b * Y_b^T, one block x block matrix per block.
inline Tensor block_gram(Tape& tape, const Tensor& y, std::size_t block) {
  require(block >= 1 && y.rows() % block == 0, ErrorCode::ShapeMismatch,
          "block_gram: rows must be a multiple of the block size");
  const std::size_t nb = y.rows() / block, c = y.cols();
  Tensor out = detail::make_output(y.rows(), block, {&y});
  for (std::size_t b = 0; b < nb; ++b) {
    auto yb = detail::cmap(y.values(), y.rows(), c).middleRows(static_cast<Eigen::Index>(b * block),
                                                                static_cast<Eigen::Index>(block));
    detail::map(out.values(), out.rows(), block)
        .middleRows(static_cast<Eigen::Index>(b * block), static_cast<Eigen::Index>(block))
        .noalias() = yb * yb.transpose();
  }
  detail::check_finite(out, "block_gram");
  if (out.requires_grad()) {
    tape.record([Y = y.data(), O = out.data(), block] {
      if (O->grad.empty()) return;
      auto* g = detail::grad_sink(Y);
      if (!g) return;
      const std::size_t nb = Y->rows / block, c = Y->cols;
      auto yv = detail::cmap(Y->value, Y->rows, c);
      auto gv = detail::map(*g, Y->rows, c);
      auto ov = detail::cmap(O->grad, O->rows, block);
      for (std::size_t b = 0; b < nb; ++b) {
        const auto off = static_cast<Eigen::Index>(b * block);
        const auto bl = static_cast<Eigen::Index>(block);
        auto gb = ov.middleRows(off, bl);
        gv.middleRows(off, bl).noalias() += (gb + gb.transpose()) * yv.middleRows(off, bl);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = true;
};

inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Compares the tape gradient of a scalar function of `point` with central
/// differences at step `step`.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&, const Tensor&)>& fn, const Tensor& point,
                                  double tol, double step = 1e-5) {
  Tensor x = point.clone();
  x.set_requires_grad(true);
  {
    Tape tape;
    Tensor loss = fn(tape, x);
    tape.backward(loss);
  }
  std::vector<double> analytic = x.grad();
  if (analytic.empty()) analytic.assign(x.size(), 0.0);

  GradCheckReport rep;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.values()[i];
    auto eval = [&](double v) {
      x.values()[i] = v;
      Tape t;
      return fn(t, x).item();
    };
    const double numeric = (eval(orig + step) - eval(orig - step)) / (2.0 * step);
    x.values()[i] = orig;
    rep.max_rel_error = std::max(rep.max_rel_error, grad_rel_error(analytic[i], numeric));
    ++rep.coords_checked;
  }
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

/// Gradient check over a set of parameter tensors of a scalar loss. At most
/// `max_per_tensor` coordinates of each tensor are probed (evenly strided).
inline GradCheckReport grad_check_params(const std::function<Tensor(Tape&)>& loss_fn,
                                         const std::vector<Tensor>& params, double tol,
                                         double step = 1e-5, std::size_t max_per_tensor = 0) {
  std::vector<Tensor> ps = params;
  for (auto& p : ps) p.zero_grad();
  {
    Tape tape;
    Tensor loss = loss_fn(tape);
    tape.backward(loss);
  }
  GradCheckReport rep;
  for (auto& p : ps) {
    std::vector<double> analytic = p.grad();
    if (analytic.empty()) analytic.assign(p.size(), 0.0);
    const std::size_t n = p.size();
    const std::size_t stride = max_per_tensor == 0 || n <= max_per_tensor ? 1 : (n + max_per_tensor - 1) / max_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p.values()[i];
      auto eval = [&](double v) {
        p.values()[i] = v;
        Tape t;
        return loss_fn(t).item();
      };
      const double numeric = (eval(orig + step) - eval(orig - step)) / (2.0 * step);
      p.values()[i] = orig;
      rep.max_rel_error = std::max(rep.max_rel_error, grad_rel_error(analytic[i], numeric));
      ++rep.coords_checked;
    }
  }
  for (auto& p : ps) p.zero_grad();
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

// ---------------------------------------------------------------------------
// Parameters, initialization, optimizer, checkpoints
// ---------------------------------------------------------------------------

/// Named, ordered collection of leaf tensors.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    require(index_.find(name) == index_.end(), ErrorCode::SchemaMismatch, "duplicate parameter " + name);
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::SchemaMismatch, "unknown parameter " + name);
    return entries_[it->second].second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  std::vector<Tensor> tensors_with_prefix(const std::string& prefix) const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) {
      if (e.first.rfind(prefix, 0) == 0) out.push_back(e.second);
    }
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// He-uniform weights for a fan_in x fan_out matrix.
inline Tensor he_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor w = Tensor::zeros(fan_in, fan_out);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  return w;
}

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      const auto& g = p.grad();
      if (g.empty()) continue;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m_[k][i] = opts_.beta1 * m_[k][i] + (1.0 - opts_.beta1) * g[i];
        v_[k][i] = opts_.beta2 * v_[k][i] + (1.0 - opts_.beta2) * g[i] * g[i];
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        p.values()[i] -= opts_.learning_rate * mhat / (std::sqrt(vhat) + opts_.eps);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Checkpoint text format:
///   ckpt/1
///   name <id> shape <rows> <cols>
///   <values, %.17g, space separated>
///   ...
inline void write_checkpoint(std::ostream& os, const ParamStore& store) {
  os << "ckpt/1\n";
  char buf[64];
  for (const auto& [name, t] : store.entries()) {
    os << "name " << name << " shape " << t.rows() << ' ' << t.cols() << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", t.values()[i]);
      if (i) os << ' ';
      os << buf;
    }
    os << '\n';
  }
}

/// Loads values into an existing store. Names, order and shapes must match.
inline void read_checkpoint(std::istream& is, ParamStore& store) {
  std::string line;
  require(std::getline(is, line) && line == "ckpt/1", ErrorCode::SchemaMismatch, "missing ckpt/1 magic");
  std::size_t seen = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream hs(line);
    std::string kname, name, kshape;
    std::size_t rows = 0, cols = 0;
    require(static_cast<bool>(hs >> kname >> name >> kshape >> rows >> cols) && kname == "name" &&
                kshape == "shape",
            ErrorCode::SchemaMismatch, "malformed tensor header: " + line);
    require(store.contains(name), ErrorCode::SchemaMismatch, "checkpoint has unknown tensor " + name);
    Tensor t = store.get(name);
    require(t.rows() == rows && t.cols() == cols, ErrorCode::SchemaMismatch, "shape mismatch for " + name);
    require(static_cast<bool>(std::getline(is, line)), ErrorCode::SchemaMismatch, "missing values for " + name);
    std::istringstream vs(line);
    for (std::size_t i = 0; i < t.size(); ++i) {
      require(static_cast<bool>(vs >> t.values()[i]), ErrorCode::SchemaMismatch, "short value row for " + name);
    }
    ++seen;
  }
  require(seen == store.size(), ErrorCode::SchemaMismatch, "checkpoint tensor count mismatch");
}

}  // namespace mdistill
