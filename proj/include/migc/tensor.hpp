#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "migc/dual.hpp"
#include "migc/errors.hpp"
#include "migc/rng.hpp"

namespace migc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. `T` is double for ordinary use and Dual when a
/// computation is differentiated in forward mode.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), T(0.0)) {
    check_extents();
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    require(data_.size() == shape_size(shape_), ErrorKind::kShape,
            "data length " + std::to_string(data_.size()) + " does not match shape " +
                shape_string(shape_));
  }

  static BasicTensor filled(Shape shape, T value) {
    BasicTensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const { return data_.empty(); }

  /// Extent of the last axis; the "feature" axis for matrices and feature maps.
  std::size_t last() const { return shape_.empty() ? 1 : shape_.back(); }
  /// Number of rows when the tensor is viewed as (size / last) x last.
  std::size_t rows() const { return last() == 0 ? 0 : size() / last(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * last(), last()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * last(), last());
  }

  BasicTensor reshaped(Shape shape) const {
    require(shape_size(shape) == size(), ErrorKind::kShape,
            "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return BasicTensor(std::move(shape), data_);
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out;
    out.reserve(data_.size());
    for (const T& x : data_) out.push_back(U(x));
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      require(e > 0, ErrorKind::kShape, "zero extent in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<double>;

template <class T>
BasicTensor<double> values_of(const BasicTensor<T>& t) {
  std::vector<double> out;
  out.reserve(t.size());
  for (const T& x : t.data()) out.push_back(value_of(x));
  return BasicTensor<double>(t.shape(), std::move(out));
}

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  require(a == b, ErrorKind::kShape, what + ": " + shape_string(a) + " vs " + shape_string(b));
}

template <class T>
void require_finite(const BasicTensor<T>& t, const std::string& what) {
  for (const T& x : t.data()) {
    using std::isfinite;
    if (!isfinite(x)) fail(ErrorKind::kNumeric, what + " produced a non-finite value");
  }
}

template <class T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "tensor add");
  BasicTensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "tensor subtract");
  BasicTensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <class T, class S>
BasicTensor<T> scaled(const BasicTensor<T>& a, const S& s) {
  BasicTensor<T> out = a;
  for (auto& x : out.storage()) x = x * s;
  return out;
}

template <class T>
T sigmoid(const T& x) {
  using std::exp;
  return T(1.0) / (T(1.0) + exp(-x));
}

template <class T>
T silu(const T& x) {
  return x * sigmoid(x);
}

/// (n x k) * (k x m). Leading axes of `a` are flattened into rows.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(b.rank() == 2, ErrorKind::kShape, "matmul rhs must be a matrix");
  require(a.last() == b.dim(0), ErrorKind::kShape,
          "matmul inner dims " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  const std::size_t n = a.rows(), k = b.dim(0), m = b.dim(1);
  Shape out_shape = a.shape();
  out_shape.back() = m;
  BasicTensor<T> out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (value_of(aip) == 0.0 && aip == T(0.0)) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += aip * b[p * m + j];
    }
  }
  return out;
}

/// Affine map over the last axis: y = x W + b, W stored in x out.
template <class T>
struct Linear {
  BasicTensor<T> weight;
  std::optional<BasicTensor<T>> bias;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  static Linear zeros(std::size_t in, std::size_t out, bool with_bias = true) {
    Linear l{BasicTensor<T>({in, out}), std::nullopt};
    if (with_bias) l.bias = BasicTensor<T>({out});
    return l;
  }

  static Linear random(Rng& rng, std::size_t in, std::size_t out, double stddev, bool with_bias = true) {
    Linear l = zeros(in, out, with_bias);
    for (auto& w : l.weight.storage()) w = T(rng.normal(0.0, stddev));
    return l;
  }

  static Linear identity(std::size_t n, bool with_bias = true) {
    Linear l = zeros(n, n, with_bias);
    for (std::size_t i = 0; i < n; ++i) l.weight.at(i, i) = T(1.0);
    return l;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    require(x.last() == in_features(), ErrorKind::kConfig,
            "linear layer expects " + std::to_string(in_features()) + " input features, got " +
                shape_string(x.shape()));
    BasicTensor<T> y = matmul(x, weight);
    if (bias) {
      const std::size_t m = out_features();
      for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t j = 0; j < m; ++j) y[r * m + j] += (*bias)[j];
    }
    return y;
  }

  template <class U>
  Linear<U> cast() const {
    Linear<U> l{weight.template cast<U>(), std::nullopt};
    if (bias) l.bias = bias->template cast<U>();
    return l;
  }

  template <class Fn>
  void visit(Fn&& fn) {
    fn(weight);
    if (bias) fn(*bias);
  }
};

/// Boolean attention mask. Blocked entries play the role of the additive
/// −inf sentinel; allowed entries add 0.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(Shape shape, bool allowed = true)
      : shape_(std::move(shape)), allowed_(shape_size(shape_), allowed ? 1 : 0) {}

  /// Builds a mask from its additive form: every entry must be 0 or −inf.
  static AttentionMask from_additive(const Shape& shape, std::span<const double> additive) {
    require(additive.size() == shape_size(shape), ErrorKind::kShape, "additive mask size mismatch");
    AttentionMask m(shape, false);
    for (std::size_t i = 0; i < additive.size(); ++i) {
      const double a = additive[i];
      if (a == 0.0) {
        m.allowed_[i] = 1;
      } else if (std::isinf(a) && a < 0.0) {
        m.allowed_[i] = 0;
      } else {
        fail(ErrorKind::kInvalidArgument, "additive mask entries must be 0 or -inf");
      }
    }
    return m;
  }

  const Shape& shape() const { return shape_; }
  std::size_t last() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t size() const { return allowed_.size(); }

  bool allowed(std::size_t flat) const { return allowed_[flat] != 0; }
  bool allowed(std::size_t r, std::size_t c) const { return allowed_[r * last() + c] != 0; }
  void set(std::size_t r, std::size_t c, bool allow) { allowed_[r * last() + c] = allow ? 1 : 0; }

  /// 0 for allowed entries, −inf for blocked ones.
  double additive(std::size_t r, std::size_t c) const {
    return allowed(r, c) ? 0.0 : -std::numeric_limits<double>::infinity();
  }

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  Shape shape_;
  std::vector<std::uint8_t> allowed_;
};

namespace detail {

// Softmax of one row in place; `allowed(j)` selects unmasked entries. A row
// with no allowed entry becomes all zeros.
template <class T, class Allowed>
void softmax_row(std::span<T> row, Allowed&& allowed) {
  using std::exp;
  bool any = false;
  T max_v{};
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (!allowed(j)) continue;
    if (!any || row[j] > max_v) max_v = row[j];
    any = true;
  }
  if (!any) {
    for (auto& x : row) x = T(0.0);
    return;
  }
  T sum(0.0);
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (allowed(j)) {
      row[j] = exp(row[j] - max_v);
      sum += row[j];
    } else {
      row[j] = T(0.0);
    }
  }
  for (std::size_t j = 0; j < row.size(); ++j)
    if (allowed(j)) row[j] = row[j] / sum;
}

}  // namespace detail

/// Softmax over the last axis. Masked entries get probability 0 and rows that
/// are masked everywhere return zeros.
template <class T>
BasicTensor<T> masked_softmax(const BasicTensor<T>& logits, const AttentionMask* mask = nullptr) {
  require(logits.last() >= 1 && !logits.empty(), ErrorKind::kShape, "softmax over empty axis");
  if (mask) require_same_shape(mask->shape(), logits.shape(), "softmax mask");
  BasicTensor<T> out = logits;
  const std::size_t n = out.last();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    if (mask) {
      detail::softmax_row(out.row(r), [&](std::size_t j) { return mask->allowed(r * n + j); });
    } else {
      detail::softmax_row(out.row(r), [](std::size_t) { return true; });
    }
  }
  require_finite(out, "masked_softmax");
  return out;
}

/// Multi-head scaled dot-product attention,
/// Softmax(Q K^T / sqrt(d_head) + mask) V, with heads taken as equal
/// contiguous slices of the query/key width and of the value width.
/// Optionally writes the head-averaged attention probabilities (LQ x LK).
template <class T>
BasicTensor<T> scaled_dot_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                    const BasicTensor<T>& v, const AttentionMask* mask = nullptr,
                                    std::size_t heads = 1, BasicTensor<T>* probabilities = nullptr) {
  using std::sqrt;
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, ErrorKind::kShape,
          "attention operands must be matrices");
  const std::size_t lq = q.dim(0), d = q.dim(1), lk = k.dim(0), c = v.dim(1);
  require(d >= 1, ErrorKind::kInvalidArgument, "attention width must be positive");
  require(k.dim(1) == d, ErrorKind::kShape,
          "query/key width mismatch " + shape_string(q.shape()) + " vs " + shape_string(k.shape()));
  require(v.dim(0) == lk, ErrorKind::kShape,
          "key/value length mismatch " + shape_string(k.shape()) + " vs " + shape_string(v.shape()));
  require(heads >= 1 && d % heads == 0 && c % heads == 0, ErrorKind::kInvalidArgument,
          "head count must divide both attention and value widths");
  if (mask) require_same_shape(mask->shape(), Shape{lq, lk}, "attention mask");

  const std::size_t dh = d / heads, ch = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  BasicTensor<T> out({lq, c});
  if (probabilities) *probabilities = BasicTensor<T>({lq, lk});
  std::vector<T> logits(lk);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < lq; ++i) {
      for (std::size_t j = 0; j < lk; ++j) {
        if (mask && !mask->allowed(i, j)) {
          logits[j] = T(0.0);
          continue;
        }
        T acc(0.0);
        for (std::size_t t = 0; t < dh; ++t) acc += q.at(i, h * dh + t) * k.at(j, h * dh + t);
        logits[j] = acc * scale;
      }
      std::span<T> row(logits);
      if (mask) {
        detail::softmax_row(row, [&](std::size_t j) { return mask->allowed(i, j); });
      } else {
        detail::softmax_row(row, [](std::size_t) { return true; });
      }
      for (std::size_t j = 0; j < lk; ++j) {
        const T p = logits[j];
        if (value_of(p) == 0.0 && p == T(0.0)) continue;
        for (std::size_t t = 0; t < ch; ++t) out.at(i, h * ch + t) += p * v.at(j, h * ch + t);
        if (probabilities) probabilities->at(i, j) += p / static_cast<double>(heads);
      }
    }
  }
  require_finite(out, "scaled_dot_attention");
  return out;
}

/// Stacks `b` under `a` along the first axis.
template <class T>
BasicTensor<T> concat_rows(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), ErrorKind::kShape,
          "row concatenation needs matrices of equal width: " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
  std::vector<T> data(a.storage());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  return BasicTensor<T>({a.dim(0) + b.dim(0), a.dim(1)}, std::move(data));
}

}  // namespace migc
