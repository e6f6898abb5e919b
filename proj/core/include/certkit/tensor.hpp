#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "certkit/errors.hpp"

namespace certkit {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& s, const char* ctx) {
  for (int64_t d : s)
    if (d <= 0) throw DimensionError(std::string(ctx) + ": non-positive extent in " + shape_str(s));
}

// Dense row-major tensor over a scalar type.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_shape_valid(shape_, "Tensor");
    data_.assign(static_cast<size_t>(numel(shape_)), fill);
  }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }
  static Tensor from_vector(Shape shape, std::vector<T> values) {
    check_shape_valid(shape, "Tensor::from_vector");
    if (numel(shape) != static_cast<int64_t>(values.size()))
      throw DimensionError("Tensor::from_vector: " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
  }

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at2(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  const T& at2(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  T& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  // Same data, new shape (element count must match).
  Tensor reshaped(Shape shape) const {
    check_shape_valid(shape, "reshaped");
    if (numel(shape) != size())
      throw DimensionError("reshaped: " + shape_str(shape_) + " -> " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> t;
    std::vector<U> v(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) v[i] = static_cast<U>(data_[i]);
    t = Tensor<U>::from_vector(shape_, std::move(v));
    return t;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* ctx) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(ctx) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// ---- elementwise helpers ----

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F&& f) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = f(pa[i]);
  return out;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* ctx, F&& f) {
  check_same_shape(a, b, ctx);
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "add", [](T x, T y) { return x + y; });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "sub", [](T x, T y) { return x - y; });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "mul", [](T x, T y) { return x * y; });
}
template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return map(a, [c](T x) { return x * c; });
}
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return map(a, [](T x) { return x > T(0) ? x : T(0); });
}
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return map(a, [](T x) { return x < T(0) ? -x : x; });
}

// ---- reductions ----

enum class ReduceOp { Sum, Mean, Max, Min };

inline ReduceOp reduce_op_from_string(const std::string& s) {
  if (s == "sum") return ReduceOp::Sum;
  if (s == "mean") return ReduceOp::Mean;
  if (s == "max") return ReduceOp::Max;
  if (s == "min") return ReduceOp::Min;
  throw ArgumentError("reduce: unknown op '" + s + "'");
}

// Reduce over the given axes; result keeps the remaining axes (scalar shape {1}
// when all axes are reduced). Axes must be unique and in range.
template <class T>
Tensor<T> reduce(const Tensor<T>& t, ReduceOp op, std::vector<int> axes) {
  const int r = t.rank();
  if (t.size() == 0) throw ArgumentError("reduce: empty tensor");
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end())
    throw ArgumentError("reduce: duplicate axis");
  for (int a : axes)
    if (a < 0 || a >= r) throw ArgumentError("reduce: axis " + std::to_string(a) + " out of range for rank " + std::to_string(r));
  if (axes.empty()) throw ArgumentError("reduce: no axes given");

  std::vector<bool> reduced(static_cast<size_t>(r), false);
  for (int a : axes) reduced[static_cast<size_t>(a)] = true;

  Shape out_shape;
  for (int i = 0; i < r; ++i)
    if (!reduced[static_cast<size_t>(i)]) out_shape.push_back(t.dim(i));
  if (out_shape.empty()) out_shape = {1};

  // Strides of the input.
  std::vector<int64_t> stride(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) stride[static_cast<size_t>(i)] = stride[static_cast<size_t>(i + 1)] * t.dim(i + 1);

  std::vector<int> kept, red;
  for (int i = 0; i < r; ++i) (reduced[static_cast<size_t>(i)] ? red : kept).push_back(i);

  int64_t n_out = numel(out_shape);
  int64_t n_red = 1;
  for (int a : red) n_red *= t.dim(a);

  Tensor<T> out(out_shape);
  const T* src = t.data();
  T* dst = out.data();

  std::vector<int64_t> kept_idx(kept.size(), 0);
  for (int64_t o = 0; o < n_out; ++o) {
    // Decode output index o into per-axis indices of the kept axes.
    int64_t rem = o;
    for (size_t i = 0; i < kept.size(); ++i) {
      int64_t extent_rest = 1;
      for (size_t j = i + 1; j < kept.size(); ++j) extent_rest *= t.dim(kept[j]);
      kept_idx[i] = rem / extent_rest;
      rem %= extent_rest;
    }
    int64_t base = 0;
    for (size_t i = 0; i < kept.size(); ++i) base += kept_idx[i] * stride[static_cast<size_t>(kept[i])];

    // Walk the reduced axes in row-major order.
    T acc = T(0);
    bool first = true;
    std::vector<int64_t> red_idx(red.size(), 0);
    for (int64_t k = 0; k < n_red; ++k) {
      int64_t off = base;
      for (size_t i = 0; i < red.size(); ++i) off += red_idx[i] * stride[static_cast<size_t>(red[i])];
      T v = src[off];
      if (first) {
        acc = v;
        first = false;
      } else {
        switch (op) {
          case ReduceOp::Sum:
          case ReduceOp::Mean: acc += v; break;
          case ReduceOp::Max: acc = v > acc ? v : acc; break;
          case ReduceOp::Min: acc = v < acc ? v : acc; break;
        }
      }
      for (int i = static_cast<int>(red.size()) - 1; i >= 0; --i) {
        if (++red_idx[static_cast<size_t>(i)] < t.dim(red[static_cast<size_t>(i)])) break;
        red_idx[static_cast<size_t>(i)] = 0;
      }
    }
    dst[o] = (op == ReduceOp::Mean) ? acc / static_cast<T>(n_red) : acc;
  }
  return out;
}

template <class T>
T sum_all(const Tensor<T>& t) {
  const T* p = t.data();
  T acc = T(0);
  for (int64_t i = 0; i < t.size(); ++i) acc += p[i];
  return acc;
}
template <class T>
T mean_all(const Tensor<T>& t) {
  if (t.size() == 0) throw ArgumentError("mean_all: empty tensor");
  return sum_all(t) / static_cast<T>(t.size());
}
template <class T>
T max_abs(const Tensor<T>& t) {
  T m = T(0);
  const T* p = t.data();
  for (int64_t i = 0; i < t.size(); ++i) {
    T v = p[i] < T(0) ? -p[i] : p[i];
    if (v > m) m = v;
  }
  return m;
}

// ---- matmul ----

// C[m x n] = A[m x k] * B[k x n].  For each output element the k terms are
// accumulated in ascending k order.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c(Shape{m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (int64_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// ---- conv2d geometry ----

struct Conv2dGeom {
  int64_t n = 0, c_in = 0, h = 0, w = 0;
  int64_t c_out = 0, k = 0, stride = 1, pad = 0;
  int64_t h_out = 0, w_out = 0;
  int64_t patch() const { return c_in * k * k; }   // unrolled row length
  int64_t sites() const { return h_out * w_out; }  // output spatial positions
};

inline Conv2dGeom conv2d_geometry(const Shape& x, const Shape& kernel, int64_t stride, int64_t pad) {
  if (x.size() != 4) throw DimensionError("conv2d: input must be NCHW, got " + shape_str(x));
  if (kernel.size() != 4) throw DimensionError("conv2d: kernel must be [c_out,c_in,k,k], got " + shape_str(kernel));
  if (kernel[2] != kernel[3]) throw DimensionError("conv2d: only square kernels supported");
  if (kernel[1] != x[1])
    throw DimensionError("conv2d: channel mismatch, input " + shape_str(x) + " kernel " + shape_str(kernel));
  if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
  if (pad < 0) throw ArgumentError("conv2d: padding must be >= 0");
  Conv2dGeom g;
  g.n = x[0];
  g.c_in = x[1];
  g.h = x[2];
  g.w = x[3];
  g.c_out = kernel[0];
  g.k = kernel[2];
  g.stride = stride;
  g.pad = pad;
  const int64_t eh = x[2] + 2 * pad - g.k;
  const int64_t ew = x[3] + 2 * pad - g.k;
  if (eh < 0 || ew < 0) throw DimensionError("conv2d: kernel larger than padded input");
  g.h_out = eh / stride + 1;
  g.w_out = ew / stride + 1;
  return g;
}

// Unroll one example into a [patch x sites] matrix.  Row index iterates the
// kernel footprint as (c_in, ky, kx) in row-major order; out-of-bounds taps
// contribute zeros.
template <class T>
void im2col_example(const T* x, const Conv2dGeom& g, T* cols) {
  const int64_t P = g.sites();
  for (int64_t ci = 0; ci < g.c_in; ++ci) {
    for (int64_t ky = 0; ky < g.k; ++ky) {
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const int64_t row = (ci * g.k + ky) * g.k + kx;
        T* dst = cols + row * P;
        for (int64_t oy = 0; oy < g.h_out; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          for (int64_t ox = 0; ox < g.w_out; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            T v = T(0);
            if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) v = x[(ci * g.h + iy) * g.w + ix];
            dst[oy * g.w_out + ox] = v;
          }
        }
      }
    }
  }
}

// Scatter-add of a [patch x sites] gradient back onto one example.
template <class T>
void col2im_example(const T* cols, const Conv2dGeom& g, T* dx) {
  const int64_t P = g.sites();
  for (int64_t ci = 0; ci < g.c_in; ++ci) {
    for (int64_t ky = 0; ky < g.k; ++ky) {
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const int64_t row = (ci * g.k + ky) * g.k + kx;
        const T* src = cols + row * P;
        for (int64_t oy = 0; oy < g.h_out; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t ox = 0; ox < g.w_out; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            dx[(ci * g.h + iy) * g.w + ix] += src[oy * g.w_out + ox];
          }
        }
      }
    }
  }
}

// Eager convolution: im2col, then per output element accumulate the patch
// terms in ascending row order, bias added last.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, int64_t stride,
                 int64_t pad) {
  Conv2dGeom g = conv2d_geometry(x.shape(), kernel.shape(), stride, pad);
  if (bias.size() != g.c_out) throw DimensionError("conv2d: bias size must equal c_out");
  const int64_t J = g.patch(), P = g.sites();
  Tensor<T> out(Shape{g.n, g.c_out, g.h_out, g.w_out});
  std::vector<T> cols(static_cast<size_t>(J * P));
  const T* pk = kernel.data();
  const T* pb = bias.data();
  for (int64_t n = 0; n < g.n; ++n) {
    im2col_example(x.data() + n * g.c_in * g.h * g.w, g, cols.data());
    T* o = out.data() + n * g.c_out * P;
    for (int64_t co = 0; co < g.c_out; ++co) {
      T* orow = o + co * P;
      for (int64_t j = 0; j < J; ++j) {
        const T kv = pk[co * J + j];
        const T* crow = cols.data() + j * P;
        for (int64_t p = 0; p < P; ++p) orow[p] += kv * crow[p];
      }
      for (int64_t p = 0; p < P; ++p) orow[p] += pb[co];
    }
  }
  return out;
}

}  // namespace certkit
