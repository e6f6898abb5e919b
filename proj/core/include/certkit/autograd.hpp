#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "certkit/errors.hpp"
#include "certkit/tensor.hpp"

namespace certkit {

template <class T>
struct Node;
template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool has_grad = false;
  bool recorded = false;
  const char* op = "leaf";
  std::string name;
  std::vector<NodePtr<T>> parents;
  std::function<void(Node<T>&)> pullback;

  Tensor<T>& ensure_grad() {
    if (grad.size() == 0) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// Returns the gradient buffer of a parent, or nullptr when gradient does not
// flow into it.  Marks the parent as carrying gradient.
template <class T>
inline Tensor<T>* grad_dst(const NodePtr<T>& p) {
  if (!p->requires_grad) return nullptr;
  Tensor<T>& g = p->ensure_grad();
  p->has_grad = true;
  return &g;
}

// Reverse-mode tape.  Construction makes it the current recording scope for
// this thread; destruction restores the previous one.  Ops only record while
// a tape is current and some input requires gradient; values are computed
// either way.
template <class T>
class Tape {
 public:
  Tape() : prev_(current_) { current_ = this; }
  ~Tape() { current_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }
  void append(NodePtr<T> n) {
    n->recorded = true;
    nodes_.push_back(std::move(n));
  }
  size_t size() const { return nodes_.size(); }

  // Seeds the scalar root with gradient 1 and sweeps the tape in reverse.
  // Single-shot: a second call is a contract violation.
  void backward(const NodePtr<T>& root) {
    if (spent_) throw ContractError("backward: tape already consumed");
    if (!root) throw ContractError("backward: null root");
    if (root->value.size() != 1) throw ContractError("backward: root must be scalar");
    if (!root->requires_grad) throw ContractError("backward: root does not require grad");
    if (!root->recorded) throw ContractError("backward: root was not recorded on this tape");
    spent_ = true;
    root->ensure_grad()[0] = T(1);
    root->has_grad = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.has_grad && n.pullback) n.pullback(n);
    }
  }

  template <class V>
    requires requires(const V& v) { v.node(); }
  void backward(const V& root) {
    backward(root.node());
  }

 private:
  std::vector<NodePtr<T>> nodes_;
  Tape* prev_;
  bool spent_ = false;
  static inline thread_local Tape* current_ = nullptr;
};

// Handle to a node.  Cheap to copy.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> n) : n_(std::move(n)) {}

  static Var leaf(Tensor<T> v, bool requires_grad = false, std::string name = {}) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    if (requires_grad && Tape<T>::current()) Tape<T>::current()->append(n);
    return Var(n);
  }
  static Var constant(Tensor<T> v) { return leaf(std::move(v), false); }
  static Var scalar(T v, bool requires_grad = false) {
    return leaf(Tensor<T>::scalar(v), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const NodePtr<T>& node() const { return n_; }
  const Tensor<T>& value() const { return n_->value; }
  const Tensor<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool has_grad() const { return n_ && n_->has_grad; }
  const Shape& shape() const { return n_->value.shape(); }

  T item() const {
    if (n_->value.size() != 1) throw ContractError("item: tensor is not scalar");
    return n_->value[0];
  }
  T grad_item() const {
    if (!n_->has_grad) return T(0);
    return n_->grad[0];
  }

 private:
  NodePtr<T> n_;
};

template <class T>
Var<T> make_op(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> pullback) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  for (const Var<T>& v : inputs) rg = rg || v.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(inputs.size());
    for (const Var<T>& v : inputs) n->parents.push_back(v.node());
    n->pullback = std::move(pullback);
    if (Tape<T>::current()) Tape<T>::current()->append(n);
  }
  return Var<T>(n);
}

// ---- elementwise ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return make_op<T>("add", add(a.value(), b.value()), {a, b}, [](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    for (int k = 0; k < 2; ++k)
      if (Tensor<T>* d = grad_dst(self.parents[static_cast<size_t>(k)]))
        for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return make_op<T>("sub", sub(a.value(), b.value()), {a, b}, [](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
    if (Tensor<T>* d = grad_dst(self.parents[1]))
      for (int64_t i = 0; i < g.size(); ++i) (*d)[i] -= g[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return make_op<T>("mul", mul(a.value(), b.value()), {a, b}, [](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * bv[i];
    if (Tensor<T>* d = grad_dst(self.parents[1]))
      for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * av[i];
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return make_op<T>("div", zip(a.value(), b.value(), "div", [](T x, T y) { return x / y; }), {a, b},
                    [](Node<T>& self) {
                      const Tensor<T>& g = self.grad;
                      const Tensor<T>& out = self.value;
                      const Tensor<T>& bv = self.parents[1]->value;
                      if (Tensor<T>* d = grad_dst(self.parents[0]))
                        for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] / bv[i];
                      if (Tensor<T>* d = grad_dst(self.parents[1]))
                        for (int64_t i = 0; i < g.size(); ++i) (*d)[i] -= g[i] * out[i] / bv[i];
                    });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return make_op<T>("neg", map(a.value(), [](T x) { return -x; }), {a}, [](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < g.size(); ++i) (*d)[i] -= g[i];
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return make_op<T>("add_scalar", map(a.value(), [c](T x) { return x + c; }), {a},
                    [](Node<T>& self) {
                      const Tensor<T>& g = self.grad;
                      if (Tensor<T>* d = grad_dst(self.parents[0]))
                        for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                    });
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, T c) {
  return make_op<T>("mul_scalar", map(a.value(), [c](T x) { return x * c; }), {a},
                    [c](Node<T>& self) {
                      const Tensor<T>& g = self.grad;
                      if (Tensor<T>* d = grad_dst(self.parents[0]))
                        for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += c * g[i];
                    });
}

// ReLU with subgradient 0 at the kink.
template <class T>
Var<T> relu(const Var<T>& a) {
  return make_op<T>("relu", relu(a.value()), {a}, [](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& x = self.parents[0]->value;
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) (*d)[i] += g[i];
  });
}

// 1/sqrt(x); requires x > 0.
template <class T>
Var<T> rsqrt(const Var<T>& a) {
  Tensor<T> out = map(a.value(), [](T x) {
    if (!(x > T(0))) throw NumericError("rsqrt: input must be positive");
    return T(1) / std::sqrt(x);
  });
  return make_op<T>("rsqrt", std::move(out), {a}, [](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& v = self.value;
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < g.size(); ++i) (*d)[i] -= T(0.5) * g[i] * v[i] * v[i] * v[i];
  });
}

// Elementwise product with a constant mask (no gradient through the mask).
template <class T>
Var<T> mul_mask(const Var<T>& a, Tensor<T> mask) {
  check_same_shape(a.value(), mask, "mul_mask");
  Tensor<T> out = mul(a.value(), mask);
  return make_op<T>("mul_mask", std::move(out), {a}, [m = std::move(mask)](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * m[i];
  });
}

// ---- reductions ----

template <class T>
Var<T> sum_all(const Var<T>& a) {
  return make_op<T>("sum_all", Tensor<T>::scalar(sum_all(a.value())), {a}, [](Node<T>& self) {
    const T g = self.grad[0];
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < d->size(); ++i) (*d)[i] += g;
  });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
  return make_op<T>("mean_all", Tensor<T>::scalar(mean_all(a.value())), {a}, [](Node<T>& self) {
    const T g = self.grad[0] / static_cast<T>(self.parents[0]->value.size());
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < d->size(); ++i) (*d)[i] += g;
  });
}

namespace detail {
// Decomposes an activation shape into (channels, per-channel count, spatial)
// for channel-broadcast ops: rank 2 is [N, C], rank 4 is [N, C, H, W].
struct ChanDims {
  int64_t n, c, sp;
};
inline ChanDims chan_dims(const Shape& s, const char* ctx) {
  if (s.size() == 2) return {s[0], s[1], 1};
  if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
  throw DimensionError(std::string(ctx) + ": expected rank 2 or 4, got " + shape_str(s));
}
}  // namespace detail

// Mean over batch (and spatial dims for rank 4), one value per channel.
template <class T>
Var<T> channel_mean(const Var<T>& x) {
  const auto d = detail::chan_dims(x.shape(), "channel_mean");
  Tensor<T> out(Shape{d.c});
  const T* px = x.value().data();
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t c = 0; c < d.c; ++c) {
      const T* row = px + (n * d.c + c) * d.sp;
      T acc = T(0);
      for (int64_t s = 0; s < d.sp; ++s) acc += row[s];
      out[c] += acc;
    }
  const T inv = T(1) / static_cast<T>(d.n * d.sp);
  for (int64_t c = 0; c < d.c; ++c) out[c] *= inv;
  return make_op<T>("channel_mean", std::move(out), {x}, [d, inv](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (Tensor<T>* dx = grad_dst(self.parents[0])) {
      T* p = dx->data();
      for (int64_t n = 0; n < d.n; ++n)
        for (int64_t c = 0; c < d.c; ++c) {
          const T gc = g[c] * inv;
          T* row = p + (n * d.c + c) * d.sp;
          for (int64_t s = 0; s < d.sp; ++s) row[s] += gc;
        }
    }
  });
}

namespace detail {
template <class T>
Tensor<T> bc_apply(const Tensor<T>& x, const Tensor<T>& v, bool multiply, const char* ctx) {
  const auto d = chan_dims(x.shape(), ctx);
  if (v.rank() != 1 || v.dim(0) != d.c)
    throw DimensionError(std::string(ctx) + ": channel vector " + shape_str(v.shape()) +
                         " does not match " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t c = 0; c < d.c; ++c) {
      const T vc = v[c];
      const T* row = px + (n * d.c + c) * d.sp;
      T* orow = po + (n * d.c + c) * d.sp;
      if (multiply)
        for (int64_t s = 0; s < d.sp; ++s) orow[s] = row[s] * vc;
      else
        for (int64_t s = 0; s < d.sp; ++s) orow[s] = row[s] + vc;
    }
  return out;
}
}  // namespace detail

// x * v[c], broadcasting the channel vector over batch and spatial dims.
template <class T>
Var<T> bc_mul(const Var<T>& x, const Var<T>& v) {
  const auto d = detail::chan_dims(x.shape(), "bc_mul");
  return make_op<T>("bc_mul", detail::bc_apply(x.value(), v.value(), true, "bc_mul"), {x, v},
                    [d](Node<T>& self) {
                      const Tensor<T>& g = self.grad;
                      const Tensor<T>& xv = self.parents[0]->value;
                      const Tensor<T>& vv = self.parents[1]->value;
                      Tensor<T>* dx = grad_dst(self.parents[0]);
                      Tensor<T>* dv = grad_dst(self.parents[1]);
                      for (int64_t n = 0; n < d.n; ++n)
                        for (int64_t c = 0; c < d.c; ++c) {
                          const int64_t base = (n * d.c + c) * d.sp;
                          if (dx) {
                            const T vc = vv[c];
                            for (int64_t s = 0; s < d.sp; ++s) (*dx)[base + s] += g[base + s] * vc;
                          }
                          if (dv) {
                            T acc = T(0);
                            for (int64_t s = 0; s < d.sp; ++s) acc += g[base + s] * xv[base + s];
                            (*dv)[c] += acc;
                          }
                        }
                    });
}

// x + v[c], broadcasting the channel vector over batch and spatial dims.
template <class T>
Var<T> bc_add(const Var<T>& x, const Var<T>& v) {
  const auto d = detail::chan_dims(x.shape(), "bc_add");
  return make_op<T>("bc_add", detail::bc_apply(x.value(), v.value(), false, "bc_add"), {x, v},
                    [d](Node<T>& self) {
                      const Tensor<T>& g = self.grad;
                      Tensor<T>* dx = grad_dst(self.parents[0]);
                      Tensor<T>* dv = grad_dst(self.parents[1]);
                      for (int64_t n = 0; n < d.n; ++n)
                        for (int64_t c = 0; c < d.c; ++c) {
                          const int64_t base = (n * d.c + c) * d.sp;
                          if (dx)
                            for (int64_t s = 0; s < d.sp; ++s) (*dx)[base + s] += g[base + s];
                          if (dv) {
                            T acc = T(0);
                            for (int64_t s = 0; s < d.sp; ++s) acc += g[base + s];
                            (*dv)[c] += acc;
                          }
                        }
                    });
}

// x - s with a scalar variable broadcast over all elements.
template <class T>
Var<T> sub_scalar_var(const Var<T>& x, const Var<T>& s) {
  if (s.value().size() != 1) throw DimensionError("sub_scalar_var: s must be scalar");
  const T sv = s.value()[0];
  return make_op<T>("sub_scalar_var", map(x.value(), [sv](T v) { return v - sv; }), {x, s},
                    [](Node<T>& self) {
                      const Tensor<T>& g = self.grad;
                      if (Tensor<T>* d = grad_dst(self.parents[0]))
                        for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                      if (Tensor<T>* d = grad_dst(self.parents[1])) {
                        T acc = T(0);
                        for (int64_t i = 0; i < g.size(); ++i) acc += g[i];
                        (*d)[0] -= acc;
                      }
                    });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Shape orig = x.shape();
  return make_op<T>("reshape", x.value().reshaped(std::move(shape)), {x},
                    [orig = std::move(orig)](Node<T>& self) {
                      const Tensor<T>& g = self.grad;
                      if (Tensor<T>* d = grad_dst(self.parents[0]))
                        for (int64_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                    });
}

// min(a, 1/a) elementwise for a >= 0; ties at a == 1 follow the first branch.
template <class T>
Var<T> ratio_sym(const Var<T>& a) {
  Tensor<T> out = map(a.value(), [](T x) { return x <= T(1) ? x : T(1) / x; });
  return make_op<T>("ratio_sym", std::move(out), {a}, [](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& x = self.parents[0]->value;
    if (Tensor<T>* d = grad_dst(self.parents[0]))
      for (int64_t i = 0; i < g.size(); ++i) {
        if (x[i] <= T(1))
          (*d)[i] += g[i];
        else
          (*d)[i] -= g[i] / (x[i] * x[i]);
      }
  });
}

// ---- linear algebra ----

// y[N, r] = x[N, n] * W[r, n]^T.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
    throw DimensionError("linear: incompatible " + shape_str(xv.shape()) + " and " + shape_str(wv.shape()));
  const int64_t N = xv.dim(0), n = xv.dim(1), r = wv.dim(0);
  Tensor<T> out(Shape{N, r});
  for (int64_t e = 0; e < N; ++e) {
    const T* xr = xv.data() + e * n;
    for (int64_t i = 0; i < r; ++i) {
      const T* wr = wv.data() + i * n;
      T acc = T(0);
      for (int64_t j = 0; j < n; ++j) acc += xr[j] * wr[j];
      out[e * r + i] = acc;
    }
  }
  return make_op<T>("linear", std::move(out), {x, w}, [N, n, r](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& xv = self.parents[0]->value;
    const Tensor<T>& wv = self.parents[1]->value;
    if (Tensor<T>* dx = grad_dst(self.parents[0])) {
      for (int64_t e = 0; e < N; ++e) {
        T* dxr = dx->data() + e * n;
        for (int64_t i = 0; i < r; ++i) {
          const T gv = g[e * r + i];
          if (gv == T(0)) continue;
          const T* wr = wv.data() + i * n;
          for (int64_t j = 0; j < n; ++j) dxr[j] += gv * wr[j];
        }
      }
    }
    if (Tensor<T>* dw = grad_dst(self.parents[1])) {
      for (int64_t e = 0; e < N; ++e) {
        const T* xr = xv.data() + e * n;
        for (int64_t i = 0; i < r; ++i) {
          const T gv = g[e * r + i];
          if (gv == T(0)) continue;
          T* dwr = dw->data() + i * n;
          for (int64_t j = 0; j < n; ++j) dwr[j] += gv * xr[j];
        }
      }
    }
  });
}

// C = A * B for rank-2 operands.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = matmul(a.value(), b.value());
  const int64_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  return make_op<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (Tensor<T>* da = grad_dst(self.parents[0])) {
      // dA = g * B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const T gv = g[i * n + j];
          if (gv == T(0)) continue;
          for (int64_t p = 0; p < k; ++p) (*da)[i * k + p] += gv * bv[p * n + j];
        }
    }
    if (Tensor<T>* db = grad_dst(self.parents[1])) {
      // dB = A^T * g
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          const T av_ = av[i * k + p];
          if (av_ == T(0)) continue;
          for (int64_t j = 0; j < n; ++j) (*db)[p * n + j] += av_ * g[i * n + j];
        }
    }
  });
}

// ---- interval affine halves ----
//
// half(W, b, A, B)[e, i] = sum_j w_ij * (w_ij > 0 ? A[e, j] : B[e, j]) + b[i],
// with j ascending and the bias added last.  The lower bound of an interval
// affine layer is half(W, b, lo, hi); the upper bound is half(W, b, hi, lo).
template <class T>
Var<T> ibp_linear_half(const Var<T>& w, const Var<T>& b, const Var<T>& a_sel, const Var<T>& b_sel) {
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = b.value();
  const Tensor<T>& av = a_sel.value();
  const Tensor<T>& bv2 = b_sel.value();
  check_same_shape(av, bv2, "ibp_linear_half");
  if (wv.rank() != 2 || av.rank() != 2 || wv.dim(1) != av.dim(1))
    throw DimensionError("ibp_linear_half: incompatible " + shape_str(wv.shape()) + " and " +
                         shape_str(av.shape()));
  const int64_t N = av.dim(0), n = av.dim(1), r = wv.dim(0);
  if (bv.size() != r) throw DimensionError("ibp_linear_half: bias size must equal rows of W");
  Tensor<T> out(Shape{N, r});
  for (int64_t e = 0; e < N; ++e) {
    const T* pa = av.data() + e * n;
    const T* pb = bv2.data() + e * n;
    for (int64_t i = 0; i < r; ++i) {
      const T* wr = wv.data() + i * n;
      T acc = T(0);
      for (int64_t j = 0; j < n; ++j) acc += wr[j] * (wr[j] > T(0) ? pa[j] : pb[j]);
      acc += bv[i];
      out[e * r + i] = acc;
    }
  }
  return make_op<T>("ibp_linear_half", std::move(out), {w, b, a_sel, b_sel},
                    [N, n, r](Node<T>& self) {
                      const Tensor<T>& g = self.grad;
                      const Tensor<T>& wv = self.parents[0]->value;
                      const Tensor<T>& av = self.parents[2]->value;
                      const Tensor<T>& bv2 = self.parents[3]->value;
                      Tensor<T>* dw = grad_dst(self.parents[0]);
                      Tensor<T>* db = grad_dst(self.parents[1]);
                      Tensor<T>* da = grad_dst(self.parents[2]);
                      Tensor<T>* dbs = grad_dst(self.parents[3]);
                      for (int64_t e = 0; e < N; ++e) {
                        const T* pa = av.data() + e * n;
                        const T* pb = bv2.data() + e * n;
                        for (int64_t i = 0; i < r; ++i) {
                          const T gv = g[e * r + i];
                          if (gv == T(0)) continue;
                          const T* wr = wv.data() + i * n;
                          if (db) (*db)[i] += gv;
                          for (int64_t j = 0; j < n; ++j) {
                            const bool pos = wr[j] > T(0);
                            if (dw) (*dw)[i * n + j] += gv * (pos ? pa[j] : pb[j]);
                            if (pos) {
                              if (da) (*da)[e * n + j] += gv * wr[j];
                            } else {
                              if (dbs) (*dbs)[e * n + j] += gv * wr[j];
                            }
                          }
                        }
                      }
                    });
}

// ---- convolution ----

// Unrolls NCHW input into [N, patch, sites] column matrices.
template <class T>
Var<T> im2col(const Var<T>& x, const Conv2dGeom& g) {
  const int64_t J = g.patch(), P = g.sites();
  Tensor<T> out(Shape{g.n, J, P});
  for (int64_t n = 0; n < g.n; ++n)
    im2col_example(x.value().data() + n * g.c_in * g.h * g.w, g, out.data() + n * J * P);
  return make_op<T>("im2col", std::move(out), {x}, [g, J, P](Node<T>& self) {
    if (Tensor<T>* dx = grad_dst(self.parents[0]))
      for (int64_t n = 0; n < g.n; ++n)
        col2im_example(self.grad.data() + n * J * P, g, dx->data() + n * g.c_in * g.h * g.w);
  });
}

// out[n, co, p] = sum_j K[co, j] * cols[n, j, p]; kernel given as
// [c_out, c_in, k, k], flattened rows match the im2col row order.
template <class T>
Var<T> conv_cols(const Var<T>& kernel, const Var<T>& cols, const Conv2dGeom& g) {
  const int64_t J = g.patch(), P = g.sites();
  Tensor<T> out(Shape{g.n, g.c_out, g.h_out, g.w_out});
  const T* pk = kernel.value().data();
  for (int64_t n = 0; n < g.n; ++n) {
    const T* pc = cols.value().data() + n * J * P;
    T* po = out.data() + n * g.c_out * P;
    for (int64_t co = 0; co < g.c_out; ++co) {
      T* orow = po + co * P;
      for (int64_t j = 0; j < J; ++j) {
        const T kv = pk[co * J + j];
        const T* crow = pc + j * P;
        for (int64_t p = 0; p < P; ++p) orow[p] += kv * crow[p];
      }
    }
  }
  return make_op<T>("conv_cols", std::move(out), {kernel, cols}, [g, J, P](Node<T>& self) {
    const Tensor<T>& gr = self.grad;
    const Tensor<T>& kv = self.parents[0]->value;
    const Tensor<T>& cv = self.parents[1]->value;
    Tensor<T>* dk = grad_dst(self.parents[0]);
    Tensor<T>* dc = grad_dst(self.parents[1]);
    for (int64_t n = 0; n < g.n; ++n) {
      const T* pg = gr.data() + n * g.c_out * P;
      const T* pc = cv.data() + n * J * P;
      for (int64_t co = 0; co < g.c_out; ++co) {
        const T* grow = pg + co * P;
        for (int64_t j = 0; j < J; ++j) {
          if (dk) {
            T acc = T(0);
            const T* crow = pc + j * P;
            for (int64_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
            (*dk)[co * J + j] += acc;
          }
          if (dc) {
            const T kvv = kv[co * J + j];
            if (kvv != T(0)) {
              T* drow = dc->data() + n * J * P + j * P;
              for (int64_t p = 0; p < P; ++p) drow[p] += kvv * grow[p];
            }
          }
        }
      }
    }
  });
}

// Interval convolution half over pre-unrolled bounds:
// out[n, co, p] = sum_j K[co, j] * (K[co, j] > 0 ? colsA : colsB)[n, j, p] + b[co].
template <class T>
Var<T> ibp_conv_half(const Var<T>& kernel, const Var<T>& b, const Var<T>& cols_a,
                     const Var<T>& cols_b, const Conv2dGeom& g) {
  const int64_t J = g.patch(), P = g.sites();
  check_same_shape(cols_a.value(), cols_b.value(), "ibp_conv_half");
  if (b.value().size() != g.c_out) throw DimensionError("ibp_conv_half: bias size must equal c_out");
  Tensor<T> out(Shape{g.n, g.c_out, g.h_out, g.w_out});
  const T* pk = kernel.value().data();
  const T* pb = b.value().data();
  for (int64_t n = 0; n < g.n; ++n) {
    const T* pa = cols_a.value().data() + n * J * P;
    const T* pb2 = cols_b.value().data() + n * J * P;
    T* po = out.data() + n * g.c_out * P;
    for (int64_t co = 0; co < g.c_out; ++co) {
      T* orow = po + co * P;
      for (int64_t j = 0; j < J; ++j) {
        const T kv = pk[co * J + j];
        const T* crow = (kv > T(0) ? pa : pb2) + j * P;
        for (int64_t p = 0; p < P; ++p) orow[p] += kv * crow[p];
      }
      for (int64_t p = 0; p < P; ++p) orow[p] += pb[co];
    }
  }
  return make_op<T>("ibp_conv_half", std::move(out), {kernel, b, cols_a, cols_b},
                    [g, J, P](Node<T>& self) {
                      const Tensor<T>& gr = self.grad;
                      const Tensor<T>& kv = self.parents[0]->value;
                      const Tensor<T>& av = self.parents[2]->value;
                      const Tensor<T>& bv2 = self.parents[3]->value;
                      Tensor<T>* dk = grad_dst(self.parents[0]);
                      Tensor<T>* db = grad_dst(self.parents[1]);
                      Tensor<T>* da = grad_dst(self.parents[2]);
                      Tensor<T>* dbs = grad_dst(self.parents[3]);
                      for (int64_t n = 0; n < g.n; ++n) {
                        const T* pg = gr.data() + n * g.c_out * P;
                        for (int64_t co = 0; co < g.c_out; ++co) {
                          const T* grow = pg + co * P;
                          if (db) {
                            T acc = T(0);
                            for (int64_t p = 0; p < P; ++p) acc += grow[p];
                            (*db)[co] += acc;
                          }
                          for (int64_t j = 0; j < J; ++j) {
                            const T kvv = kv[co * J + j];
                            const bool pos = kvv > T(0);
                            const T* sel =
                                (pos ? av.data() : bv2.data()) + n * J * P + j * P;
                            if (dk) {
                              T acc = T(0);
                              for (int64_t p = 0; p < P; ++p) acc += grow[p] * sel[p];
                              (*dk)[co * J + j] += acc;
                            }
                            if (kvv != T(0)) {
                              Tensor<T>* dsel = pos ? da : dbs;
                              if (dsel) {
                                T* drow = dsel->data() + n * J * P + j * P;
                                for (int64_t p = 0; p < P; ++p) drow[p] += kvv * grow[p];
                              }
                            }
                          }
                        }
                      }
                    });
}

// ---- margins and robust loss ----

// Lower bounds on the margins logit[y] - logit[i] of the final affine layer,
// computed on the merged weight rows (w_y - w_i) so the subtraction is exact
// rather than interval-widening.  Output columns enumerate i != y ascending.
template <class T>
Var<T> elide_margins(const Var<T>& w, const Var<T>& b, const Var<T>& zl, const Var<T>& zu,
                     std::vector<int64_t> labels) {
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = b.value();
  const Tensor<T>& lv = zl.value();
  const Tensor<T>& uv = zu.value();
  check_same_shape(lv, uv, "elide_margins");
  if (wv.rank() != 2 || lv.rank() != 2 || wv.dim(1) != lv.dim(1))
    throw DimensionError("elide_margins: incompatible " + shape_str(wv.shape()) + " and " +
                         shape_str(lv.shape()));
  const int64_t K = wv.dim(0), n = wv.dim(1), N = lv.dim(0);
  if (static_cast<int64_t>(labels.size()) != N)
    throw DimensionError("elide_margins: labels size must equal batch size");
  for (int64_t y : labels)
    if (y < 0 || y >= K) throw ArgumentError("elide_margins: label out of range");
  if (K < 2) throw ArgumentError("elide_margins: need at least 2 classes");
  Tensor<T> out(Shape{N, K - 1});
  for (int64_t e = 0; e < N; ++e) {
    const int64_t y = labels[static_cast<size_t>(e)];
    const T* wy = wv.data() + y * n;
    const T* pl = lv.data() + e * n;
    const T* pu = uv.data() + e * n;
    int64_t col = 0;
    for (int64_t i = 0; i < K; ++i) {
      if (i == y) continue;
      const T* wi = wv.data() + i * n;
      T acc = T(0);
      for (int64_t j = 0; j < n; ++j) {
        const T wd = wy[j] - wi[j];
        acc += wd * (wd > T(0) ? pl[j] : pu[j]);
      }
      acc += bv[y] - bv[i];
      out[e * (K - 1) + col] = acc;
      ++col;
    }
  }
  return make_op<T>(
      "elide_margins", std::move(out), {w, b, zl, zu},
      [K, n, N, labels = std::move(labels)](Node<T>& self) {
        const Tensor<T>& g = self.grad;
        const Tensor<T>& wv = self.parents[0]->value;
        const Tensor<T>& lv = self.parents[2]->value;
        const Tensor<T>& uv = self.parents[3]->value;
        Tensor<T>* dw = grad_dst(self.parents[0]);
        Tensor<T>* db = grad_dst(self.parents[1]);
        Tensor<T>* dl = grad_dst(self.parents[2]);
        Tensor<T>* du = grad_dst(self.parents[3]);
        for (int64_t e = 0; e < N; ++e) {
          const int64_t y = labels[static_cast<size_t>(e)];
          const T* wy = wv.data() + y * n;
          const T* pl = lv.data() + e * n;
          const T* pu = uv.data() + e * n;
          int64_t col = 0;
          for (int64_t i = 0; i < K; ++i) {
            if (i == y) continue;
            const T gv = g[e * (K - 1) + col];
            ++col;
            if (gv == T(0)) continue;
            const T* wi = wv.data() + i * n;
            if (db) {
              (*db)[y] += gv;
              (*db)[i] -= gv;
            }
            for (int64_t j = 0; j < n; ++j) {
              const T wd = wy[j] - wi[j];
              const bool pos = wd > T(0);
              const T zsel = pos ? pl[j] : pu[j];
              if (dw) {
                (*dw)[y * n + j] += gv * zsel;
                (*dw)[i * n + j] -= gv * zsel;
              }
              if (pos) {
                if (dl) (*dl)[e * n + j] += gv * wd;
              } else {
                if (du) (*du)[e * n + j] += gv * wd;
              }
            }
          }
        }
      });
}

// Batch mean of log(1 + sum_i exp(-m_i)) over margin rows, evaluated as a
// stable logsumexp over {0, -m_0, ..., -m_{K-2}}.
template <class T>
Var<T> robust_ce(const Var<T>& margins) {
  const Tensor<T>& mv = margins.value();
  if (mv.rank() != 2) throw DimensionError("robust_ce: margins must be rank 2");
  const int64_t N = mv.dim(0), C = mv.dim(1);
  T total = T(0);
  for (int64_t e = 0; e < N; ++e) {
    const T* row = mv.data() + e * C;
    T mx = T(0);
    for (int64_t i = 0; i < C; ++i)
      if (-row[i] > mx) mx = -row[i];
    T s = std::exp(-mx);
    for (int64_t i = 0; i < C; ++i) s += std::exp(-row[i] - mx);
    total += mx + std::log(s);
  }
  total /= static_cast<T>(N);
  return make_op<T>("robust_ce", Tensor<T>::scalar(total), {margins}, [N, C](Node<T>& self) {
    const T g = self.grad[0] / static_cast<T>(N);
    const Tensor<T>& mv = self.parents[0]->value;
    if (Tensor<T>* dm = grad_dst(self.parents[0])) {
      for (int64_t e = 0; e < N; ++e) {
        const T* row = mv.data() + e * C;
        T mx = T(0);
        for (int64_t i = 0; i < C; ++i)
          if (-row[i] > mx) mx = -row[i];
        T s = std::exp(-mx);
        for (int64_t i = 0; i < C; ++i) s += std::exp(-row[i] - mx);
        for (int64_t i = 0; i < C; ++i)
          (*dm)[e * C + i] -= g * std::exp(-row[i] - mx) / s;
      }
    }
  });
}

// ---- mask digests ----

// FNV-1a digest over the discrete decisions of a forward pass (weight signs,
// ReLU states, branch selections).  Two parameter settings with equal digests
// share every non-differentiable branch, which finite differences require.
struct MaskHasher {
  uint64_t h = 1469598103934665603ull;
  void feed(uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ull;
    }
  }
  void bit(bool b) { feed(b ? 0x9Eull : 0x3Cull); }
  template <class T>
  void sign_mask(const Tensor<T>& t) {
    uint64_t acc = 0;
    int fill = 0;
    for (int64_t i = 0; i < t.size(); ++i) {
      acc = (acc << 1) | (t[i] > T(0) ? 1u : 0u);
      if (++fill == 64) {
        feed(acc);
        acc = 0;
        fill = 0;
      }
    }
    feed(acc ^ static_cast<uint64_t>(t.size()));
  }
};

}  // namespace certkit
