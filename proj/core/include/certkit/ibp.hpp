#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "certkit/autograd.hpp"
#include "certkit/errors.hpp"
#include "certkit/net.hpp"
#include "certkit/tensor.hpp"

namespace certkit {

// Input domain: raw pixel clip range plus per-channel normalization applied
// after clipping.  `mean`/`std` may have one entry to share across channels.
template <class T>
struct InputSpec {
  T clip_lo = T(0), clip_hi = T(1);
  std::vector<T> mean{T(0)};
  std::vector<T> std{T(1)};

  T mean_of(int64_t c) const { return mean.size() == 1 ? mean[0] : mean.at(static_cast<size_t>(c)); }
  T std_of(int64_t c) const { return std.size() == 1 ? std[0] : std.at(static_cast<size_t>(c)); }
  void check(int64_t channels) const {
    if (!(clip_lo <= clip_hi)) throw ArgumentError("input spec: clip_lo must be <= clip_hi");
    if (mean.size() != 1 && mean.size() != static_cast<size_t>(channels))
      throw DimensionError("input spec: mean size must be 1 or the channel count");
    if (std.size() != 1 && std.size() != static_cast<size_t>(channels))
      throw DimensionError("input spec: std size must be 1 or the channel count");
    for (T s : std)
      if (!(s > T(0))) throw ArgumentError("input spec: std must be > 0");
  }
};

template <class T>
struct InputInterval {
  Tensor<T> clean, lower, upper;  // normalized
};

// Clips the eps-ball around x to the valid pixel range, then normalizes all
// three tensors per channel.
template <class T>
InputInterval<T> input_interval(const Tensor<T>& x, T eps, const InputSpec<T>& spec) {
  if (x.rank() != 4) throw DimensionError("input_interval: x must be NCHW, got " + shape_str(x.shape()));
  if (!(eps >= T(0))) throw ArgumentError("input_interval: eps must be >= 0");
  spec.check(x.dim(1));
  const int64_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  InputInterval<T> out{Tensor<T>(x.shape()), Tensor<T>(x.shape()), Tensor<T>(x.shape())};
  const T* px = x.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T mu = spec.mean_of(c);
      const T inv = T(1) / spec.std_of(c);
      const int64_t base = (n * C + c) * S;
      for (int64_t s = 0; s < S; ++s) {
        const T v = px[base + s];
        const T cl = std::min(std::max(v, spec.clip_lo), spec.clip_hi);
        const T lo = std::min(std::max(v - eps, spec.clip_lo), spec.clip_hi);
        const T hi = std::min(std::max(v + eps, spec.clip_lo), spec.clip_hi);
        out.clean[base + s] = (cl - mu) * inv;
        out.lower[base + s] = (lo - mu) * inv;
        out.upper[base + s] = (hi - mu) * inv;
      }
    }
  return out;
}

// Per-neuron ReLU input state.
enum class ReluState : uint8_t { Inactive = 0, Active = 1, Unstable = 2 };

// Classifies from bounds; boundary cases resolve in the order
// inactive (upper <= 0), then active (lower >= 0), else unstable.
template <class T>
ReluState classify_relu(T lower, T upper) {
  if (upper <= T(0)) return ReluState::Inactive;
  if (lower >= T(0)) return ReluState::Active;
  return ReluState::Unstable;
}

// One bound-propagation stage: the value a ReLU consumes (after batchnorm
// when present) plus the post-activation interval.
template <class T>
struct TraceEntry {
  Var<T> pre_lower, pre_upper;
  Var<T> post_lower, post_upper;
  Var<T> clean_pre;
  Var<T> center;      // (pre_lower + pre_upper) / 2
  Var<T> delta_mean;  // scalar mean of pre_upper - pre_lower
  Tensor<uint8_t> state;
};

template <class T>
struct BnStatsUsed {
  std::string prefix;
  Tensor<T> mean, var;  // statistics the layer normalized with
};

template <class T>
struct BoundTrace {
  TraceEntry<T> input;                // stage 0: the normalized input box
  std::vector<TraceEntry<T>> hidden;  // stages 1..m, one per ReLU
  Var<T> clean_logits;                // [N, K]
  Var<T> margins;                     // [N, K-1] when labels were given
  Var<T> final_lower, final_upper;    // naive classifier bounds when requested
  Var<T> final_w, final_b;            // classifier parameter leaves
  Var<T> last_lower, last_upper;      // classifier input bounds (flattened)
  std::vector<BnStatsUsed<T>> bn_stats;
  std::map<std::string, Var<T>> param_vars;  // leaves bound this pass
  uint64_t mask_digest = 0;
  int64_t batch = 0;
};

struct PropagateOptions {
  bool train_mode = true;      // batch statistics vs running statistics
  bool update_running = false; // EMA-update running stats from this batch
  bool train_params = false;   // bind parameters with requires_grad
  const std::vector<int64_t>* labels = nullptr;
  bool want_final_bounds = false;
  MaskHasher* hasher = nullptr;
};

namespace detail {

template <class T>
void check_finite_layer(const Tensor<T>& t, const LayerSpec& l) {
  if (!t.all_finite())
    throw NumericError(std::string("propagate: non-finite value after ") + layer_kind_name(l.kind) +
                       " layer " + l.param_prefix);
}

template <class T>
Tensor<uint8_t> classify_states(const Tensor<T>& lo, const Tensor<T>& hi) {
  Tensor<uint8_t> s(lo.shape());
  for (int64_t i = 0; i < lo.size(); ++i)
    s[i] = static_cast<uint8_t>(classify_relu(lo[i], hi[i]));
  return s;
}

}  // namespace detail

// Propagates the clean point and the interval through every layer (Eq. IBP:
// lower = W+ z_lo + W- z_hi + b), recording one trace stage per ReLU.  The
// classifier's bounds are not expanded; margins come from elide_margins.
template <class T>
BoundTrace<T> propagate(Network<T>& net, const Tensor<T>& x, T eps, const InputSpec<T>& spec,
                        const PropagateOptions& opts) {
  if (!net.initialized) throw ContractError("propagate: network is not initialized");
  if (x.rank() != 4) throw DimensionError("propagate: x must be NCHW");
  if (Shape{x.dim(1), x.dim(2), x.dim(3)} != net.input_shape)
    throw DimensionError("propagate: input " + shape_str(x.shape()) + " does not match network input " +
                         shape_str(net.input_shape));
  const int64_t N = x.dim(0);

  BoundTrace<T> trace;
  trace.batch = N;

  // Bind parameters as leaves once per pass.
  for (auto& [name, tensor] : net.params)
    trace.param_vars.emplace(name, Var<T>::leaf(tensor, opts.train_params, name));
  auto pvar = [&](const std::string& name) -> const Var<T>& {
    return trace.param_vars.at(name);
  };

  InputInterval<T> box = input_interval(x, eps, spec);
  Var<T> cl = Var<T>::constant(std::move(box.clean));
  Var<T> lo = Var<T>::constant(std::move(box.lower));
  Var<T> hi = Var<T>::constant(std::move(box.upper));

  trace.input.pre_lower = lo;
  trace.input.pre_upper = hi;
  trace.input.post_lower = lo;
  trace.input.post_upper = hi;
  trace.input.clean_pre = cl;
  trace.input.center = mul_scalar(add(lo, hi), T(0.5));
  trace.input.delta_mean = mean_all(sub(hi, lo));

  struct Saved {
    Var<T> cl, lo, hi;
  };
  std::vector<Saved> residual_stack;

  for (size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& l = net.layers[li];
    switch (l.kind) {
      case LayerKind::Dense: {
        const Var<T>& w = pvar(l.param_prefix + ".W");
        const Var<T>& b = pvar(l.param_prefix + ".b");
        if (opts.hasher) opts.hasher->sign_mask(w.value());
        if (l.final_affine) {
          trace.clean_logits = bc_add(linear(cl, w), b);
          trace.final_w = w;
          trace.final_b = b;
          trace.last_lower = lo;
          trace.last_upper = hi;
          if (opts.want_final_bounds) {
            trace.final_lower = ibp_linear_half(w, b, lo, hi);
            trace.final_upper = ibp_linear_half(w, b, hi, lo);
          }
          cl = trace.clean_logits;
        } else {
          Var<T> ncl = bc_add(linear(cl, w), b);
          Var<T> nlo = ibp_linear_half(w, b, lo, hi);
          Var<T> nhi = ibp_linear_half(w, b, hi, lo);
          cl = ncl;
          lo = nlo;
          hi = nhi;
        }
        break;
      }
      case LayerKind::Conv2d: {
        const Var<T>& w = pvar(l.param_prefix + ".W");
        const Var<T>& b = pvar(l.param_prefix + ".b");
        if (opts.hasher) opts.hasher->sign_mask(w.value());
        Conv2dGeom g = conv2d_geometry(Shape{N, l.in_shape[0], l.in_shape[1], l.in_shape[2]},
                                       w.value().shape(), l.stride, l.padding);
        Var<T> cols_c = im2col(cl, g);
        Var<T> cols_l = im2col(lo, g);
        Var<T> cols_u = im2col(hi, g);
        cl = bc_add(conv_cols(w, cols_c, g), b);
        Var<T> nlo = ibp_conv_half(w, b, cols_l, cols_u, g);
        Var<T> nhi = ibp_conv_half(w, b, cols_u, cols_l, g);
        lo = nlo;
        hi = nhi;
        break;
      }
      case LayerKind::BatchNorm: {
        const Var<T>& gamma = pvar(l.param_prefix + ".gamma");
        const Var<T>& beta = pvar(l.param_prefix + ".beta");
        Var<T> mu, var;
        if (opts.train_mode) {
          mu = channel_mean(cl);
          Var<T> d = bc_add(cl, neg(mu));
          var = channel_mean(mul(d, d));
        } else {
          mu = Var<T>::constant(net.buffer(l.param_prefix + ".running_mean"));
          var = Var<T>::constant(net.buffer(l.param_prefix + ".running_var"));
        }
        Var<T> s = mul(gamma, rsqrt(add_scalar(var, static_cast<T>(l.eps))));
        Var<T> t = sub(beta, mul(s, mu));
        // Split the per-channel scale by sign: a negative scale swaps the
        // interval endpoints.
        Tensor<T> pmask(s.shape()), mmask(s.shape());
        for (int64_t i = 0; i < s.value().size(); ++i) {
          const bool pos = s.value()[i] > T(0);
          pmask[i] = pos ? T(1) : T(0);
          mmask[i] = pos ? T(0) : T(1);
        }
        if (opts.hasher) opts.hasher->sign_mask(s.value());
        Var<T> sp = mul_mask(s, std::move(pmask));
        Var<T> sm = mul_mask(s, std::move(mmask));
        Var<T> nlo = bc_add(add(bc_mul(lo, sp), bc_mul(hi, sm)), t);
        Var<T> nhi = bc_add(add(bc_mul(hi, sp), bc_mul(lo, sm)), t);
        cl = bc_add(bc_mul(cl, s), t);
        lo = nlo;
        hi = nhi;
        trace.bn_stats.push_back(BnStatsUsed<T>{l.param_prefix, mu.value(), var.value()});
        if (opts.train_mode && opts.update_running) {
          Tensor<T>& rm = net.buffer(l.param_prefix + ".running_mean");
          Tensor<T>& rv = net.buffer(l.param_prefix + ".running_var");
          const auto dims = detail::chan_dims(cl.shape(), "batchnorm");
          const int64_t count = dims.n * dims.sp;
          const T mom = static_cast<T>(l.momentum);
          const T unbias = count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1) : T(1);
          for (int64_t c = 0; c < rm.size(); ++c) {
            rm[c] = (T(1) - mom) * rm[c] + mom * mu.value()[c];
            rv[c] = (T(1) - mom) * rv[c] + mom * var.value()[c] * unbias;
          }
        }
        break;
      }
      case LayerKind::Relu: {
        TraceEntry<T> entry;
        entry.pre_lower = lo;
        entry.pre_upper = hi;
        entry.clean_pre = cl;
        entry.center = mul_scalar(add(lo, hi), T(0.5));
        entry.delta_mean = mean_all(sub(hi, lo));
        entry.state = detail::classify_states(lo.value(), hi.value());
        if (opts.hasher) {
          for (int64_t i = 0; i < entry.state.size(); ++i) opts.hasher->feed(entry.state[i]);
          opts.hasher->sign_mask(cl.value());
        }
        cl = relu(cl);
        lo = relu(lo);
        hi = relu(hi);
        entry.post_lower = lo;
        entry.post_upper = hi;
        trace.hidden.push_back(std::move(entry));
        break;
      }
      case LayerKind::Flatten: {
        const Shape flat{N, numel(l.out_shape)};
        cl = reshape(cl, flat);
        lo = reshape(lo, flat);
        hi = reshape(hi, flat);
        break;
      }
      case LayerKind::ResidualBegin: {
        residual_stack.push_back(Saved{cl, lo, hi});
        break;
      }
      case LayerKind::ResidualAdd: {
        Saved s = residual_stack.back();
        residual_stack.pop_back();
        cl = add(cl, s.cl);
        lo = add(lo, s.lo);
        hi = add(hi, s.hi);
        break;
      }
    }
    detail::check_finite_layer(cl.value(), l);
    if (!l.final_affine) {
      detail::check_finite_layer(lo.value(), l);
      detail::check_finite_layer(hi.value(), l);
    }
  }

  if (static_cast<int>(trace.hidden.size()) != net.m)
    throw ContractError("propagate: ReLU stage count " + std::to_string(trace.hidden.size()) +
                        " does not match hidden affine count " + std::to_string(net.m));

  if (opts.labels) {
    std::vector<int64_t> labels = *opts.labels;
    if (static_cast<int64_t>(labels.size()) != N)
      throw DimensionError("propagate: labels size must equal batch size");
    if (opts.hasher) {
      // Digest the sign pattern of the merged margin rows.
      const Tensor<T>& wv = trace.final_w.value();
      const int64_t K = wv.dim(0), n = wv.dim(1);
      for (int64_t y : labels)
        for (int64_t i = 0; i < K; ++i) {
          if (i == y) continue;
          for (int64_t j = 0; j < n; ++j)
            opts.hasher->bit(wv[y * n + j] - wv[i * n + j] > T(0));
        }
    }
    trace.margins =
        elide_margins(trace.final_w, trace.final_b, trace.last_lower, trace.last_upper, labels);
    if (!trace.margins.value().all_finite()) throw NumericError("propagate: non-finite margins");
  }
  if (opts.hasher) trace.mask_digest = opts.hasher->h;
  return trace;
}

// Lower bounds on logit[y] - logit[i] via weight-row merging on the recorded
// classifier inputs.
template <class T>
Var<T> margin_lower_bounds(const BoundTrace<T>& trace, const std::vector<int64_t>& labels) {
  if (!trace.final_w.defined()) throw ContractError("margin_lower_bounds: trace has no classifier stage");
  return elide_margins(trace.final_w, trace.final_b, trace.last_lower, trace.last_upper, labels);
}

struct StateFractions {
  double active = 0, inactive = 0, unstable = 0;
  int64_t total = 0;
};

// Fractions over every neuron of every hidden stage and batch element.
template <class T>
StateFractions relu_state_fractions(const BoundTrace<T>& trace) {
  StateFractions f;
  int64_t counts[3] = {0, 0, 0};
  for (const TraceEntry<T>& e : trace.hidden)
    for (int64_t i = 0; i < e.state.size(); ++i) ++counts[e.state[i]];
  f.total = counts[0] + counts[1] + counts[2];
  if (f.total == 0) throw ContractError("relu_state_fractions: trace has no hidden stages");
  f.inactive = static_cast<double>(counts[0]) / static_cast<double>(f.total);
  f.active = static_cast<double>(counts[1]) / static_cast<double>(f.total);
  f.unstable = static_cast<double>(counts[2]) / static_cast<double>(f.total);
  return f;
}

// Mean interval widths per stage, index 0 for the input box, 1..m for the
// hidden stages.
template <class T>
std::vector<T> tightness_stats(const BoundTrace<T>& trace) {
  std::vector<T> delta;
  delta.push_back(trace.input.delta_mean.item());
  for (const TraceEntry<T>& e : trace.hidden) delta.push_back(e.delta_mean.item());
  return delta;
}

// ---- eager clean forward (soundness checks, evaluation helpers) ----

template <class T>
struct CleanForward {
  std::vector<Tensor<T>> relu_inputs;  // value each ReLU consumed
  Tensor<T> logits;
};

// Forward pass of the clean network, optionally pinning batchnorm layers to
// recorded statistics (keyed by layer prefix); otherwise running statistics
// are used.
template <class T>
CleanForward<T> forward_clean(const Network<T>& net, const Tensor<T>& x, const InputSpec<T>& spec,
                              const std::map<std::string, BnStatsUsed<T>>* stats_override = nullptr) {
  if (!net.initialized) throw ContractError("forward_clean: network is not initialized");
  const int64_t N = x.dim(0);
  InputInterval<T> box = input_interval(x, T(0), spec);
  Tensor<T> cur = std::move(box.clean);
  CleanForward<T> out;
  std::vector<Tensor<T>> residual_stack;
  for (const LayerSpec& l : net.layers) {
    switch (l.kind) {
      case LayerKind::Dense: {
        const Tensor<T>& w = net.param(l.param_prefix + ".W");
        const Tensor<T>& b = net.param(l.param_prefix + ".b");
        const int64_t r = w.dim(0), n = w.dim(1);
        Tensor<T> y(Shape{N, r});
        for (int64_t e = 0; e < N; ++e)
          for (int64_t i = 0; i < r; ++i) {
            T acc = T(0);
            const T* xr = cur.data() + e * n;
            const T* wr = w.data() + i * n;
            for (int64_t j = 0; j < n; ++j) acc += xr[j] * wr[j];
            y[e * r + i] = acc + b[i];
          }
        cur = std::move(y);
        break;
      }
      case LayerKind::Conv2d: {
        cur = conv2d(cur, net.param(l.param_prefix + ".W"), net.param(l.param_prefix + ".b"),
                     l.stride, l.padding);
        break;
      }
      case LayerKind::BatchNorm: {
        const Tensor<T>* mu;
        const Tensor<T>* var;
        if (stats_override) {
          auto it = stats_override->find(l.param_prefix);
          if (it == stats_override->end())
            throw ArgumentError("forward_clean: no recorded stats for " + l.param_prefix);
          mu = &it->second.mean;
          var = &it->second.var;
        } else {
          mu = &net.buffer(l.param_prefix + ".running_mean");
          var = &net.buffer(l.param_prefix + ".running_var");
        }
        const Tensor<T>& gamma = net.param(l.param_prefix + ".gamma");
        const Tensor<T>& beta = net.param(l.param_prefix + ".beta");
        const auto d = detail::chan_dims(cur.shape(), "batchnorm");
        for (int64_t n = 0; n < d.n; ++n)
          for (int64_t c = 0; c < d.c; ++c) {
            const T s = gamma[c] / std::sqrt((*var)[c] + static_cast<T>(l.eps));
            const T t = beta[c] - s * (*mu)[c];
            T* row = cur.data() + (n * d.c + c) * d.sp;
            for (int64_t sp = 0; sp < d.sp; ++sp) row[sp] = row[sp] * s + t;
          }
        break;
      }
      case LayerKind::Relu: {
        out.relu_inputs.push_back(cur);
        cur = relu(cur);
        break;
      }
      case LayerKind::Flatten: {
        cur = cur.reshaped(Shape{N, numel(l.out_shape)});
        break;
      }
      case LayerKind::ResidualBegin: {
        residual_stack.push_back(cur);
        break;
      }
      case LayerKind::ResidualAdd: {
        cur = add(cur, residual_stack.back());
        residual_stack.pop_back();
        break;
      }
    }
  }
  out.logits = std::move(cur);
  return out;
}

}  // namespace certkit
