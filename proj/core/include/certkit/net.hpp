#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "certkit/errors.hpp"
#include "certkit/rng.hpp"
#include "certkit/tensor.hpp"

namespace certkit {

enum class LayerKind { Dense, Conv2d, Relu, BatchNorm, Flatten, ResidualBegin, ResidualAdd };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::ResidualBegin: return "residual_begin";
    case LayerKind::ResidualAdd: return "residual_add";
  }
  return "?";
}

// One entry of an architecture description, before shape inference.
struct LayerEntry {
  LayerKind kind = LayerKind::Relu;
  int64_t out = 0;      // dense output features
  int64_t c_out = 0;    // conv output channels
  int64_t k = 0;        // conv kernel size
  int64_t stride = 1;
  int64_t padding = 0;
  double momentum = 0.1;  // batchnorm running-stat EMA weight
  double eps = 1e-5;      // batchnorm variance epsilon
};

struct ArchDescription {
  Shape input;  // [C, H, W]
  int64_t classes = 0;
  bool full_bn = false;  // insert a batchnorm after every hidden affine layer
  std::vector<LayerEntry> layers;
};

// A layer after shape inference.  Activation shapes are [C, H, W] for spatial
// tensors and [F] after flatten.
struct LayerSpec {
  LayerKind kind;
  Shape in_shape, out_shape;
  int64_t fan_in = 0;    // dense: inputs; conv: k*k*c_in
  int64_t fan_out = 0;   // dense: outputs; conv: c_out
  int64_t k = 0, stride = 1, padding = 0;
  int64_t channels = 0;  // batchnorm
  double momentum = 0.1, eps = 1e-5;
  bool final_affine = false;
  int hidden_index = 0;  // 1..m for hidden affine layers, 0 otherwise
  std::string param_prefix;
};

enum class InitScheme { Ibp, XavierUniform, XavierGaussian, KaimingUniform, KaimingGaussian };

inline InitScheme init_scheme_from_string(const std::string& s) {
  if (s == "ibp") return InitScheme::Ibp;
  if (s == "xavier_uniform") return InitScheme::XavierUniform;
  if (s == "xavier_gaussian") return InitScheme::XavierGaussian;
  if (s == "kaiming_uniform") return InitScheme::KaimingUniform;
  if (s == "kaiming_gaussian") return InitScheme::KaimingGaussian;
  throw ArgumentError("unknown init scheme '" + s + "'");
}

inline const char* init_scheme_name(InitScheme s) {
  switch (s) {
    case InitScheme::Ibp: return "ibp";
    case InitScheme::XavierUniform: return "xavier_uniform";
    case InitScheme::XavierGaussian: return "xavier_gaussian";
    case InitScheme::KaimingUniform: return "kaiming_uniform";
    case InitScheme::KaimingGaussian: return "kaiming_gaussian";
  }
  return "?";
}

template <class T>
struct Network {
  ArchDescription arch;    // description the network was built from
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor<T>> params;   // weights, biases, gamma, beta
  std::map<std::string, Tensor<T>> buffers;  // batchnorm running statistics
  Shape input_shape;       // [C, H, W]
  int64_t classes = 0;
  int m = 0;               // number of hidden affine layers
  bool initialized = false;
  bool residual_calibrated = false;

  Tensor<T>& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ArgumentError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ArgumentError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& buffer(const std::string& name) {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ArgumentError("unknown buffer '" + name + "'");
    return it->second;
  }
  const Tensor<T>& buffer(const std::string& name) const {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ArgumentError("unknown buffer '" + name + "'");
    return it->second;
  }

  template <class U>
  Network<U> cast() const {
    Network<U> o;
    o.arch = arch;
    o.layers = layers;
    o.input_shape = input_shape;
    o.classes = classes;
    o.m = m;
    o.initialized = initialized;
    o.residual_calibrated = residual_calibrated;
    for (const auto& [k, v] : params) o.params.emplace(k, v.template cast<U>());
    for (const auto& [k, v] : buffers) o.buffers.emplace(k, v.template cast<U>());
    return o;
  }
};

namespace detail {
inline int64_t flat_size(const Shape& s) { return numel(s); }
}

// Validates an architecture, infers activation shapes and fan-ins, allocates
// zero parameters, and assigns hidden-affine indices 1..m.  The last listed
// layer must be the classification dense layer with `classes` outputs; it is
// excluded from m and never followed by batchnorm insertion.
template <class T>
Network<T> build(const ArchDescription& arch) {
  if (arch.input.size() != 3) throw DimensionError("build: input shape must be [C, H, W]");
  check_shape_valid(arch.input, "build: input");
  if (arch.classes < 2) throw ArgumentError("build: need at least 2 classes");
  if (arch.layers.empty()) throw ArgumentError("build: no layers");

  // Optionally insert batchnorm after every hidden affine layer.
  std::vector<LayerEntry> entries;
  int64_t affine_total = 0;
  for (const auto& e : arch.layers)
    if (e.kind == LayerKind::Dense || e.kind == LayerKind::Conv2d) ++affine_total;
  if (affine_total < 1) throw ArgumentError("build: need at least one affine layer");
  int64_t affine_seen = 0;
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerEntry& e = arch.layers[i];
    entries.push_back(e);
    const bool is_affine = e.kind == LayerKind::Dense || e.kind == LayerKind::Conv2d;
    if (is_affine) ++affine_seen;
    if (arch.full_bn && is_affine && affine_seen < affine_total) {
      const bool next_is_bn =
          i + 1 < arch.layers.size() && arch.layers[i + 1].kind == LayerKind::BatchNorm;
      if (!next_is_bn) entries.push_back(LayerEntry{.kind = LayerKind::BatchNorm});
    }
  }
  if (arch.layers.back().kind != LayerKind::Dense)
    throw ArgumentError("build: last layer must be the classification dense layer");
  if (arch.layers.back().out != arch.classes)
    throw ArgumentError("build: final dense output must equal the class count");

  Network<T> net;
  net.arch = arch;
  net.input_shape = arch.input;
  net.classes = arch.classes;

  Shape cur = arch.input;  // [C, H, W] or [F]
  std::vector<Shape> residual_stack;
  int hidden = 0;
  int layer_no = 0;
  for (size_t i = 0; i < entries.size(); ++i) {
    const LayerEntry& e = entries[i];
    LayerSpec spec;
    spec.kind = e.kind;
    spec.in_shape = cur;
    spec.param_prefix = "L" + std::to_string(layer_no);
    const bool last = i + 1 == entries.size();
    switch (e.kind) {
      case LayerKind::Dense: {
        if (cur.size() != 1)
          throw DimensionError("build: dense layer needs a flat input, got " + shape_str(cur) +
                               " (insert flatten)");
        if (e.out <= 0) throw ArgumentError("build: dense layer needs out > 0");
        spec.fan_in = cur[0];
        spec.fan_out = e.out;
        spec.final_affine = last;
        if (!last) spec.hidden_index = ++hidden;
        cur = {e.out};
        net.params.emplace(spec.param_prefix + ".W", Tensor<T>(Shape{spec.fan_out, spec.fan_in}));
        net.params.emplace(spec.param_prefix + ".b", Tensor<T>(Shape{spec.fan_out}));
        break;
      }
      case LayerKind::Conv2d: {
        if (cur.size() != 3)
          throw DimensionError("build: conv2d needs a [C, H, W] input, got " + shape_str(cur));
        if (e.c_out <= 0 || e.k <= 0) throw ArgumentError("build: conv2d needs c_out > 0 and k > 0");
        Conv2dGeom g = conv2d_geometry(Shape{1, cur[0], cur[1], cur[2]},
                                       Shape{e.c_out, cur[0], e.k, e.k}, e.stride, e.padding);
        spec.fan_in = g.patch();
        spec.fan_out = e.c_out;
        spec.k = e.k;
        spec.stride = e.stride;
        spec.padding = e.padding;
        if (last) throw ArgumentError("build: last layer must be dense");
        spec.hidden_index = ++hidden;
        cur = {e.c_out, g.h_out, g.w_out};
        net.params.emplace(spec.param_prefix + ".W",
                           Tensor<T>(Shape{e.c_out, g.c_in, e.k, e.k}));
        net.params.emplace(spec.param_prefix + ".b", Tensor<T>(Shape{e.c_out}));
        break;
      }
      case LayerKind::Relu:
        break;
      case LayerKind::BatchNorm: {
        if (e.eps <= 0) throw ArgumentError("build: batchnorm eps must be > 0");
        if (e.momentum <= 0 || e.momentum >= 1)
          throw ArgumentError("build: batchnorm momentum must be in (0, 1)");
        spec.channels = cur[0];
        spec.momentum = e.momentum;
        spec.eps = e.eps;
        net.params.emplace(spec.param_prefix + ".gamma", Tensor<T>(Shape{spec.channels}));
        net.params.emplace(spec.param_prefix + ".beta", Tensor<T>(Shape{spec.channels}));
        net.buffers.emplace(spec.param_prefix + ".running_mean", Tensor<T>(Shape{spec.channels}));
        net.buffers.emplace(spec.param_prefix + ".running_var", Tensor<T>(Shape{spec.channels}));
        break;
      }
      case LayerKind::Flatten: {
        cur = {detail::flat_size(cur)};
        break;
      }
      case LayerKind::ResidualBegin: {
        residual_stack.push_back(cur);
        break;
      }
      case LayerKind::ResidualAdd: {
        if (residual_stack.empty())
          throw ArgumentError("build: residual_add without matching residual_begin");
        if (residual_stack.back() != cur)
          throw DimensionError("build: residual branch shape " + shape_str(cur) +
                               " does not match skip shape " + shape_str(residual_stack.back()));
        residual_stack.pop_back();
        break;
      }
    }
    spec.out_shape = cur;
    net.layers.push_back(std::move(spec));
    ++layer_no;
  }
  if (!residual_stack.empty()) throw ArgumentError("build: unclosed residual_begin");
  net.m = hidden;
  return net;
}

// Closed-form expected difference gain (n_i / 2) * E|W| for each scheme.
inline double difference_gain_closed_form(InitScheme scheme, int64_t fan_in) {
  if (fan_in <= 0) throw ArgumentError("difference_gain_closed_form: fan_in must be > 0");
  const double n = static_cast<double>(fan_in);
  switch (scheme) {
    case InitScheme::Ibp:
      // sigma = sqrt(2*pi)/n, E|W| = sigma*sqrt(2/pi) -> gain 1.
      return 1.0;
    case InitScheme::XavierUniform:
      // U(-1/sqrt(n), 1/sqrt(n)), E|W| = 1/(2 sqrt(n)) -> sqrt(n)/4.
      return std::sqrt(n) / 4.0;
    case InitScheme::XavierGaussian:
      // N(0, 1/n), E|W| = sqrt(2/(pi n)) -> sqrt(n / (2 pi)).
      return std::sqrt(n / (2.0 * std::numbers::pi));
    case InitScheme::KaimingUniform:
      // U(-sqrt(6/n), sqrt(6/n)), E|W| = sqrt(6/n)/2 -> sqrt(6 n)/4.
      return std::sqrt(6.0 * n) / 4.0;
    case InitScheme::KaimingGaussian:
      // N(0, 2/n), E|W| = 2/sqrt(pi n) -> sqrt(n/pi).
      return std::sqrt(n / std::numbers::pi);
  }
  throw ArgumentError("difference_gain_closed_form: bad scheme");
}

// Empirical difference gain (n_i / 2) * mean|W| of a sampled weight tensor.
template <class T>
double difference_gain_empirical(const Tensor<T>& w, int64_t fan_in) {
  if (w.size() == 0) throw ArgumentError("difference_gain_empirical: empty tensor");
  if (fan_in <= 0) throw ArgumentError("difference_gain_empirical: fan_in must be > 0");
  double acc = 0;
  for (int64_t i = 0; i < w.size(); ++i) acc += std::abs(static_cast<double>(w[i]));
  return 0.5 * static_cast<double>(fan_in) * (acc / static_cast<double>(w.size()));
}

// Draws one weight tensor for a given scheme and fan-in.
template <class T>
Tensor<T> sample_weight(SeededRng& rng, InitScheme scheme, Shape shape, int64_t fan_in) {
  const double n = static_cast<double>(fan_in);
  switch (scheme) {
    case InitScheme::Ibp:
      return rng.gaussian<T>(std::move(shape), T(0), static_cast<T>(std::sqrt(2.0 * std::numbers::pi) / n));
    case InitScheme::XavierUniform: {
      const T b = static_cast<T>(1.0 / std::sqrt(n));
      return rng.uniform<T>(std::move(shape), -b, b);
    }
    case InitScheme::XavierGaussian:
      return rng.gaussian<T>(std::move(shape), T(0), static_cast<T>(std::sqrt(1.0 / n)));
    case InitScheme::KaimingUniform: {
      const T b = static_cast<T>(std::sqrt(6.0 / n));
      return rng.uniform<T>(std::move(shape), -b, b);
    }
    case InitScheme::KaimingGaussian:
      return rng.gaussian<T>(std::move(shape), T(0), static_cast<T>(std::sqrt(2.0 / n)));
  }
  throw ArgumentError("sample_weight: bad scheme");
}

// Initializes all parameters in layer order: weights per scheme, biases zero,
// batchnorm to identity (gamma 1, beta 0, running mean 0, running var 1).
template <class T>
void initialize(Network<T>& net, InitScheme scheme, SeededRng& rng) {
  for (const LayerSpec& l : net.layers) {
    if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2d) {
      Tensor<T>& w = net.param(l.param_prefix + ".W");
      w = sample_weight<T>(rng, scheme, w.shape(), l.fan_in);
      Tensor<T>& b = net.param(l.param_prefix + ".b");
      b = Tensor<T>(b.shape(), T(0));
    } else if (l.kind == LayerKind::BatchNorm) {
      net.param(l.param_prefix + ".gamma") = Tensor<T>(Shape{l.channels}, T(1));
      net.param(l.param_prefix + ".beta") = Tensor<T>(Shape{l.channels}, T(0));
      net.buffer(l.param_prefix + ".running_mean") = Tensor<T>(Shape{l.channels}, T(0));
      net.buffer(l.param_prefix + ".running_var") = Tensor<T>(Shape{l.channels}, T(1));
    }
  }
  net.initialized = true;
  net.residual_calibrated = false;
}

// Halves the weights of the first affine layer downstream of each residual
// join.  Idempotent: a second call is a no-op.
template <class T>
void residual_calibrate(Network<T>& net) {
  if (!net.initialized) throw ContractError("residual_calibrate: network is not initialized");
  if (net.residual_calibrated) return;
  bool any = false;
  for (size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].kind != LayerKind::ResidualAdd) continue;
    any = true;
    for (size_t j = i + 1; j < net.layers.size(); ++j) {
      const LayerSpec& l = net.layers[j];
      if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2d) {
        Tensor<T>& w = net.param(l.param_prefix + ".W");
        for (int64_t k = 0; k < w.size(); ++k) w[k] *= T(0.5);
        break;
      }
    }
  }
  (void)any;
  net.residual_calibrated = true;
}

// Per-layer difference-gain audit row.
struct GainRow {
  int layer = 0;
  int64_t fan_in = 0;
  std::string scheme;
  double closed_form = 0;
  double empirical = 0;  // mean over trials
};

// Samples each affine layer `trials` times under each scheme and reports the
// empirical difference gain next to the closed form.
template <class T>
std::vector<GainRow> audit_difference_gains(const Network<T>& net,
                                            const std::vector<InitScheme>& schemes, int trials,
                                            uint64_t seed) {
  if (trials < 1) throw ArgumentError("audit_difference_gains: trials must be >= 1");
  std::vector<GainRow> rows;
  for (size_t si = 0; si < schemes.size(); ++si) {
    SeededRng rng(SeededRng::mix(seed, si));
    int affine_no = 0;
    for (const LayerSpec& l : net.layers) {
      if (l.kind != LayerKind::Dense && l.kind != LayerKind::Conv2d) continue;
      ++affine_no;
      const Tensor<T>& w = net.param(l.param_prefix + ".W");
      double acc = 0;
      for (int t = 0; t < trials; ++t) {
        Tensor<T> sample = sample_weight<T>(rng, schemes[si], w.shape(), l.fan_in);
        acc += difference_gain_empirical(sample, l.fan_in);
      }
      GainRow row;
      row.layer = affine_no;
      row.fan_in = l.fan_in;
      row.scheme = init_scheme_name(schemes[si]);
      row.closed_form = difference_gain_closed_form(schemes[si], l.fan_in);
      row.empirical = acc / trials;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace certkit
