#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "certkit/autograd.hpp"
#include "certkit/data.hpp"
#include "certkit/errors.hpp"
#include "certkit/ibp.hpp"
#include "certkit/net.hpp"
#include "certkit/objective.hpp"
#include "certkit/tensor.hpp"

namespace certkit {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  int64_t step = 0;
  AdamConfig cfg;
};

template <class T>
AdamState<T> make_adam_state(const Network<T>& net, AdamConfig cfg = {}) {
  AdamState<T> st;
  st.cfg = cfg;
  for (const auto& [name, p] : net.params) {
    st.m.emplace(name, Tensor<T>(p.shape(), T(0)));
    st.v.emplace(name, Tensor<T>(p.shape(), T(0)));
  }
  return st;
}

// Canonical Adam with bias correction.  Parameters without a gradient entry
// are treated as having zero gradient (moments still decay).
template <class T>
void adam_step(std::map<std::string, Tensor<T>>& params,
               const std::map<std::string, Tensor<T>>& grads, AdamState<T>& state, double lr) {
  if (!(lr >= 0)) throw ArgumentError("adam_step: lr must be >= 0");
  state.step += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto mi = state.m.find(name);
    auto vi = state.v.find(name);
    if (mi == state.m.end() || vi == state.v.end())
      throw ContractError("adam_step: no moment state for parameter " + name);
    Tensor<T>& m = mi->second;
    Tensor<T>& v = vi->second;
    if (!m.same_shape(p) || !v.same_shape(p))
      throw DimensionError("adam_step: moment shape mismatch for " + name);
    const Tensor<T>* g = nullptr;
    auto gi = grads.find(name);
    if (gi != grads.end()) {
      g = &gi->second;
      if (!g->same_shape(p)) throw DimensionError("adam_step: gradient shape mismatch for " + name);
    }
    for (int64_t i = 0; i < p.size(); ++i) {
      const double gv = g ? static_cast<double>((*g)[i]) : 0.0;
      if (std::isnan(gv)) throw NumericError("adam_step: NaN gradient in " + name);
      const double mv = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gv;
      const double vv = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gv * gv;
      m[i] = static_cast<T>(mv);
      v[i] = static_cast<T>(vv);
      const double mhat = mv / bc1;
      const double vhat = vv / bc2;
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + state.cfg.eps));
    }
  }
}

// Scales all gradients by max_norm/g when the global L2 norm g exceeds
// max_norm.  Returns the pre-clip norm.
template <class T>
double clip_gradients(std::map<std::string, Tensor<T>>& grads, double max_norm) {
  if (!(max_norm > 0)) throw ArgumentError("clip_gradients: max_norm must be > 0");
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (int64_t i = 0; i < g.size(); ++i) {
      const double x = static_cast<double>(g[i]);
      sq += x * x;
    }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads)
      for (int64_t i = 0; i < g.size(); ++i) g[i] = static_cast<T>(static_cast<double>(g[i]) * scale);
  }
  return norm;
}

inline double lr_at_epoch(double lr0, double decay, const std::vector<int64_t>& milestones,
                          int64_t epoch) {
  double lr = lr0;
  for (int64_t ms : milestones)
    if (epoch >= ms) lr *= decay;
  return lr;
}

struct TrainConfig {
  int64_t epochs_zero = 0;
  int64_t epochs_increase = 0;
  int64_t epochs_final = 0;
  int64_t batch_size = 256;
  double lr = 5e-4;
  double lr_decay = 0.2;
  std::vector<int64_t> milestones;
  double clip_norm = 10.0;
  double lambda0 = 0.5;
  double tau = 0.5;
  double eps_train = 0.0;
  double eps_test = 0.0;
  double exp_fraction = 0.25;
  double start_factor = 1e-3;
  uint64_t seed = 0;
  bool shuffle = true;

  int64_t total_epochs() const { return epochs_zero + epochs_increase + epochs_final; }

  void validate() const {
    if (epochs_zero < 0 || epochs_increase < 0 || epochs_final < 0)
      throw ArgumentError("train config: negative phase length");
    if (total_epochs() < 1) throw ArgumentError("train config: need at least 1 epoch");
    if (batch_size < 1) throw ArgumentError("train config: batch_size must be >= 1");
    if (!(lr > 0)) throw ArgumentError("train config: lr must be > 0");
    if (!(lr_decay > 0)) throw ArgumentError("train config: lr_decay must be > 0");
    for (size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1])
        throw ArgumentError("train config: milestones must be strictly increasing");
    if (!(clip_norm > 0)) throw ArgumentError("train config: clip_norm must be > 0");
    if (lambda0 < 0) throw ArgumentError("train config: lambda0 must be >= 0");
    if (!(tau > 0) || tau > 1) throw ArgumentError("train config: tau must be in (0,1]");
    if (eps_train < 0 || eps_test < 0) throw ArgumentError("train config: eps must be >= 0");
  }
};

struct MetricsRow {
  int64_t epoch = 0;
  double eps = 0;
  double lambda = 0;
  double lr = 0;
  double loss = 0;
  double loss_rob = 0;
  double loss_tightness = 0;
  double loss_relu = 0;
  double standard_error = 0;
  double verified_error = 0;
  double frac_active = 0;
  double frac_inactive = 0;
  double frac_unstable = 0;
  double log_delta_ratio = 0;
};

inline std::string metrics_csv_header() {
  return "epoch,eps,lambda,lr,loss,loss_rob,loss_tightness,loss_relu,"
         "standard_error,verified_error,frac_active,frac_inactive,frac_unstable,"
         "log_delta_ratio";
}

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string metrics_csv_row(const MetricsRow& r) {
  std::string out = std::to_string(r.epoch);
  for (double v : {r.eps, r.lambda, r.lr, r.loss, r.loss_rob, r.loss_tightness, r.loss_relu,
                   r.standard_error, r.verified_error, r.frac_active, r.frac_inactive,
                   r.frac_unstable, r.log_delta_ratio}) {
    out += ',';
    out += format_g17(v);
  }
  return out;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = metrics_csv_header();
  out += '\n';
  for (const auto& r : rows) {
    out += metrics_csv_row(r);
    out += '\n';
  }
  return out;
}

struct EvalStats {
  double standard_error = 0;
  double verified_error = 0;
  double loss_rob = 0;
  StateFractions fractions;
  double log_delta_ratio = 0;
};

// Full-dataset evaluation with running BN statistics.  Verified error counts
// examples with any margin lower bound <= 0 or a clean misclassification.
template <class T>
EvalStats evaluate(Network<T>& net, const Dataset<T>& ds, double eps_test, int64_t batch_size) {
  if (eps_test < 0) throw ArgumentError("evaluate: eps_test must be >= 0");
  EvalStats out;
  int64_t n_std_err = 0, n_ver_err = 0, n_total = 0;
  int64_t act = 0, inact = 0, unst = 0, entries = 0;
  double loss_sum = 0;
  double d0_sum = 0, dm_sum = 0;

  BatchIter<T> it(ds, batch_size, /*shuffle=*/false, /*seed=*/0, /*epoch=*/0);
  Tensor<T> x;
  std::vector<int64_t> y;
  while (it.next(x, y)) {
    PropagateOptions opts;
    opts.train_mode = false;
    opts.update_running = false;
    opts.train_params = false;
    opts.labels = &y;
    BoundTrace<T> trace = propagate(net, x, static_cast<T>(eps_test), ds.spec, opts);

    const int64_t nb = x.dim(0);
    const int64_t k = net.classes;
    const Tensor<T>& logits = trace.clean_logits.value();
    for (int64_t e = 0; e < nb; ++e) {
      int64_t arg = 0;
      for (int64_t j = 1; j < k; ++j)
        if (logits[e * k + j] > logits[e * k + arg]) arg = j;
      const bool std_wrong = arg != y[static_cast<size_t>(e)];
      bool certified = !std_wrong;
      for (int64_t j = 0; j < k - 1 && certified; ++j)
        if (trace.margins.value()[e * (k - 1) + j] <= T(0)) certified = false;
      n_std_err += std_wrong ? 1 : 0;
      n_ver_err += certified ? 0 : 1;
    }
    n_total += nb;

    Var<T> lrob = robust_ce_loss(trace.margins);
    loss_sum += static_cast<double>(lrob.item()) * static_cast<double>(nb);

    StateFractions f = relu_state_fractions(trace);
    act += static_cast<int64_t>(std::llround(f.active * static_cast<double>(f.total)));
    inact += static_cast<int64_t>(std::llround(f.inactive * static_cast<double>(f.total)));
    unst += static_cast<int64_t>(std::llround(f.unstable * static_cast<double>(f.total)));
    entries += f.total;

    std::vector<T> widths = tightness_stats(trace);
    d0_sum += static_cast<double>(widths.front()) * static_cast<double>(nb);
    dm_sum += static_cast<double>(widths.back()) * static_cast<double>(nb);
  }

  if (n_total == 0) throw ArgumentError("evaluate: empty dataset");
  out.standard_error = static_cast<double>(n_std_err) / static_cast<double>(n_total);
  out.verified_error = static_cast<double>(n_ver_err) / static_cast<double>(n_total);
  out.loss_rob = loss_sum / static_cast<double>(n_total);
  out.fractions.total = entries;
  if (entries > 0) {
    out.fractions.active = static_cast<double>(act) / static_cast<double>(entries);
    out.fractions.inactive = static_cast<double>(inact) / static_cast<double>(entries);
    out.fractions.unstable = static_cast<double>(unst) / static_cast<double>(entries);
  }
  const double d0 = d0_sum / static_cast<double>(n_total);
  const double dm = dm_sum / static_cast<double>(n_total);
  out.log_delta_ratio = (d0 > 0 && dm > 0) ? std::log(dm / d0) : 0.0;
  return out;
}

// Owns the optimizer and schedule state for one run; one call per epoch.
template <class T>
class Trainer {
 public:
  Trainer(Network<T>& net, const Dataset<T>& train_data, const Dataset<T>& eval_data,
          TrainConfig cfg)
      : net_(net), train_data_(train_data), eval_data_(eval_data), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (!net.initialized) throw ContractError("trainer: network not initialized");
    const int64_t spe = steps_per_epoch();
    sched_.eps_target = cfg_.eps_train;
    sched_.steps_zero = cfg_.epochs_zero * spe;
    sched_.steps_increase = cfg_.epochs_increase * spe;
    sched_.steps_final = cfg_.epochs_final * spe;
    sched_.exp_fraction = cfg_.exp_fraction;
    sched_.start_factor = cfg_.start_factor;
    sched_.validate();
    adam_ = make_adam_state(net);
  }

  int64_t steps_per_epoch() const {
    return (train_data_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
  }

  MetricsRow train_epoch() {
    if (epoch_ >= cfg_.total_epochs()) throw ContractError("trainer: epoch past schedule end");
    const double lr = lr_at_epoch(cfg_.lr, cfg_.lr_decay, cfg_.milestones, epoch_);
    ObjectiveConfig ocfg;
    ocfg.lambda0 = cfg_.lambda0;
    ocfg.tau = cfg_.tau;
    ocfg.eps_target = cfg_.eps_train;

    double loss_sum = 0, rob_sum = 0, tight_sum = 0, relu_sum = 0;
    int64_t seen = 0;
    double last_eps = 0, last_lambda = 0;

    BatchIter<T> it(train_data_, cfg_.batch_size, cfg_.shuffle, cfg_.seed, epoch_);
    Tensor<T> x;
    std::vector<int64_t> y;
    while (it.next(x, y)) {
      const double eps = eps_value(sched_, global_step_);
      PropagateOptions opts;
      opts.train_mode = true;
      opts.update_running = true;
      opts.train_params = true;

      Tape<T> tape;
      ObjectiveResult<T> res = total_objective(net_, x, y, static_cast<T>(eps), train_data_.spec,
                                               ocfg, opts);
      tape.backward(res.loss);

      std::map<std::string, Tensor<T>> grads;
      for (auto& [name, var] : res.trace.param_vars) {
        Tensor<T> g = var.node() && var.node()->has_grad ? var.node()->grad
                                                         : Tensor<T>(var.value().shape(), T(0));
        for (int64_t i = 0; i < g.size(); ++i)
          if (!std::isfinite(static_cast<double>(g[i])))
            throw NumericError("train: non-finite gradient in " + name);
        grads.emplace(name, std::move(g));
      }
      clip_gradients(grads, cfg_.clip_norm);
      adam_step(net_.params, grads, adam_, lr);

      const int64_t nb = x.dim(0);
      loss_sum += res.components.loss * nb;
      rob_sum += res.components.loss_rob * nb;
      tight_sum += res.components.loss_tightness * nb;
      relu_sum += res.components.loss_relu * nb;
      seen += nb;
      last_eps = res.components.eps;
      last_lambda = res.components.lambda;
      global_step_ += 1;
    }

    EvalStats ev = evaluate(net_, eval_data_, cfg_.eps_test, cfg_.batch_size);

    MetricsRow row;
    row.epoch = epoch_;
    row.eps = last_eps;
    row.lambda = last_lambda;
    row.lr = lr;
    row.loss = loss_sum / static_cast<double>(seen);
    row.loss_rob = rob_sum / static_cast<double>(seen);
    row.loss_tightness = tight_sum / static_cast<double>(seen);
    row.loss_relu = relu_sum / static_cast<double>(seen);
    row.standard_error = ev.standard_error;
    row.verified_error = ev.verified_error;
    row.frac_active = ev.fractions.active;
    row.frac_inactive = ev.fractions.inactive;
    row.frac_unstable = ev.fractions.unstable;
    row.log_delta_ratio = ev.log_delta_ratio;
    history_.push_back(row);
    epoch_ += 1;
    return row;
  }

  bool done() const { return epoch_ >= cfg_.total_epochs(); }
  int64_t epoch() const { return epoch_; }
  int64_t global_step() const { return global_step_; }
  const EpsSchedule& schedule() const { return sched_; }
  AdamState<T>& adam() { return adam_; }
  const std::vector<MetricsRow>& history() const { return history_; }
  const TrainConfig& config() const { return cfg_; }

  // Resume support: restore counters and history saved in a checkpoint.
  void restore_progress(int64_t epoch, int64_t global_step, std::vector<MetricsRow> history) {
    if (epoch < 0 || epoch > cfg_.total_epochs())
      throw ArgumentError("trainer: restored epoch out of range");
    if (global_step != epoch * steps_per_epoch())
      throw ArgumentError("trainer: restored step count inconsistent with epoch");
    epoch_ = epoch;
    global_step_ = global_step;
    history_ = std::move(history);
  }

 private:
  Network<T>& net_;
  const Dataset<T>& train_data_;
  const Dataset<T>& eval_data_;
  TrainConfig cfg_;
  EpsSchedule sched_;
  AdamState<T> adam_;
  int64_t epoch_ = 0;
  int64_t global_step_ = 0;
  std::vector<MetricsRow> history_;
};

}  // namespace certkit
