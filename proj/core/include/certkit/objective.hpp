#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "certkit/autograd.hpp"
#include "certkit/errors.hpp"
#include "certkit/ibp.hpp"
#include "certkit/net.hpp"

namespace certkit {

// Perturbation radius warmup, measured in optimizer steps: a zero phase, an
// increase phase of T steps (geometric for the first f*T, then linear), and a
// final phase at the target.
struct EpsSchedule {
  double eps_target = 0;
  int64_t steps_zero = 0;
  int64_t steps_increase = 0;
  int64_t steps_final = 0;
  double exp_fraction = 0.25;  // f: share of the increase covered geometrically
  double start_factor = 1e-3;  // alpha_0: eps at the first increase step, relative to target

  void validate() const {
    if (eps_target < 0) throw ArgumentError("eps schedule: eps_target must be >= 0");
    if (steps_zero < 0 || steps_increase < 0 || steps_final < 0)
      throw ArgumentError("eps schedule: phase lengths must be >= 0");
    if (!(exp_fraction >= 0 && exp_fraction < 1))
      throw ArgumentError("eps schedule: exp_fraction must be in [0, 1)");
    if (!(start_factor > 0 && start_factor <= 1))
      throw ArgumentError("eps schedule: start_factor must be in (0, 1]");
    if (exp_fraction > 0 && start_factor > exp_fraction)
      throw ArgumentError("eps schedule: start_factor above exp_fraction breaks monotonicity");
  }
};

// Radius at a global optimizer step.  Over the increase phase, u = s/(T-1)
// runs from 0 to 1; the curve is log-linear from eps_t*alpha_0 to eps_t*f for
// u < f and eps_t*u afterwards, hitting eps_t exactly on the last step.
inline double eps_value(const EpsSchedule& s, int64_t step) {
  if (step < 0) throw ArgumentError("eps_value: step must be >= 0");
  s.validate();
  if (s.eps_target == 0) return 0.0;
  if (step < s.steps_zero) return 0.0;
  const int64_t srel = step - s.steps_zero;
  if (srel >= s.steps_increase) return s.eps_target;
  const double u = s.steps_increase > 1
                       ? static_cast<double>(srel) / static_cast<double>(s.steps_increase - 1)
                       : 1.0;
  if (u >= 1.0) return s.eps_target;
  const double f = s.exp_fraction;
  if (u < f) {
    const double t = u / f;
    return s.eps_target * std::exp((1.0 - t) * std::log(s.start_factor) + t * std::log(f));
  }
  return s.eps_target * u;
}

// Warmup weight: affine from lambda_0 at eps=0 down to 0 at eps=eps_t.
inline double lambda_value(double lambda0, double eps, double eps_target) {
  if (lambda0 < 0) throw ArgumentError("lambda_value: lambda0 must be >= 0");
  if (!(eps_target > 0)) throw ArgumentError("lambda_value: eps_target must be > 0");
  if (eps < 0 || eps > eps_target)
    throw ArgumentError("lambda_value: eps must lie in [0, eps_target]");
  return lambda0 * (1.0 - eps / eps_target);
}

// Batch mean of log(1 + sum_{i != y} exp(-margin_i)); margins are the
// label-relative lower bounds from margin_lower_bounds.
template <class T>
Var<T> robust_ce_loss(const Var<T>& margins) {
  return robust_ce(margins);
}

// Eq.-8 style tightness penalty: mean over hidden stages of
// ReLU(tau - E(delta_0)/E(delta_i)) / tau.  Zero (and skipped) when the input
// box is degenerate; a zero-width stage contributes nothing.
template <class T>
Var<T> reg_tightness(const BoundTrace<T>& trace, T tau, MaskHasher* hasher = nullptr) {
  if (!(tau > T(0) && tau <= T(1))) throw ArgumentError("reg_tightness: tau must be in (0, 1]");
  const int64_t m = static_cast<int64_t>(trace.hidden.size());
  if (m == 0) throw ContractError("reg_tightness: trace has no hidden stages");
  const Var<T>& d0 = trace.input.delta_mean;
  if (d0.item() == T(0)) return Var<T>::scalar(T(0));
  std::vector<Var<T>> terms;
  for (const TraceEntry<T>& e : trace.hidden) {
    const bool degenerate = e.delta_mean.item() == T(0);
    if (hasher) hasher->bit(degenerate);
    if (degenerate) continue;  // ratio -> +inf, clipped to 0 by the ReLU
    Var<T> ratio = div(d0, e.delta_mean);
    Var<T> term = relu(add_scalar(neg(ratio), tau));
    if (hasher) hasher->bit(term.item() > T(0));
    terms.push_back(term);
  }
  if (terms.empty()) return Var<T>::scalar(T(0));
  Var<T> total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return mul_scalar(total, T(1) / (tau * static_cast<T>(m)));
}

namespace detail {
template <class T>
Tensor<T> state_mask(const Tensor<uint8_t>& state, const Shape& shape, ReluState which) {
  Tensor<T> m(shape);
  for (int64_t i = 0; i < state.size(); ++i)
    m[i] = state[i] == static_cast<uint8_t>(which) ? T(1) : T(0);
  return m;
}
}  // namespace detail

// Eq.-9 style balance penalty on bound centers.  For each hidden stage with
// at least one active and one inactive entry:
//   alpha = sum_active(c) / (-sum_inactive(c))
//   beta  = sum_active((c - mean(c))^2) / sum_inactive((c - mean(c))^2)
//   term  = ReLU(tau - min(alpha, 1/alpha)) + ReLU(tau - min(beta, 1/beta))
// scaled by 1/(tau*m).  An exactly-zero denominator counts as maximal
// imbalance and contributes tau without gradient.
template <class T>
Var<T> reg_relu_balance(const BoundTrace<T>& trace, T tau, MaskHasher* hasher = nullptr) {
  if (!(tau > T(0) && tau <= T(1))) throw ArgumentError("reg_relu_balance: tau must be in (0, 1]");
  const int64_t m = static_cast<int64_t>(trace.hidden.size());
  if (m == 0) throw ContractError("reg_relu_balance: trace has no hidden stages");
  std::vector<Var<T>> terms;
  for (const TraceEntry<T>& e : trace.hidden) {
    int64_t n_active = 0, n_inactive = 0;
    for (int64_t i = 0; i < e.state.size(); ++i) {
      if (e.state[i] == static_cast<uint8_t>(ReluState::Active)) ++n_active;
      if (e.state[i] == static_cast<uint8_t>(ReluState::Inactive)) ++n_inactive;
    }
    const bool eligible = n_active >= 1 && n_inactive >= 1;
    if (hasher) hasher->bit(eligible);
    if (!eligible) continue;

    Tensor<T> act = detail::state_mask<T>(e.state, e.center.shape(), ReluState::Active);
    Tensor<T> inact = detail::state_mask<T>(e.state, e.center.shape(), ReluState::Inactive);

    auto penalty = [&](const Var<T>& num, const Var<T>& den) -> Var<T> {
      const bool zero_den = den.item() == T(0);
      if (hasher) hasher->bit(zero_den);
      if (zero_den) return Var<T>::scalar(tau);
      Var<T> q = div(num, den);
      if (hasher) hasher->bit(q.item() <= T(1));
      Var<T> term = relu(add_scalar(neg(ratio_sym(q)), tau));
      if (hasher) hasher->bit(term.item() > T(0));
      return term;
    };

    Var<T> sum_act = sum_all(mul_mask(e.center, act));
    Var<T> sum_inact_neg = neg(sum_all(mul_mask(e.center, inact)));
    terms.push_back(penalty(sum_act, sum_inact_neg));

    Var<T> mean_c = mean_all(e.center);
    Var<T> dev = sub_scalar_var(e.center, mean_c);
    Var<T> sq = mul(dev, dev);
    Var<T> sq_act = sum_all(mul_mask(sq, act));
    Var<T> sq_inact = sum_all(mul_mask(sq, std::move(inact)));
    terms.push_back(penalty(sq_act, sq_inact));
  }
  if (terms.empty()) return Var<T>::scalar(T(0));
  Var<T> total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return mul_scalar(total, T(1) / (tau * static_cast<T>(m)));
}

template <class T>
struct ObjectiveComponents {
  T loss = T(0);
  T loss_rob = T(0);
  T loss_tightness = T(0);
  T loss_relu = T(0);
  T lambda = T(0);
  T eps = T(0);
};

template <class T>
struct ObjectiveResult {
  Var<T> loss;
  BoundTrace<T> trace;
  ObjectiveComponents<T> components;
};

struct ObjectiveConfig {
  double lambda0 = 0;
  double tau = 0.5;
  double eps_target = 0;  // schedule target, for the lambda warmup
};

// Full training objective on one batch: propagate bounds, take the robust CE
// on elided margins, and add the warmup regularizers weighted by lambda.
// When lambda is zero the loss node is the robust loss itself; regularizer
// values are still reported for metrics.
template <class T>
ObjectiveResult<T> total_objective(Network<T>& net, const Tensor<T>& x,
                                   const std::vector<int64_t>& y, T eps, const InputSpec<T>& spec,
                                   const ObjectiveConfig& cfg, PropagateOptions popts) {
  popts.labels = &y;
  ObjectiveResult<T> res;
  res.trace = propagate(net, x, eps, spec, popts);
  Var<T> l_rob = robust_ce_loss(res.trace.margins);
  // eps arrives rounded to T; in float it can overshoot eps_target by half an ulp.
  const double eps_sched = std::min(static_cast<double>(eps), cfg.eps_target);
  const double lambda = cfg.lambda0 == 0 ? 0.0 : lambda_value(cfg.lambda0, eps_sched, cfg.eps_target);
  Var<T> l_tight = eps > T(0) ? reg_tightness(res.trace, static_cast<T>(cfg.tau), popts.hasher)
                              : Var<T>::scalar(T(0));
  Var<T> l_relu = reg_relu_balance(res.trace, static_cast<T>(cfg.tau), popts.hasher);
  if (lambda > 0) {
    res.loss = add(l_rob, mul_scalar(add(l_tight, l_relu), static_cast<T>(lambda)));
  } else {
    res.loss = l_rob;
  }
  if (popts.hasher) res.trace.mask_digest = popts.hasher->h;
  res.components.loss = res.loss.item();
  res.components.loss_rob = l_rob.item();
  res.components.loss_tightness = l_tight.item();
  res.components.loss_relu = l_relu.item();
  res.components.lambda = static_cast<T>(lambda);
  res.components.eps = eps;
  return res;
}

}  // namespace certkit
