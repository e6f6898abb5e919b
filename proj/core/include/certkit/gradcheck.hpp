#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "certkit/autograd.hpp"
#include "certkit/errors.hpp"
#include "certkit/ibp.hpp"
#include "certkit/net.hpp"
#include "certkit/objective.hpp"
#include "certkit/rng.hpp"

namespace certkit {

struct GradcheckOptions {
  double step = 1e-5;
  double floor = 1e-6;       // relative-error denominator floor
  int64_t max_checks = 0;    // per-parameter element budget; 0 checks all
  double eps = 0.05;
  double eps_target = 0.1;   // for the lambda schedule
  double lambda0 = 0.5;
  double tau = 0.5;
  uint64_t sample_seed = 11;
  // Test fixture: scales the analytic gradient of one parameter so the
  // negative control genuinely flows through the comparison.
  std::string corrupt_param;
  double corrupt_scale = 1.0;
};

struct GradcheckReport {
  double max_rel_err = 0;
  std::string worst_param;   // "L0.W[12]"
  double worst_analytic = 0;
  double worst_numeric = 0;
  int64_t checked = 0;
  int64_t skipped = 0;       // finite-difference probes that crossed a mask
};

// Central-difference verification of the full objective gradient.  Probes
// whose +/-step evaluation lands on a different discrete branch profile
// (ReLU states, ratio branches, sign masks) are skipped: at those points the
// objective is not differentiable in the probed direction.
template <class T>
GradcheckReport gradcheck(Network<T>& net, const Tensor<T>& x, const std::vector<int64_t>& y,
                          const InputSpec<T>& spec, const GradcheckOptions& opts) {
  static_assert(std::is_floating_point_v<T>);
  if (!(opts.step > 0)) throw ArgumentError("gradcheck: step must be > 0");
  if (!net.initialized) throw ContractError("gradcheck: network not initialized");

  ObjectiveConfig ocfg;
  ocfg.lambda0 = opts.lambda0;
  ocfg.tau = opts.tau;
  ocfg.eps_target = opts.eps_target;

  // Analytic pass.
  MaskHasher base_hasher;
  std::map<std::string, Tensor<T>> analytic;
  uint64_t base_digest = 0;
  {
    PropagateOptions popts;
    popts.train_mode = true;
    popts.update_running = false;
    popts.train_params = true;
    popts.hasher = &base_hasher;
    Tape<T> tape;
    ObjectiveResult<T> res =
        total_objective(net, x, y, static_cast<T>(opts.eps), spec, ocfg, popts);
    tape.backward(res.loss);
    base_digest = base_hasher.h;
    for (auto& [name, var] : res.trace.param_vars) {
      Tensor<T> g = var.node() && var.node()->has_grad ? var.node()->grad
                                                       : Tensor<T>(var.value().shape(), T(0));
      analytic.emplace(name, std::move(g));
    }
  }

  auto eval_at = [&](uint64_t* digest) {
    MaskHasher h;
    PropagateOptions popts;
    popts.train_mode = true;
    popts.update_running = false;
    popts.train_params = false;
    popts.hasher = &h;
    ObjectiveResult<T> res =
        total_objective(net, x, y, static_cast<T>(opts.eps), spec, ocfg, popts);
    if (digest) *digest = h.h;
    return static_cast<double>(res.loss.item());
  };

  GradcheckReport report;
  SeededRng sampler(opts.sample_seed);
  for (auto& [name, grad] : analytic) {
    Tensor<T>& p = net.param(name);
    std::vector<int64_t> indices;
    if (opts.max_checks > 0 && p.size() > opts.max_checks) {
      std::vector<int64_t> perm = sampler.permutation(p.size());
      indices.assign(perm.begin(), perm.begin() + opts.max_checks);
    } else {
      indices.resize(static_cast<size_t>(p.size()));
      for (int64_t i = 0; i < p.size(); ++i) indices[static_cast<size_t>(i)] = i;
    }
    const double scale = name == opts.corrupt_param ? opts.corrupt_scale : 1.0;
    for (int64_t i : indices) {
      const T saved = p[i];
      uint64_t dplus = 0, dminus = 0;
      p[i] = static_cast<T>(static_cast<double>(saved) + opts.step);
      const double fplus = eval_at(&dplus);
      p[i] = static_cast<T>(static_cast<double>(saved) - opts.step);
      const double fminus = eval_at(&dminus);
      p[i] = saved;
      if (dplus != base_digest || dminus != base_digest) {
        report.skipped += 1;
        continue;
      }
      const double numeric = (fplus - fminus) / (2.0 * opts.step);
      const double a = static_cast<double>(grad[i]) * scale;
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
      report.checked += 1;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name + "[" + std::to_string(i) + "]";
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  if (report.checked == 0) throw ContractError("gradcheck: all probes were skipped");
  return report;
}

}  // namespace certkit
