#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "certkit/errors.hpp"
#include "certkit/ibp.hpp"
#include "certkit/net.hpp"
#include "certkit/rng.hpp"
#include "certkit/tensor.hpp"

namespace certkit {

// Per-stage interval widths of an untrained network, averaged over seeds.
// Stage 0 is the input box; stages 1..m are the ReLU sites.
struct ProfileRow {
  std::string scheme;
  int64_t stage = 0;
  double mean_pre = 0;        // mean pre-activation width
  double mean_post = 0;       // mean post-activation width
  double post_pre_ratio = 0;  // mean_post / mean_pre
  double mean_log_ratio = 0;  // mean over seeds of log(pre_i / pre_0)
};

template <class T>
std::vector<ProfileRow> audit_bound_profile(const ArchDescription& arch, InitScheme scheme,
                                            int64_t n_seeds, int64_t batch, double eps,
                                            uint64_t seed) {
  if (n_seeds < 1) throw ArgumentError("audit_bound_profile: n_seeds must be >= 1");
  if (batch < 1) throw ArgumentError("audit_bound_profile: batch must be >= 1");
  if (!(eps >= 0)) throw ArgumentError("audit_bound_profile: eps must be >= 0");

  std::vector<ProfileRow> rows;
  InputSpec<T> spec;
  for (int64_t trial = 0; trial < n_seeds; ++trial) {
    Network<T> net = build<T>(arch);
    SeededRng rng(SeededRng::mix(seed, static_cast<uint64_t>(trial)));
    initialize(net, scheme, rng);
    residual_calibrate(net);

    Tensor<T> x = rng.uniform<T>(
        Shape{batch, arch.input[0], arch.input[1], arch.input[2]}, T(0), T(1));
    PropagateOptions opts;
    opts.train_mode = false;
    BoundTrace<T> trace = propagate(net, x, static_cast<T>(eps), spec, opts);

    const int64_t stages = static_cast<int64_t>(trace.hidden.size()) + 1;
    if (rows.empty()) {
      rows.resize(static_cast<size_t>(stages));
      for (int64_t i = 0; i < stages; ++i) {
        rows[static_cast<size_t>(i)].scheme = init_scheme_name(scheme);
        rows[static_cast<size_t>(i)].stage = i;
      }
    }
    const double d0 = static_cast<double>(trace.input.delta_mean.item());
    if (!(d0 > 0)) throw NumericError("audit_bound_profile: degenerate input width");
    for (int64_t i = 0; i < stages; ++i) {
      ProfileRow& r = rows[static_cast<size_t>(i)];
      double pre, post;
      if (i == 0) {
        pre = d0;
        post = d0;
      } else {
        const TraceEntry<T>& e = trace.hidden[static_cast<size_t>(i - 1)];
        pre = static_cast<double>(e.delta_mean.item());
        post = static_cast<double>(mean_all(sub(e.post_upper, e.post_lower).value()));
      }
      r.mean_pre += pre / static_cast<double>(n_seeds);
      r.mean_post += post / static_cast<double>(n_seeds);
      r.mean_log_ratio += std::log(pre / d0) / static_cast<double>(n_seeds);
    }
  }
  for (ProfileRow& r : rows)
    r.post_pre_ratio = r.mean_pre > 0 ? r.mean_post / r.mean_pre : 0.0;
  return rows;
}

inline std::string gains_csv(const std::vector<GainRow>& rows) {
  std::string out = "layer,fan_in,scheme,closed_form,empirical\n";
  for (const GainRow& r : rows) {
    out += std::to_string(r.layer);
    out += ',';
    out += std::to_string(r.fan_in);
    out += ',';
    out += r.scheme;
    char buf[80];
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g\n", r.closed_form, r.empirical);
    out += buf;
  }
  return out;
}

inline std::string profile_csv(const std::vector<ProfileRow>& rows) {
  std::string out = "scheme,stage,mean_pre_width,mean_post_width,post_pre_ratio,log_width_ratio\n";
  for (const ProfileRow& r : rows) {
    out += r.scheme;
    out += ',';
    out += std::to_string(r.stage);
    char buf[120];
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%.17g,%.17g\n", r.mean_pre, r.mean_post,
                  r.post_pre_ratio, r.mean_log_ratio);
    out += buf;
  }
  return out;
}

}  // namespace certkit
