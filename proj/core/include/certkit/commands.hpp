#pragma once

#include <cmath>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "certkit/audit.hpp"
#include "certkit/checkpoint.hpp"
#include "certkit/config.hpp"
#include "certkit/data.hpp"
#include "certkit/errors.hpp"
#include "certkit/gradcheck.hpp"
#include "certkit/ioutil.hpp"
#include "certkit/net.hpp"
#include "certkit/train.hpp"

namespace certkit {

inline constexpr int kExitOk = 0;
inline constexpr int kExitNumeric = 1;
inline constexpr int kExitUsage = 2;

struct DataBundle {
  Dataset<double> train;
  Dataset<double> eval;
};

inline DataBundle load_data(const RunConfig& c) {
  DataBundle b;
  if (c.data.dataset == "mnist") {
    b.train = load_mnist_idx<double>(c.data.dir + "/train-images-idx3-ubyte",
                                     c.data.dir + "/train-labels-idx1-ubyte");
    b.eval = load_mnist_idx<double>(c.data.dir + "/t10k-images-idx3-ubyte",
                                    c.data.dir + "/t10k-labels-idx1-ubyte");
  } else {
    const BlobsConfig& bl = c.data.blobs;
    SeededRng train_rng(SeededRng::mix(bl.seed, 0));
    b.train = synth_blobs<double>(train_rng, bl.n_per_class, bl.classes, bl.dim, bl.separation);
    const int64_t eval_n = std::max<int64_t>(
        1, static_cast<int64_t>(std::llround(static_cast<double>(bl.n_per_class) * bl.eval_fraction)));
    SeededRng eval_rng(SeededRng::mix(bl.seed, 1));
    b.eval = synth_blobs<double>(eval_rng, eval_n, bl.classes, bl.dim, bl.separation);
    b.train.split = "blobs-train";
    b.eval.split = "blobs-eval";
  }
  if (!c.data.normalize_mean.empty()) {
    b.train.spec.mean.assign(c.data.normalize_mean.begin(), c.data.normalize_mean.end());
    b.eval.spec.mean = b.train.spec.mean;
  }
  if (!c.data.normalize_std.empty()) {
    b.train.spec.std.assign(c.data.normalize_std.begin(), c.data.normalize_std.end());
    b.eval.spec.std = b.train.spec.std;
  }
  return b;
}

namespace detail {

inline void write_effective_config(const nlohmann::json& effective, const std::string& out_dir) {
  atomic_write_file(out_dir + "/config.json", effective.dump(2) + "\n");
}

}  // namespace detail

inline int cmd_train(const nlohmann::json& effective, bool resume, std::ostream& out,
                     std::ostream& err) {
  try {
    RunConfig c = config_from_json(effective);
    out << effective.dump(2) << "\n";
    detail::write_effective_config(effective, c.out_dir);

    DataBundle data = load_data(c);
    if (data.train.classes != c.arch.classes)
      throw ArgumentError("dataset has " + std::to_string(data.train.classes) +
                          " classes, architecture expects " + std::to_string(c.arch.classes));

    const std::string ckpt_path = c.out_dir + "/checkpoint.ckpt";
    Network<double> net;
    CheckpointData<double> ck;
    bool resumed = false;
    if (resume && std::filesystem::exists(ckpt_path)) {
      ck = load_checkpoint<double>(ckpt_path);
      if (arch_to_json(ck.arch) != arch_to_json(c.arch))
        throw ArgumentError("checkpoint architecture does not match the configured one");
      net = restore_network(ck);
      resumed = true;
      out << "resuming from " << ckpt_path << " at epoch " << ck.epoch << "\n";
    } else {
      net = build<double>(c.arch);
      SeededRng rng(c.init.seed);
      initialize(net, c.init.scheme, rng);
      residual_calibrate(net);
    }

    Trainer<double> trainer(net, data.train, data.eval, c.train);
    if (resumed) {
      trainer.adam() = restore_adam(net, ck);
      trainer.restore_progress(ck.epoch, ck.global_step, ck.history);
    }

    out << metrics_csv_header() << "\n";
    for (const MetricsRow& r : trainer.history()) out << metrics_csv_row(r) << "\n";
    while (!trainer.done()) {
      MetricsRow row;
      try {
        row = trainer.train_epoch();
      } catch (const NumericError& e) {
        err << "numeric error at epoch " << trainer.epoch() << ", step " << trainer.global_step()
            << ": " << e.what() << " (last-good checkpoint retained)\n";
        return kExitNumeric;
      }
      save_checkpoint(ckpt_path, net, trainer.adam(), trainer.epoch(), trainer.global_step(),
                      trainer.history());
      atomic_write_file(c.out_dir + "/metrics.csv", metrics_csv(trainer.history()));
      out << metrics_csv_row(row) << "\n";
    }
    out << "training complete: " << c.out_dir << "/metrics.csv, " << ckpt_path << "\n";
    return kExitOk;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

inline int cmd_eval(const nlohmann::json& effective, const std::string& checkpoint_path,
                    std::vector<double> eps_list, std::ostream& out, std::ostream& err) {
  try {
    RunConfig c = config_from_json(effective);
    if (!std::filesystem::exists(checkpoint_path))
      throw IoError("checkpoint not found: " + checkpoint_path);
    CheckpointData<double> ck = load_checkpoint<double>(checkpoint_path);
    Network<double> net = restore_network(ck);

    DataBundle data = load_data(c);
    if (net.classes != data.eval.classes)
      throw ArgumentError("checkpoint classes (" + std::to_string(net.classes) +
                          ") do not match dataset classes (" + std::to_string(data.eval.classes) +
                          ")");
    if (eps_list.empty()) eps_list.push_back(c.sched.eps_test);

    std::string csv = "eps,standard_error,verified_error\n";
    for (double eps : eps_list) {
      EvalStats s = evaluate(net, data.eval, eps, c.train.batch_size);
      out << "eps=" << format_g17(eps) << " standard_error=" << format_g17(s.standard_error)
          << " verified_error=" << format_g17(s.verified_error) << "\n";
      csv += format_g17(eps);
      csv += ',';
      csv += format_g17(s.standard_error);
      csv += ',';
      csv += format_g17(s.verified_error);
      csv += '\n';
    }
    detail::write_effective_config(effective, c.out_dir);
    atomic_write_file(c.out_dir + "/eval.csv", csv);
    return kExitOk;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

inline int cmd_audit(const nlohmann::json& effective, std::ostream& out, std::ostream& err) {
  try {
    RunConfig c = config_from_json(effective);
    if (c.audit.schemes.empty()) throw ArgumentError("audit: no schemes configured");
    Network<double> net = build<double>(c.arch);

    std::vector<GainRow> gains = audit_difference_gains(
        net, c.audit.schemes, static_cast<int>(c.audit.trials), c.audit.seed);
    std::vector<ProfileRow> profile;
    for (InitScheme s : c.audit.schemes) {
      std::vector<ProfileRow> rows = audit_bound_profile<double>(
          c.arch, s, c.audit.seeds, c.audit.batch, c.audit.eps, c.audit.seed);
      profile.insert(profile.end(), rows.begin(), rows.end());
    }

    detail::write_effective_config(effective, c.out_dir);
    atomic_write_file(c.out_dir + "/gains.csv", gains_csv(gains));
    atomic_write_file(c.out_dir + "/profile.csv", profile_csv(profile));

    out << "difference gains (mean over " << c.audit.trials << " trials):\n";
    for (const GainRow& r : gains) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "  layer %d  fan_in %lld  %-17s closed %.4g  empirical %.4g\n",
                    r.layer, static_cast<long long>(r.fan_in), r.scheme.c_str(), r.closed_form,
                    r.empirical);
      out << buf;
    }
    out << "bound-width profile written to " << c.out_dir << "/profile.csv\n";
    return kExitOk;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

inline int cmd_gradcheck(const nlohmann::json& effective, std::ostream& out, std::ostream& err) {
  try {
    RunConfig c = config_from_json(effective);
    Network<double> net = build<double>(c.arch);
    SeededRng rng(c.init.seed);
    initialize(net, c.init.scheme, rng);
    residual_calibrate(net);

    SeededRng sample_rng(SeededRng::mix(c.gradcheck.seed, 0));
    Tensor<double> x = sample_rng.uniform<double>(
        Shape{c.gradcheck.batch, c.arch.input[0], c.arch.input[1], c.arch.input[2]}, 0.0, 1.0);
    std::vector<int64_t> y(static_cast<size_t>(c.gradcheck.batch));
    for (auto& label : y) label = sample_rng.next_index(c.arch.classes);

    GradcheckOptions o;
    o.step = c.gradcheck.step;
    o.max_checks = c.gradcheck.max_checks;
    o.eps = c.gradcheck.eps;
    o.eps_target = std::max(c.gradcheck.eps, c.sched.eps_target);
    o.lambda0 = c.gradcheck.lambda0;
    o.tau = c.gradcheck.tau;
    o.sample_seed = SeededRng::mix(c.gradcheck.seed, 1);

    InputSpec<double> spec;
    GradcheckReport report = gradcheck(net, x, y, spec, o);
    detail::write_effective_config(effective, c.out_dir);
    out << "gradcheck: max_rel_err=" << format_g17(report.max_rel_err) << " worst="
        << report.worst_param << " analytic=" << format_g17(report.worst_analytic)
        << " numeric=" << format_g17(report.worst_numeric) << " checked=" << report.checked
        << " skipped=" << report.skipped << "\n";
    if (report.max_rel_err <= c.gradcheck.tol) {
      out << "gradcheck: PASS (tol " << format_g17(c.gradcheck.tol) << ")\n";
      return kExitOk;
    }
    err << "gradcheck: FAIL, worst parameter " << report.worst_param << " relative error "
        << format_g17(report.max_rel_err) << " > tol " << format_g17(c.gradcheck.tol) << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace certkit
