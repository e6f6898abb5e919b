#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "certkit/errors.hpp"
#include "certkit/ioutil.hpp"
#include "certkit/net.hpp"
#include "certkit/train.hpp"

namespace certkit {

namespace cfg {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ParseError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ParseError(where + ": unknown key '" + it.key() + "'");
}

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key,
                                     const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(where + ": missing key '" + key + "'");
  return j.at(key);
}

inline double get_num(const nlohmann::json& j, const std::string& key, const std::string& where) {
  const auto& v = require(j, key, where);
  if (!v.is_number()) throw ParseError(where + "." + key + ": expected a number");
  return v.get<double>();
}

inline int64_t get_int(const nlohmann::json& j, const std::string& key, const std::string& where) {
  const auto& v = require(j, key, where);
  if (!v.is_number_integer()) throw ParseError(where + "." + key + ": expected an integer");
  return v.get<int64_t>();
}

inline uint64_t get_uint(const nlohmann::json& j, const std::string& key, const std::string& where) {
  const auto& v = require(j, key, where);
  if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<int64_t>() >= 0)))
    throw ParseError(where + "." + key + ": expected a nonnegative integer");
  return v.get<uint64_t>();
}

inline bool get_bool(const nlohmann::json& j, const std::string& key, const std::string& where) {
  const auto& v = require(j, key, where);
  if (!v.is_boolean()) throw ParseError(where + "." + key + ": expected a boolean");
  return v.get<bool>();
}

inline std::string get_str(const nlohmann::json& j, const std::string& key,
                           const std::string& where) {
  const auto& v = require(j, key, where);
  if (!v.is_string()) throw ParseError(where + "." + key + ": expected a string");
  return v.get<std::string>();
}

}  // namespace cfg

inline nlohmann::json layer_to_json(const LayerEntry& e) {
  nlohmann::json j;
  j["kind"] = layer_kind_name(e.kind);
  switch (e.kind) {
    case LayerKind::Dense: j["out"] = e.out; break;
    case LayerKind::Conv2d:
      j["c_out"] = e.c_out;
      j["k"] = e.k;
      j["stride"] = e.stride;
      j["padding"] = e.padding;
      break;
    case LayerKind::BatchNorm:
      j["momentum"] = e.momentum;
      j["eps"] = e.eps;
      break;
    default: break;
  }
  return j;
}

inline LayerEntry layer_from_json(const nlohmann::json& j, const std::string& where) {
  const std::string kind = cfg::get_str(j, "kind", where);
  LayerEntry e;
  if (kind == "dense") {
    cfg::check_keys(j, {"kind", "out"}, where);
    e.kind = LayerKind::Dense;
    e.out = cfg::get_int(j, "out", where);
  } else if (kind == "conv2d" || kind == "conv") {
    cfg::check_keys(j, {"kind", "c_out", "k", "stride", "padding"}, where);
    e.kind = LayerKind::Conv2d;
    e.c_out = cfg::get_int(j, "c_out", where);
    e.k = cfg::get_int(j, "k", where);
    e.stride = j.contains("stride") ? cfg::get_int(j, "stride", where) : 1;
    e.padding = j.contains("padding") ? cfg::get_int(j, "padding", where) : 0;
  } else if (kind == "relu") {
    cfg::check_keys(j, {"kind"}, where);
    e.kind = LayerKind::Relu;
  } else if (kind == "batchnorm") {
    cfg::check_keys(j, {"kind", "momentum", "eps"}, where);
    e.kind = LayerKind::BatchNorm;
    if (j.contains("momentum")) e.momentum = cfg::get_num(j, "momentum", where);
    if (j.contains("eps")) e.eps = cfg::get_num(j, "eps", where);
  } else if (kind == "flatten") {
    cfg::check_keys(j, {"kind"}, where);
    e.kind = LayerKind::Flatten;
  } else if (kind == "residual_begin") {
    cfg::check_keys(j, {"kind"}, where);
    e.kind = LayerKind::ResidualBegin;
  } else if (kind == "residual_add") {
    cfg::check_keys(j, {"kind"}, where);
    e.kind = LayerKind::ResidualAdd;
  } else {
    throw ParseError(where + ": unknown layer kind '" + kind + "'");
  }
  return e;
}

inline nlohmann::json arch_to_json(const ArchDescription& a) {
  nlohmann::json j;
  j["input"] = a.input;
  j["classes"] = a.classes;
  j["full_bn"] = a.full_bn;
  j["layers"] = nlohmann::json::array();
  for (const LayerEntry& e : a.layers) j["layers"].push_back(layer_to_json(e));
  return j;
}

inline ArchDescription arch_from_json(const nlohmann::json& j, const std::string& where = "arch") {
  cfg::check_keys(j, {"input", "classes", "full_bn", "layers"}, where);
  ArchDescription a;
  const auto& in = cfg::require(j, "input", where);
  if (!in.is_array() || in.size() != 3)
    throw ParseError(where + ".input: expected an array of 3 dimensions");
  for (const auto& d : in) {
    if (!d.is_number_integer()) throw ParseError(where + ".input: expected integers");
    a.input.push_back(d.get<int64_t>());
  }
  a.classes = cfg::get_int(j, "classes", where);
  a.full_bn = cfg::get_bool(j, "full_bn", where);
  const auto& layers = cfg::require(j, "layers", where);
  if (!layers.is_array()) throw ParseError(where + ".layers: expected an array");
  for (size_t i = 0; i < layers.size(); ++i)
    a.layers.push_back(layer_from_json(layers[i], where + ".layers[" + std::to_string(i) + "]"));
  return a;
}

struct InitConfig {
  InitScheme scheme = InitScheme::Ibp;
  uint64_t seed = 1;
};

struct SchedConfig {
  double eps_target = 0.1;
  double eps_test = 0.1;
  double exp_fraction = 0.25;
  double start_factor = 1e-3;
};

struct BlobsConfig {
  int64_t n_per_class = 256;
  int64_t classes = 4;
  int64_t dim = 8;
  double separation = 2.0;
  double eval_fraction = 0.25;
  uint64_t seed = 7;
};

struct DataConfig {
  std::string dataset = "blobs";  // "blobs" or "mnist"
  std::string dir = "data/mnist";
  std::vector<double> normalize_mean;  // empty keeps the dataset default
  std::vector<double> normalize_std;
  BlobsConfig blobs;
};

struct AuditConfig {
  int64_t trials = 100;
  std::vector<InitScheme> schemes;
  int64_t seeds = 10;
  double eps = 0.1;
  int64_t batch = 8;
  uint64_t seed = 1;
};

struct GradcheckSection {
  double eps = 0.05;
  double lambda0 = 0.5;
  double tau = 0.5;
  double step = 1e-5;
  double tol = 1e-4;
  int64_t batch = 4;
  uint64_t seed = 3;
  int64_t max_checks = 0;
};

struct RunConfig {
  ArchDescription arch;
  InitConfig init;
  TrainConfig train;
  SchedConfig sched;
  DataConfig data;
  AuditConfig audit;
  GradcheckSection gradcheck;
  std::string out_dir = "runs/out";
};

inline nlohmann::json default_config_json() {
  return nlohmann::json::parse(R"({
    "arch": {
      "input": [8, 1, 1],
      "classes": 4,
      "full_bn": true,
      "layers": [
        {"kind": "flatten"},
        {"kind": "dense", "out": 32},
        {"kind": "relu"},
        {"kind": "dense", "out": 32},
        {"kind": "relu"},
        {"kind": "dense", "out": 4}
      ]
    },
    "init": {"scheme": "ibp", "seed": 1},
    "train": {
      "epochs_zero": 1,
      "epochs_increase": 2,
      "epochs_final": 2,
      "batch_size": 64,
      "lr": 5e-4,
      "lr_decay": 0.2,
      "milestones": [],
      "clip_norm": 10.0,
      "lambda0": 0.5,
      "tau": 0.5,
      "seed": 1,
      "shuffle": true
    },
    "sched": {
      "eps_target": 0.1,
      "eps_test": 0.1,
      "exp_fraction": 0.25,
      "start_factor": 1e-3
    },
    "data": {
      "dataset": "blobs",
      "dir": "data/mnist",
      "normalize_mean": [],
      "normalize_std": [],
      "blobs": {
        "n_per_class": 256,
        "classes": 4,
        "dim": 8,
        "separation": 2.0,
        "eval_fraction": 0.25,
        "seed": 7
      }
    },
    "audit": {
      "trials": 100,
      "schemes": ["ibp", "xavier_uniform", "xavier_gaussian", "kaiming_uniform", "kaiming_gaussian"],
      "seeds": 10,
      "eps": 0.1,
      "batch": 8,
      "seed": 1
    },
    "gradcheck": {
      "eps": 0.05,
      "lambda0": 0.5,
      "tau": 0.5,
      "step": 1e-5,
      "tol": 1e-4,
      "batch": 4,
      "seed": 3,
      "max_checks": 0
    },
    "out": {"dir": "runs/out"}
  })");
}

inline std::vector<double> num_array(const nlohmann::json& j, const std::string& key,
                                     const std::string& where) {
  const auto& v = cfg::require(j, key, where);
  if (!v.is_array()) throw ParseError(where + "." + key + ": expected an array");
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw ParseError(where + "." + key + ": expected numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  cfg::check_keys(j, {"arch", "init", "train", "sched", "data", "audit", "gradcheck", "out"},
                  "config");
  RunConfig c;
  c.arch = arch_from_json(cfg::require(j, "arch", "config"));

  const auto& init = cfg::require(j, "init", "config");
  cfg::check_keys(init, {"scheme", "seed"}, "init");
  c.init.scheme = init_scheme_from_string(cfg::get_str(init, "scheme", "init"));
  c.init.seed = cfg::get_uint(init, "seed", "init");

  const auto& tr = cfg::require(j, "train", "config");
  cfg::check_keys(tr,
                  {"epochs_zero", "epochs_increase", "epochs_final", "batch_size", "lr",
                   "lr_decay", "milestones", "clip_norm", "lambda0", "tau", "seed", "shuffle"},
                  "train");
  c.train.epochs_zero = cfg::get_int(tr, "epochs_zero", "train");
  c.train.epochs_increase = cfg::get_int(tr, "epochs_increase", "train");
  c.train.epochs_final = cfg::get_int(tr, "epochs_final", "train");
  c.train.batch_size = cfg::get_int(tr, "batch_size", "train");
  c.train.lr = cfg::get_num(tr, "lr", "train");
  c.train.lr_decay = cfg::get_num(tr, "lr_decay", "train");
  for (double m : num_array(tr, "milestones", "train"))
    c.train.milestones.push_back(static_cast<int64_t>(m));
  c.train.clip_norm = cfg::get_num(tr, "clip_norm", "train");
  c.train.lambda0 = cfg::get_num(tr, "lambda0", "train");
  c.train.tau = cfg::get_num(tr, "tau", "train");
  c.train.seed = cfg::get_uint(tr, "seed", "train");
  c.train.shuffle = cfg::get_bool(tr, "shuffle", "train");

  const auto& sc = cfg::require(j, "sched", "config");
  cfg::check_keys(sc, {"eps_target", "eps_test", "exp_fraction", "start_factor"}, "sched");
  c.sched.eps_target = cfg::get_num(sc, "eps_target", "sched");
  c.sched.eps_test = cfg::get_num(sc, "eps_test", "sched");
  c.sched.exp_fraction = cfg::get_num(sc, "exp_fraction", "sched");
  c.sched.start_factor = cfg::get_num(sc, "start_factor", "sched");
  c.train.eps_train = c.sched.eps_target;
  c.train.eps_test = c.sched.eps_test;
  c.train.exp_fraction = c.sched.exp_fraction;
  c.train.start_factor = c.sched.start_factor;

  const auto& da = cfg::require(j, "data", "config");
  cfg::check_keys(da, {"dataset", "dir", "normalize_mean", "normalize_std", "blobs"}, "data");
  c.data.dataset = cfg::get_str(da, "dataset", "data");
  if (c.data.dataset != "blobs" && c.data.dataset != "mnist")
    throw ParseError("data.dataset: expected 'blobs' or 'mnist'");
  c.data.dir = cfg::get_str(da, "dir", "data");
  c.data.normalize_mean = num_array(da, "normalize_mean", "data");
  c.data.normalize_std = num_array(da, "normalize_std", "data");
  const auto& bl = cfg::require(da, "blobs", "data");
  cfg::check_keys(bl, {"n_per_class", "classes", "dim", "separation", "eval_fraction", "seed"},
                  "data.blobs");
  c.data.blobs.n_per_class = cfg::get_int(bl, "n_per_class", "data.blobs");
  c.data.blobs.classes = cfg::get_int(bl, "classes", "data.blobs");
  c.data.blobs.dim = cfg::get_int(bl, "dim", "data.blobs");
  c.data.blobs.separation = cfg::get_num(bl, "separation", "data.blobs");
  c.data.blobs.eval_fraction = cfg::get_num(bl, "eval_fraction", "data.blobs");
  c.data.blobs.seed = cfg::get_uint(bl, "seed", "data.blobs");

  const auto& au = cfg::require(j, "audit", "config");
  cfg::check_keys(au, {"trials", "schemes", "seeds", "eps", "batch", "seed"}, "audit");
  c.audit.trials = cfg::get_int(au, "trials", "audit");
  const auto& schemes = cfg::require(au, "schemes", "audit");
  if (!schemes.is_array()) throw ParseError("audit.schemes: expected an array");
  for (const auto& s : schemes) {
    if (!s.is_string()) throw ParseError("audit.schemes: expected strings");
    c.audit.schemes.push_back(init_scheme_from_string(s.get<std::string>()));
  }
  c.audit.seeds = cfg::get_int(au, "seeds", "audit");
  c.audit.eps = cfg::get_num(au, "eps", "audit");
  c.audit.batch = cfg::get_int(au, "batch", "audit");
  c.audit.seed = cfg::get_uint(au, "seed", "audit");

  const auto& gc = cfg::require(j, "gradcheck", "config");
  cfg::check_keys(gc, {"eps", "lambda0", "tau", "step", "tol", "batch", "seed", "max_checks"},
                  "gradcheck");
  c.gradcheck.eps = cfg::get_num(gc, "eps", "gradcheck");
  c.gradcheck.lambda0 = cfg::get_num(gc, "lambda0", "gradcheck");
  c.gradcheck.tau = cfg::get_num(gc, "tau", "gradcheck");
  c.gradcheck.step = cfg::get_num(gc, "step", "gradcheck");
  c.gradcheck.tol = cfg::get_num(gc, "tol", "gradcheck");
  c.gradcheck.batch = cfg::get_int(gc, "batch", "gradcheck");
  c.gradcheck.seed = cfg::get_uint(gc, "seed", "gradcheck");
  c.gradcheck.max_checks = cfg::get_int(gc, "max_checks", "gradcheck");

  const auto& out = cfg::require(j, "out", "config");
  cfg::check_keys(out, {"dir"}, "out");
  c.out_dir = cfg::get_str(out, "dir", "out");
  return c;
}

// Sets one dotted-path override ("train.seed", "sched.eps-target") in a config
// document.  Hyphens map to underscores; the value is parsed as JSON when
// possible and kept as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& dotted,
                           const std::string& value) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : dotted) {
    if (ch == '.') {
      if (cur.empty()) throw ParseError("override '" + dotted + "': empty path segment");
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch == '-' ? '_' : ch;
    }
  }
  if (cur.empty()) throw ParseError("override '" + dotted + "': empty path segment");
  parts.push_back(cur);

  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) parsed = value;

  nlohmann::json* node = &doc;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ParseError("override '" + dotted + "': path through non-object");
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() && !node->is_null())
    throw ParseError("override '" + dotted + "': path through non-object");
  (*node)[parts.back()] = std::move(parsed);
}

// Defaults overlaid with a user document; arrays are replaced wholesale.
inline nlohmann::json effective_config(const nlohmann::json& user) {
  nlohmann::json doc = default_config_json();
  doc.merge_patch(user);
  return doc;
}

inline nlohmann::json load_config_file(const std::string& path) {
  const std::string text = read_file(path);
  nlohmann::json j = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ParseError(path + ": invalid JSON");
  return j;
}

}  // namespace certkit
