#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "certkit/config.hpp"
#include "certkit/data.hpp"
#include "certkit/errors.hpp"
#include "certkit/ioutil.hpp"
#include "certkit/net.hpp"
#include "certkit/tensor.hpp"
#include "certkit/train.hpp"

namespace certkit {

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'C', 'E', 'R', 'T', 'K', 'I', 'T', '1'};
inline constexpr int kContainerVersion = 1;

template <class T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }

// Manifest-plus-blob container: magic, u32 manifest length, JSON manifest,
// then tensor payloads as little-endian IEEE-754/two's-complement values.
class ContainerWriter {
 public:
  explicit ContainerWriter(const std::string& kind) {
    manifest["format"] = "certkit-container";
    manifest["format_version"] = kContainerVersion;
    manifest["kind"] = kind;
    manifest["tensors"] = nlohmann::json::array();
  }

  template <class T>
  void add(const std::string& name, const Tensor<T>& t) {
    append(name, t.shape(), dtype_name<T>(), t.data(), static_cast<size_t>(t.size()) * sizeof(T));
  }

  void add_i64(const std::string& name, const std::vector<int64_t>& v) {
    append(name, Shape{static_cast<int64_t>(v.size())}, "i64", v.data(), v.size() * sizeof(int64_t));
  }

  std::string finish() const {
    const std::string m = manifest.dump();
    if (m.size() > 0xFFFFFFFFull) throw IoError("container manifest too large");
    std::string out(kContainerMagic, sizeof(kContainerMagic));
    const uint32_t len = static_cast<uint32_t>(m.size());
    char lenbuf[4];
    std::memcpy(lenbuf, &len, 4);
    out.append(lenbuf, 4);
    out += m;
    out += blob_;
    return out;
  }

  nlohmann::json manifest;

 private:
  void append(const std::string& name, const Shape& shape, const char* dtype, const void* data,
              size_t bytes) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = shape;
    e["dtype"] = dtype;
    e["offset"] = blob_.size();
    e["length"] = bytes;
    manifest["tensors"].push_back(std::move(e));
    blob_.append(static_cast<const char*>(data), bytes);
  }

  std::string blob_;
};

class ContainerReader {
 public:
  ContainerReader(std::string bytes, std::string source)
      : bytes_(std::move(bytes)), source_(std::move(source)) {
    if (bytes_.size() < sizeof(kContainerMagic) + 4)
      throw ParseError(source_ + ": truncated container header");
    if (std::memcmp(bytes_.data(), kContainerMagic, sizeof(kContainerMagic)) != 0)
      throw ParseError(source_ + ": bad magic bytes");
    uint32_t len = 0;
    std::memcpy(&len, bytes_.data() + sizeof(kContainerMagic), 4);
    blob_off_ = sizeof(kContainerMagic) + 4 + len;
    if (blob_off_ > bytes_.size()) throw ParseError(source_ + ": truncated manifest");
    manifest_ = nlohmann::json::parse(
        bytes_.begin() + sizeof(kContainerMagic) + 4, bytes_.begin() + static_cast<long>(blob_off_),
        nullptr, /*allow_exceptions=*/false);
    if (manifest_.is_discarded()) throw ParseError(source_ + ": invalid manifest JSON");
    if (!manifest_.is_object() || manifest_.value("format", "") != "certkit-container")
      throw ParseError(source_ + ": not a certkit container");
    if (manifest_.value("format_version", -1) != kContainerVersion)
      throw ParseError(source_ + ": unsupported container version");
    if (!manifest_.contains("tensors") || !manifest_["tensors"].is_array())
      throw ParseError(source_ + ": manifest has no tensor directory");
    const size_t blob_size = bytes_.size() - blob_off_;
    for (const auto& e : manifest_["tensors"]) {
      Entry entry;
      const std::string name = cfg::get_str(e, "name", source_ + ": tensor entry");
      const auto& shape = cfg::require(e, "shape", source_ + ": tensor entry");
      if (!shape.is_array()) throw ParseError(source_ + ": tensor shape must be an array");
      for (const auto& d : shape) entry.shape.push_back(d.get<int64_t>());
      entry.dtype = cfg::get_str(e, "dtype", source_ + ": tensor entry");
      entry.offset = cfg::get_uint(e, "offset", source_ + ": tensor entry");
      entry.length = cfg::get_uint(e, "length", source_ + ": tensor entry");
      if (entry.offset + entry.length > blob_size)
        throw ParseError(source_ + ": tensor '" + name + "' extends past end of file");
      const uint64_t elems = static_cast<uint64_t>(numel(entry.shape));
      const uint64_t elem_size = entry.dtype == "f32" ? 4 : 8;
      if (entry.dtype != "f32" && entry.dtype != "f64" && entry.dtype != "i64")
        throw ParseError(source_ + ": tensor '" + name + "' has unknown dtype " + entry.dtype);
      if (entry.length != elems * elem_size)
        throw ParseError(source_ + ": tensor '" + name + "' length does not match its shape");
      entries_.emplace(name, std::move(entry));
    }
  }

  const nlohmann::json& manifest() const { return manifest_; }
  std::string kind() const { return manifest_.value("kind", ""); }
  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  template <class T>
  Tensor<T> tensor(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != dtype_name<T>())
      throw ParseError(source_ + ": tensor '" + name + "' stores " + e.dtype + ", requested " +
                       dtype_name<T>());
    Tensor<T> t(e.shape);
    std::memcpy(t.data(), bytes_.data() + blob_off_ + e.offset, e.length);
    return t;
  }

  std::vector<int64_t> i64(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype != "i64")
      throw ParseError(source_ + ": tensor '" + name + "' stores " + e.dtype + ", requested i64");
    std::vector<int64_t> v(static_cast<size_t>(numel(e.shape)));
    std::memcpy(v.data(), bytes_.data() + blob_off_ + e.offset, e.length);
    return v;
  }

 private:
  struct Entry {
    Shape shape;
    std::string dtype;
    uint64_t offset = 0, length = 0;
  };
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ParseError(source_ + ": no tensor named '" + name + "'");
    return it->second;
  }

  std::string bytes_;
  std::string source_;
  nlohmann::json manifest_;
  size_t blob_off_ = 0;
  std::map<std::string, Entry> entries_;
};

inline nlohmann::json metrics_row_to_json(const MetricsRow& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["eps"] = r.eps;
  j["lambda"] = r.lambda;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  j["loss_rob"] = r.loss_rob;
  j["loss_tightness"] = r.loss_tightness;
  j["loss_relu"] = r.loss_relu;
  j["standard_error"] = r.standard_error;
  j["verified_error"] = r.verified_error;
  j["frac_active"] = r.frac_active;
  j["frac_inactive"] = r.frac_inactive;
  j["frac_unstable"] = r.frac_unstable;
  j["log_delta_ratio"] = r.log_delta_ratio;
  return j;
}

inline MetricsRow metrics_row_from_json(const nlohmann::json& j) {
  MetricsRow r;
  r.epoch = cfg::get_int(j, "epoch", "metrics row");
  r.eps = cfg::get_num(j, "eps", "metrics row");
  r.lambda = cfg::get_num(j, "lambda", "metrics row");
  r.lr = cfg::get_num(j, "lr", "metrics row");
  r.loss = cfg::get_num(j, "loss", "metrics row");
  r.loss_rob = cfg::get_num(j, "loss_rob", "metrics row");
  r.loss_tightness = cfg::get_num(j, "loss_tightness", "metrics row");
  r.loss_relu = cfg::get_num(j, "loss_relu", "metrics row");
  r.standard_error = cfg::get_num(j, "standard_error", "metrics row");
  r.verified_error = cfg::get_num(j, "verified_error", "metrics row");
  r.frac_active = cfg::get_num(j, "frac_active", "metrics row");
  r.frac_inactive = cfg::get_num(j, "frac_inactive", "metrics row");
  r.frac_unstable = cfg::get_num(j, "frac_unstable", "metrics row");
  r.log_delta_ratio = cfg::get_num(j, "log_delta_ratio", "metrics row");
  return r;
}

template <class T>
struct CheckpointData {
  ArchDescription arch;
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, Tensor<T>> buffers;
  std::map<std::string, Tensor<T>> adam_m;
  std::map<std::string, Tensor<T>> adam_v;
  int64_t adam_step = 0;
  int64_t epoch = 0;
  int64_t global_step = 0;
  bool residual_calibrated = false;
  std::vector<MetricsRow> history;
};

template <class T>
std::string encode_checkpoint(const Network<T>& net, const AdamState<T>& adam, int64_t epoch,
                              int64_t global_step, const std::vector<MetricsRow>& history) {
  ContainerWriter w("checkpoint");
  w.manifest["dtype"] = dtype_name<T>();
  w.manifest["arch"] = arch_to_json(net.arch);
  w.manifest["train"] = {{"epoch", epoch},
                         {"global_step", global_step},
                         {"adam_step", adam.step},
                         {"residual_calibrated", net.residual_calibrated}};
  nlohmann::json rows = nlohmann::json::array();
  for (const MetricsRow& r : history) rows.push_back(metrics_row_to_json(r));
  w.manifest["metrics"] = std::move(rows);
  for (const auto& [name, t] : net.params) w.add("param." + name, t);
  for (const auto& [name, t] : net.buffers) w.add("buffer." + name, t);
  for (const auto& [name, t] : adam.m) w.add("adam.m." + name, t);
  for (const auto& [name, t] : adam.v) w.add("adam.v." + name, t);
  return w.finish();
}

template <class T>
void save_checkpoint(const std::string& path, const Network<T>& net, const AdamState<T>& adam,
                     int64_t epoch, int64_t global_step, const std::vector<MetricsRow>& history) {
  atomic_write_file(path, encode_checkpoint(net, adam, epoch, global_step, history));
}

template <class T>
CheckpointData<T> load_checkpoint(const std::string& path) {
  ContainerReader r(read_file(path), path);
  if (r.kind() != "checkpoint") throw ParseError(path + ": container is not a checkpoint");
  const auto& man = r.manifest();
  if (man.value("dtype", "") != dtype_name<T>())
    throw ParseError(path + ": checkpoint dtype " + man.value("dtype", "?") + ", requested " +
                     dtype_name<T>());
  CheckpointData<T> ck;
  ck.arch = arch_from_json(cfg::require(man, "arch", path));
  const auto& tr = cfg::require(man, "train", path);
  ck.epoch = cfg::get_int(tr, "epoch", path + ": train");
  ck.global_step = cfg::get_int(tr, "global_step", path + ": train");
  ck.adam_step = cfg::get_int(tr, "adam_step", path + ": train");
  ck.residual_calibrated = cfg::get_bool(tr, "residual_calibrated", path + ": train");
  for (const auto& row : cfg::require(man, "metrics", path))
    ck.history.push_back(metrics_row_from_json(row));
  for (const auto& e : man["tensors"]) {
    const std::string name = e.at("name").get<std::string>();
    if (name.rfind("param.", 0) == 0)
      ck.params.emplace(name.substr(6), r.tensor<T>(name));
    else if (name.rfind("buffer.", 0) == 0)
      ck.buffers.emplace(name.substr(7), r.tensor<T>(name));
    else if (name.rfind("adam.m.", 0) == 0)
      ck.adam_m.emplace(name.substr(7), r.tensor<T>(name));
    else if (name.rfind("adam.v.", 0) == 0)
      ck.adam_v.emplace(name.substr(7), r.tensor<T>(name));
    else
      throw ParseError(path + ": unexpected tensor '" + name + "'");
  }
  return ck;
}

// Rebuilds the network and optimizer state a checkpoint describes.
template <class T>
Network<T> restore_network(const CheckpointData<T>& ck) {
  Network<T> net = build<T>(ck.arch);
  if (ck.params.size() != net.params.size() || ck.buffers.size() != net.buffers.size())
    throw ParseError("checkpoint: tensor set does not match the stored architecture");
  for (auto& [name, t] : net.params) {
    auto it = ck.params.find(name);
    if (it == ck.params.end()) throw ParseError("checkpoint: missing parameter " + name);
    if (!it->second.same_shape(t)) throw ParseError("checkpoint: shape mismatch for " + name);
    t = it->second;
  }
  for (auto& [name, t] : net.buffers) {
    auto it = ck.buffers.find(name);
    if (it == ck.buffers.end()) throw ParseError("checkpoint: missing buffer " + name);
    if (!it->second.same_shape(t)) throw ParseError("checkpoint: shape mismatch for " + name);
    t = it->second;
  }
  net.initialized = true;
  net.residual_calibrated = ck.residual_calibrated;
  return net;
}

template <class T>
AdamState<T> restore_adam(const Network<T>& net, const CheckpointData<T>& ck) {
  AdamState<T> st = make_adam_state(net);
  st.step = ck.adam_step;
  for (auto& [name, t] : st.m) {
    auto it = ck.adam_m.find(name);
    if (it == ck.adam_m.end()) throw ParseError("checkpoint: missing adam.m for " + name);
    if (!it->second.same_shape(t)) throw ParseError("checkpoint: adam.m shape mismatch for " + name);
    t = it->second;
  }
  for (auto& [name, t] : st.v) {
    auto it = ck.adam_v.find(name);
    if (it == ck.adam_v.end()) throw ParseError("checkpoint: missing adam.v for " + name);
    if (!it->second.same_shape(t)) throw ParseError("checkpoint: adam.v shape mismatch for " + name);
    t = it->second;
  }
  return st;
}

// Synthetic datasets round-trip through the same container format.
template <class T>
void save_dataset(const std::string& path, const Dataset<T>& ds) {
  ContainerWriter w("dataset");
  w.manifest["dtype"] = dtype_name<T>();
  w.manifest["dataset"] = {{"classes", ds.classes},
                           {"split", ds.split},
                           {"clip", {static_cast<double>(ds.spec.clip_lo),
                                     static_cast<double>(ds.spec.clip_hi)}},
                           {"normalize_mean", ds.spec.mean},
                           {"normalize_std", ds.spec.std}};
  w.add("images", ds.images);
  w.add_i64("labels", ds.labels);
  atomic_write_file(path, w.finish());
}

template <class T>
Dataset<T> load_dataset(const std::string& path) {
  ContainerReader r(read_file(path), path);
  if (r.kind() != "dataset") throw ParseError(path + ": container is not a dataset");
  const auto& man = r.manifest();
  if (man.value("dtype", "") != dtype_name<T>())
    throw ParseError(path + ": dataset dtype mismatch");
  const auto& meta = cfg::require(man, "dataset", path);
  Dataset<T> ds;
  ds.classes = cfg::get_int(meta, "classes", path);
  ds.split = cfg::get_str(meta, "split", path);
  const auto& clip = cfg::require(meta, "clip", path);
  ds.spec.clip_lo = static_cast<T>(clip.at(0).get<double>());
  ds.spec.clip_hi = static_cast<T>(clip.at(1).get<double>());
  ds.spec.mean.clear();
  for (const auto& v : cfg::require(meta, "normalize_mean", path))
    ds.spec.mean.push_back(static_cast<T>(v.get<double>()));
  ds.spec.std.clear();
  for (const auto& v : cfg::require(meta, "normalize_std", path))
    ds.spec.std.push_back(static_cast<T>(v.get<double>()));
  ds.images = r.tensor<T>("images");
  ds.labels = r.i64("labels");
  ds.validate();
  return ds;
}

}  // namespace certkit
