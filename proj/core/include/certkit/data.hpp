#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "certkit/errors.hpp"
#include "certkit/ibp.hpp"
#include "certkit/rng.hpp"
#include "certkit/tensor.hpp"

namespace certkit {

// Raw images in [0,1] plus labels.  Normalization constants live in `spec`
// and are applied only inside input_interval, never to the stored pixels.
template <class T>
struct Dataset {
  Tensor<T> images;  // [N, C, H, W]
  std::vector<int64_t> labels;
  int64_t classes = 0;
  InputSpec<T> spec;
  std::string split;

  int64_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  Shape example_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  void validate() const {
    if (images.rank() != 4) throw DimensionError("dataset: images must be NCHW");
    if (static_cast<int64_t>(labels.size()) != images.dim(0))
      throw DimensionError("dataset: label count does not match image count");
    if (classes < 2) throw ArgumentError("dataset: need at least 2 classes");
    for (int64_t y : labels)
      if (y < 0 || y >= classes) throw ArgumentError("dataset: label out of range");
    for (int64_t i = 0; i < images.size(); ++i)
      if (!(images[i] >= spec.clip_lo && images[i] <= spec.clip_hi))
        throw ArgumentError("dataset: pixel outside clip range");
  }
};

namespace detail {

inline uint32_t read_u32_be(std::ifstream& f, const std::string& path, uint64_t& offset) {
  unsigned char buf[4];
  f.read(reinterpret_cast<char*>(buf), 4);
  if (f.gcount() != 4)
    throw ParseError(path + ": truncated at byte " + std::to_string(offset));
  offset += 4;
  return (static_cast<uint32_t>(buf[0]) << 24) | (static_cast<uint32_t>(buf[1]) << 16) |
         (static_cast<uint32_t>(buf[2]) << 8) | static_cast<uint32_t>(buf[3]);
}

}  // namespace detail

// Reads an IDX image/label file pair.  Pixels are scaled to [0,1]; labels are
// range-checked against the 10 MNIST classes.
template <class T>
Dataset<T> load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw IoError("cannot open " + images_path);
  uint64_t off = 0;
  const uint32_t magic_i = detail::read_u32_be(fi, images_path, off);
  if (magic_i != 0x00000803u)
    throw ParseError(images_path + ": bad magic at byte 0 (expected 0x00000803)");
  const uint32_t n = detail::read_u32_be(fi, images_path, off);
  const uint32_t rows = detail::read_u32_be(fi, images_path, off);
  const uint32_t cols = detail::read_u32_be(fi, images_path, off);
  if (n == 0 || rows == 0 || cols == 0)
    throw ParseError(images_path + ": zero dimension in header");
  const uint64_t count = static_cast<uint64_t>(n) * rows * cols;
  std::vector<unsigned char> pixels(count);
  fi.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(count));
  if (static_cast<uint64_t>(fi.gcount()) != count)
    throw ParseError(images_path + ": truncated at byte " +
                     std::to_string(off + static_cast<uint64_t>(fi.gcount())));

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw IoError("cannot open " + labels_path);
  uint64_t loff = 0;
  const uint32_t magic_l = detail::read_u32_be(fl, labels_path, loff);
  if (magic_l != 0x00000801u)
    throw ParseError(labels_path + ": bad magic at byte 0 (expected 0x00000801)");
  const uint32_t nl = detail::read_u32_be(fl, labels_path, loff);
  if (nl != n)
    throw ParseError(labels_path + ": label count " + std::to_string(nl) +
                     " does not match image count " + std::to_string(n));
  std::vector<unsigned char> raw_labels(nl);
  fl.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(nl));
  if (static_cast<uint64_t>(fl.gcount()) != nl)
    throw ParseError(labels_path + ": truncated at byte " +
                     std::to_string(loff + static_cast<uint64_t>(fl.gcount())));

  Dataset<T> ds;
  ds.classes = 10;
  ds.split = images_path;
  std::vector<T> values(count);
  for (uint64_t i = 0; i < count; ++i) values[i] = static_cast<T>(pixels[i]) / T(255);
  ds.images = Tensor<T>::from_vector(
      Shape{static_cast<int64_t>(n), 1, static_cast<int64_t>(rows), static_cast<int64_t>(cols)},
      std::move(values));
  ds.labels.resize(nl);
  for (uint32_t i = 0; i < nl; ++i) {
    if (raw_labels[i] >= 10)
      throw ParseError(labels_path + ": label value " + std::to_string(raw_labels[i]) +
                       " out of range at byte " + std::to_string(loff + i));
    ds.labels[i] = raw_labels[i];
  }
  // Community-standard MNIST normalization; overridable by config.
  ds.spec.mean = {static_cast<T>(0.1307)};
  ds.spec.std = {static_cast<T>(0.3081)};
  ds.validate();
  return ds;
}

// K Gaussian clusters with centers fixed by (K, dim) and width 0.3/separation,
// clipped to the unit box.  Images are shaped [N, dim, 1, 1].
template <class T>
Dataset<T> synth_blobs(SeededRng& rng, int64_t n_per_class, int64_t k, int64_t dim, double separation) {
  if (n_per_class < 1) throw ArgumentError("synth_blobs: n_per_class must be >= 1");
  if (k < 2) throw ArgumentError("synth_blobs: need at least 2 classes");
  if (dim < 1) throw ArgumentError("synth_blobs: dim must be >= 1");
  if (!(separation > 0)) throw ArgumentError("synth_blobs: separation must be > 0");

  // Centers depend only on (K, dim): rejection-sampled from a fixed stream so
  // clusters stay apart when the box has room.
  SeededRng center_rng(0xB10B5u);
  std::vector<std::vector<double>> centers;
  for (int64_t c = 0; c < k; ++c) {
    std::vector<double> best;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::vector<double> cand(static_cast<size_t>(dim));
      for (int64_t d = 0; d < dim; ++d) cand[static_cast<size_t>(d)] = 0.2 + 0.6 * center_rng.next_uniform();
      double min_dist = 1e300;
      for (const auto& other : centers) {
        double acc = 0;
        for (int64_t d = 0; d < dim; ++d) {
          const double diff = cand[static_cast<size_t>(d)] - other[static_cast<size_t>(d)];
          acc += diff * diff;
        }
        min_dist = std::min(min_dist, std::sqrt(acc));
      }
      best = cand;
      if (centers.empty() || min_dist >= 0.25) break;
    }
    centers.push_back(std::move(best));
  }

  const double sigma = 0.3 / separation;
  const int64_t n = n_per_class * k;
  Dataset<T> ds;
  ds.classes = k;
  ds.split = "blobs";
  ds.images = Tensor<T>(Shape{n, dim, 1, 1});
  ds.labels.resize(static_cast<size_t>(n));
  int64_t idx = 0;
  for (int64_t c = 0; c < k; ++c)
    for (int64_t i = 0; i < n_per_class; ++i, ++idx) {
      ds.labels[static_cast<size_t>(idx)] = c;
      for (int64_t d = 0; d < dim; ++d) {
        double v = centers[static_cast<size_t>(c)][static_cast<size_t>(d)] + sigma * rng.next_gaussian();
        v = std::min(std::max(v, 0.0), 1.0);
        ds.images[idx * dim + d] = static_cast<T>(v);
      }
    }
  ds.validate();
  return ds;
}

// Epoch permutation: identity without shuffling, otherwise Fisher-Yates from
// a stream derived from (seed, epoch) so epochs differ but runs reproduce.
inline std::vector<int64_t> epoch_permutation(int64_t n, bool shuffle, uint64_t seed, int64_t epoch) {
  if (!shuffle) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    return p;
  }
  SeededRng rng(SeededRng::mix(seed, static_cast<uint64_t>(epoch)));
  return rng.permutation(n);
}

// Deterministic batch sequence over one epoch; the remainder batch is kept.
template <class T>
class BatchIter {
 public:
  BatchIter(const Dataset<T>& ds, int64_t batch_size, bool shuffle, uint64_t seed, int64_t epoch)
      : ds_(ds), batch_size_(batch_size), perm_(epoch_permutation(ds.size(), shuffle, seed, epoch)) {
    if (batch_size < 1) throw ArgumentError("batch_iter: batch_size must be >= 1");
  }

  int64_t num_batches() const {
    return (ds_.size() + batch_size_ - 1) / batch_size_;
  }

  bool next(Tensor<T>& x, std::vector<int64_t>& y) {
    if (pos_ >= ds_.size()) return false;
    const int64_t count = std::min(batch_size_, ds_.size() - pos_);
    const Shape ex = ds_.example_shape();
    const int64_t stride = numel(ex);
    x = Tensor<T>(Shape{count, ex[0], ex[1], ex[2]});
    y.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      const int64_t src = perm_[static_cast<size_t>(pos_ + i)];
      const T* from = ds_.images.data() + src * stride;
      T* to = x.data() + i * stride;
      for (int64_t j = 0; j < stride; ++j) to[j] = from[j];
      y[static_cast<size_t>(i)] = ds_.labels[static_cast<size_t>(src)];
    }
    pos_ += count;
    return true;
  }

 private:
  const Dataset<T>& ds_;
  int64_t batch_size_;
  std::vector<int64_t> perm_;
  int64_t pos_ = 0;
};

}  // namespace certkit
