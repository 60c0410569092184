#pragma once

// Labeled datasets and their distribution over clients.

#include "fedagg/rng.hpp"
#include "fedagg/types.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedagg {

struct LabeledDataset {
  RowMatrix features;           // n_samples x n_features
  std::vector<int> labels;      // one per sample, in [0, n_classes)
  int n_classes = 0;

  std::size_t size() const { return labels.size(); }
  Eigen::Index n_features() const { return features.cols(); }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("dataset has no samples");
    if (static_cast<std::size_t>(features.rows()) != labels.size())
      throw std::invalid_argument("dataset has " + std::to_string(features.rows()) + " feature rows but " +
                                  std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || y >= n_classes)
        throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " + std::to_string(n_classes) + ")");
    if (!features.allFinite()) throw std::invalid_argument("dataset contains non-finite feature values");
  }

  std::vector<std::size_t> label_histogram(std::span<const std::size_t> indices) const {
    std::vector<std::size_t> h(static_cast<std::size_t>(n_classes), 0);
    for (auto i : indices) ++h[static_cast<std::size_t>(labels[i])];
    return h;
  }
};

// Copies the selected rows into a new dataset with the same class count.
inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  LabeledDataset out;
  out.n_classes = ds.n_classes;
  out.features.resize(static_cast<Eigen::Index>(indices.size()), ds.n_features());
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.features.row(static_cast<Eigen::Index>(k)) = ds.features.row(static_cast<Eigen::Index>(indices[k]));
    out.labels.push_back(ds.labels[indices[k]]);
  }
  return out;
}

// Gaussian class clusters. Class means are standard normal vectors and
// samples are the mean plus isotropic noise of standard deviation `spread`.
// Samples are stored class-major (all of class 0, then class 1, ...).
inline LabeledDataset generate_blobs(int n_classes, int per_class, int dim, double spread, std::uint64_t seed) {
  if (n_classes <= 0 || per_class <= 0 || dim <= 0)
    throw std::invalid_argument("generate_blobs: class count, per-class count and dimension must be positive");
  if (!(spread >= 0.0)) throw std::invalid_argument("generate_blobs: spread must be non-negative");

  Stream rng(seed, Purpose::DataGeneration);
  RowMatrix means(n_classes, dim);
  for (Eigen::Index c = 0; c < n_classes; ++c)
    for (Eigen::Index j = 0; j < dim; ++j) means(c, j) = rng.normal();

  LabeledDataset ds;
  ds.n_classes = n_classes;
  ds.features.resize(static_cast<Eigen::Index>(n_classes) * per_class, dim);
  ds.labels.reserve(static_cast<std::size_t>(n_classes) * per_class);
  Eigen::Index row = 0;
  for (int c = 0; c < n_classes; ++c) {
    for (int s = 0; s < per_class; ++s, ++row) {
      for (Eigen::Index j = 0; j < dim; ++j) {
        const double noise = spread == 0.0 ? 0.0 : spread * rng.normal();
        ds.features(row, j) = means(c, j) + noise;
      }
      ds.labels.push_back(c);
    }
  }
  return ds;
}

// Splits off the last `test_per_class` samples of every class as a held-out set.
inline std::pair<LabeledDataset, LabeledDataset> holdout_per_class(const LabeledDataset& ds, int test_per_class) {
  std::vector<std::vector<std::size_t>> by_label(static_cast<std::size_t>(ds.n_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_label[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<std::size_t> train, test;
  for (const auto& pool : by_label) {
    if (pool.size() <= static_cast<std::size_t>(test_per_class))
      throw std::invalid_argument("holdout_per_class: a class has too few samples for the requested test split");
    const auto cut = pool.size() - static_cast<std::size_t>(test_per_class);
    train.insert(train.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cut));
    test.insert(test.end(), pool.begin() + static_cast<std::ptrdiff_t>(cut), pool.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {subset(ds, train), subset(ds, test)};
}

// ---------------------------------------------------------------------------
// IDX files (big-endian header, raw unsigned bytes)

class IdxError : public std::runtime_error {
 public:
  enum class Kind { Open, BadMagic, Truncated, CountMismatch };

  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803u;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801u;

namespace detail {

inline std::vector<unsigned char> read_all_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Open, "cannot open IDX file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(std::span<const unsigned char> bytes, std::size_t offset, const std::string& file) {
  if (bytes.size() < offset + 4)
    throw IdxError(IdxError::Kind::Truncated, file + ": truncated header (" + std::to_string(bytes.size()) + " bytes)");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void append_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

// Reads an images/labels pair. Pixels are scaled to [0, 1]; the class count is
// one past the largest label present.
inline LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = detail::read_all_bytes(images_path);
  const auto lab = detail::read_all_bytes(labels_path);
  const std::string img_name = images_path.string();
  const std::string lab_name = labels_path.string();

  const auto img_magic = detail::read_be32(img, 0, img_name);
  if (img_magic != kIdxImageMagic)
    throw IdxError(IdxError::Kind::BadMagic, img_name + ": bad image magic " + std::to_string(img_magic) +
                                                 " (expected 2051)");
  const auto lab_magic = detail::read_be32(lab, 0, lab_name);
  if (lab_magic != kIdxLabelMagic)
    throw IdxError(IdxError::Kind::BadMagic, lab_name + ": bad label magic " + std::to_string(lab_magic) +
                                                 " (expected 2049)");

  const std::size_t n_images = detail::read_be32(img, 4, img_name);
  const std::size_t rows = detail::read_be32(img, 8, img_name);
  const std::size_t cols = detail::read_be32(img, 12, img_name);
  const std::size_t n_labels = detail::read_be32(lab, 4, lab_name);
  if (n_images != n_labels)
    throw IdxError(IdxError::Kind::CountMismatch, "IDX count mismatch: " + std::to_string(n_images) + " images vs " +
                                                      std::to_string(n_labels) + " labels");

  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n_images * pixels)
    throw IdxError(IdxError::Kind::Truncated, img_name + ": truncated payload, expected " +
                                                  std::to_string(n_images * pixels) + " pixel bytes, found " +
                                                  std::to_string(img.size() - 16));
  if (lab.size() < 8 + n_labels)
    throw IdxError(IdxError::Kind::Truncated, lab_name + ": truncated payload, expected " + std::to_string(n_labels) +
                                                  " label bytes, found " + std::to_string(lab.size() - 8));
  if (n_images == 0) throw IdxError(IdxError::Kind::Truncated, img_name + ": contains no images");

  LabeledDataset ds;
  ds.features.resize(static_cast<Eigen::Index>(n_images), static_cast<Eigen::Index>(pixels));
  ds.labels.resize(n_images);
  int max_label = 0;
  for (std::size_t i = 0; i < n_images; ++i) {
    for (std::size_t j = 0; j < pixels; ++j)
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = img[16 + i * pixels + j] / 255.0;
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.n_classes = max_label + 1;
  return ds;
}

inline void write_idx_images(const std::filesystem::path& path, std::span<const unsigned char> pixels,
                             std::uint32_t count, std::uint32_t rows, std::uint32_t cols) {
  std::vector<unsigned char> bytes;
  detail::append_be32(bytes, kIdxImageMagic);
  detail::append_be32(bytes, count);
  detail::append_be32(bytes, rows);
  detail::append_be32(bytes, cols);
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  detail::write_bytes(path, bytes);
}

inline void write_idx_labels(const std::filesystem::path& path, std::span<const unsigned char> labels) {
  std::vector<unsigned char> bytes;
  detail::append_be32(bytes, kIdxLabelMagic);
  detail::append_be32(bytes, static_cast<std::uint32_t>(labels.size()));
  bytes.insert(bytes.end(), labels.begin(), labels.end());
  detail::write_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// Partitions

struct Partition {
  std::vector<std::vector<std::size_t>> assignments;  // per client, indices into the parent dataset

  std::size_t client_count() const { return assignments.size(); }

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s;
    s.reserve(assignments.size());
    for (const auto& a : assignments) s.push_back(a.size());
    return s;
  }

  // Disjoint, nonempty, within range. Throws on the first violation.
  void validate(std::size_t n_samples) const {
    std::vector<char> seen(n_samples, 0);
    for (std::size_t c = 0; c < assignments.size(); ++c) {
      if (assignments[c].empty()) throw std::logic_error("partition: client " + std::to_string(c) + " is empty");
      for (auto i : assignments[c]) {
        if (i >= n_samples) throw std::logic_error("partition: index out of range");
        if (seen[i]) throw std::logic_error("partition: index " + std::to_string(i) + " assigned twice");
        seen[i] = 1;
      }
    }
  }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> indices_by_label(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(ds.n_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) pools[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  return pools;
}

// Splits `total` over buckets proportionally to `shares` by largest remainder.
inline std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const std::size_t> shares) {
  const std::size_t denom = std::accumulate(shares.begin(), shares.end(), std::size_t{0});
  std::vector<std::size_t> out(shares.size());
  std::vector<std::pair<std::size_t, std::size_t>> rem;  // (remainder numerator, bucket)
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < shares.size(); ++c) {
    const std::size_t num = total * shares[c];
    out[c] = num / denom;
    assigned += out[c];
    rem.emplace_back(num % denom, c);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[rem[k].second];
  return out;
}

}  // namespace detail

// Gives each client the global label distribution. Quotas per label come from
// largest-remainder rounding of size * (label share); within each label the
// pool is shuffled once, and clients are dealt label by label round-robin.
// Samples not requested by any client are left out.
inline Partition partition_iid(const LabeledDataset& ds, std::span<const std::size_t> sizes, std::uint64_t seed) {
  if (sizes.empty()) throw std::invalid_argument("partition_iid: no client sizes given");
  const std::size_t requested = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (requested > ds.size())
    throw std::invalid_argument("partition_iid: requested " + std::to_string(requested) + " samples but dataset has " +
                                std::to_string(ds.size()));

  auto pools = detail::indices_by_label(ds);
  Stream rng(seed, Purpose::Partitioning);
  for (auto& pool : pools) rng.shuffle(std::span(pool));

  std::vector<std::size_t> supply;
  for (const auto& pool : pools) supply.push_back(pool.size());

  std::vector<std::vector<std::size_t>> quotas;
  std::vector<std::size_t> demand(pools.size(), 0);
  for (auto s : sizes) {
    if (s == 0) throw std::invalid_argument("partition_iid: client sizes must be positive");
    quotas.push_back(detail::largest_remainder(s, supply));
    for (std::size_t c = 0; c < pools.size(); ++c) demand[c] += quotas.back()[c];
  }
  for (std::size_t c = 0; c < pools.size(); ++c)
    if (demand[c] > supply[c])
      throw std::invalid_argument("partition_iid: label " + std::to_string(c) + " needs " + std::to_string(demand[c]) +
                                  " samples but only " + std::to_string(supply[c]) + " exist");

  Partition part;
  std::vector<std::size_t> cursor(pools.size(), 0);
  for (const auto& quota : quotas) {
    std::vector<std::size_t> mine;
    auto left = quota;
    bool more = true;
    while (more) {
      more = false;
      for (std::size_t c = 0; c < pools.size(); ++c) {
        if (left[c] == 0) continue;
        mine.push_back(pools[c][cursor[c]++]);
        --left[c];
        more = more || left[c] > 0;
      }
    }
    part.assignments.push_back(std::move(mine));
  }
  return part;
}

// Sorts by label, cuts the result into `n_shards` contiguous equal shards
// (remainder dropped) and hands whole shards to clients. Every client gets
// `min_shards` first; the rest go one by one to a uniformly chosen client
// still below `max_shards`.
inline Partition partition_shards(const LabeledDataset& ds, std::size_t n_clients, std::size_t n_shards,
                                  std::size_t min_shards, std::size_t max_shards, std::uint64_t seed) {
  if (n_clients == 0) throw std::invalid_argument("partition_shards: need at least one client");
  if (min_shards < 1) throw std::invalid_argument("partition_shards: violated min_shards >= 1");
  if (max_shards < min_shards) throw std::invalid_argument("partition_shards: violated max_shards >= min_shards");
  if (n_shards < n_clients * min_shards)
    throw std::invalid_argument("partition_shards: violated n_shards >= n_clients * min_shards (" +
                                std::to_string(n_shards) + " < " + std::to_string(n_clients * min_shards) + ")");
  if (n_shards > n_clients * max_shards)
    throw std::invalid_argument("partition_shards: violated n_shards <= n_clients * max_shards (" +
                                std::to_string(n_shards) + " > " + std::to_string(n_clients * max_shards) + ")");
  if (n_shards > ds.size())
    throw std::invalid_argument("partition_shards: violated n_shards <= n_samples (" + std::to_string(n_shards) +
                                " > " + std::to_string(ds.size()) + ")");

  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ds.labels[a] < ds.labels[b]; });
  const std::size_t shard_size = ds.size() / n_shards;

  Stream rng(seed, Purpose::Partitioning);
  std::vector<std::size_t> shard_ids(n_shards);
  std::iota(shard_ids.begin(), shard_ids.end(), std::size_t{0});
  rng.shuffle(std::span(shard_ids));

  std::vector<std::vector<std::size_t>> owned(n_clients);
  std::size_t next = 0;
  for (std::size_t c = 0; c < n_clients; ++c)
    for (std::size_t k = 0; k < min_shards; ++k) owned[c].push_back(shard_ids[next++]);
  std::vector<std::size_t> open;
  for (std::size_t c = 0; c < n_clients; ++c)
    if (owned[c].size() < max_shards) open.push_back(c);
  while (next < n_shards) {
    const auto pick = static_cast<std::size_t>(rng.below(open.size()));
    const auto c = open[pick];
    owned[c].push_back(shard_ids[next++]);
    if (owned[c].size() == max_shards) open.erase(open.begin() + static_cast<std::ptrdiff_t>(pick));
  }

  Partition part;
  for (auto& shards : owned) {
    std::sort(shards.begin(), shards.end());
    std::vector<std::size_t> mine;
    for (auto s : shards)
      mine.insert(mine.end(), order.begin() + static_cast<std::ptrdiff_t>(s * shard_size),
                  order.begin() + static_cast<std::ptrdiff_t>((s + 1) * shard_size));
    part.assignments.push_back(std::move(mine));
  }
  return part;
}

// p_i proportional to local dataset size.
inline std::vector<double> client_weights(const Partition& partition) {
  const auto sizes = partition.sizes();
  const double total = static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
  std::vector<double> p;
  p.reserve(sizes.size());
  for (auto s : sizes) p.push_back(static_cast<double>(s) / total);
  return p;
}

}  // namespace fedagg
