// Labeled vector datasets: synthetic generation, Dirichlet non-IID partitioning,
// local train/test splitting, and the plain-text file format.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hyperfed {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LabeledDataset {
  FeatureMatrix features;  // N x d
  std::vector<int> labels;
  int classes = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  int dim() const { return static_cast<int>(features.cols()); }

  /// Rows at the given indices, in order.
  LabeledDataset subset(const std::vector<std::int64_t>& indices) const;
  std::vector<std::int64_t> class_counts() const;

  /// Throws std::invalid_argument when a label is out of range or a feature is not finite.
  void validate() const;

  bool operator==(const LabeledDataset& other) const {
    return classes == other.classes && labels == other.labels && features == other.features;
  }
};

struct SyntheticSpec {
  int classes = 5;
  int dim = 16;
  int per_class = 400;
  /// Standard deviation of the top-level within-class scatter.
  double spread = 1.0;
  /// Number of nested binary sub-cluster levels inside each class.
  int hierarchy_depth = 2;
  /// Norm of the class centers.
  double center_radius = 3.0;
  std::uint64_t seed = 0;
};

/// Gaussian class clusters around random unit directions scaled by center_radius.
/// Each class nests `hierarchy_depth` levels of binary sub-clusters whose offsets
/// shrink by half per level; spread = 0 puts every point on its class center.
/// Rows are ordered by class.
LabeledDataset make_synthetic(const SyntheticSpec& spec);

struct PartitionSpec {
  int clients = 20;
  double alpha = 0.5;
  std::uint64_t seed = 0;
};

/// One client's share of the dataset before the local train/test split.
struct ClientPool {
  int client = 0;
  std::vector<std::int64_t> indices;  // rows of the source dataset
  LabeledDataset data;
};

struct Partition {
  std::vector<ClientPool> pools;
  /// counts[k][c]: instances of class c assigned to client k.
  std::vector<std::vector<std::int64_t>> counts;
  /// Clients that received an instance through empty-shard repair.
  std::vector<int> repaired;
  PartitionSpec spec;
};

/// Per class, draws client proportions from Dir(alpha) (normalized Gamma(alpha, 1)
/// variates), converts them to counts by largest remainder, and deals the shuffled
/// class instances out. Empty clients take one instance from the largest client.
Partition dirichlet_partition(const LabeledDataset& ds, const PartitionSpec& spec);

/// Per-client per-class counts plus the partition spec, as JSON text.
std::string partition_manifest(const Partition& partition);

struct ClientShard {
  int client = 0;
  LabeledDataset train;
  LabeledDataset test;
  std::int64_t n_train = 0;
  /// Set when the pool was too small to hold out a test instance.
  bool test_empty = false;
};

/// Stratified random split; the train share is round(train_fraction * N), kept in
/// [1, N - 1] when N >= 2. A pool of one instance goes entirely to train.
ClientShard split_local(const ClientPool& pool, double train_fraction, std::uint64_t seed);

/// Text format: header line "N d C", then N lines of d features and an integer label.
void write_dataset(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset load_dataset(const std::filesystem::path& path);
LabeledDataset parse_dataset(const std::string& text);
std::string format_dataset(const LabeledDataset& ds);

/// Stratified split of a dataset into (kept, held_out) with `held_per_class`
/// instances per class held out.
std::pair<LabeledDataset, LabeledDataset> hold_out_per_class(const LabeledDataset& ds,
                                                             int held_per_class,
                                                             std::uint64_t seed);

}  // namespace hyperfed
