#include "hyperfed/data.hpp"

#include "hyperfed/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace hyperfed {

namespace {

std::vector<std::vector<std::int64_t>> rows_by_class(const std::vector<int>& labels, int classes) {
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));
  }
  return by_class;
}

// Integer counts summing to `total` proportional to `weights` (largest remainder,
// lowest index first on equal remainders).
std::vector<std::int64_t> largest_remainder(const std::vector<double>& weights, std::int64_t total) {
  const std::size_t n = weights.size();
  std::vector<std::int64_t> counts(n);
  std::vector<double> frac(n);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = weights[i] * static_cast<double>(total);
    counts[i] = static_cast<std::int64_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; assigned < total; r = (r + 1) % n, ++assigned) counts[order[r]] += 1;
  while (assigned > total) {
    // only reachable when the weights sum slightly above one
    const auto r = std::max_element(counts.begin(), counts.end()) - counts.begin();
    counts[static_cast<std::size_t>(r)] -= 1;
    --assigned;
  }
  return counts;
}

}  // namespace

LabeledDataset LabeledDataset::subset(const std::vector<std::int64_t>& indices) const {
  LabeledDataset out;
  out.classes = classes;
  out.features.resize(static_cast<Eigen::Index>(indices.size()), features.cols());
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = features.row(indices[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(indices[i])]);
  }
  return out;
}

std::vector<std::int64_t> LabeledDataset::class_counts() const {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(classes), 0);
  for (int y : labels) counts[static_cast<std::size_t>(y)] += 1;
  return counts;
}

void LabeledDataset::validate() const {
  if (classes < 1) throw std::invalid_argument("dataset: class count must be positive");
  if (static_cast<std::int64_t>(features.rows()) != size()) {
    throw std::invalid_argument("dataset: feature rows and labels differ in length");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw std::invalid_argument("dataset: record " + std::to_string(i) + " has label " +
                                  std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
    if (!features.row(static_cast<Eigen::Index>(i)).allFinite()) {
      throw std::invalid_argument("dataset: record " + std::to_string(i) + " has a non-finite feature");
    }
  }
}

LabeledDataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.per_class < 1 || spec.dim < 1 || spec.hierarchy_depth < 0) {
    throw std::invalid_argument("make_synthetic: need classes >= 2, per_class >= 1, dim >= 1");
  }
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int d = spec.dim;

  // Class directions: orthonormalized Gaussian draws while C <= d, otherwise plain
  // normalized draws.
  FeatureMatrix centers(spec.classes, d);
  for (int c = 0; c < spec.classes; ++c) {
    Eigen::RowVectorXd v(d);
    do {
      for (int j = 0; j < d; ++j) v[j] = normal(rng);
      if (c < d) {
        for (int prev = 0; prev < c; ++prev) v -= v.dot(centers.row(prev)) * centers.row(prev);
      }
    } while (v.norm() < 1e-8);
    centers.row(c) = v.normalized();
  }
  centers *= spec.center_radius;

  // Sub-cluster offsets: node i at level l (1-based) has 2^l entries per class.
  const int depth = spec.hierarchy_depth;
  std::vector<std::vector<FeatureMatrix>> offsets(static_cast<std::size_t>(spec.classes));
  for (int c = 0; c < spec.classes; ++c) {
    for (int level = 1; level <= depth; ++level) {
      const double scale = spec.spread * std::ldexp(1.0, -(level - 1));
      FeatureMatrix level_offsets(1 << level, d);
      for (Eigen::Index i = 0; i < level_offsets.size(); ++i) level_offsets.data()[i] = scale * normal(rng);
      offsets[static_cast<std::size_t>(c)].push_back(std::move(level_offsets));
    }
  }
  const double leaf_scale = spec.spread * std::ldexp(1.0, -depth);

  LabeledDataset ds;
  ds.classes = spec.classes;
  ds.features.resize(static_cast<Eigen::Index>(spec.classes) * spec.per_class, d);
  ds.labels.reserve(static_cast<std::size_t>(ds.features.rows()));
  std::uniform_int_distribution<int> bit(0, 1);
  Eigen::Index row = 0;
  for (int c = 0; c < spec.classes; ++c) {
    for (int i = 0; i < spec.per_class; ++i, ++row) {
      Eigen::RowVectorXd x = centers.row(c);
      int node = 0;
      for (int level = 1; level <= depth; ++level) {
        node = 2 * node + bit(rng);
        x += offsets[static_cast<std::size_t>(c)][static_cast<std::size_t>(level - 1)].row(node);
      }
      for (int j = 0; j < d; ++j) x[j] += leaf_scale * normal(rng);
      ds.features.row(row) = x;
      ds.labels.push_back(c);
    }
  }
  return ds;
}

Partition dirichlet_partition(const LabeledDataset& ds, const PartitionSpec& spec) {
  if (spec.clients < 1) throw std::invalid_argument("dirichlet_partition: need at least one client");
  if (!(spec.alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be positive");
  if (ds.size() < spec.clients) {
    throw std::invalid_argument("dirichlet_partition: fewer instances than clients");
  }
  const auto k_clients = static_cast<std::size_t>(spec.clients);
  Rng rng(spec.seed);
  std::gamma_distribution<double> gamma(spec.alpha, 1.0);

  Partition part;
  part.spec = spec;
  part.counts.assign(k_clients, std::vector<std::int64_t>(static_cast<std::size_t>(ds.classes), 0));
  std::vector<std::vector<std::int64_t>> assigned(k_clients);

  auto by_class = rows_by_class(ds.labels, ds.classes);
  for (int c = 0; c < ds.classes; ++c) {
    auto& rows = by_class[static_cast<std::size_t>(c)];
    std::shuffle(rows.begin(), rows.end(), rng);
    std::vector<double> props(k_clients);
    double total = 0.0;
    for (auto& v : props) total += (v = gamma(rng));
    if (!(total > 0.0)) {
      // every Gamma variate underflowed: the whole class goes to one client
      std::fill(props.begin(), props.end(), 0.0);
      props[std::uniform_int_distribution<std::size_t>(0, k_clients - 1)(rng)] = 1.0;
    } else {
      for (auto& v : props) v /= total;
    }
    const auto counts = largest_remainder(props, static_cast<std::int64_t>(rows.size()));
    std::size_t next = 0;
    for (std::size_t k = 0; k < k_clients; ++k) {
      for (std::int64_t i = 0; i < counts[k]; ++i) assigned[k].push_back(rows[next++]);
      part.counts[k][static_cast<std::size_t>(c)] = counts[k];
    }
  }

  for (std::size_t k = 0; k < k_clients; ++k) {
    if (!assigned[k].empty()) continue;
    std::size_t largest = 0;
    for (std::size_t j = 1; j < k_clients; ++j) {
      if (assigned[j].size() > assigned[largest].size()) largest = j;
    }
    const std::int64_t moved = assigned[largest].back();
    assigned[largest].pop_back();
    assigned[k].push_back(moved);
    const auto y = static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(moved)]);
    part.counts[largest][y] -= 1;
    part.counts[k][y] += 1;
    part.repaired.push_back(static_cast<int>(k));
  }

  for (std::size_t k = 0; k < k_clients; ++k) {
    ClientPool pool;
    pool.client = static_cast<int>(k);
    pool.indices = std::move(assigned[k]);
    pool.data = ds.subset(pool.indices);
    part.pools.push_back(std::move(pool));
  }
  return part;
}

std::string partition_manifest(const Partition& partition) {
  nlohmann::json j;
  j["clients"] = partition.spec.clients;
  j["alpha"] = partition.spec.alpha;
  j["seed"] = partition.spec.seed;
  j["counts"] = partition.counts;
  j["repaired_clients"] = partition.repaired;
  return j.dump(2);
}

ClientShard split_local(const ClientPool& pool, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split_local: train fraction must lie in (0, 1)");
  }
  const LabeledDataset& data = pool.data;
  const std::int64_t n = data.size();
  if (n < 1) throw std::invalid_argument("split_local: empty client pool");

  ClientShard shard;
  shard.client = pool.client;
  if (n == 1) {
    shard.train = data;
    shard.test = data.subset({});
    shard.n_train = 1;
    shard.test_empty = true;
    return shard;
  }

  const std::int64_t n_train =
      std::clamp<std::int64_t>(std::llround(train_fraction * static_cast<double>(n)), 1, n - 1);
  Rng rng(seed);
  auto by_class = rows_by_class(data.labels, data.classes);
  std::vector<double> weights(by_class.size());
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    weights[c] = static_cast<double>(by_class[c].size()) / static_cast<double>(n);
  }
  const auto per_class = largest_remainder(weights, n_train);

  std::vector<std::int64_t> train_rows;
  std::vector<std::int64_t> test_rows;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto take = static_cast<std::size_t>(per_class[c]);
    for (std::size_t i = 0; i < by_class[c].size(); ++i) {
      (i < take ? train_rows : test_rows).push_back(by_class[c][i]);
    }
  }
  shard.train = data.subset(train_rows);
  shard.test = data.subset(test_rows);
  shard.n_train = shard.train.size();
  shard.test_empty = test_rows.empty();
  return shard;
}

std::string format_dataset(const LabeledDataset& ds) {
  std::string out = std::to_string(ds.size()) + " " + std::to_string(ds.dim()) + " " +
                    std::to_string(ds.classes) + "\n";
  char buf[40];
  for (Eigen::Index i = 0; i < ds.features.rows(); ++i) {
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g ", ds.features(i, j));
      out += buf;
    }
    out += std::to_string(ds.labels[static_cast<std::size_t>(i)]);
    out += '\n';
  }
  return out;
}

void write_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << format_dataset(ds);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

LabeledDataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset: missing header line");
  long long n = -1, d = -1, c = -1;
  {
    std::istringstream header(line);
    std::string extra;
    if (!(header >> n >> d >> c) || (header >> extra) || n < 1 || d < 1 || c < 1) {
      throw std::runtime_error("dataset: malformed header '" + line + "', expected 'N d C'");
    }
  }
  LabeledDataset ds;
  ds.classes = static_cast<int>(c);
  ds.features.resize(n, d);
  ds.labels.reserve(static_cast<std::size_t>(n));
  for (long long i = 0; i < n; ++i) {
    const std::string where = "dataset: record " + std::to_string(i) + " (line " + std::to_string(i + 2) + ")";
    if (!std::getline(in, line)) {
      throw std::runtime_error(where + ": missing, file has only " + std::to_string(i) + " of " +
                               std::to_string(n) + " records");
    }
    const char* p = line.c_str();
    for (long long j = 0; j < d; ++j) {
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(p, &end);
      if (end == p) throw std::runtime_error(where + ": expected " + std::to_string(d) + " features");
      if (!std::isfinite(v)) throw std::runtime_error(where + ": non-finite feature " + std::to_string(j));
      ds.features(i, j) = v;
      p = end;
    }
    char* end = nullptr;
    const long label = std::strtol(p, &end, 10);
    if (end == p) throw std::runtime_error(where + ": missing label");
    for (const char* q = end; *q; ++q) {
      if (!std::isspace(static_cast<unsigned char>(*q))) throw std::runtime_error(where + ": trailing data");
    }
    if (label < 0 || label >= c) {
      throw std::runtime_error(where + ": label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
    }
    ds.labels.push_back(static_cast<int>(label));
  }
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      throw std::runtime_error("dataset: more records than the header's N=" + std::to_string(n));
    }
  }
  return ds;
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str());
}

std::pair<LabeledDataset, LabeledDataset> hold_out_per_class(const LabeledDataset& ds,
                                                             int held_per_class,
                                                             std::uint64_t seed) {
  Rng rng(seed);
  auto by_class = rows_by_class(ds.labels, ds.classes);
  std::vector<std::int64_t> kept;
  std::vector<std::int64_t> held;
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto cut = std::min<std::size_t>(rows.size(), static_cast<std::size_t>(std::max(held_per_class, 0)));
    held.insert(held.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cut));
    kept.insert(kept.end(), rows.begin() + static_cast<std::ptrdiff_t>(cut), rows.end());
  }
  std::sort(kept.begin(), kept.end());
  std::sort(held.begin(), held.end());
  return {ds.subset(kept), ds.subset(held)};
}

}  // namespace hyperfed
