#include "hyperfed/data.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

using namespace hyperfed;

namespace {

LabeledDataset labels_only(int classes, int per_class) {
  LabeledDataset ds;
  ds.classes = classes;
  ds.features = FeatureMatrix::Zero(classes * per_class, 1);
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) ds.labels.push_back(c);
  for (Eigen::Index i = 0; i < ds.features.rows(); ++i) ds.features(i, 0) = static_cast<double>(i);
  return ds;
}

// Mean over classes of the largest share any client holds.
double heterogeneity(const Partition& p, int classes) {
  double total = 0.0;
  for (int c = 0; c < classes; ++c) {
    std::int64_t sum = 0, best = 0;
    for (const auto& row : p.counts) {
      sum += row[static_cast<std::size_t>(c)];
      best = std::max(best, row[static_cast<std::size_t>(c)]);
    }
    total += static_cast<double>(best) / static_cast<double>(sum);
  }
  return total / classes;
}

std::string error_of(const std::string& text) {
  try {
    parse_dataset(text);
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Synthetic, ShapeAndLabels) {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 100;
  const auto ds = make_synthetic(spec);
  EXPECT_EQ(ds.size(), 300);
  EXPECT_EQ(ds.class_counts(), (std::vector<std::int64_t>{100, 100, 100}));
  EXPECT_EQ(ds.dim(), 16);
}

TEST(Synthetic, ZeroSpreadCollapsesToCenters) {
  SyntheticSpec spec;
  spec.spread = 0.0;
  spec.per_class = 20;
  const auto ds = make_synthetic(spec);
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const Eigen::Index first = ds.labels[static_cast<std::size_t>(i)] * 20;
    EXPECT_EQ(ds.features.row(i), ds.features.row(first));
  }
  EXPECT_NEAR(ds.features.row(0).norm(), spec.center_radius, 1e-12);
}

TEST(Synthetic, SeedsChangeFeaturesNotLabels) {
  SyntheticSpec a, b;
  a.seed = 1;
  b.seed = 2;
  const auto da = make_synthetic(a);
  const auto db = make_synthetic(b);
  EXPECT_EQ(da.labels, db.labels);
  EXPECT_NE(da.features, db.features);
  EXPECT_TRUE(da == make_synthetic(a));
}

TEST(Partition, ConservesEveryInstance) {
  SyntheticSpec s;
  s.classes = 4;
  s.per_class = 50;
  const auto ds = make_synthetic(s);
  for (double alpha : {0.1, 0.5, 5.0}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto p = dirichlet_partition(ds, {7, alpha, seed});
      std::vector<std::int64_t> all;
      std::vector<std::int64_t> per_class(4, 0);
      for (std::size_t k = 0; k < p.pools.size(); ++k) {
        EXPECT_GE(p.pools[k].data.size(), 1);
        all.insert(all.end(), p.pools[k].indices.begin(), p.pools[k].indices.end());
        for (int c = 0; c < 4; ++c) per_class[static_cast<std::size_t>(c)] += p.counts[k][static_cast<std::size_t>(c)];
        EXPECT_EQ(p.pools[k].data.class_counts(), p.counts[k]);
      }
      std::sort(all.begin(), all.end());
      std::vector<std::int64_t> expected(200);
      std::iota(expected.begin(), expected.end(), 0);
      EXPECT_EQ(all, expected);
      EXPECT_EQ(per_class, ds.class_counts());
    }
  }
}

TEST(Partition, LargeAlphaIsNearlyUniform) {
  const auto ds = labels_only(3, 400);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = dirichlet_partition(ds, {4, 1e6, seed});
    for (const auto& row : p.counts)
      for (auto c : row) EXPECT_NEAR(static_cast<double>(c) / 400.0, 0.25, 0.02);
  }
}

TEST(Partition, SmallAlphaLeavesClassesMissing) {
  const auto ds = labels_only(10, 50);
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = dirichlet_partition(ds, {10, 0.1, seed});
    bool missing = false;
    for (const auto& row : p.counts)
      for (auto c : row) missing |= c == 0;
    hits += missing;
  }
  EXPECT_GE(hits, 45);
}

TEST(Partition, DirichletSymmetry) {
  const auto ds = labels_only(5, 200);
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto p = dirichlet_partition(ds, {2, 0.5, seed});
    for (int c = 0; c < 5; ++c) mean += static_cast<double>(p.counts[0][static_cast<std::size_t>(c)]) / 200.0;
  }
  mean /= 200.0 * 5.0;
  EXPECT_NEAR(mean, 0.5, 0.05);
}

TEST(Partition, HeterogeneityOrdering) {
  const auto ds = labels_only(10, 100);
  double low = 0.0, high = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    low += heterogeneity(dirichlet_partition(ds, {10, 0.1, seed}), 10);
    high += heterogeneity(dirichlet_partition(ds, {10, 5.0, seed}), 10);
  }
  EXPECT_GT(low / 50.0, high / 50.0);
}

TEST(Partition, RepairsEmptyClients) {
  const auto ds = labels_only(2, 10);
  const auto p = dirichlet_partition(ds, {15, 0.05, 3});
  for (const auto& pool : p.pools) EXPECT_GE(pool.data.size(), 1);
  EXPECT_FALSE(p.repaired.empty());
  EXPECT_NE(partition_manifest(p).find("repaired_clients"), std::string::npos);
}

TEST(Partition, Errors) {
  const auto ds = labels_only(2, 2);
  EXPECT_THROW(dirichlet_partition(ds, {5, 0.5, 0}), std::invalid_argument);
  EXPECT_THROW(dirichlet_partition(ds, {2, 0.0, 0}), std::invalid_argument);
}

TEST(Partition, Deterministic) {
  const auto ds = labels_only(4, 30);
  const auto a = dirichlet_partition(ds, {5, 0.3, 12});
  const auto b = dirichlet_partition(ds, {5, 0.3, 12});
  EXPECT_EQ(a.counts, b.counts);
  for (std::size_t k = 0; k < a.pools.size(); ++k) EXPECT_EQ(a.pools[k].indices, b.pools[k].indices);
  EXPECT_EQ(partition_manifest(a), partition_manifest(b));
}

TEST(SplitLocal, SeventyFiveTwentyFive) {
  ClientPool pool;
  pool.data = labels_only(4, 25);
  const auto shard = split_local(pool, 0.75, 1);
  EXPECT_EQ(shard.train.size(), 75);
  EXPECT_EQ(shard.test.size(), 25);
  EXPECT_EQ(shard.n_train, 75);
  std::set<double> train_ids, test_ids;
  for (Eigen::Index i = 0; i < shard.train.size(); ++i) train_ids.insert(shard.train.features(i, 0));
  for (Eigen::Index i = 0; i < shard.test.size(); ++i) test_ids.insert(shard.test.features(i, 0));
  for (double t : test_ids) EXPECT_EQ(train_ids.count(t), 0u);
  EXPECT_EQ(train_ids.size() + test_ids.size(), 100u);
}

TEST(SplitLocal, SingleClassPool) {
  ClientPool pool;
  pool.data = labels_only(1, 100);
  const auto shard = split_local(pool, 0.75, 2);
  EXPECT_EQ(shard.train.size(), 75);
  EXPECT_EQ(shard.test.size(), 25);
}

TEST(SplitLocal, TinyPools) {
  ClientPool pool;
  pool.data = labels_only(1, 1);
  const auto one = split_local(pool, 0.75, 0);
  EXPECT_EQ(one.train.size(), 1);
  EXPECT_EQ(one.test.size(), 0);
  EXPECT_TRUE(one.test_empty);
  pool.data = labels_only(1, 2);
  const auto two = split_local(pool, 0.75, 0);
  EXPECT_EQ(two.train.size(), 1);
  EXPECT_EQ(two.test.size(), 1);
}

TEST(HoldOut, PerClassCounts) {
  const auto ds = labels_only(3, 40);
  const auto [kept, held] = hold_out_per_class(ds, 10, 4);
  EXPECT_EQ(held.class_counts(), (std::vector<std::int64_t>{10, 10, 10}));
  EXPECT_EQ(kept.class_counts(), (std::vector<std::int64_t>{30, 30, 30}));
}

TEST(TextFormat, RoundTrip) {
  SyntheticSpec spec;
  spec.per_class = 10;
  spec.seed = 3;
  const auto ds = make_synthetic(spec);
  const auto path = std::filesystem::temp_directory_path() / "hyperfed_test_data.txt";
  write_dataset(ds, path);
  EXPECT_TRUE(load_dataset(path) == ds);
  std::filesystem::remove(path);
}

TEST(TextFormat, Errors) {
  EXPECT_NE(error_of("").find("missing header"), std::string::npos);
  EXPECT_NE(error_of("2 x 2\n").find("malformed header"), std::string::npos);
  EXPECT_NE(error_of("2 1 2\n0.5 0\n").find("record 1"), std::string::npos);
  EXPECT_NE(error_of("2 1 2\n0.5 0\n0.25 2\n").find("record 1 (line 3): label 2"), std::string::npos);
  EXPECT_NE(error_of("1 2 2\n0.5 nan 1\n").find("non-finite"), std::string::npos);
  EXPECT_NE(error_of("1 2 2\n0.5 inf 1\n").find("non-finite"), std::string::npos);
  EXPECT_NE(error_of("1 1 2\n0.5 1\n1 0\n").find("more records"), std::string::npos);
  EXPECT_NE(error_of("1 1 2\n0.5 1 7\n").find("trailing"), std::string::npos);
  EXPECT_EQ(error_of("1 1 2\n0.5 1\n"), "");
}

TEST(TextFormat, MissingFile) {
  EXPECT_THROW(load_dataset("/nonexistent/hyperfed.txt"), std::runtime_error);
}
