#include "hyperfed/federation.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace hyperfed;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.synthetic.classes = 3;
  cfg.synthetic.dim = 6;
  cfg.synthetic.per_class = 60;
  cfg.test_per_class = 20;
  cfg.partition.clients = 4;
  cfg.partition.alpha = 0.5;
  cfg.extractor.input_dim = 6;
  cfg.extractor.hidden = {8};
  cfg.extractor.output_dim = 3;
  cfg.local.epochs = 2;
  cfg.local.batch_size = 16;
  cfg.rounds = 3;
  cfg.pfl_finetune = 1;
  cfg.seed = 21;
  return cfg;
}

ExperimentConfig benchmark_config() {
  return load_config(fs::path(HYPERFED_SOURCE_DIR) / "configs" / "default.json");
}

std::string metrics_stream(const ExperimentResult& r) {
  std::string out;
  for (const auto& rec : r.records) out += round_record_json(rec) + "\n";
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  const ExperimentConfig cfg = small_config();
  const ExperimentConfig back = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_to_json(back), config_to_json(cfg));
  EXPECT_EQ(back.extractor.hidden, cfg.extractor.hidden);
  EXPECT_EQ(back.partition.clients, 4);
}

TEST(Config, Validation) {
  auto j = config_to_json(small_config());
  j["rounds"] = 0;
  EXPECT_THROW(config_from_json(j), std::invalid_argument);
  j = config_to_json(small_config());
  j["prototypes"]["slope"] = 1.0;
  EXPECT_THROW(config_from_json(j), std::invalid_argument);
  j = config_to_json(small_config());
  j["aggregation"]["aggregator"] = "median";
  EXPECT_THROW(config_from_json(j), std::invalid_argument);
  j = config_to_json(small_config());
  j["extractor"]["input_dim"] = 5;
  EXPECT_THROW(config_from_json(j), std::invalid_argument);
}

TEST(Config, BenchmarkFileLoads) {
  const auto cfg = benchmark_config();
  EXPECT_EQ(cfg.partition.clients, 10);
  EXPECT_EQ(cfg.rounds, 30);
  EXPECT_EQ(cfg.extractor.output_dim, 4);
}

TEST(Variants, NamesRoundTrip) {
  for (auto v : {Variant::kFull, Variant::kGeodesicMetricOnly, Variant::kFixedOnly, Variant::kSharedOnly,
                 Variant::kAveraged}) {
    EXPECT_EQ(parse_variant(to_string(v)), v);
  }
  EXPECT_THROW(parse_variant("mystery"), std::invalid_argument);
}

TEST(Run, DeterministicStreamsAndCheckpoints) {
  const auto a = run_experiment(small_config());
  const auto b = run_experiment(small_config());
  EXPECT_EQ(metrics_stream(a), metrics_stream(b));
  EXPECT_EQ(encode_checkpoint(a.global), encode_checkpoint(b.global));
  for (std::size_t k = 0; k < a.clients.size(); ++k) {
    EXPECT_EQ(encode_checkpoint(a.clients[k]), encode_checkpoint(b.clients[k]));
  }
}

TEST(Run, ThreadCountDoesNotChangeResults) {
  ExperimentConfig cfg = small_config();
  const auto serial = run_experiment(cfg);
  cfg.threads = 3;
  const auto parallel = run_experiment(cfg);
  EXPECT_EQ(metrics_stream(serial), metrics_stream(parallel));
  EXPECT_TRUE(serial.global == parallel.global);
}

TEST(Run, ZeroLearningRateFreezesAccuracy) {
  ExperimentConfig cfg = small_config();
  cfg.local.lr = 0.0;
  const auto r = run_experiment(cfg);
  for (const auto& rec : r.records) EXPECT_EQ(rec.gfl_accuracy, r.records.front().gfl_accuracy);
  for (const auto& local : r.clients) EXPECT_TRUE(local == r.global);
}

TEST(Run, SingleClientAveragedReturnsItsModel) {
  ExperimentConfig cfg = small_config();
  cfg.partition.clients = 1;
  cfg.rounds = 1;
  cfg.aggregator = Aggregator::kAveraged;
  const auto r = run_experiment(cfg);
  EXPECT_LE((r.global.values() - r.clients[0].values()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Run, SingleClientConsistentMatchesAveraged) {
  ExperimentConfig cfg = small_config();
  cfg.partition.clients = 1;
  const auto full = run_experiment(cfg, Variant::kFull);
  const auto avg = run_experiment(cfg, Variant::kAveraged);
  ASSERT_EQ(full.records.size(), avg.records.size());
  for (std::size_t t = 0; t < full.records.size(); ++t) {
    EXPECT_EQ(full.records[t].gfl_accuracy, avg.records[t].gfl_accuracy);
    EXPECT_EQ(full.records[t].p, avg.records[t].p);
  }
  EXPECT_TRUE(full.global == avg.global);
}

TEST(Run, AggregationConservationAndPermutation) {
  int rounds_seen = 0;
  run_experiment(small_config(), Variant::kFull, [&](const RoundTrace& tr) {
    ++rounds_seen;
    const auto& locals = *tr.locals;
    const Eigen::VectorXd& p = tr.weights->p;
    EXPECT_NEAR(p.sum(), 1.0, 1e-9);
    EXPECT_GE(p.minCoeff(), 0.0);
    Eigen::VectorXd step = Eigen::VectorXd::Zero(tr.global_before->size());
    for (std::size_t k = 0; k < locals.size(); ++k) {
      step += p[static_cast<Eigen::Index>(k)] * (locals[k].values() - tr.global_before->values());
    }
    const Eigen::VectorXd moved = tr.global_after->values() - tr.global_before->values();
    EXPECT_LE((moved - step).cwiseAbs().maxCoeff(), 1e-12);

    // Reversed client order with the matching weights.
    std::vector<ParamVector> rev(locals.rbegin(), locals.rend());
    AggregationWeights w;
    w.p = p.reverse();
    const auto again = aggregate(*tr.global_before, compute_deviations(*tr.global_before, rev), w);
    EXPECT_LE((again.values() - tr.global_after->values()).cwiseAbs().maxCoeff(), 1e-12);
  });
  EXPECT_EQ(rounds_seen, 3);
}

TEST(Run, AveragedIsDataWeightedMean) {
  ExperimentConfig cfg = small_config();
  cfg.rounds = 5;
  run_experiment(cfg, Variant::kAveraged, [&](const RoundTrace& tr) {
    const auto& n = *tr.n_samples;
    double total = 0.0;
    for (auto v : n) total += static_cast<double>(v);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(tr.global_before->size());
    for (std::size_t k = 0; k < n.size(); ++k) mean += (static_cast<double>(n[k]) / total) * (*tr.locals)[k].values();
    EXPECT_LE((mean - tr.global_after->values()).cwiseAbs().maxCoeff(), 1e-12);
  });
}

TEST(Run, FixedPredictorAcrossRounds) {
  std::vector<std::vector<std::uint8_t>> seen;
  const auto r = run_experiment(small_config(), Variant::kFull,
                                [&](const RoundTrace& tr) { seen.push_back(encode_prototypes(*tr.prototypes)); });
  for (const auto& bytes : seen) EXPECT_EQ(bytes, seen.front());
  EXPECT_EQ(encode_prototypes(r.prototypes), seen.front());
}

TEST(Run, SharedOnlyRedrawsPrototypes) {
  std::vector<std::vector<std::uint8_t>> seen;
  run_experiment(small_config(), Variant::kSharedOnly,
                 [&](const RoundTrace& tr) { seen.push_back(encode_prototypes(*tr.prototypes)); });
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_NE(seen[0], seen[1]);
  EXPECT_NE(seen[1], seen[2]);
}

TEST(Run, EveryVariantRuns) {
  for (auto v : {Variant::kGeodesicMetricOnly, Variant::kFixedOnly, Variant::kSharedOnly, Variant::kAveraged}) {
    const auto r = run_ablation(small_config(), v);
    ASSERT_EQ(r.records.size(), 3u);
    for (const auto& rec : r.records) {
      EXPECT_GE(rec.gfl_accuracy, 0.0);
      EXPECT_LE(rec.gfl_accuracy, 1.0);
      EXPECT_GE(rec.pfl_accuracy, 0.0);
      EXPECT_LE(rec.pfl_accuracy, 1.0);
    }
  }
}

TEST(Run, TogglesShareData) {
  const auto a = run_experiment(small_config(), Variant::kFull);
  const auto b = run_experiment(small_config(), Variant::kAveraged);
  EXPECT_TRUE(a.data.pool == b.data.pool);
  EXPECT_TRUE(a.data.global_test == b.data.global_test);
  EXPECT_EQ(a.data.partition.counts, b.data.partition.counts);
}

TEST(Run, AccuracyImprovesWithMildHeterogeneity) {
  ExperimentConfig cfg = benchmark_config();
  cfg.partition.alpha = 5.0;
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cfg.seed = seed;
    cfg.pfl_finetune = 0;
    const auto r = run_experiment(cfg);
    ok += r.records.back().gfl_accuracy >= r.records.front().gfl_accuracy;
  }
  EXPECT_GE(ok, 4);
}

TEST(Evaluate, GlobalAllClassZero) {
  ExtractorConfig ec;
  ec.input_dim = 2;
  ec.hidden = {};
  ec.output_dim = 2;
  const ParamVector zero(extractor_layout(ec));
  const auto protos = make_tammes_prototypes(3, 2, 0.9, 0);
  LabeledDataset test;
  test.classes = 3;
  test.features = FeatureMatrix::Random(10, 2);
  test.labels.assign(10, 0);
  EXPECT_EQ(evaluate_gfl(zero, ec, protos, test), 1.0);
  const auto per_class = per_class_accuracy(zero, ec, protos, test);
  EXPECT_EQ(per_class[0], 1.0);
  EXPECT_FALSE(per_class[1].has_value());
  LabeledDataset empty;
  empty.classes = 3;
  empty.features.resize(0, 2);
  EXPECT_THROW(evaluate_gfl(zero, ec, protos, empty), std::invalid_argument);
}

TEST(Evaluate, PflWithoutFinetuneScoresGlobal) {
  const ExperimentConfig cfg = small_config();
  const auto r = run_experiment(cfg);
  FinetuneConfig ft{cfg.local, cfg.triplet};
  ft.local.epochs = 0;
  std::vector<const PrototypeSet*> sets(r.data.shards.size(), &r.prototypes);
  std::vector<std::uint64_t> seeds(r.data.shards.size(), 0);
  const ParamVector before = r.global;
  const auto acc = evaluate_pfl(r.global, cfg.extractor, r.data.shards, sets, ft, seeds);
  for (std::size_t k = 0; k < acc.size(); ++k) {
    if (r.data.shards[k].test.size() == 0) {
      EXPECT_FALSE(acc[k].has_value());
    } else {
      EXPECT_EQ(*acc[k], accuracy(r.global, cfg.extractor, r.prototypes, r.data.shards[k].test));
    }
  }
  EXPECT_TRUE(r.global == before);
}

TEST(Evaluate, PflSkipsEmptyTestSplit) {
  const ExperimentConfig cfg = small_config();
  const auto r = run_experiment(cfg);
  ClientPool pool;
  pool.data = r.data.pool.subset({0});
  std::vector<ClientShard> shards = {split_local(pool, 0.75, 0)};
  ASSERT_TRUE(shards[0].test_empty);
  std::vector<const PrototypeSet*> sets = {&r.prototypes};
  const auto acc = evaluate_pfl(r.global, cfg.extractor, shards, sets, FinetuneConfig{cfg.local, cfg.triplet}, {1});
  EXPECT_FALSE(acc[0].has_value());
}

TEST(Evaluate, SingleClassFinetuneHelps) {
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ExperimentConfig cfg = small_config();
    cfg.seed = seed;
    cfg.rounds = 1;
    const auto r = run_experiment(cfg);
    std::vector<std::int64_t> rows;
    for (std::int64_t i = 0; i < r.data.pool.size(); ++i)
      if (r.data.pool.labels[static_cast<std::size_t>(i)] == static_cast<int>(seed % 3)) rows.push_back(i);
    ClientPool pool;
    pool.data = r.data.pool.subset(rows);
    const std::vector<ClientShard> shards = {split_local(pool, 0.75, seed)};
    std::vector<const PrototypeSet*> sets = {&r.prototypes};
    FinetuneConfig ft{cfg.local, cfg.triplet};
    ft.local.epochs = 5;
    const auto tuned = evaluate_pfl(r.global, cfg.extractor, shards, sets, ft, {seed});
    const double base = accuracy(r.global, cfg.extractor, r.prototypes, shards[0].test);
    ok += *tuned[0] >= base;
  }
  EXPECT_GE(ok, 9);
}

TEST(Outputs, WritesRunDirectory) {
  ExperimentConfig cfg = small_config();
  cfg.cu_debug = true;
  const auto r = run_experiment(cfg);
  const fs::path dir = fs::temp_directory_path() / "hyperfed_test_run";
  fs::remove_all(dir);
  write_run_outputs(r, cfg, dir);
  for (const char* name : {"metrics.jsonl", "timing.jsonl", "global.ckpt", "client_0.ckpt", "client_3.ckpt",
                           "prototypes.bin", "partition_manifest.json", "config.json", "cu_debug.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  }
  EXPECT_EQ(slurp(dir / "metrics.jsonl"), metrics_stream(r));
  EXPECT_TRUE(load_checkpoint(dir / "global.ckpt") == r.global);
  EXPECT_TRUE(load_prototypes(dir / "prototypes.bin") == r.prototypes);
  EXPECT_EQ(config_to_json(load_config(dir / "config.json")), config_to_json(cfg));
  fs::remove_all(dir);
}

TEST(Ablation, FullAtLeastEachVariantMean) {
  ExperimentConfig cfg = benchmark_config();
  cfg.pfl_finetune = 0;
  auto mean_gfl = [&](Variant v) {
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      cfg.seed = seed;
      sum += run_ablation(cfg, v).records.back().gfl_accuracy;
    }
    return sum / 5.0;
  };
  const double full = mean_gfl(Variant::kFull);
  for (auto v : {Variant::kGeodesicMetricOnly, Variant::kFixedOnly, Variant::kSharedOnly, Variant::kAveraged}) {
    EXPECT_GE(full, mean_gfl(v)) << to_string(v);
  }
}
