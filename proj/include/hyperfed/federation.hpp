// Round-based federated training: fixed prototypes at round 0, local prototype
// learning on every client, server aggregation, and global / personalized evaluation.
#pragma once

#include "hyperfed/aggregation.hpp"
#include "hyperfed/data.hpp"
#include "hyperfed/learner.hpp"
#include "hyperfed/prototypes.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hyperfed {

enum class Aggregator { kConsistent, kAveraged };

/// Ablations each toggle one mechanism relative to kFull.
enum class Variant {
  kFull,
  kGeodesicMetricOnly,  // shared frozen prototypes, random instead of Tammes-uniform
  kFixedOnly,           // frozen random prototypes, a different set per client
  kSharedOnly,          // shared Tammes prototypes, re-drawn every round
  kAveraged,            // data-weighted averaging instead of consistent updating
};

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
Aggregator parse_aggregator(const std::string& name);
std::string to_string(Aggregator a);

struct ExperimentConfig {
  /// Synthetic generator settings; ignored when data_path is set. The generator's
  /// seed is derived from `seed`.
  SyntheticSpec synthetic;
  std::string data_path;
  /// Instances per class held out (IID) as the global test slice.
  int test_per_class = 100;

  PartitionSpec partition;  // seed derived from `seed`
  double train_fraction = 0.75;

  ExtractorConfig extractor;  // init_seed derived from `seed`
  TripletConfig triplet;
  LocalTrainConfig local;
  double slope = 0.9;
  TammesConfig tammes;
  std::string prototype_mode = "tammes_fixed";

  int rounds = 30;
  Aggregator aggregator = Aggregator::kConsistent;
  ConsistentUpdateConfig cu;

  /// Personalized evaluation: finetune length and unit ("epochs" or "steps").
  int pfl_finetune = 5;
  std::string pfl_unit = "epochs";

  std::uint64_t seed = 0;
  /// Worker threads for client training; results do not depend on it.
  int threads = 1;
  bool cu_debug = false;

  void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

struct RoundRecord {
  int round = 0;
  double gfl_accuracy = 0.0;
  double pfl_accuracy = 0.0;
  /// nullopt for clients skipped because their local test split is empty.
  std::vector<std::optional<double>> pfl_accuracies;
  double train_loss = 0.0;
  std::vector<double> p;
  int cu_iterations = 0;
  double pareto_gap = 0.0;
  double wall_seconds = 0.0;
};

/// Deterministic metrics line (no timing).
std::string round_record_json(const RoundRecord& r);

/// Everything the server sees in one round, for verification hooks.
struct RoundTrace {
  int round = 0;
  const ParamVector* global_before = nullptr;
  const std::vector<ParamVector>* locals = nullptr;
  const std::vector<std::int64_t>* n_samples = nullptr;
  const AggregationWeights* weights = nullptr;
  const ParamVector* global_after = nullptr;
  const PrototypeSet* prototypes = nullptr;
};

struct PreparedData {
  LabeledDataset pool;         // data distributed to clients
  LabeledDataset global_test;  // held-out IID slice
  Partition partition;
  std::vector<ClientShard> shards;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct ExperimentResult {
  std::vector<RoundRecord> records;
  ParamVector global;
  std::vector<ParamVector> clients;
  PrototypeSet prototypes;
  PreparedData data;
  std::vector<std::string> cu_debug;
};

/// Runs cfg.rounds synchronous rounds. `on_round` (optional) sees each aggregation.
ExperimentResult run_experiment(const ExperimentConfig& cfg, Variant variant = Variant::kFull,
                                const std::function<void(const RoundTrace&)>& on_round = {});

/// Same as run_experiment; named for the ablation entry point.
ExperimentResult run_ablation(const ExperimentConfig& cfg, Variant variant,
                              const std::function<void(const RoundTrace&)>& on_round = {});

/// Top-1 accuracy of the global model on a non-empty test set.
double evaluate_gfl(const ParamVector& global, const ExtractorConfig& cfg, const PrototypeSet& protos,
                    const LabeledDataset& test, Metric metric = Metric::kGeodesic);

struct FinetuneConfig {
  LocalTrainConfig local;  // epochs or steps, batch size, lr
  TripletConfig triplet;
};

/// Per client: copy the global model, finetune on the local train split, and score
/// the local test split. `client_protos[k]` is the prototype set client k trains with.
/// `seeds[k]` seeds client k's finetuning stream.
std::vector<std::optional<double>> evaluate_pfl(const ParamVector& global, const ExtractorConfig& cfg,
                                                const std::vector<ClientShard>& shards,
                                                const std::vector<const PrototypeSet*>& client_protos,
                                                const FinetuneConfig& ft,
                                                const std::vector<std::uint64_t>& seeds);

/// Accuracy per class (nullopt for classes absent from `data`).
std::vector<std::optional<double>> per_class_accuracy(const ParamVector& theta, const ExtractorConfig& cfg,
                                                      const PrototypeSet& protos, const LabeledDataset& data,
                                                      Metric metric = Metric::kGeodesic);

/// Writes metrics.jsonl, timing.jsonl, global.ckpt, client_<k>.ckpt, prototypes.bin,
/// partition_manifest.json, config.json and (when enabled) cu_debug.jsonl.
void write_run_outputs(const ExperimentResult& result, const ExperimentConfig& cfg,
                       const std::filesystem::path& dir);

}  // namespace hyperfed
