#include "hyperfed/federation.hpp"

#include "hyperfed/rng.hpp"

#include <chrono>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace hyperfed {

namespace {

// Stream tags for derive_seed.
enum : std::uint64_t {
  kTagData = 1,
  kTagPartition = 2,
  kTagInit = 3,
  kTagPrototypes = 4,
  kTagHoldOut = 5,
  kTagSplit = 6,
  kTagLocal = 10,
  kTagFinetune = 11,
  kTagRoundPrototypes = 12,
  kTagClientPrototypes = 13,
};

template <typename Fn>
void for_each_client(int clients, int threads, Fn&& fn) {
  if (threads <= 1 || clients <= 1) {
    for (int k = 0; k < clients; ++k) fn(k);
    return;
  }
  std::vector<std::thread> pool;
  const int workers = std::min(threads, clients);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int k = w; k < clients; k += workers) fn(k);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

ExperimentConfig with_derived_seeds(ExperimentConfig cfg) {
  cfg.synthetic.seed = derive_seed(cfg.seed, {kTagData});
  cfg.partition.seed = derive_seed(cfg.seed, {kTagPartition});
  cfg.extractor.init_seed = derive_seed(cfg.seed, {kTagInit});
  return cfg;
}

nlohmann::json optional_array(const std::vector<std::optional<double>>& values) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& v : values) arr.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return arr;
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

Variant parse_variant(const std::string& name) {
  if (name == "full" || name == "hyperfed") return Variant::kFull;
  if (name == "geodesic_metric_only" || name == "geodesic") return Variant::kGeodesicMetricOnly;
  if (name == "fixed_only" || name == "fixed") return Variant::kFixedOnly;
  if (name == "shared_only" || name == "shared") return Variant::kSharedOnly;
  if (name == "averaged") return Variant::kAveraged;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull:
      return "full";
    case Variant::kGeodesicMetricOnly:
      return "geodesic_metric_only";
    case Variant::kFixedOnly:
      return "fixed_only";
    case Variant::kSharedOnly:
      return "shared_only";
    case Variant::kAveraged:
      return "averaged";
  }
  return "full";
}

Aggregator parse_aggregator(const std::string& name) {
  if (name == "consistent") return Aggregator::kConsistent;
  if (name == "averaged") return Aggregator::kAveraged;
  throw std::invalid_argument("unknown aggregator '" + name + "'");
}

std::string to_string(Aggregator a) { return a == Aggregator::kConsistent ? "consistent" : "averaged"; }

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (rounds < 1) fail("rounds must be >= 1");
  if (partition.clients < 1) fail("clients must be >= 1");
  if (!(partition.alpha > 0.0)) fail("alpha must be positive");
  if (!(triplet.margin > 0.0)) fail("margin must be positive");
  if (triplet.negatives_per_sample < 1) fail("negatives_per_sample must be >= 1");
  if (!(slope > 0.0) || slope > 1.0 - kBallEpsilon) fail("slope must lie in (0, 1 - 1e-5]");
  if (local.epochs < 0 || local.batch_size < 1) fail("epochs must be >= 0 and batch_size >= 1");
  if (pfl_finetune < 0) fail("pfl_finetune must be >= 0");
  if (pfl_unit != "epochs" && pfl_unit != "steps") fail("pfl_unit must be 'epochs' or 'steps'");
  if (prototype_mode != "tammes_fixed") fail("prototype_mode must be 'tammes_fixed'");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) fail("train_fraction must lie in (0, 1)");
  if (test_per_class < 1) fail("test_per_class must be >= 1");
  if (data_path.empty()) {
    if (synthetic.classes < 2) fail("synthetic classes must be >= 2");
    if (extractor.input_dim != synthetic.dim) fail("extractor input_dim must equal the synthetic dim");
  }
  if (extractor.output_dim < 2) fail("embedding dimension must be >= 2");
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    read_if(d, "path", cfg.data_path);
    read_if(d, "classes", cfg.synthetic.classes);
    read_if(d, "dim", cfg.synthetic.dim);
    read_if(d, "per_class", cfg.synthetic.per_class);
    read_if(d, "spread", cfg.synthetic.spread);
    read_if(d, "hierarchy_depth", cfg.synthetic.hierarchy_depth);
    read_if(d, "center_radius", cfg.synthetic.center_radius);
    read_if(d, "test_per_class", cfg.test_per_class);
  }
  if (j.contains("partition")) {
    const auto& p = j.at("partition");
    read_if(p, "clients", cfg.partition.clients);
    read_if(p, "alpha", cfg.partition.alpha);
    read_if(p, "train_fraction", cfg.train_fraction);
  }
  cfg.extractor.input_dim = cfg.synthetic.dim;
  if (j.contains("extractor")) {
    const auto& e = j.at("extractor");
    read_if(e, "input_dim", cfg.extractor.input_dim);
    read_if(e, "hidden", cfg.extractor.hidden);
    read_if(e, "output_dim", cfg.extractor.output_dim);
    if (e.contains("activation")) cfg.extractor.activation = parse_activation(e.at("activation").get<std::string>());
  }
  if (j.contains("triplet")) {
    const auto& t = j.at("triplet");
    read_if(t, "margin", cfg.triplet.margin);
    read_if(t, "negatives_per_sample", cfg.triplet.negatives_per_sample);
    if (t.contains("metric")) cfg.triplet.metric = parse_metric(t.at("metric").get<std::string>());
  }
  if (j.contains("local")) {
    const auto& l = j.at("local");
    read_if(l, "epochs", cfg.local.epochs);
    read_if(l, "batch_size", cfg.local.batch_size);
    read_if(l, "lr", cfg.local.lr);
  }
  if (j.contains("prototypes")) {
    const auto& p = j.at("prototypes");
    read_if(p, "slope", cfg.slope);
    read_if(p, "mode", cfg.prototype_mode);
    read_if(p, "learning_rate", cfg.tammes.learning_rate);
    read_if(p, "momentum", cfg.tammes.momentum);
    read_if(p, "max_iterations", cfg.tammes.max_iterations);
  }
  if (j.contains("aggregation")) {
    const auto& a = j.at("aggregation");
    if (a.contains("aggregator")) cfg.aggregator = parse_aggregator(a.at("aggregator").get<std::string>());
    read_if(a, "max_iters", cfg.cu.max_iters);
    read_if(a, "tol", cfg.cu.tol);
    read_if(a, "away_steps", cfg.cu.away_steps);
    read_if(a, "support_steps", cfg.cu.support_steps);
    read_if(a, "debug", cfg.cu_debug);
  }
  if (j.contains("evaluation")) {
    const auto& ev = j.at("evaluation");
    read_if(ev, "pfl_finetune", cfg.pfl_finetune);
    read_if(ev, "pfl_unit", cfg.pfl_unit);
  }
  read_if(j, "rounds", cfg.rounds);
  read_if(j, "seed", cfg.seed);
  read_if(j, "threads", cfg.threads);
  cfg.validate();
  return cfg;
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["data"] = {{"classes", cfg.synthetic.classes},
               {"dim", cfg.synthetic.dim},
               {"per_class", cfg.synthetic.per_class},
               {"spread", cfg.synthetic.spread},
               {"hierarchy_depth", cfg.synthetic.hierarchy_depth},
               {"center_radius", cfg.synthetic.center_radius},
               {"test_per_class", cfg.test_per_class}};
  if (!cfg.data_path.empty()) j["data"]["path"] = cfg.data_path;
  j["partition"] = {{"clients", cfg.partition.clients},
                    {"alpha", cfg.partition.alpha},
                    {"train_fraction", cfg.train_fraction}};
  j["extractor"] = {{"input_dim", cfg.extractor.input_dim},
                    {"hidden", cfg.extractor.hidden},
                    {"output_dim", cfg.extractor.output_dim},
                    {"activation", to_string(cfg.extractor.activation)}};
  j["triplet"] = {{"margin", cfg.triplet.margin},
                  {"negatives_per_sample", cfg.triplet.negatives_per_sample},
                  {"metric", to_string(cfg.triplet.metric)}};
  j["local"] = {{"epochs", cfg.local.epochs}, {"batch_size", cfg.local.batch_size}, {"lr", cfg.local.lr}};
  j["prototypes"] = {{"slope", cfg.slope},
                     {"mode", cfg.prototype_mode},
                     {"learning_rate", cfg.tammes.learning_rate},
                     {"momentum", cfg.tammes.momentum},
                     {"max_iterations", cfg.tammes.max_iterations}};
  j["aggregation"] = {{"aggregator", to_string(cfg.aggregator)},
                      {"max_iters", cfg.cu.max_iters},
                      {"tol", cfg.cu.tol},
                      {"away_steps", cfg.cu.away_steps},
                      {"support_steps", cfg.cu.support_steps},
                      {"debug", cfg.cu_debug}};
  j["evaluation"] = {{"pfl_finetune", cfg.pfl_finetune}, {"pfl_unit", cfg.pfl_unit}};
  j["rounds"] = cfg.rounds;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string round_record_json(const RoundRecord& r) {
  nlohmann::json j;
  j["round"] = r.round;
  j["gfl_accuracy"] = r.gfl_accuracy;
  j["pfl_accuracy"] = r.pfl_accuracy;
  j["pfl_accuracies"] = optional_array(r.pfl_accuracies);
  j["train_loss"] = r.train_loss;
  j["p"] = r.p;
  j["cu_iterations"] = r.cu_iterations;
  j["pareto_gap"] = r.pareto_gap;
  return j.dump();
}

PreparedData prepare_data(const ExperimentConfig& raw) {
  const ExperimentConfig cfg = with_derived_seeds(raw);
  LabeledDataset all;
  if (cfg.data_path.empty()) {
    SyntheticSpec spec = cfg.synthetic;
    spec.per_class += cfg.test_per_class;
    all = make_synthetic(spec);
  } else {
    all = load_dataset(cfg.data_path);
  }
  PreparedData out;
  auto [pool, test] = hold_out_per_class(all, cfg.test_per_class, derive_seed(cfg.seed, {kTagHoldOut}));
  out.pool = std::move(pool);
  out.global_test = std::move(test);
  out.partition = dirichlet_partition(out.pool, cfg.partition);
  for (const auto& p : out.partition.pools) {
    out.shards.push_back(split_local(p, cfg.train_fraction,
                                     derive_seed(cfg.seed, {kTagSplit, static_cast<std::uint64_t>(p.client)})));
  }
  return out;
}

double evaluate_gfl(const ParamVector& global, const ExtractorConfig& cfg, const PrototypeSet& protos,
                    const LabeledDataset& test, Metric metric) {
  if (test.size() == 0) throw std::invalid_argument("evaluate_gfl: empty test set");
  return accuracy(global, cfg, protos, test, metric);
}

std::vector<std::optional<double>> evaluate_pfl(const ParamVector& global, const ExtractorConfig& cfg,
                                                const std::vector<ClientShard>& shards,
                                                const std::vector<const PrototypeSet*>& client_protos,
                                                const FinetuneConfig& ft,
                                                const std::vector<std::uint64_t>& seeds) {
  if (client_protos.size() != shards.size() || seeds.size() != shards.size()) {
    throw std::invalid_argument("evaluate_pfl: one prototype set and seed per client required");
  }
  std::vector<std::optional<double>> out(shards.size());
  for (std::size_t k = 0; k < shards.size(); ++k) {
    const auto& shard = shards[k];
    if (shard.test.size() == 0) continue;
    const PrototypeSet& protos = *client_protos[k];
    Rng rng(seeds[k]);
    const auto tuned = local_train(global, shard.train, protos, cfg, ft.triplet, ft.local, rng);
    out[k] = accuracy(tuned.theta, cfg, protos, shard.test, ft.triplet.metric);
  }
  return out;
}

std::vector<std::optional<double>> per_class_accuracy(const ParamVector& theta, const ExtractorConfig& cfg,
                                                      const PrototypeSet& protos, const LabeledDataset& data,
                                                      Metric metric) {
  std::vector<std::int64_t> hits(static_cast<std::size_t>(protos.classes()), 0);
  std::vector<std::int64_t> totals(hits.size(), 0);
  const auto pred = predict_batch(theta, cfg, protos, data.features, metric);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto y = static_cast<std::size_t>(data.labels[i]);
    totals[y] += 1;
    hits[y] += pred[i] == data.labels[i];
  }
  std::vector<std::optional<double>> out(hits.size());
  for (std::size_t c = 0; c < hits.size(); ++c) {
    if (totals[c] > 0) out[c] = static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
  }
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& raw, Variant variant,
                                const std::function<void(const RoundTrace&)>& on_round) {
  raw.validate();
  const ExperimentConfig cfg = with_derived_seeds(raw);
  PreparedData data = prepare_data(raw);
  const int clients = cfg.partition.clients;
  const int classes = data.pool.classes;
  const int dim = cfg.extractor.output_dim;
  if (data.pool.dim() != cfg.extractor.input_dim) {
    throw std::invalid_argument("run_experiment: data has " + std::to_string(data.pool.dim()) +
                                " features but the extractor expects " + std::to_string(cfg.extractor.input_dim));
  }
  const Aggregator aggregator = variant == Variant::kAveraged ? Aggregator::kAveraged : cfg.aggregator;

  // Round-0 server prototypes.
  const std::uint64_t proto_seed = derive_seed(cfg.seed, {kTagPrototypes});
  auto tammes_set = [&](std::uint64_t seed) { return make_tammes_prototypes(classes, dim, cfg.slope, seed, cfg.tammes); };
  const PrototypeSet server_protos = variant == Variant::kGeodesicMetricOnly
                                         ? contract(random_unit_rows(classes, dim, proto_seed), cfg.slope, proto_seed)
                                         : tammes_set(proto_seed);
  std::vector<PrototypeSet> own_protos;  // kFixedOnly: one frozen random set per client
  if (variant == Variant::kFixedOnly) {
    for (int k = 0; k < clients; ++k) {
      const auto seed = derive_seed(proto_seed, {kTagClientPrototypes, static_cast<std::uint64_t>(k)});
      own_protos.push_back(contract(random_unit_rows(classes, dim, seed), cfg.slope, seed));
    }
  }

  std::vector<std::int64_t> n_samples;
  for (const auto& s : data.shards) n_samples.push_back(s.n_train);

  ParamVector global = init_extractor(cfg.extractor);
  std::vector<ParamVector> locals(static_cast<std::size_t>(clients));
  std::vector<double> client_loss(static_cast<std::size_t>(clients), 0.0);
  std::vector<RoundRecord> records;
  std::vector<std::string> debug;

  for (int t = 0; t < cfg.rounds; ++t) {
    const auto start = std::chrono::steady_clock::now();
    const auto round_tag = static_cast<std::uint64_t>(t);

    std::optional<PrototypeSet> round_protos;
    if (variant == Variant::kSharedOnly && t > 0) {
      round_protos = tammes_set(derive_seed(proto_seed, {kTagRoundPrototypes, round_tag}));
    }
    const PrototypeSet& broadcast = round_protos ? *round_protos : server_protos;
    std::vector<const PrototypeSet*> client_sets(static_cast<std::size_t>(clients), &broadcast);
    if (variant == Variant::kFixedOnly) {
      for (int k = 0; k < clients; ++k) client_sets[static_cast<std::size_t>(k)] = &own_protos[static_cast<std::size_t>(k)];
    }

    for_each_client(clients, cfg.threads, [&](int k) {
      const auto ku = static_cast<std::size_t>(k);
      Rng rng(derive_seed(cfg.seed, {kTagLocal, round_tag, static_cast<std::uint64_t>(k)}));
      auto res = local_train(global, data.shards[ku].train, *client_sets[ku], cfg.extractor, cfg.triplet, cfg.local, rng);
      client_loss[ku] = res.epoch_losses.empty() ? 0.0 : res.epoch_losses.back();
      locals[ku] = std::move(res.theta);
    });

    const DeviationSet dev = compute_deviations(global, locals);
    const AggregationWeights weights =
        aggregator == Aggregator::kConsistent ? consistent_update(dev, n_samples, cfg.cu) : fedavg_weights(n_samples);
    ParamVector next = aggregate(global, dev, weights);
    if (!next.all_finite()) {
      throw std::runtime_error("round " + std::to_string(t) + ": aggregated model is not finite");
    }
    if (cfg.cu_debug) debug.push_back(aggregation_debug_record(t, dev, weights));
    if (on_round) {
      RoundTrace trace{t, &global, &locals, &n_samples, &weights, &next, &broadcast};
      on_round(trace);
    }
    global = std::move(next);

    RoundRecord rec;
    rec.round = t;
    rec.gfl_accuracy = evaluate_gfl(global, cfg.extractor, broadcast, data.global_test, cfg.triplet.metric);
    FinetuneConfig ft{cfg.local, cfg.triplet};
    if (cfg.pfl_unit == "steps") {
      ft.local.steps = cfg.pfl_finetune;
    } else {
      ft.local.epochs = cfg.pfl_finetune;
    }
    std::vector<std::uint64_t> ft_seeds;
    for (int k = 0; k < clients; ++k) {
      ft_seeds.push_back(derive_seed(cfg.seed, {kTagFinetune, round_tag, static_cast<std::uint64_t>(k)}));
    }
    rec.pfl_accuracies = evaluate_pfl(global, cfg.extractor, data.shards, client_sets, ft, ft_seeds);
    double pfl_sum = 0.0;
    int pfl_count = 0;
    for (const auto& a : rec.pfl_accuracies) {
      if (a) {
        pfl_sum += *a;
        ++pfl_count;
      }
    }
    rec.pfl_accuracy = pfl_count > 0 ? pfl_sum / pfl_count : 0.0;
    double loss_sum = 0.0;
    double weight_sum = 0.0;
    for (int k = 0; k < clients; ++k) {
      loss_sum += client_loss[static_cast<std::size_t>(k)] * static_cast<double>(n_samples[static_cast<std::size_t>(k)]);
      weight_sum += static_cast<double>(n_samples[static_cast<std::size_t>(k)]);
    }
    rec.train_loss = loss_sum / weight_sum;
    rec.p.assign(weights.p.data(), weights.p.data() + weights.p.size());
    rec.cu_iterations = weights.cu_iterations;
    rec.pareto_gap = weights.pareto_gap;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    records.push_back(std::move(rec));
  }

  return ExperimentResult{std::move(records), std::move(global), std::move(locals), server_protos,
                          std::move(data), std::move(debug)};
}

ExperimentResult run_ablation(const ExperimentConfig& cfg, Variant variant,
                              const std::function<void(const RoundTrace&)>& on_round) {
  return run_experiment(cfg, variant, on_round);
}

void write_run_outputs(const ExperimentResult& result, const ExperimentConfig& cfg,
                       const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write_text = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << text;
  };
  std::string metrics;
  std::string timing;
  for (const auto& r : result.records) {
    metrics += round_record_json(r) + "\n";
    timing += nlohmann::json{{"round", r.round}, {"wall_seconds", r.wall_seconds}}.dump() + "\n";
  }
  write_text("metrics.jsonl", metrics);
  write_text("timing.jsonl", timing);
  write_text("partition_manifest.json", partition_manifest(result.data.partition) + "\n");
  write_text("config.json", config_to_json(cfg).dump(2) + "\n");
  if (cfg.cu_debug) {
    std::string lines;
    for (const auto& l : result.cu_debug) lines += l + "\n";
    write_text("cu_debug.jsonl", lines);
  }
  save_checkpoint(result.global, dir / "global.ckpt");
  for (std::size_t k = 0; k < result.clients.size(); ++k) {
    save_checkpoint(result.clients[k], dir / ("client_" + std::to_string(k) + ".ckpt"));
  }
  save_prototypes(result.prototypes, dir / "prototypes.bin");
}

}  // namespace hyperfed
