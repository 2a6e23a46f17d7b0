// Command-line front end: run, eval, protos, partition.
// Failures print one JSON error object on stderr and exit nonzero.
#include "hyperfed/federation.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace hyperfed;

namespace {

int fail(const std::string& command, const std::string& kind, const std::string& message, int code) {
  nlohmann::json err = {{"error", {{"command", command}, {"type", kind}, {"message", message}}}};
  std::cerr << err.dump() << "\n";
  return code;
}

nlohmann::json optional_json(const std::vector<std::optional<double>>& values) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& v : values) arr.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return arr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HyperFed federated learning simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train a federation from a config file");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs/latest";
  std::string variant_name = "full";
  run->add_option("--config", config_path, "JSON config")->required();
  run->add_option("--seed", seed, "master seed (overrides the config)");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--variant", variant_name,
                  "full | geodesic_metric_only | fixed_only | shared_only | averaged");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  std::string ckpt_path;
  std::string data_path;
  std::string protos_path;
  std::string activation_name = "tanh";
  std::string metric_name = "geodesic";
  eval->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  eval->add_option("--data", data_path, "labeled dataset (text format)")->required();
  eval->add_option("--protos", protos_path, "prototype file (default: prototypes.bin beside the checkpoint)");
  eval->add_option("--activation", activation_name, "hidden activation: tanh | relu | identity");
  eval->add_option("--metric", metric_name, "geodesic | euclidean");

  auto* protos = app.add_subcommand("protos", "generate a fixed prototype set");
  int classes = 0;
  int dim = 0;
  double slope = 0.9;
  std::uint64_t protos_seed = 0;
  std::string protos_out;
  protos->add_option("--classes", classes)->required();
  protos->add_option("--dim", dim)->required();
  protos->add_option("--slope", slope)->required();
  protos->add_option("--seed", protos_seed);
  protos->add_option("--out", protos_out)->required();

  auto* part = app.add_subcommand("partition", "Dirichlet-partition a dataset across clients");
  std::string part_data;
  int clients = 0;
  double alpha = 0.5;
  std::uint64_t part_seed = 0;
  double train_fraction = 0.75;
  std::string part_out;
  part->add_option("--data", part_data)->required();
  part->add_option("--clients", clients)->required();
  part->add_option("--alpha", alpha)->required();
  part->add_option("--seed", part_seed);
  part->add_option("--train-fraction", train_fraction);
  part->add_option("--out", part_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("parse", "usage", e.what(), 2);
  }

  std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*run) {
      ExperimentConfig cfg = load_config(config_path);
      if (seed) cfg.seed = *seed;
      const Variant variant = parse_variant(variant_name);
      const auto result = run_experiment(cfg, variant, {});
      write_run_outputs(result, cfg, out_dir);
      const auto& last = result.records.back();
      nlohmann::json summary = {{"out", out_dir},
                                {"variant", to_string(variant)},
                                {"rounds", cfg.rounds},
                                {"gfl_accuracy", last.gfl_accuracy},
                                {"pfl_accuracy", last.pfl_accuracy}};
      std::cout << summary.dump() << "\n";
    } else if (*eval) {
      const ParamVector theta = load_checkpoint(ckpt_path);
      const fs::path pp = protos_path.empty() ? fs::path(ckpt_path).parent_path() / "prototypes.bin" : fs::path(protos_path);
      const PrototypeSet set = load_prototypes(pp);
      const LabeledDataset ds = load_dataset(data_path);
      const ExtractorConfig ec = extractor_config_from_layout(theta.layout(), parse_activation(activation_name));
      if (ds.dim() != ec.input_dim) {
        throw std::invalid_argument("dataset has " + std::to_string(ds.dim()) + " features, checkpoint expects " +
                                    std::to_string(ec.input_dim));
      }
      if (ds.classes > set.classes()) {
        throw std::invalid_argument("dataset has more classes than the prototype set");
      }
      if (set.dim() != ec.output_dim) throw std::invalid_argument("prototype dimension does not match the checkpoint");
      const Metric metric = parse_metric(metric_name);
      nlohmann::json out = {{"n", ds.size()},
                            {"accuracy", accuracy(theta, ec, set, ds, metric)},
                            {"per_class", optional_json(per_class_accuracy(theta, ec, set, ds, metric))}};
      std::cout << out.dump() << "\n";
    } else if (*protos) {
      const auto [unit, report] = optimize_prototypes(classes, dim, protos_seed);
      const PrototypeSet set = contract(unit, slope, protos_seed);
      save_prototypes(set, protos_out);
      nlohmann::json out = {{"out", protos_out},
                            {"classes", classes},
                            {"dim", dim},
                            {"slope", slope},
                            {"loss", report.final_loss},
                            {"max_pairwise_cosine", report.max_pairwise_cosine},
                            {"iterations", report.iterations}};
      std::cout << out.dump() << "\n";
    } else if (*part) {
      const LabeledDataset ds = load_dataset(part_data);
      const Partition p = dirichlet_partition(ds, PartitionSpec{clients, alpha, part_seed});
      fs::create_directories(part_out);
      for (const auto& pool : p.pools) {
        const auto shard = split_local(pool, train_fraction, derive_seed(part_seed, {6, static_cast<std::uint64_t>(pool.client)}));
        const std::string stem = "client_" + std::to_string(pool.client);
        write_dataset(shard.train, fs::path(part_out) / (stem + "_train.txt"));
        write_dataset(shard.test, fs::path(part_out) / (stem + "_test.txt"));
      }
      std::ofstream(fs::path(part_out) / "partition_manifest.json") << partition_manifest(p) << "\n";
      nlohmann::json out = {{"out", part_out}, {"clients", clients}, {"repaired", p.repaired}};
      std::cout << out.dump() << "\n";
    }
  } catch (const std::invalid_argument& e) {
    return fail(command, "invalid_argument", e.what(), 1);
  } catch (const std::exception& e) {
    return fail(command, "runtime_error", e.what(), 1);
  }
  return 0;
}
