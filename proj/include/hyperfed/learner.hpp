// Client-side hyperbolic prototype learning: an MLP feature extractor whose output
// is mapped into the Poincare ball at the origin and trained with a triplet hinge
// against the frozen class prototypes.
//
// Training uses plain SGD: the prototypes are frozen and every trainable parameter
// lives in flat Euclidean space, where Riemannian SGD is the same update.
#pragma once

#include "hyperfed/data.hpp"
#include "hyperfed/param_vector.hpp"
#include "hyperfed/poincare.hpp"
#include "hyperfed/prototypes.hpp"
#include "hyperfed/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace hyperfed {

enum class Activation { kTanh, kRelu, kIdentity };
enum class Metric { kGeodesic, kEuclidean };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
Metric parse_metric(const std::string& name);
std::string to_string(Metric m);

struct ExtractorConfig {
  int input_dim = 16;
  std::vector<int> hidden = {32};
  int output_dim = 4;
  Activation activation = Activation::kTanh;
  std::uint64_t init_seed = 0;
};

/// Tensors "W<l>" (out x in, row-major) and "b<l>" (out) for each layer.
Layout extractor_layout(const ExtractorConfig& cfg);

/// Rebuilds the architecture from a checkpoint layout (activation supplied).
ExtractorConfig extractor_config_from_layout(const Layout& layout, Activation activation);

/// Uniform in +-sqrt(6 / (fan_in + fan_out)) per weight matrix, zero biases.
ParamVector init_extractor(const ExtractorConfig& cfg);

/// Tangent-space features for each row of `x` (B x input_dim -> B x output_dim).
Eigen::MatrixXd extract_batch(const ParamVector& theta, const ExtractorConfig& cfg, const FeatureMatrix& x);

TangentVector<double> extract(const ParamVector& theta, const ExtractorConfig& cfg,
                              const Eigen::VectorXd& x);

struct TripletConfig {
  double margin = 3.0;
  int negatives_per_sample = 1;
  std::uint64_t seed = 0;
  Metric metric = Metric::kGeodesic;
};

/// max(d(exp_0(z), w_y) - d(exp_0(z), w_neg) + m, 0).
double triplet_loss(const TangentVector<double>& z, int y, const PrototypeSet& protos, int neg,
                    double margin, Metric metric = Metric::kGeodesic);

/// Uniform over all classes except y, including classes absent from local data.
int sample_negative(int y, int classes, Rng& rng);

struct TripletGradient {
  double loss = 0.0;
  ParamVector grad;
  /// Samples whose anchor coincided with a prototype (zero subgradient used).
  int degenerate = 0;
};

/// Batch-mean triplet loss and its gradient for explicit negatives:
/// negatives is B x negatives_per_sample, and each sample's loss is the mean of its hinges.
TripletGradient triplet_grad(const ParamVector& theta, const ExtractorConfig& cfg,
                             const FeatureMatrix& x, std::span<const int> labels,
                             const Eigen::MatrixXi& negatives, const PrototypeSet& protos,
                             double margin, Metric metric = Metric::kGeodesic);

/// Same, with negatives drawn from rng.
TripletGradient triplet_grad(const ParamVector& theta, const ExtractorConfig& cfg,
                             const FeatureMatrix& x, std::span<const int> labels,
                             const PrototypeSet& protos, const TripletConfig& tcfg, Rng& rng);

struct LocalTrainConfig {
  int epochs = 5;
  int batch_size = 128;
  double lr = 0.3;
  /// When >= 0, run exactly this many mini-batch steps instead of `epochs` epochs.
  int steps = -1;
};

struct LocalTrainResult {
  ParamVector theta;
  /// Sample-weighted mean loss of each epoch (or partial epoch in step mode).
  std::vector<double> epoch_losses;
};

/// Mini-batch SGD on the triplet loss; data is reshuffled each epoch with rng.
LocalTrainResult local_train(const ParamVector& theta_in, const LabeledDataset& train,
                             const PrototypeSet& protos, const ExtractorConfig& cfg,
                             const TripletConfig& tcfg, const LocalTrainConfig& tc, Rng& rng);

/// Mean triplet loss over a dataset with fixed negatives drawn from rng (for diagnostics).
double dataset_loss(const ParamVector& theta, const ExtractorConfig& cfg, const LabeledDataset& data,
                    const PrototypeSet& protos, const TripletConfig& tcfg, Rng& rng);

/// Nearest prototype to exp_0(F(x)); ties go to the lowest class index.
int predict(const ParamVector& theta, const ExtractorConfig& cfg, const PrototypeSet& protos,
            const Eigen::VectorXd& x, Metric metric = Metric::kGeodesic);

std::vector<int> predict_batch(const ParamVector& theta, const ExtractorConfig& cfg,
                               const PrototypeSet& protos, const FeatureMatrix& x,
                               Metric metric = Metric::kGeodesic);

/// Fraction of rows whose prediction matches the label; 0 for an empty dataset.
double accuracy(const ParamVector& theta, const ExtractorConfig& cfg, const PrototypeSet& protos,
                const LabeledDataset& data, Metric metric = Metric::kGeodesic);

}  // namespace hyperfed
