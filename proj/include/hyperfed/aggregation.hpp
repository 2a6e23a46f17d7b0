// Server-side aggregation: consistent updating (min-norm convex combination of the
// client deviations found by toughest-client line searches) and the FedAvg baseline.
#pragma once

#include "hyperfed/param_vector.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace hyperfed {

/// Client deviations from the broadcast model and their Gram matrix.
struct DeviationSet {
  std::vector<ParamVector> deltas;
  Eigen::MatrixXd gram;

  int clients() const { return static_cast<int>(deltas.size()); }
};

/// Simplex weights over the clients.
struct AggregationWeights {
  Eigen::VectorXd p;
  int cu_iterations = 0;
  /// |D*|^2 - min_k <D_k, D*> for D* = sum_k p_k D_k; zero at a min-norm point.
  double pareto_gap = 0.0;
  /// |sum_k p_k D_k|^2 at the start and after every iteration.
  std::vector<double> norm_trace;
};

struct ConsistentUpdateConfig {
  int max_iters = 20;
  /// Stop once no weight moves by more than this (l-infinity).
  double tol = 1e-6;
  /// Also take steps that shrink the weight of the support client most aligned
  /// with the current combination. Disabling leaves only toughest-client steps.
  bool away_steps = true;
  /// After each line search, move toward the min-norm affine combination of the
  /// clients that currently carry weight (clipped at the simplex boundary).
  bool support_steps = true;
};

/// deltas[k] = locals[k] - global and gram(k, k') = <deltas[k], deltas[k']>.
DeviationSet compute_deviations(const ParamVector& global, std::span<const ParamVector> locals);

/// argmin_k (V p)_k, lowest index on ties.
int toughest_client(const Eigen::VectorXd& p, const Eigen::MatrixXd& gram);

/// Weight on the toughest client minimizing |p D_tau + (1 - p) D_vir|^2 over [0, 1].
/// Returns 0 when the two deviations coincide.
double line_search(const ParamVector& delta_tau, const ParamVector& delta_vir);

/// Same line search from inner products <D_tau, D_tau>, <D_tau, D_vir>, <D_vir, D_vir>.
double line_search(double tau_tau, double tau_vir, double vir_vir);

double pareto_gap(const Eigen::MatrixXd& gram, const Eigen::VectorXd& p);

/// Iterates toughest-client line searches from the data-weighted start.
AggregationWeights consistent_update(const DeviationSet& dev, std::span<const std::int64_t> n_samples,
                                     const ConsistentUpdateConfig& cfg = {});

/// p_k = N_k / sum_j N_j.
AggregationWeights fedavg_weights(std::span<const std::int64_t> n_samples);

/// global + sum_k p_k deltas[k].
ParamVector aggregate(const ParamVector& global, const DeviationSet& dev,
                      const AggregationWeights& weights);

/// One JSON object (no trailing newline) for the per-round aggregation debug stream.
std::string aggregation_debug_record(int round, const DeviationSet& dev,
                                     const AggregationWeights& weights);

}  // namespace hyperfed
