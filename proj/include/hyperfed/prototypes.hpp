// Fixed class prototypes: uniform placement on the unit sphere by minimizing the
// largest pairwise cosine (Tammes objective), then contraction into the ball.
#pragma once

#include "hyperfed/poincare.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace hyperfed {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TammesConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  int max_iterations = 2000;
  double convergence_tol = 1e-7;
  int patience = 50;
};

struct TammesReport {
  double final_loss = 0.0;
  double max_pairwise_cosine = 0.0;
  int iterations = 0;
  bool converged = false;
  /// Loss of the incumbent (best configuration so far) each time it improves,
  /// starting with the initial configuration. Non-increasing.
  std::vector<double> loss_trace;
};

/// Mean over rows of the largest off-diagonal cosine of W W^T.
/// Throws std::invalid_argument unless every row has unit norm within 1e-6.
double tammes_loss(const RowMatrix& unit_rows);

double max_pairwise_cosine(const RowMatrix& rows);

/// Projected subgradient descent (heavy-ball momentum, linearly decayed step) on
/// the Tammes loss. Rows are renormalized after every step and the best iterate is
/// returned. Deterministic for fixed (classes, dim, seed, cfg).
std::pair<RowMatrix, TammesReport> optimize_prototypes(int classes, int dim, std::uint64_t seed,
                                                       const TammesConfig& cfg = {});

/// Rows drawn from an isotropic normal and normalized, without optimization.
RowMatrix random_unit_rows(int classes, int dim, std::uint64_t seed);

/// Immutable set of C class prototypes of norm `slope` in the Poincare ball.
class PrototypeSet {
 public:
  PrototypeSet(RowMatrix contracted, double slope, std::uint64_t seed);

  const RowMatrix& matrix() const { return w_; }
  int classes() const { return static_cast<int>(w_.rows()); }
  int dim() const { return static_cast<int>(w_.cols()); }
  double slope() const { return slope_; }
  std::uint64_t seed() const { return seed_; }
  const BallPoint<double>& point(int c) const { return points_[static_cast<std::size_t>(c)]; }

  bool operator==(const PrototypeSet& other) const {
    return slope_ == other.slope_ && seed_ == other.seed_ && w_ == other.w_;
  }

 private:
  RowMatrix w_;
  double slope_;
  std::uint64_t seed_;
  std::vector<BallPoint<double>> points_;
};

/// W_P = s W*. Requires unit rows and 0 < s <= 1 - kBallEpsilon.
PrototypeSet contract(const RowMatrix& unit_rows, double slope, std::uint64_t seed = 0);

/// optimize_prototypes followed by contract.
PrototypeSet make_tammes_prototypes(int classes, int dim, double slope, std::uint64_t seed,
                                    const TammesConfig& cfg = {});

/// Prototype file: u64 C, u64 n, f64 s, u64 seed, then C*n row-major f64, all little-endian.
std::vector<std::uint8_t> encode_prototypes(const PrototypeSet& protos);
PrototypeSet decode_prototypes(const std::vector<std::uint8_t>& bytes);
void save_prototypes(const PrototypeSet& protos, const std::filesystem::path& path);
PrototypeSet load_prototypes(const std::filesystem::path& path);

}  // namespace hyperfed
