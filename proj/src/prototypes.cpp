#include "hyperfed/prototypes.hpp"

#include "hyperfed/binary_io.hpp"
#include "hyperfed/rng.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace hyperfed {

namespace {

void require_unit_rows(const RowMatrix& w, double tol, const char* op) {
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double norm = w.row(i).norm();
    if (std::abs(norm - 1.0) > tol) {
      throw std::invalid_argument(std::string(op) + ": row " + std::to_string(i) +
                                  " has norm " + std::to_string(norm) + ", expected 1");
    }
  }
}

void normalize_rows(RowMatrix& w) {
  for (Eigen::Index i = 0; i < w.rows(); ++i) w.row(i).normalize();
}

// Per row, the column of the largest entry of W W^T - 2I (lowest index on ties).
// With unit rows the diagonal entry is -1, which never beats an off-diagonal
// cosine, so only off-diagonal columns are scanned.
std::vector<Eigen::Index> row_argmax(const RowMatrix& gram) {
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(gram.rows()));
  for (Eigen::Index i = 0; i < gram.rows(); ++i) {
    Eigen::Index best = -1;
    double best_val = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < gram.cols(); ++j) {
      if (j == i) continue;
      const double v = gram(i, j);
      if (v > best_val) {
        best_val = v;
        best = j;
      }
    }
    arg[static_cast<std::size_t>(i)] = best;
  }
  return arg;
}

double loss_unchecked(const RowMatrix& w) {
  const RowMatrix gram = w * w.transpose();
  const auto arg = row_argmax(gram);
  double total = 0.0;
  for (Eigen::Index i = 0; i < w.rows(); ++i) total += gram(i, arg[static_cast<std::size_t>(i)]);
  return total / static_cast<double>(w.rows());
}

}  // namespace

double tammes_loss(const RowMatrix& unit_rows) {
  if (unit_rows.rows() < 2) throw std::invalid_argument("tammes_loss: need at least 2 rows");
  require_unit_rows(unit_rows, 1e-6, "tammes_loss");
  return loss_unchecked(unit_rows);
}

double max_pairwise_cosine(const RowMatrix& rows) {
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < rows.rows(); ++j) {
      const double c = rows.row(i).dot(rows.row(j)) / (rows.row(i).norm() * rows.row(j).norm());
      best = std::max(best, c);
    }
  }
  return best;
}

RowMatrix random_unit_rows(int classes, int dim, std::uint64_t seed) {
  if (classes < 2 || dim < 2) {
    throw std::invalid_argument("random_unit_rows: need classes >= 2 and dim >= 2");
  }
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrix w(classes, dim);
  for (int i = 0; i < classes; ++i) {
    do {
      for (int j = 0; j < dim; ++j) w(i, j) = normal(rng);
    } while (w.row(i).norm() < 1e-12);
  }
  normalize_rows(w);
  return w;
}

std::pair<RowMatrix, TammesReport> optimize_prototypes(int classes, int dim, std::uint64_t seed,
                                                       const TammesConfig& cfg) {
  if (cfg.learning_rate <= 0.0 || cfg.max_iterations < 0 || cfg.momentum < 0.0 ||
      cfg.momentum >= 1.0) {
    throw std::invalid_argument("optimize_prototypes: invalid optimizer config");
  }
  RowMatrix w = random_unit_rows(classes, dim, seed);
  RowMatrix velocity = RowMatrix::Zero(classes, dim);
  double loss = loss_unchecked(w);

  TammesReport report;
  RowMatrix best = w;
  double best_loss = loss;
  report.loss_trace.push_back(best_loss);
  int quiet_steps = 0;
  const double inv_c = 1.0 / classes;

  for (int it = 0; it < cfg.max_iterations; ++it) {
    report.iterations = it + 1;
    const RowMatrix gram = w * w.transpose();
    const auto arg = row_argmax(gram);
    RowMatrix grad = RowMatrix::Zero(classes, dim);
    for (int i = 0; i < classes; ++i) {
      const Eigen::Index j = arg[static_cast<std::size_t>(i)];
      grad.row(i) += inv_c * w.row(j);
      grad.row(j) += inv_c * w.row(i);
    }

    // linear decay to zero over the iteration budget
    const double lr = cfg.learning_rate * (1.0 - static_cast<double>(it) / cfg.max_iterations);
    velocity = cfg.momentum * velocity + grad;
    w -= lr * velocity;
    normalize_rows(w);

    const double next = loss_unchecked(w);
    quiet_steps = std::abs(next - loss) < cfg.convergence_tol ? quiet_steps + 1 : 0;
    loss = next;
    if (loss < best_loss) {
      best_loss = loss;
      best = w;
      report.loss_trace.push_back(best_loss);
    }
    if (quiet_steps >= cfg.patience) {
      report.converged = true;
      break;
    }
  }

  report.final_loss = best_loss;
  report.max_pairwise_cosine = max_pairwise_cosine(best);
  return {std::move(best), std::move(report)};
}

PrototypeSet::PrototypeSet(RowMatrix contracted, double slope, std::uint64_t seed)
    : w_(std::move(contracted)), slope_(slope), seed_(seed) {
  if (w_.rows() < 2) throw std::invalid_argument("PrototypeSet: need at least 2 classes");
  points_.reserve(static_cast<std::size_t>(w_.rows()));
  for (Eigen::Index i = 0; i < w_.rows(); ++i) {
    points_.emplace_back(Eigen::VectorXd(w_.row(i).transpose()));
  }
}

PrototypeSet contract(const RowMatrix& unit_rows, double slope, std::uint64_t seed) {
  if (!(slope > 0.0) || slope > 1.0 - kBallEpsilon) {
    throw std::invalid_argument("contract: slope must lie in (0, 1 - 1e-5], got " +
                                std::to_string(slope));
  }
  require_unit_rows(unit_rows, 1e-9, "contract");
  return PrototypeSet(slope * unit_rows, slope, seed);
}

PrototypeSet make_tammes_prototypes(int classes, int dim, double slope, std::uint64_t seed,
                                    const TammesConfig& cfg) {
  auto [unit, report] = optimize_prototypes(classes, dim, seed, cfg);
  return contract(unit, slope, seed);
}

std::vector<std::uint8_t> encode_prototypes(const PrototypeSet& protos) {
  io::ByteWriter w;
  w.u64(static_cast<std::uint64_t>(protos.classes()));
  w.u64(static_cast<std::uint64_t>(protos.dim()));
  w.f64(protos.slope());
  w.u64(protos.seed());
  const RowMatrix& m = protos.matrix();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
  return w.bytes();
}

PrototypeSet decode_prototypes(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  const std::uint64_t classes = r.u64();
  const std::uint64_t dim = r.u64();
  const double slope = r.f64();
  const std::uint64_t seed = r.u64();
  if (classes < 2 || dim < 1 || classes * dim * 8 != r.remaining()) {
    throw std::runtime_error("prototype file: header (C=" + std::to_string(classes) + ", n=" +
                             std::to_string(dim) + ") does not match payload size");
  }
  RowMatrix m(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  return PrototypeSet(std::move(m), slope, seed);
}

void save_prototypes(const PrototypeSet& protos, const std::filesystem::path& path) {
  io::write_file(path, encode_prototypes(protos));
}

PrototypeSet load_prototypes(const std::filesystem::path& path) {
  return decode_prototypes(io::read_file(path));
}

}  // namespace hyperfed
