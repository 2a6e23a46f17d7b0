#include "hyperfed/aggregation.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hyperfed {

namespace {

void require_simplex(const Eigen::VectorXd& p, Eigen::Index k, const char* op) {
  if (p.size() != k) {
    throw std::invalid_argument(std::string(op) + ": weight vector has " + std::to_string(p.size()) +
                                " entries for " + std::to_string(k) + " clients");
  }
  if ((p.array() < 0.0).any() || std::abs(p.sum() - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string(op) + ": weights are not on the simplex");
  }
}

void require_counts(std::span<const std::int64_t> n_samples) {
  if (n_samples.empty()) throw std::invalid_argument("aggregation: no clients");
  for (auto n : n_samples) {
    if (n <= 0) throw std::invalid_argument("aggregation: sample counts must be positive");
  }
}

Eigen::VectorXd data_weights(std::span<const std::int64_t> n_samples) {
  require_counts(n_samples);
  const double total = static_cast<double>(std::accumulate(n_samples.begin(), n_samples.end(), std::int64_t{0}));
  Eigen::VectorXd p(static_cast<Eigen::Index>(n_samples.size()));
  for (std::size_t k = 0; k < n_samples.size(); ++k) p[static_cast<Eigen::Index>(k)] = n_samples[k] / total;
  return p;
}

// Re-weights client c to `weight` and rescales the rest proportionally:
// p <- (1 - gamma) p + gamma e_c with gamma chosen so that p_c = weight.
void move_weight(Eigen::VectorXd& p, int c, double weight) {
  const double old = p[c];
  const double rest = 1.0 - old;
  if (rest <= 0.0) return;
  p *= (1.0 - weight) / rest;
  p[c] = weight;
}


// Moves p toward the minimum-norm affine combination of its current support and
// stops at the simplex boundary if needed. Returns false when no progress is made.
bool support_step(const Eigen::MatrixXd& gram, Eigen::VectorXd& p) {
  std::vector<Eigen::Index> support;
  for (Eigen::Index k = 0; k < p.size(); ++k)
    if (p[k] > 0.0) support.push_back(k);
  const auto m = static_cast<Eigen::Index>(support.size());
  if (m < 2) return false;

  // [V_S 1; 1^T 0] [q; lambda] = [0; 1]
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + 1, m + 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) kkt(i, j) = gram(support[i], support[j]);
    kkt(i, m) = 1.0;
    kkt(m, i) = 1.0;
  }
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + 1);
  rhs[m] = 1.0;
  const Eigen::VectorXd sol = kkt.completeOrthogonalDecomposition().solve(rhs);
  if (!sol.allFinite()) return false;

  Eigen::VectorXd dir = Eigen::VectorXd::Zero(p.size());
  for (Eigen::Index i = 0; i < m; ++i) dir[support[i]] = sol[i] - p[support[i]];

  const double curvature = dir.dot(gram * dir);
  const double slope = dir.dot(gram * p);
  if (!(curvature > 0.0) || !(slope < 0.0)) return false;
  double step = std::min(1.0, -slope / curvature);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double d = dir[support[i]];
    if (d < 0.0) step = std::min(step, -p[support[i]] / d);
  }
  if (!(step > 0.0)) return false;
  p += step * dir;
  p = p.cwiseMax(0.0);
  p /= p.sum();
  return true;
}

}  // namespace

DeviationSet compute_deviations(const ParamVector& global, std::span<const ParamVector> locals) {
  DeviationSet dev;
  dev.deltas.reserve(locals.size());
  for (const auto& local : locals) {
    if (!local.combinable_with(global)) {
      throw std::invalid_argument("compute_deviations: client layout differs from the global model");
    }
    dev.deltas.push_back(local - global);
  }
  const auto k = static_cast<Eigen::Index>(locals.size());
  dev.gram.resize(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i; j < k; ++j) {
      const double v = dev.deltas[static_cast<std::size_t>(i)].values().dot(
          dev.deltas[static_cast<std::size_t>(j)].values());
      dev.gram(i, j) = v;
      dev.gram(j, i) = v;
    }
  }
  return dev;
}

int toughest_client(const Eigen::VectorXd& p, const Eigen::MatrixXd& gram) {
  const Eigen::VectorXd scores = gram * p;
  int best = 0;
  for (Eigen::Index k = 1; k < scores.size(); ++k) {
    if (scores[k] < scores[best]) best = static_cast<int>(k);
  }
  return best;
}

double line_search(double tau_tau, double tau_vir, double vir_vir) {
  const double diff2 = tau_tau - 2.0 * tau_vir + vir_vir;
  if (!(diff2 > 1e-15 * (tau_tau + vir_vir))) return 0.0;
  // (D_tau - D_vir)^T D_vir >= 0: the virtual client alone is closest to the origin.
  if (tau_vir - vir_vir >= 0.0) return 0.0;
  // (D_tau - D_vir)^T D_tau <= 0: the toughest client alone is.
  if (tau_tau - tau_vir <= 0.0) return 1.0;
  return std::clamp((vir_vir - tau_vir) / diff2, 0.0, 1.0);
}

double line_search(const ParamVector& delta_tau, const ParamVector& delta_vir) {
  return line_search(delta_tau.dot(delta_tau), delta_tau.dot(delta_vir), delta_vir.dot(delta_vir));
}

double pareto_gap(const Eigen::MatrixXd& gram, const Eigen::VectorXd& p) {
  const Eigen::VectorXd scores = gram * p;
  return p.dot(scores) - scores.minCoeff();
}

AggregationWeights consistent_update(const DeviationSet& dev, std::span<const std::int64_t> n_samples,
                                     const ConsistentUpdateConfig& cfg) {
  const int k = dev.clients();
  if (static_cast<int>(n_samples.size()) != k) {
    throw std::invalid_argument("consistent_update: sample counts do not match the client count");
  }
  AggregationWeights out;
  out.p = data_weights(n_samples);
  const Eigen::MatrixXd& gram = dev.gram;
  out.norm_trace.push_back(out.p.dot(gram * out.p));

  if (k > 1) {
    for (int it = 0; it < cfg.max_iters; ++it) {
      const Eigen::VectorXd scores = gram * out.p;  // <D_k, D*>
      const double combined = out.p.dot(scores);    // |D*|^2

      // Candidate clients: the toughest one (smallest score) and, for away steps,
      // the supported client with the largest score.
      const int tau = toughest_client(out.p, gram);
      int chosen = tau;
      if (cfg.away_steps) {
        int away = -1;
        for (int c = 0; c < k; ++c) {
          if (out.p[c] > 0.0 && out.p[c] < 1.0 && (away < 0 || scores[c] > scores[away])) away = c;
        }
        if (away >= 0 && scores[away] - combined > combined - scores[tau]) chosen = away;
      }

      // Virtual client: the remaining clients with their current relative weights.
      // The line search runs on the segment between it and the chosen client; the
      // current combination lies on that segment at the chosen client's weight.
      const double own = out.p[chosen];
      double weight = own;
      if (own < 1.0) {
        const double rest = 1.0 - own;
        const double cc = gram(chosen, chosen);
        const double cv = (scores[chosen] - own * cc) / rest;
        const double vv = std::max((combined - 2.0 * own * scores[chosen] + own * own * cc) / (rest * rest), 0.0);
        const double diff2 = cc - 2.0 * cv + vv;
        if (diff2 > 1e-15 * (cc + vv)) {
          const double searched = line_search(cc, cv, vv);
          // The toughest client can only gain weight and the away client only lose it.
          weight = chosen == tau ? std::max(searched, own) : std::min(searched, own);
        }
      }
      const Eigen::VectorXd before = out.p;
      if (weight != own) {
        move_weight(out.p, chosen, weight);
        out.p = out.p.cwiseMax(0.0);
        out.p /= out.p.sum();
      }
      if (cfg.support_steps) support_step(gram, out.p);
      out.cu_iterations = it + 1;

      const double next = out.p.dot(gram * out.p);
      if (next > out.norm_trace.back()) {
        // Rounding in the virtual-client inner products; keep the previous weights.
        out.p = before;
        out.norm_trace.push_back(out.norm_trace.back());
        break;
      }
      out.norm_trace.push_back(next);
      if ((out.p - before).cwiseAbs().maxCoeff() < cfg.tol) break;
    }
  }
  out.pareto_gap = pareto_gap(gram, out.p);
  return out;
}

AggregationWeights fedavg_weights(std::span<const std::int64_t> n_samples) {
  AggregationWeights out;
  out.p = data_weights(n_samples);
  return out;
}

ParamVector aggregate(const ParamVector& global, const DeviationSet& dev,
                      const AggregationWeights& weights) {
  require_simplex(weights.p, dev.clients(), "aggregate");
  ParamVector next = global;
  for (int k = 0; k < dev.clients(); ++k) {
    next.values() += weights.p[k] * dev.deltas[static_cast<std::size_t>(k)].values();
  }
  return next;
}

std::string aggregation_debug_record(int round, const DeviationSet& dev,
                                     const AggregationWeights& weights) {
  nlohmann::json j;
  j["round"] = round;
  j["p"] = std::vector<double>(weights.p.data(), weights.p.data() + weights.p.size());
  j["cu_iterations"] = weights.cu_iterations;
  j["pareto_gap"] = weights.pareto_gap;
  const Eigen::VectorXd diag = dev.gram.diagonal();
  j["gram_diagonal"] = std::vector<double>(diag.data(), diag.data() + diag.size());
  return j.dump();
}

}  // namespace hyperfed
