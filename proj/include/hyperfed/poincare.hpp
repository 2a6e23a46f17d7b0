// Poincare ball geometry (curvature -1, unit ball).
//
// Every map that produces a ball point clamps its result to norm <= 1 - kBallEpsilon,
// so distances and conformal factors stay finite. All functions are pure.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace hyperfed {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr double kBallEpsilon = 1e-5;

namespace detail {

template <typename Scalar>
Scalar max_ball_norm() {
  return Scalar(1) - Scalar(kBallEpsilon);
}

template <typename Derived>
void check_same_dim(const Eigen::MatrixBase<Derived>& a,
                    const Eigen::MatrixBase<Derived>& b, const char* op) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(op) + ": dimension mismatch (" +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
}

// arcosh(1 + delta) without the cancellation of evaluating 1 + delta first.
template <typename Scalar>
Scalar arcosh1p(Scalar delta) {
  using std::log1p;
  using std::sqrt;
  if (!(delta > Scalar(0))) return Scalar(0);
  return log1p(delta + sqrt(delta * (delta + Scalar(2))));
}

}  // namespace detail

/// A point strictly inside the unit ball. Construction rescales any input with
/// norm above 1 - kBallEpsilon back onto that radius.
template <typename Scalar = double>
class BallPoint {
 public:
  using VectorType = Vector<Scalar>;

  BallPoint() = default;

  template <typename Derived>
  explicit BallPoint(const Eigen::MatrixBase<Derived>& coords) : coords_(coords) {
    if (coords_.size() < 1) throw std::invalid_argument("BallPoint: dimension must be >= 1");
    const Scalar norm = coords_.norm();
    const Scalar cap = detail::max_ball_norm<Scalar>();
    if (!std::isfinite(static_cast<double>(norm))) {
      throw std::invalid_argument("BallPoint: non-finite coordinates");
    }
    if (norm > cap) coords_ *= cap / norm;
  }

  static BallPoint origin(Eigen::Index dim) { return BallPoint(VectorType::Zero(dim)); }

  const VectorType& coords() const { return coords_; }
  Eigen::Index dim() const { return coords_.size(); }
  Scalar norm() const { return coords_.norm(); }
  Scalar squared_norm() const { return coords_.squaredNorm(); }

 private:
  VectorType coords_;
};

/// A vector in the tangent space at the origin. No norm bound.
template <typename Scalar = double>
class TangentVector {
 public:
  using VectorType = Vector<Scalar>;

  TangentVector() = default;

  template <typename Derived>
  explicit TangentVector(const Eigen::MatrixBase<Derived>& coords) : coords_(coords) {}

  static TangentVector zero(Eigen::Index dim) { return TangentVector(VectorType::Zero(dim)); }

  const VectorType& coords() const { return coords_; }
  VectorType& coords() { return coords_; }
  Eigen::Index dim() const { return coords_.size(); }
  Scalar norm() const { return coords_.norm(); }

 private:
  VectorType coords_;
};

/// Mobius addition a (+) b.
template <typename Scalar>
BallPoint<Scalar> mobius_add(const BallPoint<Scalar>& a, const BallPoint<Scalar>& b) {
  detail::check_same_dim(a.coords(), b.coords(), "mobius_add");
  const Scalar ab = a.coords().dot(b.coords());
  const Scalar aa = a.squared_norm();
  const Scalar bb = b.squared_norm();
  const Scalar den = Scalar(1) + Scalar(2) * ab + aa * bb;
  Vector<Scalar> num = (Scalar(1) + Scalar(2) * ab + bb) * a.coords() + (Scalar(1) - aa) * b.coords();
  return BallPoint<Scalar>(num / den);
}

template <typename Scalar>
Scalar conformal_factor(const BallPoint<Scalar>& p) {
  return Scalar(2) / (Scalar(1) - p.squared_norm());
}

/// Geodesic distance; the arcosh argument is clamped to >= 1.
template <typename Scalar>
Scalar geodesic_distance(const BallPoint<Scalar>& a, const BallPoint<Scalar>& b) {
  detail::check_same_dim(a.coords(), b.coords(), "geodesic_distance");
  const Scalar diff = (a.coords() - b.coords()).squaredNorm();
  const Scalar den = (Scalar(1) - a.squared_norm()) * (Scalar(1) - b.squared_norm());
  return detail::arcosh1p(Scalar(2) * diff / den);
}

/// exp_0(z) = tanh(|z|) z / |z|, with exp_0(0) = 0.
template <typename Scalar>
BallPoint<Scalar> exp_map_origin(const TangentVector<Scalar>& z) {
  const Scalar r = z.norm();
  if (r == Scalar(0)) return BallPoint<Scalar>::origin(z.dim());
  using std::tanh;
  return BallPoint<Scalar>(z.coords() * (tanh(r) / r));
}

/// log_0(p) = artanh(|p|) p / |p|, with log_0(0) = 0.
template <typename Scalar>
TangentVector<Scalar> log_map_origin(const BallPoint<Scalar>& p) {
  const Scalar r = p.norm();
  if (r == Scalar(0)) return TangentVector<Scalar>::zero(p.dim());
  using std::atanh;
  return TangentVector<Scalar>(p.coords() * (atanh(r) / r));
}

/// Gradient with respect to the tangent vector z of a distance evaluated at exp_0(z).
/// `degenerate` is set when the distance is zero and the zero subgradient was returned.
template <typename Scalar>
struct DistanceGradient {
  Scalar distance{0};
  TangentVector<Scalar> grad;
  bool degenerate{false};
};

namespace detail {

// Applies the (symmetric) Jacobian of exp_0 at z, including the boundary clamp,
// to a ball-space gradient g.
template <typename Scalar>
Vector<Scalar> exp_map_origin_vjp(const Vector<Scalar>& z, const Vector<Scalar>& g) {
  using std::tanh;
  const Scalar r = z.norm();
  if (r == Scalar(0)) return g;
  const Vector<Scalar> u = z / r;
  const Scalar th = tanh(r);
  const Scalar cap = max_ball_norm<Scalar>();
  if (th > cap) {
    // exp_0(z) = cap * u on the clamped region: only the angular part survives.
    return (cap / r) * (g - u * u.dot(g));
  }
  // radial derivative sech^2(r) and tangential scale tanh(r)/r.
  Scalar tangential;
  if (r < Scalar(1e-4)) {
    tangential = Scalar(1) - r * r / Scalar(3);
  } else {
    tangential = th / r;
  }
  const Scalar radial = Scalar(1) - th * th;
  return tangential * g + (radial - tangential) * u * u.dot(g);
}

}  // namespace detail

/// d/dz of geodesic_distance(exp_0(z), b).
template <typename Scalar>
DistanceGradient<Scalar> geodesic_distance_grad(const TangentVector<Scalar>& z,
                                                const BallPoint<Scalar>& b) {
  detail::check_same_dim(z.coords(), b.coords(), "geodesic_distance_grad");
  const BallPoint<Scalar> x = exp_map_origin(z);
  const Vector<Scalar> diff = x.coords() - b.coords();
  const Scalar diff2 = diff.squaredNorm();
  const Scalar one_minus_x = Scalar(1) - x.squared_norm();
  const Scalar one_minus_b = Scalar(1) - b.squared_norm();
  const Scalar delta = Scalar(2) * diff2 / (one_minus_x * one_minus_b);

  DistanceGradient<Scalar> out;
  out.distance = detail::arcosh1p(delta);
  const Scalar denom = std::sqrt(delta * (delta + Scalar(2)));
  if (!(denom > Scalar(0))) {
    out.grad = TangentVector<Scalar>::zero(z.dim());
    out.degenerate = true;
    return out;
  }
  // d delta / d x = 4 / ((1-|b|^2)(1-|x|^2)) * ((x - b) + |x - b|^2 x / (1 - |x|^2))
  const Vector<Scalar> ddelta_dx =
      (Scalar(4) / (one_minus_b * one_minus_x)) * (diff + (diff2 / one_minus_x) * x.coords());
  const Vector<Scalar> g_ball = ddelta_dx / denom;
  out.grad = TangentVector<Scalar>(detail::exp_map_origin_vjp<Scalar>(z.coords(), g_ball));
  return out;
}

/// Euclidean distance between exp_0(z) and b, and its gradient in z. Used by the
/// Euclidean-metric configuration of the learner.
template <typename Scalar>
DistanceGradient<Scalar> euclidean_distance_grad(const TangentVector<Scalar>& z,
                                                 const BallPoint<Scalar>& b) {
  detail::check_same_dim(z.coords(), b.coords(), "euclidean_distance_grad");
  const BallPoint<Scalar> x = exp_map_origin(z);
  const Vector<Scalar> diff = x.coords() - b.coords();
  DistanceGradient<Scalar> out;
  out.distance = diff.norm();
  if (out.distance == Scalar(0)) {
    out.grad = TangentVector<Scalar>::zero(z.dim());
    out.degenerate = true;
    return out;
  }
  out.grad = TangentVector<Scalar>(
      detail::exp_map_origin_vjp<Scalar>(z.coords(), Vector<Scalar>(diff / out.distance)));
  return out;
}

template <typename Scalar>
Scalar euclidean_distance(const BallPoint<Scalar>& a, const BallPoint<Scalar>& b) {
  detail::check_same_dim(a.coords(), b.coords(), "euclidean_distance");
  return (a.coords() - b.coords()).norm();
}

}  // namespace hyperfed
