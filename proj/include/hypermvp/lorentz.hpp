#pragma once

// Lorentz-model geometry: points x = [x_s, x_t] on the upper sheet of
// <x, x>_L = -1/c, with <x, y>_L = <x_s, y_s> - x_t * y_t.
//
// Every operation has a batched, differentiable form over ad::Var (one point
// per row) and a single-point convenience form over LorentzPoint. The
// single-point forms evaluate the batched code on constants.

#include <span>
#include <vector>

#include "hypermvp/autodiff.hpp"

namespace hypermvp::geo {

// Effective radius sqrt(c) * |f| is clamped to this before the lift.
inline constexpr double kMaxLiftRadius = 8.0;
inline constexpr double kDefaultConeBoundary = 0.1;

class Curvature {
 public:
  explicit Curvature(double c = 1.0);
  double value() const { return c_; }
  double sqrt_c() const { return sqrt_c_; }
  friend bool operator==(const Curvature&, const Curvature&) = default;

 private:
  double c_;
  double sqrt_c_;
};

// A vector of R^{n+1} split into spatial and temporal parts. Tangent vectors
// at the origin have temporal = 0.
struct AmbientVector {
  std::vector<double> spatial;
  double temporal = 0.0;
};

struct LorentzPoint {
  std::vector<double> spatial;
  double temporal = 0.0;
  Curvature curvature;

  std::size_t dim() const { return spatial.size(); }
  AmbientVector ambient() const { return {spatial, temporal}; }
};

LorentzPoint origin(std::size_t dim, Curvature c);

double lorentz_inner(const AmbientVector& x, const AmbientVector& y);
double lorentz_inner(const LorentzPoint& x, const LorentzPoint& y);
// <x, x>_L + 1/c; zero on the hyperboloid.
double hyperboloid_residual(const LorentzPoint& x);

double distance(const LorentzPoint& x, const LorentzPoint& y);
LorentzPoint lift(std::span<const double> f, Curvature c, double max_radius = kMaxLiftRadius);
std::vector<double> log_map_origin(const LorentzPoint& x);
LorentzPoint exp_map(const LorentzPoint& base, const AmbientVector& tangent);
AmbientVector log_map(const LorentzPoint& base, const LorentzPoint& x);

double half_aperture(const LorentzPoint& x, double boundary = kDefaultConeBoundary);
double exterior_angle(const LorentzPoint& parent, const LorentzPoint& child);
double entailment_violation(const LorentzPoint& parent, const LorentzPoint& child,
                            double boundary = kDefaultConeBoundary);

// ---- batched, differentiable ------------------------------------------------

// n points: spatial [n, D], temporal [n, 1].
struct LorentzBatch {
  ad::Var spatial;
  ad::Var temporal;
  Curvature curvature;

  std::size_t size() const { return spatial.rows(); }
  LorentzPoint point(std::size_t i) const;
  static LorentzBatch from_points(std::span<const LorentzPoint> points);
};

// Row-wise <x, y>_L of ambient [n, D+1] matrices (last column temporal) -> [n, 1].
ad::Var lorentz_inner(const ad::Var& x, const ad::Var& y);
// Per-row <x, x>_L + 1/c -> [n, 1].
ad::Var hyperboloid_residual(const LorentzBatch& x);

// Row-wise geodesic distance -> [n, 1]. A single-row operand broadcasts.
ad::Var distance(const LorentzBatch& x, const LorentzBatch& y);
// All-pairs geodesic distance [n, n]; exactly zero on the diagonal.
ad::Var distance_matrix(const LorentzBatch& x);

LorentzBatch lift(const ad::Var& features, Curvature c, double max_radius = kMaxLiftRadius);
ad::Var log_map_origin(const LorentzBatch& x);

// General-base maps on ambient [n, D+1] rows.
ad::Var exp_map(const ad::Var& base, const ad::Var& tangent, Curvature c);
ad::Var log_map(const ad::Var& base, const ad::Var& x, Curvature c);

// [n, 1] each. The parent batch may hold one row shared by every child.
ad::Var half_aperture(const LorentzBatch& x, double boundary = kDefaultConeBoundary);
ad::Var exterior_angle(const LorentzBatch& parent, const LorentzBatch& child);
ad::Var entailment_violation(const LorentzBatch& parent, const LorentzBatch& child,
                             double boundary = kDefaultConeBoundary);

}  // namespace hypermvp::geo
