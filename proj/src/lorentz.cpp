#include "hypermvp/lorentz.hpp"

#include <cmath>
#include <numbers>

#include "hypermvp/error.hpp"

namespace hypermvp::geo {

using namespace hypermvp::ad;

namespace {

// Keeps sqrt differentiable at zero without perturbing ordinary norms.
constexpr double kNormEps = 1e-300;

void require_same_dim(std::size_t a, std::size_t b) {
  if (a != b) {
    throw ShapeError("Lorentz points have different spatial dimensions " + std::to_string(a) + " and " +
                     std::to_string(b));
  }
}

void require_same_curvature(const Curvature& a, const Curvature& b) {
  if (!(a == b)) {
    throw DomainError("curvature mismatch: " + std::to_string(a.value()) + " vs " + std::to_string(b.value()));
  }
}

Tensor row_tensor(std::span<const double> v) { return Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end())); }

Var ambient_row(const AmbientVector& v) {
  std::vector<double> data = v.spatial;
  data.push_back(v.temporal);
  const std::size_t n = data.size();
  return Var(Tensor({1, n}, std::move(data)));
}

AmbientVector ambient_from_row(const Tensor& t, std::size_t r) {
  auto row = t.row(r);
  AmbientVector v;
  v.spatial.assign(row.begin(), row.end() - 1);
  v.temporal = row.back();
  return v;
}

Var signature_row(std::size_t dim) {
  Tensor sig({dim + 1}, 1.0);
  sig[dim] = -1.0;
  return Var(std::move(sig));
}

double spatial_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

Curvature::Curvature(double c) : c_(c), sqrt_c_(std::sqrt(c)) {
  if (!(c > 0.0) || !std::isfinite(c)) throw DomainError("curvature must be positive, got " + std::to_string(c));
}

LorentzPoint origin(std::size_t dim, Curvature c) {
  return LorentzPoint{std::vector<double>(dim, 0.0), 1.0 / c.sqrt_c(), c};
}

double lorentz_inner(const AmbientVector& x, const AmbientVector& y) {
  require_same_dim(x.spatial.size(), y.spatial.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.spatial.size(); ++i) s += x.spatial[i] * y.spatial[i];
  return s - x.temporal * y.temporal;
}

double lorentz_inner(const LorentzPoint& x, const LorentzPoint& y) {
  require_same_curvature(x.curvature, y.curvature);
  return lorentz_inner(x.ambient(), y.ambient());
}

double hyperboloid_residual(const LorentzPoint& x) {
  return lorentz_inner(x.ambient(), x.ambient()) + 1.0 / x.curvature.value();
}

LorentzPoint LorentzBatch::point(std::size_t i) const {
  auto row = spatial.value().row(i);
  return LorentzPoint{std::vector<double>(row.begin(), row.end()), temporal.value()[i], curvature};
}

LorentzBatch LorentzBatch::from_points(std::span<const LorentzPoint> points) {
  if (points.empty()) throw ShapeError("empty point batch");
  const std::size_t dim = points[0].dim();
  Tensor s({points.size(), dim});
  Tensor t({points.size(), 1});
  for (std::size_t i = 0; i < points.size(); ++i) {
    require_same_dim(dim, points[i].dim());
    require_same_curvature(points[0].curvature, points[i].curvature);
    std::copy(points[i].spatial.begin(), points[i].spatial.end(), s.row(i).begin());
    t[i] = points[i].temporal;
  }
  return LorentzBatch{Var(std::move(s)), Var(std::move(t)), points[0].curvature};
}

// ---- batched --------------------------------------------------------------

Var lorentz_inner(const Var& x, const Var& y) {
  if (x.cols() != y.cols()) {
    throw ShapeError("Lorentzian inner product: incompatible shapes " + to_string(x.shape()) + " and " +
                     to_string(y.shape()));
  }
  return sum_last(mul(mul(x, y), signature_row(x.cols() - 1)));
}

Var hyperboloid_residual(const LorentzBatch& x) {
  return add_scalar(sub(sum_last(square(x.spatial)), square(x.temporal)), 1.0 / x.curvature.value());
}

// Evaluated as 1 + (c/2) <x - y, x - y>_L, which equals -c <x, y>_L on the
// hyperboloid and is exactly 1 for coincident points.
Var distance(const LorentzBatch& x, const LorentzBatch& y) {
  require_same_curvature(x.curvature, y.curvature);
  const double c = x.curvature.value();
  Var ds = sum_last(square(sub(x.spatial, y.spatial)));
  Var dt = square(sub(x.temporal, y.temporal));
  Var arg = add_scalar(scale(sub(ds, dt), 0.5 * c), 1.0);
  return scale(acosh_clamped(arg), 1.0 / x.curvature.sqrt_c());
}

Var distance_matrix(const LorentzBatch& x) {
  const std::size_t n = x.spatial.rows();
  const std::size_t d = x.spatial.cols();
  const double c = x.curvature.value();
  const double inv_sqrt_c = 1.0 / x.curvature.sqrt_c();
  const Tensor& s = x.spatial.value();
  const Tensor& t = x.temporal.value();
  auto out = std::make_shared<Tensor>(Shape{n, n});
  auto slope = std::make_shared<Tensor>(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double ds = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = s[i * d + k] - s[j * d + k];
        ds += diff * diff;
      }
      const double dt = t[i] - t[j];
      const double arg = 1.0 + 0.5 * c * (ds - dt * dt);
      const double value = arg > 1.0 ? std::acosh(arg) * inv_sqrt_c : 0.0;
      const double dvalue = arg > 1.0 + 1e-12 ? inv_sqrt_c / std::sqrt(arg * arg - 1.0) : 0.0;
      out->at(i, j) = out->at(j, i) = value;
      slope->at(i, j) = slope->at(j, i) = dvalue;
    }
  }
  auto ss = x.spatial.shared_value();
  auto ts = x.temporal.shared_value();
  return make_result(out, {x.spatial, x.temporal}, [ss, ts, slope, n, d, c](const Tensor& g, GradSink& sink) {
    Tensor* gs = sink.grad(0);
    Tensor* gt = sink.grad(1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = g.at(i, j) * slope->at(i, j) * c;
        if (w == 0.0) continue;
        // d arg / d x_i = c (x_si - x_sj) spatially and -c (x_ti - x_tj) temporally.
        if (gs)
          for (std::size_t k = 0; k < d; ++k) {
            const double diff = (*ss)[i * d + k] - (*ss)[j * d + k];
            (*gs)[i * d + k] += w * diff;
            (*gs)[j * d + k] -= w * diff;
          }
        if (gt) {
          const double diff = (*ts)[i] - (*ts)[j];
          (*gt)[i] -= w * diff;
          (*gt)[j] += w * diff;
        }
      }
    }
  });
}

LorentzBatch lift(const Var& features, Curvature c, double max_radius) {
  for (double v : features.value().values())
    if (!std::isfinite(v)) throw DomainError("lift: non-finite feature value");
  Var radius = scale(l2_norm(features, kNormEps), c.sqrt_c());
  // Rescale rows whose effective radius exceeds the cap; factor is exactly 1 otherwise.
  Var shrink = clamp(div(Var(Tensor::scalar(max_radius)), radius), -INFINITY, 1.0);
  Var f = mul(features, shrink);
  Var r = mul(radius, shrink);
  Var spatial = mul(f, sinhc(r));
  Var temporal = sqrt(add_scalar(sum_last(square(spatial)), 1.0 / c.value()));
  return LorentzBatch{spatial, temporal, c};
}

Var log_map_origin(const LorentzBatch& x) {
  Var s = scale(l2_norm(x.spatial, kNormEps), x.curvature.sqrt_c());
  return mul(x.spatial, acosh_sqrt1p_over(s));
}

Var exp_map(const Var& base, const Var& tangent, Curvature c) {
  Var norm = sqrt(add_scalar(abs(lorentz_inner(tangent, tangent)), kNormEps));
  Var r = scale(norm, c.sqrt_c());
  return add(mul(base, cosh(r)), mul(tangent, sinhc(r)));
}

Var log_map(const Var& base, const Var& x, Curvature c) {
  Var inner = lorentz_inner(base, x);
  Var alpha = scale(inner, -c.value());
  // acosh(alpha) / sqrt(alpha^2 - 1) == t / sinh(t) with t = acosh(alpha).
  Var factor = div(Var(Tensor::scalar(1.0)), sinhc(acosh_clamped(alpha)));
  Var direction = add(x, mul(scale(base, c.value()), inner));
  return mul(direction, factor);
}

Var half_aperture(const LorentzBatch& x, double boundary) {
  if (!(boundary > 0.0 && boundary <= 1.0)) throw DomainError("cone boundary must lie in (0, 1]");
  Var norm = scale(l2_norm(x.spatial, kNormEps), x.curvature.sqrt_c());
  Var ratio = div(Var(Tensor::scalar(2.0 * boundary)), norm);
  return asin(clamp(ratio, -INFINITY, 1.0));
}

Var exterior_angle(const LorentzBatch& parent, const LorentzBatch& child) {
  require_same_curvature(parent.curvature, child.curvature);
  const double c = parent.curvature.value();
  Var cxy = scale(sub(sum_last(mul(parent.spatial, child.spatial)), mul(parent.temporal, child.temporal)), c);
  Var numer = add(child.temporal, mul(cxy, parent.temporal));
  Var denom = sqrt(clamp(add_scalar(square(cxy), -1.0), 1e-12, INFINITY));
  Var cosine = div(numer, mul(l2_norm(parent.spatial, kNormEps), denom));
  return neg(add_scalar(asin(clamp(cosine, -1.0, 1.0)), -std::numbers::pi / 2.0));
}

Var entailment_violation(const LorentzBatch& parent, const LorentzBatch& child, double boundary) {
  Var aperture = half_aperture(parent, boundary);
  return relu(sub(exterior_angle(parent, child), aperture));
}

// ---- single point -----------------------------------------------------------

double distance(const LorentzPoint& x, const LorentzPoint& y) {
  require_same_dim(x.dim(), y.dim());
  require_same_curvature(x.curvature, y.curvature);
  LorentzPoint pts[] = {x, y};
  auto a = LorentzBatch::from_points(std::span(pts, 1));
  auto b = LorentzBatch::from_points(std::span(pts + 1, 1));
  return distance(a, b).item();
}

LorentzPoint lift(std::span<const double> f, Curvature c, double max_radius) {
  return lift(Var(row_tensor(f)), c, max_radius).point(0);
}

std::vector<double> log_map_origin(const LorentzPoint& x) {
  const double residual = hyperboloid_residual(x);
  if (!(std::abs(residual) <= 1e-4) || !(x.temporal > 0.0)) {
    throw DomainError("log map: point is off the hyperboloid (residual " + std::to_string(residual) + ")");
  }
  LorentzPoint pts[] = {x};
  Tensor v = log_map_origin(LorentzBatch::from_points(pts)).value();
  return {v.values().begin(), v.values().end()};
}

LorentzPoint exp_map(const LorentzPoint& base, const AmbientVector& tangent) {
  require_same_dim(base.dim(), tangent.spatial.size());
  const double ortho = lorentz_inner(base.ambient(), tangent);
  if (!(std::abs(ortho) <= 1e-8)) {
    throw DomainError("exp map: vector is not tangent at the base point (<u, v>_L = " + std::to_string(ortho) + ")");
  }
  Var out = exp_map(ambient_row(base.ambient()), ambient_row(tangent), base.curvature);
  AmbientVector a = ambient_from_row(out.value(), 0);
  return LorentzPoint{std::move(a.spatial), a.temporal, base.curvature};
}

AmbientVector log_map(const LorentzPoint& base, const LorentzPoint& x) {
  require_same_dim(base.dim(), x.dim());
  require_same_curvature(base.curvature, x.curvature);
  for (const auto* p : {&base, &x}) {
    if (!(std::abs(hyperboloid_residual(*p)) <= 1e-4)) throw DomainError("log map: point is off the hyperboloid");
  }
  Var out = log_map(ambient_row(base.ambient()), ambient_row(x.ambient()), base.curvature);
  return ambient_from_row(out.value(), 0);
}

double half_aperture(const LorentzPoint& x, double boundary) {
  if (spatial_norm(x.spatial) < 1e-8) throw DomainError("half aperture is undefined at the origin");
  LorentzPoint pts[] = {x};
  return half_aperture(LorentzBatch::from_points(pts), boundary).item();
}

double exterior_angle(const LorentzPoint& parent, const LorentzPoint& child) {
  require_same_dim(parent.dim(), child.dim());
  if (spatial_norm(parent.spatial) < 1e-8) throw DomainError("exterior angle is undefined for a parent at the origin");
  LorentzPoint p[] = {parent};
  LorentzPoint q[] = {child};
  return exterior_angle(LorentzBatch::from_points(p), LorentzBatch::from_points(q)).item();
}

double entailment_violation(const LorentzPoint& parent, const LorentzPoint& child, double boundary) {
  return std::max(0.0, exterior_angle(parent, child) - half_aperture(parent, boundary));
}

}  // namespace hypermvp::geo
