#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hypermvp/error.hpp"
#include "hypermvp/gradcheck.hpp"
#include "hypermvp/lorentz.hpp"
#include "hypermvp/random.hpp"

using namespace hypermvp;
using namespace hypermvp::geo;
using ad::Tensor;
using ad::Var;

namespace {

std::vector<double> random_feature(Rng& rng, std::size_t dim, double max_norm) {
  std::vector<double> f(dim);
  double n = 0.0;
  for (auto& v : f) {
    v = rng.normal();
    n += v * v;
  }
  n = std::sqrt(n);
  const double target = rng.uniform(0.0, max_norm);
  for (auto& v : f) v *= target / n;
  return f;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Tangent vector at u: w projected onto <u, .>_L = 0.
AmbientVector random_tangent(Rng& rng, const LorentzPoint& u, double scale) {
  AmbientVector w;
  for (std::size_t i = 0; i < u.dim(); ++i) w.spatial.push_back(scale * rng.normal());
  w.temporal = scale * rng.normal();
  const double k = u.curvature.value() * lorentz_inner(u.ambient(), w);
  for (std::size_t i = 0; i < u.dim(); ++i) w.spatial[i] += k * u.spatial[i];
  w.temporal += k * u.temporal;
  return w;
}

}  // namespace

TEST(Lorentz, InnerProductExamples) {
  Curvature c(1.0);
  LorentzPoint o = origin(3, c);
  EXPECT_EQ(lorentz_inner(o, o), -1.0);
  AmbientVector v{{0.3, -2.0, 5.0}, 0.0};
  EXPECT_EQ(lorentz_inner(v, o.ambient()), 0.0);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    LorentzPoint x = lift(random_feature(rng, 6, 4.0), c);
    EXPECT_NEAR(lorentz_inner(x, x), -1.0, 1e-6);
  }
  EXPECT_THROW(lorentz_inner(AmbientVector{{1, 2}, 0}, AmbientVector{{1}, 0}), ShapeError);
}

TEST(Lorentz, CurvatureMustBePositive) {
  EXPECT_THROW(Curvature(0.0), DomainError);
  EXPECT_THROW(Curvature(-1.0), DomainError);
}

TEST(Lorentz, DistanceExamples) {
  Rng rng(2);
  for (double cv : {0.5, 1.0, 2.0}) {
    Curvature c(cv);
    for (int i = 0; i < 200; ++i) {
      auto f = random_feature(rng, 5, 7.0 / c.sqrt_c());
      LorentzPoint x = lift(f, c);
      EXPECT_EQ(distance(x, x), 0.0);
      EXPECT_NEAR(distance(origin(5, c), x), norm(f), 1e-6);
    }
  }
  Curvature c(1.0);
  for (int i = 0; i < 100; ++i) {
    LorentzPoint x = lift(random_feature(rng, 4, 3.0), c);
    LorentzPoint y = lift(random_feature(rng, 4, 3.0), c);
    EXPECT_NEAR(distance(x, y), distance(y, x), 1e-12);
  }
  EXPECT_THROW(distance(origin(2, Curvature(1.0)), origin(2, Curvature(2.0))), DomainError);
}

TEST(Lorentz, MetricAxioms) {
  Rng rng(3);
  Curvature c(1.0);
  for (int i = 0; i < 1000; ++i) {
    LorentzPoint x = lift(random_feature(rng, 3, 3.0), c);
    LorentzPoint y = lift(random_feature(rng, 3, 3.0), c);
    LorentzPoint z = lift(random_feature(rng, 3, 3.0), c);
    const double xy = distance(x, y), yz = distance(y, z), xz = distance(x, z);
    EXPECT_GE(xy, 0.0);
    EXPECT_LE(xz, xy + yz + 1e-9);
  }
}

TEST(Lorentz, LiftExamples) {
  for (double cv : {0.5, 1.0, 2.0}) {
    Curvature c(cv);
    std::vector<double> zero(4, 0.0);
    LorentzPoint o = lift(zero, c);
    for (double v : o.spatial) EXPECT_EQ(v, 0.0);
    EXPECT_NEAR(o.temporal, std::sqrt(1.0 / cv), 1e-15);
  }
  // mpmath: sinh(1) * [0.6, 0.8] and cosh(1).
  std::vector<double> f{0.6, 0.8};
  LorentzPoint x = lift(f, Curvature(1.0));
  EXPECT_NEAR(x.spatial[0], 0.70512071618628087, 1e-14);
  EXPECT_NEAR(x.spatial[1], 0.94016095491504117, 1e-14);
  EXPECT_NEAR(x.temporal, 1.5430806348152438, 1e-14);
  std::vector<double> bad{1.0, NAN};
  EXPECT_THROW(lift(bad, Curvature(1.0)), DomainError);
}

TEST(Lorentz, LiftResidualOverManyPoints) {
  Rng rng(4);
  for (double cv : {0.5, 1.0, 2.0}) {
    Curvature c(cv);
    for (int i = 0; i < 3000; ++i) {
      LorentzPoint x = lift(random_feature(rng, 8, 20.0), c);
      EXPECT_LT(std::abs(hyperboloid_residual(x)), 1e-6);
      EXPECT_GT(x.temporal, 0.0);
    }
  }
}

TEST(Lorentz, LiftClampsEffectiveRadius) {
  Curvature c(2.0);
  std::vector<double> f{300.0, -400.0};
  LorentzPoint x = lift(f, c);
  EXPECT_NEAR(distance(origin(2, c), x), kMaxLiftRadius / c.sqrt_c(), 1e-9);
  auto back = log_map_origin(x);
  EXPECT_NEAR(norm(back), kMaxLiftRadius / c.sqrt_c(), 1e-9);
  EXPECT_NEAR(back[0] / back[1], -0.75, 1e-12);
}

TEST(Lorentz, LogMapOrigin) {
  Curvature c(1.0);
  auto zero = log_map_origin(origin(3, c));
  for (double v : zero) EXPECT_EQ(v, 0.0);
  std::vector<double> f{0.6, 0.8};
  auto back = log_map_origin(lift(f, c));
  EXPECT_NEAR(back[0], 0.6, 1e-14);
  EXPECT_NEAR(back[1], 0.8, 1e-14);

  Rng rng(5);
  double worst = 0.0;
  for (double cv : {0.5, 1.0, 2.0}) {
    Curvature cc(cv);
    for (int i = 0; i < 1000; ++i) {
      auto g = random_feature(rng, 6, 7.9 / cc.sqrt_c());
      auto r = log_map_origin(lift(g, cc));
      for (std::size_t k = 0; k < g.size(); ++k) worst = std::max(worst, std::abs(r[k] - g[k]));
    }
  }
  EXPECT_LT(worst, 1e-6);

  LorentzPoint corrupted = lift(f, c);
  corrupted.temporal += 0.01;
  EXPECT_THROW(log_map_origin(corrupted), DomainError);
}

TEST(Lorentz, GeneralMapsSpecialiseAtOrigin) {
  Rng rng(6);
  for (double cv : {0.5, 1.0, 2.0}) {
    Curvature c(cv);
    LorentzPoint o = origin(5, c);
    for (int i = 0; i < 200; ++i) {
      auto f = random_feature(rng, 5, 6.0 / c.sqrt_c());
      LorentzPoint a = exp_map(o, AmbientVector{f, 0.0});
      LorentzPoint b = lift(f, c);
      for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(a.spatial[k], b.spatial[k], 1e-10 * std::max(1.0, std::abs(b.spatial[k])));
      EXPECT_NEAR(a.temporal, b.temporal, 1e-10 * b.temporal);

      auto g = random_feature(rng, 5, 3.0);
      LorentzPoint x = lift(g, c);
      AmbientVector general = log_map(o, x);
      auto special = log_map_origin(x);
      for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(general.spatial[k], special[k], 1e-10);
      EXPECT_NEAR(general.temporal, 0.0, 1e-10);
    }
  }
}

TEST(Lorentz, ExpLogInverseAtArbitraryBase) {
  Rng rng(7);
  Curvature c(1.0);
  for (int i = 0; i < 200; ++i) {
    LorentzPoint u = lift(random_feature(rng, 4, 2.0), c);
    AmbientVector v = random_tangent(rng, u, 0.5);
    AmbientVector back = log_map(u, exp_map(u, v));
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(back.spatial[k], v.spatial[k], 1e-8);
    EXPECT_NEAR(back.temporal, v.temporal, 1e-8);
  }
  LorentzPoint u = lift(std::vector<double>{1.0, 0.5}, c);
  EXPECT_THROW(exp_map(u, AmbientVector{{1.0, 1.0}, 1.0}), DomainError);
}

TEST(Lorentz, EntailmentExamples) {
  Curvature c(1.0);
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    auto dir = random_feature(rng, 4, 1.0);
    const double n = norm(dir);
    const double a = rng.uniform(0.3, 3.0);
    const double b = a + rng.uniform(0.1, 3.0);
    std::vector<double> pf, cf, opposite;
    for (double v : dir) {
      pf.push_back(v / n * a);
      cf.push_back(v / n * b);
      opposite.push_back(-v / n * a);
    }
    LorentzPoint parent = lift(pf, c);
    EXPECT_NEAR(exterior_angle(parent, lift(cf, c)), 0.0, 1e-5);
    EXPECT_EQ(entailment_violation(parent, lift(cf, c)), 0.0);
    EXPECT_GT(entailment_violation(parent, lift(opposite, c)), 0.0);
  }
  for (int i = 0; i < 1000; ++i) {
    auto p = random_feature(rng, 3, 3.0);
    if (norm(p) < 1e-3) continue;
    const double v = entailment_violation(lift(p, c), lift(random_feature(rng, 3, 3.0), c));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, std::numbers::pi);
  }
  EXPECT_THROW(half_aperture(origin(3, c)), DomainError);
  EXPECT_THROW(entailment_violation(origin(3, c), lift(std::vector<double>{1, 0, 0}, c)), DomainError);
}

TEST(Lorentz, HalfApertureClosedForm) {
  Curvature c(1.0);
  // Small parents get the full half-plane.
  EXPECT_NEAR(half_aperture(lift(std::vector<double>{0.05, 0.0}, c)), std::numbers::pi / 2, 1e-12);
  LorentzPoint x = lift(std::vector<double>{2.0, 0.0}, c);
  EXPECT_NEAR(half_aperture(x), std::asin(0.2 / std::sinh(2.0)), 1e-12);
}

// Exterior angle against the tangent-space angle at the parent: the angle
// between log_p(child) and the direction pointing away from the origin.
TEST(Lorentz, ExteriorAngleMatchesTangentSpaceOracle) {
  Rng rng(9);
  for (double cv : {0.5, 1.0, 2.0}) {
    Curvature c(cv);
    for (int i = 0; i < 300; ++i) {
      auto pf = random_feature(rng, 3, 3.0);
      if (norm(pf) < 0.05) continue;
      LorentzPoint p = lift(pf, c);
      LorentzPoint q = lift(random_feature(rng, 3, 3.0), c);
      if (distance(p, q) < 1e-3) continue;
      AmbientVector to_child = log_map(p, q);
      AmbientVector to_origin = log_map(p, origin(3, c));
      const double cosine = lorentz_inner(to_child, to_origin) /
                            std::sqrt(lorentz_inner(to_child, to_child) * lorentz_inner(to_origin, to_origin));
      const double oracle = std::numbers::pi - std::acos(std::clamp(cosine, -1.0, 1.0));
      EXPECT_NEAR(exterior_angle(p, q), oracle, 1e-6);
    }
  }
}

TEST(Lorentz, DistanceMatrixSymmetricZeroDiagonal) {
  Rng rng(10);
  Tensor f({6, 4});
  for (auto& v : f.values()) v = rng.normal();
  LorentzBatch x = lift(Var(f), Curvature(1.5));
  Tensor d = distance_matrix(x).value();
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(d.at(i, i), 0.0);
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_EQ(d.at(i, j), d.at(j, i));
      if (i != j) EXPECT_NEAR(d.at(i, j), distance(x.point(i), x.point(j)), 1e-12);
    }
  }
}

TEST(Lorentz, OperationsAreDifferentiable) {
  Rng rng(11);
  Curvature c(1.3);
  auto feat = [&](std::size_t rows, std::size_t cols, double scale) {
    Tensor t({rows, cols});
    for (auto& v : t.values()) v = scale * rng.normal();
    return t;
  };
  auto weigh = [](const Var& v) {
    Tensor w(v.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.7 * static_cast<double>(i) + 0.2);
    return ad::sum(ad::mul(v, Var(w)));
  };
  double worst = 0.0;
  for (int point = 0; point < 20; ++point) {
    std::vector<Tensor> two = {feat(3, 4, 0.6), feat(3, 4, 0.6)};
    auto r1 = gradient_check([&](auto in) { return weigh(lift(in[0], c).spatial); }, {two[0]});
    auto r2 = gradient_check([&](auto in) { return weigh(lift(in[0], c).temporal); }, {two[0]});
    auto r3 = gradient_check([&](auto in) { return weigh(log_map_origin(lift(in[0], c))); }, {two[0]});
    auto r4 = gradient_check([&](auto in) { return weigh(distance(lift(in[0], c), lift(in[1], c))); }, two);
    auto r5 = gradient_check([&](auto in) { return weigh(distance_matrix(lift(in[0], c))); }, {two[0]});
    auto r6 = gradient_check(
        [&](auto in) {
          auto x = lift(in[0], c);
          return weigh(lorentz_inner(ad::concat({x.spatial, x.temporal}, 1), in[1]));
        },
        {two[0], feat(3, 5, 1.0)});
    auto r7 = gradient_check(
        [&](auto in) {
          auto u = lift(in[0], c);
          return weigh(exp_map(ad::concat({u.spatial, u.temporal}, 1), in[1], c));
        },
        {two[0], feat(3, 5, 0.4)});
    auto r8 = gradient_check(
        [&](auto in) {
          auto u = lift(in[0], c);
          auto x = lift(in[1], c);
          return weigh(log_map(ad::concat({u.spatial, u.temporal}, 1), ad::concat({x.spatial, x.temporal}, 1), c));
        },
        two);
    for (auto r : {r1, r2, r3, r4, r5, r6, r7, r8}) worst = std::max(worst, r.max_rel_error);
  }
  EXPECT_LE(worst, 1e-6);

  // Cone geometry, sampled away from the clamp and kink boundaries.
  double cone_worst = 0.0;
  int points = 0;
  while (points < 20) {
    Tensor p = feat(1, 3, 1.5);
    Tensor q = feat(4, 3, 1.5);
    auto parent = lift(Var(p), c);
    auto child = lift(Var(q), c);
    const double ratio = 0.2 / (c.sqrt_c() * std::sqrt(ad::sum(ad::square(parent.spatial)).item()));
    if (ratio > 0.99) continue;
    Tensor viol = entailment_violation(parent, child).value();
    Tensor ext = exterior_angle(parent, child).value();
    bool ok = true;
    for (std::size_t i = 0; i < 4; ++i) {
      if (std::abs(viol[i]) < 1e-3 && viol[i] == 0.0) {
        const double gap = ext[i] - half_aperture(parent).item();
        if (gap > -1e-3) ok = false;
      }
      if (viol[i] > 0 && viol[i] < 1e-3) ok = false;
      if (ext[i] < 1e-3 || ext[i] > std::numbers::pi - 1e-3) ok = false;
    }
    if (!ok) continue;
    auto r = gradient_check([&](auto in) { return weigh(entailment_violation(lift(in[0], c), lift(in[1], c))); },
                            {p, q});
    auto ra = gradient_check([&](auto in) { return weigh(exterior_angle(lift(in[0], c), lift(in[1], c))); }, {p, q});
    auto rh = gradient_check([&](auto in) { return weigh(half_aperture(lift(in[0], c))); }, {p});
    cone_worst = std::max({cone_worst, r.max_rel_error, ra.max_rel_error, rh.max_rel_error});
    ++points;
  }
  EXPECT_LE(cone_worst, 1e-6);
}
