#include "hypermvp/verify.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "hypermvp/gradcheck.hpp"
#include "hypermvp/lorentz.hpp"
#include "hypermvp/objectives.hpp"
#include "hypermvp/random.hpp"
#include "hypermvp/render.hpp"
#include "hypermvp/tokenizer.hpp"

namespace hypermvp::verify {

namespace {

using ad::Tensor;
using ad::Var;

struct Outcome {
  bool passed;
  std::string detail;
};

std::string num(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo, double hi) {
  Tensor t({r, c});
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> random_vec(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

double norm(const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

// ---- geometry ----------------------------------------------------------------

constexpr double kCurvatures[] = {0.5, 1.0, 2.0};

Outcome lift_residual(std::uint64_t seed) {
  Rng rng(seed, 10);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const geo::Curvature c(kCurvatures[i % 3]);
    const auto f = random_vec(rng, 8, rng.uniform(0.0, 1.5));
    worst = std::max(worst, std::abs(geo::hyperboloid_residual(geo::lift(f, c))));
  }
  return {worst < 1e-6, "max |<x,x> + 1/c| = " + num(worst)};
}

Outcome exp_log_roundtrip(std::uint64_t seed) {
  Rng rng(seed, 11);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const geo::Curvature c(kCurvatures[i % 3]);
    const auto f = random_vec(rng, 8, rng.uniform(0.0, 1.5));
    if (c.sqrt_c() * norm(f) >= geo::kMaxLiftRadius) continue;
    const auto back = geo::log_map_origin(geo::lift(f, c));
    for (std::size_t k = 0; k < f.size(); ++k) worst = std::max(worst, std::abs(back[k] - f[k]));
  }
  return {worst < 1e-6, "max roundtrip error = " + num(worst)};
}

Outcome origin_distance(std::uint64_t seed) {
  Rng rng(seed, 12);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const geo::Curvature c(kCurvatures[i % 3]);
    const auto f = random_vec(rng, 8, rng.uniform(0.0, 1.5));
    if (c.sqrt_c() * norm(f) >= geo::kMaxLiftRadius) continue;
    worst = std::max(worst, std::abs(geo::distance(geo::origin(8, c), geo::lift(f, c)) - norm(f)));
  }
  return {worst < 1e-6, "max |d(O, lift f) - |f|| = " + num(worst)};
}

Outcome general_maps_at_origin(std::uint64_t seed) {
  Rng rng(seed, 13);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const geo::Curvature c(kCurvatures[i % 3]);
    const auto f = random_vec(rng, 6, rng.uniform(0.0, 1.5));
    if (c.sqrt_c() * norm(f) >= geo::kMaxLiftRadius) continue;
    const geo::LorentzPoint o = geo::origin(6, c);
    const geo::LorentzPoint a = geo::exp_map(o, geo::AmbientVector{f, 0.0});
    const geo::LorentzPoint b = geo::lift(f, c);
    for (std::size_t k = 0; k < f.size(); ++k) worst = std::max(worst, std::abs(a.spatial[k] - b.spatial[k]));
    worst = std::max(worst, std::abs(a.temporal - b.temporal));
    const geo::AmbientVector l = geo::log_map(o, b);
    const auto l0 = geo::log_map_origin(b);
    for (std::size_t k = 0; k < f.size(); ++k) worst = std::max(worst, std::abs(l.spatial[k] - l0[k]));
  }
  return {worst <= 1e-10, "max disagreement = " + num(worst)};
}

Outcome metric_axioms(std::uint64_t seed) {
  Rng rng(seed, 14);
  geo::Curvature c(1.0);
  double worst_sym = 0.0, worst_self = 0.0, worst_tri = 0.0;
  bool negative = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = geo::lift(random_vec(rng, 4, 1.0), c), y = geo::lift(random_vec(rng, 4, 1.0), c),
               z = geo::lift(random_vec(rng, 4, 1.0), c);
    const double xy = geo::distance(x, y), yx = geo::distance(y, x), yz = geo::distance(y, z),
                 xz = geo::distance(x, z);
    negative |= xy < 0.0;
    worst_sym = std::max(worst_sym, std::abs(xy - yx));
    worst_self = std::max(worst_self, geo::distance(x, x));
    worst_tri = std::max(worst_tri, xz - (xy + yz));
  }
  const bool ok = !negative && worst_sym <= 1e-12 && worst_self <= 1e-12 && worst_tri <= 1e-9;
  return {ok, "symmetry " + num(worst_sym) + ", d(x,x) " + num(worst_self) + ", triangle slack " + num(worst_tri)};
}

// ---- gradients -----------------------------------------------------------------

Outcome gradcheck_many(std::uint64_t seed, int trials, const std::function<std::vector<Tensor>(Rng&)>& gen,
                       const ScalarFn& f) {
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    GradCheckOptions o;
    o.seed = seed + static_cast<std::uint64_t>(t);
    o.max_coords = 60;
    worst = std::max(worst, gradient_check(f, gen(rng), o).max_rel_error);
  }
  return {worst <= 1e-4, "max relative error = " + num(worst)};
}

Var weighted(const Var& x, std::uint64_t seed) {
  Rng rng(seed, 77);
  Tensor w(x.shape());
  for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
  return ad::sum(ad::mul(x, Var(w)));
}

Outcome grad_transformer_ops(std::uint64_t seed) {
  return gradcheck_many(
      seed + 20, 20, [](Rng& r) { return std::vector{random_matrix(r, 4, 6, -1, 1), random_matrix(r, 6, 6, -1, 1)}; },
      [](std::span<const Var> in) {
        Var h = ad::matmul(in[0], in[1]);
        Var g = Var(Tensor({6}, 1.0)), b = Var(Tensor({6}, 0.0));
        Var y = ad::gelu(ad::layer_norm(h, g, b));
        return weighted(ad::matmul(ad::softmax_last(ad::matmul_nt(y, y)), y), 5);
      });
}

Outcome grad_geometry(std::uint64_t seed) {
  return gradcheck_many(
      seed + 21, 20, [](Rng& r) { return std::vector{random_matrix(r, 5, 3, -1, 1)}; },
      [](std::span<const Var> in) {
        geo::Curvature c(1.0);
        geo::LorentzBatch h = geo::lift(in[0], c);
        return ad::add(weighted(geo::distance_matrix(h), 6), weighted(geo::log_map_origin(h), 7));
      });
}

Outcome grad_soft_rank(std::uint64_t seed) {
  return gradcheck_many(
      seed + 22, 20, [](Rng& r) { return std::vector{random_matrix(r, 6, 3, -1, 1), random_matrix(r, 6, 3, -1, 1)}; },
      [](std::span<const Var> in) {
        std::vector<Var> de{obj::euclidean_distance_matrix(in[0])};
        std::vector<Var> dl{geo::distance_matrix(geo::lift(in[1], geo::Curvature(1.0)))};
        return obj::rank_correlation_loss(de, dl, 3, obj::RankMode::Soft, 0.5);
      });
}

Outcome grad_entailment(std::uint64_t seed) {
  Rng rng(seed + 23);
  geo::Curvature c(1.0);
  double worst = 0.0;
  int checked = 0;
  while (checked < 20) {
    Tensor p = random_matrix(rng, 1, 3, -2, 2), ch = random_matrix(rng, 5, 3, -2, 2);
    const geo::LorentzPoint pp = geo::lift(std::vector<double>(p.values().begin(), p.values().end()), c);
    bool near = std::abs(norm(pp.spatial) - 0.2) < 1e-3;
    for (std::size_t i = 0; i < 5; ++i) {
      auto row = ch.row(i);
      const auto q = geo::lift(std::vector<double>(row.begin(), row.end()), c);
      near |= std::abs(geo::exterior_angle(pp, q) - geo::half_aperture(pp)) < 1e-3;
    }
    if (near) continue;
    auto f = [c](std::span<const Var> in) {
      std::vector<geo::LorentzBatch> ps{geo::lift(in[0], c)}, ks{geo::lift(in[1], c)};
      return obj::entailment_loss(ps, ks).loss;
    };
    worst = std::max(worst, gradient_check(f, {p, ch}).max_rel_error);
    ++checked;
  }
  return {worst <= 1e-4, "max relative error = " + num(worst)};
}

Outcome grad_reconstruction(std::uint64_t seed) {
  return gradcheck_many(
      seed + 24, 20,
      [](Rng& r) {
        std::vector<Tensor> t;
        for (int i = 0; i < 5; ++i) t.push_back(random_matrix(r, 4, 3, 0, 1));
        return t;
      },
      [](std::span<const Var> in) {
        std::vector<Var> preds(in.begin(), in.end() - 1);
        std::vector<Var> targets;
        for (std::size_t i = 0; i + 1 < in.size(); ++i) targets.push_back(ad::scale(in[i + 1], 0.5));
        return ad::add(obj::intra_reconstruction_loss(preds, targets), obj::inter_reconstruction_loss(preds, in[4]));
      });
}

// ---- losses ---------------------------------------------------------------------

Outcome rank_endpoints(std::uint64_t seed) {
  Rng rng(seed, 30);
  bool ok = true;
  std::string detail;
  for (int t = 0; t < 50 && ok; ++t) {
    Tensor x = random_matrix(rng, 6, 2, -1, 1);
    Tensor de = obj::euclidean_distance_matrix(Var(x)).value();
    Tensor mono = de, rev = de;
    for (double& v : mono.values()) v = 3.0 * v + 1.0;
    for (double& v : rev.values()) v = -v;
    const double zero = obj::rank_correlation_literal(de, mono, 5);
    const double two = obj::rank_correlation_literal(de, rev, 5);
    if (zero != 0.0 || two != 2.0) {
      ok = false;
      detail = "got " + num(zero) + " and " + num(two);
    }
  }
  return {ok, ok ? "identical -> 0, reversed -> 2, exactly" : detail};
}

Outcome loss_identities(std::uint64_t seed) {
  Rng rng(seed, 31);
  obj::LossWeights w;
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    obj::LossParts p{rng.uniform(0, 2), rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 5), rng.uniform(0, 5)};
    obj::LossReport r = obj::total_losses(p, w);
    worst = std::max(worst, std::abs(r.hyper - (p.corr + 0.5 * p.etl_patch + 0.1 * p.etl_mask)));
    worst = std::max(worst, std::abs(r.recon - (p.intra + 0.5 * p.inter)));
    worst = std::max(worst, std::abs(r.pretrain - (r.hyper + r.recon)));
  }
  return {worst <= 1e-12, "max identity error = " + num(worst)};
}

// ---- masking and rendering --------------------------------------------------------

Outcome mask_arithmetic(std::uint64_t seed) {
  const tok::PatchLayout layout(224, 16);
  for (std::uint64_t s = seed; s < seed + 1000; ++s) {
    tok::MaskPlan plan = tok::make_mask_plan(layout.count(), 0.75, s);
    plan.validate();
    for (const auto& v : plan.views) {
      if (v.kept.size() != 49 || v.masked.size() != 147) return {false, "wrong counts at seed " + std::to_string(s)};
    }
  }
  return {layout.count() == 196, "196 patches, 49 kept, 147 masked; 1000 plans partition"};
}

Outcome render_determinism(std::uint64_t seed) {
  render::RenderConfig cfg;
  cfg.resolution = 32;
  for (std::size_t i = 0; i < 10; ++i) {
    const render::PointCloud c = render::synthetic_cloud(seed, i, 500);
    const auto a = render::render_all_views(c, cfg), b = render::render_all_views(c, cfg);
    if (a.views.size() != render::kNumViews) return {false, "expected five views"};
    for (std::size_t v = 0; v < a.views.size(); ++v)
      if (render::encode_png(a.views[v]) != render::encode_png(b.views[v])) return {false, "re-render differs"};
  }
  return {true, "10 clouds, five views each, identical PNG bytes"};
}

Outcome render_occlusion(std::uint64_t seed) {
  Rng rng(seed, 40);
  for (int t = 0; t < 100; ++t) {
    render::PointCloud cloud;
    const std::size_t n = 1 + rng.below(50);
    for (std::size_t i = 0; i < n; ++i)
      cloud.add({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)},
                {rng.uniform(), rng.uniform(), rng.uniform()});
    const render::PointCloud norm_cloud = render::normalize_cloud(cloud, nullptr);
    for (const auto& spec : render::canonical_views()) {
      const auto view = render::render_orthographic(norm_cloud, spec, 32, 0, {1.0, 1.0, 1.0});
      // nearest point per pixel by direct search
      std::vector<double> best(32 * 32, std::numeric_limits<double>::infinity());
      std::vector<long> who(32 * 32, -1);
      for (std::size_t i = 0; i < norm_cloud.size(); ++i) {
        const auto& p = norm_cloud.positions[i];
        const double u = p[0] * spec.right[0] + p[1] * spec.right[1] + p[2] * spec.right[2];
        const double w = p[0] * spec.up[0] + p[1] * spec.up[1] + p[2] * spec.up[2];
        const double d = p[0] * spec.forward[0] + p[1] * spec.forward[1] + p[2] * spec.forward[2];
        if (std::abs(u) > 1 || std::abs(w) > 1) continue;
        const auto [col, row] = render::pixel_of(u, w, 32);
        if (d < best[row * 32 + col]) {
          best[row * 32 + col] = d;
          who[row * 32 + col] = static_cast<long>(i);
        }
      }
      for (std::size_t px = 0; px < 32 * 32; ++px) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double want = who[px] < 0 ? 1.0 : norm_cloud.colors[who[px]][ch];
          if (view.pixels[px * 3 + ch] != static_cast<float>(want)) {
            return {false, "pixel " + std::to_string(px) + " of view " + std::string(spec.name) + " disagrees"};
          }
        }
      }
    }
  }
  return {true, "100 clouds, all five views agree with the nearest-point search"};
}

struct Check {
  const char* suite;
  const char* name;
  Outcome (*run)(std::uint64_t);
};

}  // namespace

std::vector<CheckResult> run_all(std::uint64_t seed) {
  static const Check checks[] = {
      {"geometry", "hyperboloid residual", lift_residual},
      {"geometry", "exp/log roundtrip", exp_log_roundtrip},
      {"geometry", "distance to origin", origin_distance},
      {"geometry", "general maps at origin", general_maps_at_origin},
      {"geometry", "metric axioms", metric_axioms},
      {"gradient", "matmul/layer norm/gelu/softmax", grad_transformer_ops},
      {"gradient", "lift/distance/log map", grad_geometry},
      {"gradient", "soft rank correlation", grad_soft_rank},
      {"gradient", "entailment", grad_entailment},
      {"gradient", "reconstruction", grad_reconstruction},
      {"loss", "rank correlation endpoints", rank_endpoints},
      {"loss", "weighted totals", loss_identities},
      {"masking", "plan arithmetic", mask_arithmetic},
      {"render", "determinism", render_determinism},
      {"render", "occlusion", render_occlusion},
  };
  std::vector<CheckResult> out;
  for (const auto& c : checks) {
    CheckResult r;
    r.suite = c.suite;
    r.name = c.name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Outcome o = c.run(seed);
      r.passed = o.passed;
      r.detail = o.detail;
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_table(const std::vector<CheckResult>& results) {
  std::ostringstream os;
  char line[512];
  std::snprintf(line, sizeof line, "%-10s %-32s %-6s %8s  %s\n", "suite", "check", "result", "seconds", "detail");
  os << line;
  std::size_t passed = 0;
  for (const auto& r : results) {
    passed += r.passed;
    std::snprintf(line, sizeof line, "%-10s %-32s %-6s %8.2f  %s\n", r.suite.c_str(), r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.seconds, r.detail.c_str());
    os << line;
  }
  os << passed << "/" << results.size() << " checks passed\n";
  return os.str();
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return true;
}

}  // namespace hypermvp::verify
