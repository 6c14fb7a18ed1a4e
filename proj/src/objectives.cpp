#include "hypermvp/objectives.hpp"

#include <algorithm>
#include <numeric>

#include "hypermvp/error.hpp"

namespace hypermvp::obj {

using namespace hypermvp::ad;

namespace {

void require_square(const Tensor& t, const char* what) {
  if (t.rank() != 2 || t.shape()[0] != t.shape()[1]) {
    throw ShapeError(std::string(what) + ": expected a square matrix, got " + to_string(t.shape()));
  }
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

Var euclidean_distance_matrix(const Var& x) {
  const std::size_t n = x.rows(), d = x.cols();
  const Tensor& xv = x.value();
  auto out = std::make_shared<Tensor>(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = xv[i * d + k] - xv[j * d + k];
        s += diff * diff;
      }
      out->at(i, j) = out->at(j, i) = std::sqrt(s);
    }
  }
  auto xs = x.shared_value();
  std::shared_ptr<const Tensor> dist = out;
  return make_result(out, {x}, [xs, dist, n, d](const Tensor& g, GradSink& sink) {
    Tensor* gx = sink.grad(0);
    if (!gx) return;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double r = dist->at(i, j);
        if (i == j || r == 0.0) continue;
        const double w = g.at(i, j) / r;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = (*xs)[i * d + k] - (*xs)[j * d + k];
          (*gx)[i * d + k] += w * diff;
          (*gx)[j * d + k] -= w * diff;
        }
      }
    }
  });
}

std::size_t default_k(std::size_t P) { return std::min<std::size_t>(8, P > 0 ? P - 1 : 0); }

IndexMatrix topk_neighbors(const Tensor& distances, std::size_t K) {
  require_square(distances, "topk_neighbors");
  const std::size_t P = distances.rows();
  if (K < 1 || K + 1 > P) {
    throw DomainError("topk_neighbors: K = " + std::to_string(K) + " outside [1, " + std::to_string(P - 1) + "]");
  }
  IndexMatrix out{P, K, std::vector<std::size_t>(P * K)};
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < P; ++i) {
    idx.clear();
    for (std::size_t j = 0; j < P; ++j)
      if (j != i) idx.push_back(j);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return distances.at(i, a) < distances.at(i, b);
    });
    for (std::size_t k = 0; k < K; ++k) out.at(i, k) = idx[k];
  }
  return out;
}

Tensor literal_ranks(const Tensor& distances) {
  require_square(distances, "literal_ranks");
  const std::size_t P = distances.rows();
  if (P < 2) throw DomainError("literal_ranks: need at least two rows");
  // double argsort over the off-diagonal entries of each row
  Tensor off({P, P - 1});
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = 0, c = 0; j < P; ++j)
      if (j != i) off.at(i, c++) = distances.at(i, j);
  IndexMatrix order = argsort_last(off);
  Tensor pos({P, P - 1});
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t c = 0; c < P - 1; ++c) pos.at(i, c) = static_cast<double>(order.at(i, c));
  IndexMatrix rank = argsort_last(pos);
  Tensor out({P, P});
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = 0, c = 0; j < P; ++j)
      if (j != i) out.at(i, j) = static_cast<double>(rank.at(i, c++));
  return out;
}

Var soft_ranks(const Var& distances, double tau) {
  require_square(distances.value(), "soft_ranks");
  if (!(tau > 0.0)) throw DomainError("soft_ranks: temperature must be positive");
  const std::size_t P = distances.rows();
  const Tensor& d = distances.value();
  auto out = std::make_shared<Tensor>(Shape{P, P});
  // slope[i][a][b] = sigmoid'((d_ia - d_ib) / tau) / tau
  auto slope = std::make_shared<std::vector<double>>(P * P * P, 0.0);
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t a = 0; a < P; ++a) {
      if (a == i) continue;
      double r = 0.0;
      for (std::size_t b = 0; b < P; ++b) {
        if (b == a || b == i) continue;
        const double s = sigmoid((d.at(i, a) - d.at(i, b)) / tau);
        r += s;
        (*slope)[(i * P + a) * P + b] = s * (1.0 - s) / tau;
      }
      out->at(i, a) = r;
    }
  }
  return make_result(out, {distances}, [slope, P](const Tensor& g, GradSink& sink) {
    Tensor* gd = sink.grad(0);
    if (!gd) return;
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t a = 0; a < P; ++a) {
        const double ga = g.at(i, a);
        if (a == i || ga == 0.0) continue;
        for (std::size_t b = 0; b < P; ++b) {
          const double w = ga * (*slope)[(i * P + a) * P + b];
          gd->at(i, a) += w;
          gd->at(i, b) -= w;
        }
      }
    }
  });
}

Var zscore_rows(const Var& x, double eps) {
  const std::size_t rows = x.rows(), cols = x.cols();
  const Tensor& xv = x.value();
  auto out = std::make_shared<Tensor>(x.shape());
  auto inv = std::make_shared<std::vector<double>>(rows);
  auto floored = std::make_shared<std::vector<char>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row(r);
    const double mu = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(cols);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    const double sd = std::sqrt(var / static_cast<double>(cols));
    (*floored)[r] = sd <= eps;
    (*inv)[r] = 1.0 / std::max(sd, eps);
    for (std::size_t c = 0; c < cols; ++c) out->at(r, c) = (row[c] - mu) * (*inv)[r];
  }
  std::shared_ptr<const Tensor> zs = out;
  return make_result(out, {x}, [zs, inv, floored, rows, cols](const Tensor& g, GradSink& sink) {
    Tensor* gx = sink.grad(0);
    if (!gx) return;
    const double n = static_cast<double>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      double gmean = 0.0, gz = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        gmean += g.at(r, c);
        gz += g.at(r, c) * zs->at(r, c);
      }
      gmean /= n;
      gz = (*floored)[r] ? 0.0 : gz / n;
      for (std::size_t c = 0; c < cols; ++c) {
        gx->at(r, c) += (*inv)[r] * (g.at(r, c) - gmean - zs->at(r, c) * gz);
      }
    }
  });
}

namespace {

// Row-wise Pearson form of mean(z_e * z_l); integer ranks make the endpoints exact.
double literal_view_loss(const Tensor& de, const Tensor& dl, const IndexMatrix& nn) {
  const Tensor re = literal_ranks(de), rl = literal_ranks(dl);
  const std::size_t P = de.rows(), K = nn.cols;
  const double eps = 1e-8, n = static_cast<double>(K);
  double total = 0.0;
  std::vector<double> a(K), b(K);
  for (std::size_t i = 0; i < P; ++i) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      a[k] = re.at(i, nn.at(i, k));
      b[k] = rl.at(i, nn.at(i, k));
      ma += a[k];
      mb += b[k];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      sab += (a[k] - ma) * (b[k] - mb);
      saa += (a[k] - ma) * (a[k] - ma);
      sbb += (b[k] - mb) * (b[k] - mb);
    }
    const double sda = std::sqrt(saa / n), sdb = std::sqrt(sbb / n);
    if (sda > eps && sdb > eps) total += sab / std::sqrt(saa * sbb);
    else total += sab / (n * std::max(sda, eps) * std::max(sdb, eps));
  }
  return 1.0 - total / static_cast<double>(P);
}

}  // namespace

Var rank_correlation_view(const Var& de, const Var& dl, std::size_t K, RankMode mode, double tau) {
  require_square(de.value(), "rank_correlation");
  if (de.shape() != dl.shape()) {
    throw ShapeError("rank_correlation: distance matrices differ: " + to_string(de.shape()) + " vs " +
                     to_string(dl.shape()));
  }
  IndexMatrix nn = topk_neighbors(de.value(), K);
  if (mode == RankMode::Literal) return Var(Tensor({}, literal_view_loss(de.value(), dl.value(), nn)));
  Var ze = zscore_rows(gather_last(soft_ranks(de, tau), nn));
  Var zl = zscore_rows(gather_last(soft_ranks(dl, tau), nn));
  return add_scalar(neg(mean(mul(ze, zl))), 1.0);
}

Var rank_correlation_loss(std::span<const Var> de, std::span<const Var> dl, std::size_t K, RankMode mode, double tau) {
  if (de.empty() || de.size() != dl.size()) throw ShapeError("rank_correlation: view counts differ or are zero");
  std::vector<Var> per;
  for (std::size_t v = 0; v < de.size(); ++v) per.push_back(rank_correlation_view(de[v], dl[v], K, mode, tau));
  return scale(add_n(per), 1.0 / static_cast<double>(per.size()));
}

double rank_correlation_literal(const Tensor& de, const Tensor& dl, std::size_t K) {
  return rank_correlation_view(Var(de), Var(dl), K, RankMode::Literal, 1.0).item();
}

EntailmentLoss entailment_loss(std::span<const geo::LorentzBatch> parents, std::span<const geo::LorentzBatch> children,
                               double boundary) {
  if (parents.size() != children.size()) throw ShapeError("entailment_loss: parent and child view counts differ");
  std::vector<Var> sums;
  std::size_t counted = 0, skipped = 0;
  for (std::size_t v = 0; v < parents.size(); ++v) {
    const auto& p = parents[v];
    if (p.size() != 1) throw ShapeError("entailment_loss: expected one parent per view");
    const std::size_t n = children[v].size();
    if (n == 0) continue;
    double norm = 0.0;
    for (double s : p.spatial.value().values()) norm += s * s;
    if (std::sqrt(norm) < 1e-8) {
      skipped += n;
      continue;
    }
    sums.push_back(sum(geo::entailment_violation(p, children[v], boundary)));
    counted += n;
  }
  EntailmentLoss out;
  out.skipped = skipped;
  if (counted == 0) {
    out.loss = Var(Tensor::scalar(0.0));
    return out;
  }
  out.loss = scale(add_n(sums), 1.0 / static_cast<double>(counted));
  return out;
}

namespace {

Var image_error_sum(std::span<const Var> preds, std::span<const Var> targets) {
  std::vector<Var> parts;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].shape() != targets[i].shape()) {
      throw ShapeError("reconstruction loss: prediction " + to_string(preds[i].shape()) + " vs target " +
                       to_string(targets[i].shape()));
    }
    parts.push_back(sum(square(sub(preds[i], targets[i]))));
  }
  return add_n(parts);
}

}  // namespace

Var intra_reconstruction_loss(std::span<const Var> preds, std::span<const Var> targets) {
  if (preds.empty() || preds.size() != targets.size()) {
    throw ShapeError("intra reconstruction: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(targets.size()) + " targets");
  }
  const double pixels = static_cast<double>(targets[0].rows());
  return scale(image_error_sum(preds, targets), 1.0 / (static_cast<double>(preds.size()) * pixels));
}

Var inter_reconstruction_loss(std::span<const Var> preds, const Var& anchor) {
  if (preds.size() != 4) {
    throw ShapeError("inter reconstruction: expected 4 predictions, got " + std::to_string(preds.size()));
  }
  std::vector<Var> targets(preds.size(), anchor);
  return scale(image_error_sum(preds, targets), 1.0 / (4.0 * static_cast<double>(anchor.rows())));
}

void LossWeights::validate() const {
  for (double w : {corr, etl_patch, etl_mask, intra, inter})
    if (!(w >= 0.0)) throw DomainError("loss weights must be non-negative");
}

double hyper_total(const LossParts& p, const LossWeights& w) {
  return w.corr * p.corr + w.etl_patch * p.etl_patch + w.etl_mask * p.etl_mask;
}

double recon_total(const LossParts& p, const LossWeights& w) { return w.intra * p.intra + w.inter * p.inter; }

LossReport total_losses(const LossParts& parts, const LossWeights& weights, double corr_literal) {
  const std::pair<const char*, double> named[] = {{"L_corr", parts.corr},
                                                  {"L_etl_cls_patch", parts.etl_patch},
                                                  {"L_etl_cls_mask", parts.etl_mask},
                                                  {"L_intra", parts.intra},
                                                  {"L_inter", parts.inter}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(v)) throw DomainError(std::string("loss term ") + name + " is not finite");
  LossReport r;
  r.corr = parts.corr;
  r.etl_cls_patch = parts.etl_patch;
  r.etl_cls_mask = parts.etl_mask;
  r.intra = parts.intra;
  r.inter = parts.inter;
  r.hyper = hyper_total(parts, weights);
  r.recon = recon_total(parts, weights);
  r.pretrain = r.hyper + r.recon;
  r.corr_literal = corr_literal;
  return r;
}

nlohmann::json LossReport::to_json() const {
  nlohmann::json j = {{"L_corr", corr},   {"L_etl_cls_patch", etl_cls_patch},
                      {"L_etl_cls_mask", etl_cls_mask}, {"L_hyper", hyper},
                      {"L_intra", intra}, {"L_inter", inter},
                      {"L_recon", recon}, {"L_pretrain", pretrain}};
  j["L_corr_literal"] = std::isfinite(corr_literal) ? nlohmann::json(corr_literal) : nlohmann::json(nullptr);
  return j;
}

}  // namespace hypermvp::obj
