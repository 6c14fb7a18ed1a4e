#pragma once

// Distance matrices, Top-K rank correlation, entailment and reconstruction
// losses, and their weighted combination.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypermvp/autodiff.hpp"
#include "hypermvp/lorentz.hpp"

namespace hypermvp::obj {

using ad::IndexMatrix;
using ad::Tensor;
using ad::Var;

// Pairwise L2 distances of the rows of x [P, D] -> [P, P], exactly zero on the diagonal.
Var euclidean_distance_matrix(const Var& x);

// K nearest other rows per row of a distance matrix, ascending, ties to the lower index.
IndexMatrix topk_neighbors(const Tensor& distances, std::size_t K);
std::size_t default_k(std::size_t P);

// Rank position (0-based) of each off-diagonal entry within its row; the diagonal is 0.
Tensor literal_ranks(const Tensor& distances);
// rank[i][a] = sum over b != a, b != i of sigmoid((d[i][a] - d[i][b]) / tau); the diagonal is 0.
Var soft_ranks(const Var& distances, double tau);
// Per-row (x - mean) / max(population std, eps).
Var zscore_rows(const Var& x, double eps = 1e-8);

enum class RankMode { Literal, Soft };

// One view: 1 - mean of z(RE[topk]) * z(RL[topk]).
Var rank_correlation_view(const Var& de, const Var& dl, std::size_t K, RankMode mode, double tau);
// Mean over views.
Var rank_correlation_loss(std::span<const Var> de, std::span<const Var> dl, std::size_t K, RankMode mode, double tau);
double rank_correlation_literal(const Tensor& de, const Tensor& dl, std::size_t K);

struct EntailmentLoss {
  Var loss;
  std::size_t skipped = 0;  // children whose parent sits at the origin
};

// Mean violation over every (view, child) pair; parents[v] is a single point.
EntailmentLoss entailment_loss(std::span<const geo::LorentzBatch> parents,
                               std::span<const geo::LorentzBatch> children,
                               double boundary = geo::kDefaultConeBoundary);

// (1 / (V*H*W)) * sum of per-pixel squared RGB errors; images are [H*W, 3].
Var intra_reconstruction_loss(std::span<const Var> preds, std::span<const Var> targets);
// (1 / (4*H*W)) * sum over the four source predictions of the anchor.
Var inter_reconstruction_loss(std::span<const Var> preds, const Var& anchor);

struct LossWeights {
  double corr = 1.0;
  double etl_patch = 0.5;
  double etl_mask = 0.1;
  double intra = 1.0;
  double inter = 0.5;

  void validate() const;
};

struct LossParts {
  double corr = 0.0;
  double etl_patch = 0.0;
  double etl_mask = 0.0;
  double intra = 0.0;
  double inter = 0.0;
};

struct LossReport {
  double corr = 0.0;
  double etl_cls_patch = 0.0;
  double etl_cls_mask = 0.0;
  double hyper = 0.0;
  double intra = 0.0;
  double inter = 0.0;
  double recon = 0.0;
  double pretrain = 0.0;
  double corr_literal = std::numeric_limits<double>::quiet_NaN();

  nlohmann::json to_json() const;
};

double hyper_total(const LossParts& parts, const LossWeights& w);
double recon_total(const LossParts& parts, const LossWeights& w);
// Rejects a NaN part by name.
LossReport total_losses(const LossParts& parts, const LossWeights& weights,
                        double corr_literal = std::numeric_limits<double>::quiet_NaN());

}  // namespace hypermvp::obj
