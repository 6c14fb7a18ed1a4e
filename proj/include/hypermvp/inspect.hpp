#pragma once

// Diagnostics behind `hypermvp inspect` and `hypermvp reconstruct`.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypermvp/model.hpp"
#include "hypermvp/trainer.hpp"

namespace hypermvp::inspect {

using ad::Tensor;

// Per-view D^E, D^L, Top-K neighbours, ranks and the literal rank correlation.
// Input: {"k": K?, "views": [{"name"?, "D_E": [[..]], "D_L": [[..]]}, ...]}.
nlohmann::json inspect_matrices(const nlohmann::json& input);

// Euclidean embeddings, lifted with the given curvature.
// Input: {"curvature"?, "k"?, "cone_boundary"?,
//         "views": [{"name"?, "cls": [..], "patches": [[..]], "masks"?: [[..]]}, ...]}.
nlohmann::json inspect_embeddings(const nlohmann::json& input);

// A rendered sample pushed through the encoder.
nlohmann::json inspect_model(const model::Model& m, const train::Sample& sample, std::uint64_t mask_seed,
                             std::size_t k = 0, double cone_boundary = geo::kDefaultConeBoundary);

struct Reconstruction {
  tok::MaskPlan plan;
  std::size_t anchor = 0;
  std::vector<std::size_t> sources;
  std::vector<Tensor> inputs;   // per view
  std::vector<Tensor> masked;   // inputs with masked patches greyed out
  std::vector<Tensor> intra;    // per view
  std::vector<Tensor> inter;    // per source, predictions of the anchor
  double intra_loss = 0.0;
  double inter_loss = 0.0;
};

Reconstruction reconstruct(const model::Model& m, const train::Sample& sample, std::uint64_t mask_seed,
                           std::size_t anchor);

// PNGs for every image plus <stem>.json; returns the manifest.
nlohmann::json write_reconstruction(const Reconstruction& r, std::size_t resolution,
                                    const std::filesystem::path& out_dir, const std::string& stem);

}  // namespace hypermvp::inspect
