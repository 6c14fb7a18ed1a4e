#pragma once

// GeoLink encoder (per-view ViT with lift / map-back) and the intra- and
// inter-view reconstruction decoders.

#include <string>
#include <vector>

#include "hypermvp/lorentz.hpp"
#include "hypermvp/nn.hpp"
#include "hypermvp/tokenizer.hpp"

namespace hypermvp::model {

using ad::Tensor;
using ad::Var;

struct ModelConfig {
  std::size_t resolution = 64;
  std::size_t patch = 8;
  double mask_ratio = 0.75;
  std::size_t views = render::kNumViews;

  std::size_t depth = 2;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;

  std::size_t dec_width = 64;
  std::size_t dec_depth = 1;
  std::size_t dec_heads = 4;
  std::size_t cross_layers = 1;

  double curvature = 1.0;

  static ModelConfig toy();
  static ModelConfig full();
  void validate() const;
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const tok::PatchLayout& layout() const { return layout_; }
  const Tensor& encoder_pos() const { return enc_pos_; }
  const Tensor& decoder_pos() const { return dec_pos_; }
  geo::Curvature curvature() const { return geo::Curvature(config_.curvature); }

  nn::ParamStore params;

 private:
  ModelConfig config_;
  tok::PatchLayout layout_;
  Tensor enc_pos_;
  Tensor dec_pos_;
};

// Learnable scalars: the registry total and the closed-form expectation.
std::size_t count_parameters(const nn::ParamStore& params);
std::size_t expected_parameters(const ModelConfig& config);
std::size_t expected_encoder_parameters(const ModelConfig& config);

struct ViewEncoding {
  Var cls_e, patch_e, mask_e;             // Euclidean [1,D], [P,D], [M,D]
  geo::LorentzBatch cls_h, patch_h, mask_h;  // lifted
  Var cls_b, patch_b, mask_b;             // mapped back
};

struct EncoderOutput {
  std::vector<ViewEncoding> views;
};

tok::TokenParams token_params(const nn::Bound& p);

// One view from already-embedded kept tokens [P, D] and its masked raster indices.
ViewEncoding encode_view(const Model& m, const nn::Bound& p, const Var& tokens,
                         const std::vector<std::size_t>& masked);
// tokens = embed_tokens of each view; views are encoded independently.
EncoderOutput encode(const Model& m, const nn::Bound& p, const std::vector<tok::PatchGrid>& grids,
                     const tok::MaskPlan& plan);

// concat(patch rows, mask rows) reordered into raster positions.
Var arrange_tokens(const Var& patch_part, const Var& mask_part, const tok::MaskPlan& plan, std::size_t view);

// Reconstructed images [H*W, 3], one per view.
std::vector<Var> decode_intra(const Model& m, const nn::Bound& p, const EncoderOutput& out, const tok::MaskPlan& plan);
// Predictions of the anchor image from every other view, in ascending source order.
std::vector<Var> decode_inter(const Model& m, const nn::Bound& p, const EncoderOutput& out, std::size_t anchor,
                              const tok::MaskPlan& plan);
std::vector<std::size_t> inter_sources(std::size_t anchor, std::size_t views);

}  // namespace hypermvp::model
