#pragma once

// Patch tokenization, per-view random masking and fixed 2-D sin-cos positions.
// Images are [H*W, 3] tensors (one pixel per row, raster order).

#include <array>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "hypermvp/autodiff.hpp"
#include "hypermvp/render.hpp"

namespace hypermvp::tok {

using ad::Tensor;
using ad::Var;

Tensor image_tensor(const render::RenderedView& view);
render::RenderedView view_from_tensor(const Tensor& image, std::size_t resolution, const std::string& name = "");

struct PatchLayout {
  std::size_t resolution = 0;
  std::size_t patch = 0;

  PatchLayout(std::size_t resolution, std::size_t patch);
  std::size_t grid() const { return resolution / patch; }
  std::size_t count() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch * patch * 3; }
  // order[j] = raster pixel index of the j-th pixel when pixels are listed patch by patch.
  const std::vector<std::size_t>& order() const { return order_; }
  const std::vector<std::size_t>& inverse() const { return inverse_; }

 private:
  std::vector<std::size_t> order_;
  std::vector<std::size_t> inverse_;
};

struct PatchGrid {
  std::size_t grid = 0;
  Var patches;  // [grid^2, patch^2*3]
};

// Differentiable in the image; patches are in raster order of the patch grid.
PatchGrid patchify(const Var& image, const PatchLayout& layout);
// [grid^2, patch^2*3] -> [H*W, 3]
Var unpatchify(const Var& patches, const PatchLayout& layout);

struct ViewMask {
  std::vector<std::size_t> kept;    // ascending
  std::vector<std::size_t> masked;  // ascending
};

struct MaskPlan {
  std::size_t total = 0;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::vector<ViewMask> views;

  std::size_t kept_count() const { return views.empty() ? 0 : views[0].kept.size(); }
  std::size_t masked_count() const { return total - kept_count(); }
  // row r of concat(kept, masked) that holds raster position p: restore_order(v)[p].
  std::vector<std::size_t> restore_order(std::size_t view) const;
  void validate() const;
};

std::size_t kept_patches(std::size_t total, double ratio);
MaskPlan make_mask_plan(std::size_t total, double ratio, std::uint64_t seed, std::size_t views = render::kNumViews);

nlohmann::json to_json(const MaskPlan& plan);
MaskPlan mask_plan_from_json(const nlohmann::json& j);

// [grid^2, dim] fixed 2-D sin-cos table; dim must be divisible by 4.
Tensor sincos_2d(std::size_t grid, std::size_t dim);

struct TokenParams {
  Var proj_w;      // [patch_dim, D]
  Var proj_b;      // [D]
  Var view_table;  // [views, D]
};

// Kept patches of one view: proj(patch) + pos[kept] + view_table[view].
Var embed_tokens(const PatchGrid& grid, const ViewMask& mask, const Tensor& pos, const TokenParams& params,
                 std::size_t view);

}  // namespace hypermvp::tok
