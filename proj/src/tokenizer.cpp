#include "hypermvp/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hypermvp/error.hpp"
#include "hypermvp/random.hpp"

namespace hypermvp::tok {

using namespace hypermvp::ad;

Tensor image_tensor(const render::RenderedView& view) {
  const std::size_t n = view.resolution * view.resolution;
  if (view.pixels.size() != n * 3) throw ShapeError("image_tensor: pixel buffer does not match resolution");
  return Tensor({n, 3}, std::vector<double>(view.pixels.begin(), view.pixels.end()));
}

render::RenderedView view_from_tensor(const Tensor& image, std::size_t resolution, const std::string& name) {
  if (image.size() != resolution * resolution * 3) throw ShapeError("view_from_tensor: size does not match resolution");
  render::RenderedView v;
  v.name = name;
  v.resolution = resolution;
  v.pixels.assign(image.values().begin(), image.values().end());
  v.depth.assign(resolution * resolution, 0.0f);
  return v;
}

PatchLayout::PatchLayout(std::size_t res, std::size_t p) : resolution(res), patch(p) {
  if (p == 0 || res == 0 || res % p != 0) {
    throw ShapeError("patchify: resolution " + std::to_string(res) + " is not divisible by patch size " +
                     std::to_string(p));
  }
  const std::size_t g = res / p;
  order_.reserve(res * res);
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx) order_.push_back((gy * p + dy) * res + gx * p + dx);
  inverse_.resize(order_.size());
  for (std::size_t j = 0; j < order_.size(); ++j) inverse_[order_[j]] = j;
}

PatchGrid patchify(const Var& image, const PatchLayout& layout) {
  const std::size_t n = layout.resolution * layout.resolution;
  if (image.shape() != Shape{n, 3}) {
    throw ShapeError("patchify: expected image " + to_string(Shape{n, 3}) + ", got " + to_string(image.shape()));
  }
  Var gathered = gather_rows(image, layout.order());
  return {layout.grid(), reshape(gathered, {layout.count(), layout.patch_dim()})};
}

Var unpatchify(const Var& patches, const PatchLayout& layout) {
  if (patches.shape() != Shape{layout.count(), layout.patch_dim()}) {
    throw ShapeError("unpatchify: expected " + to_string(Shape{layout.count(), layout.patch_dim()}) + ", got " +
                     to_string(patches.shape()));
  }
  Var pixels = reshape(patches, {layout.resolution * layout.resolution, 3});
  return gather_rows(pixels, layout.inverse());
}

std::vector<std::size_t> MaskPlan::restore_order(std::size_t view) const {
  const ViewMask& m = views.at(view);
  std::vector<std::size_t> out(total);
  for (std::size_t i = 0; i < m.kept.size(); ++i) out[m.kept[i]] = i;
  for (std::size_t i = 0; i < m.masked.size(); ++i) out[m.masked[i]] = m.kept.size() + i;
  return out;
}

void MaskPlan::validate() const {
  for (std::size_t v = 0; v < views.size(); ++v) {
    const ViewMask& m = views[v];
    if (m.kept.size() != kept_count()) throw ShapeError("mask plan: views keep different patch counts");
    std::vector<char> seen(total, 0);
    for (const auto* part : {&m.kept, &m.masked}) {
      for (std::size_t i : *part) {
        if (i >= total || seen[i]) throw ShapeError("mask plan: view " + std::to_string(v) + " is not a partition");
        seen[i] = 1;
      }
    }
    if (m.kept.size() + m.masked.size() != total) {
      throw ShapeError("mask plan: view " + std::to_string(v) + " is not a partition");
    }
  }
}

std::size_t kept_patches(std::size_t total, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw DomainError("masking ratio must lie in [0, 1)");
  return static_cast<std::size_t>(std::llround(static_cast<double>(total) * (1.0 - ratio)));
}

MaskPlan make_mask_plan(std::size_t total, double ratio, std::uint64_t seed, std::size_t views) {
  MaskPlan plan;
  plan.total = total;
  plan.ratio = ratio;
  plan.seed = seed;
  const std::size_t keep = kept_patches(total, ratio);
  for (std::size_t v = 0; v < views; ++v) {
    Rng rng(seed, v);
    std::vector<std::size_t> perm(total);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = total; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    ViewMask m;
    m.kept.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(keep));
    m.masked.assign(perm.begin() + static_cast<std::ptrdiff_t>(keep), perm.end());
    std::sort(m.kept.begin(), m.kept.end());
    std::sort(m.masked.begin(), m.masked.end());
    plan.views.push_back(std::move(m));
  }
  return plan;
}

nlohmann::json to_json(const MaskPlan& plan) {
  nlohmann::json views = nlohmann::json::array();
  for (const ViewMask& m : plan.views) views.push_back({{"kept", m.kept}, {"masked", m.masked}});
  return {{"total", plan.total}, {"ratio", plan.ratio}, {"seed", plan.seed}, {"views", views}};
}

MaskPlan mask_plan_from_json(const nlohmann::json& j) {
  try {
    MaskPlan plan;
    plan.total = j.at("total").get<std::size_t>();
    plan.ratio = j.at("ratio").get<double>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& v : j.at("views")) {
      plan.views.push_back({v.at("kept").get<std::vector<std::size_t>>(), v.at("masked").get<std::vector<std::size_t>>()});
    }
    plan.validate();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("mask plan json: ") + e.what());
  }
}

Tensor sincos_2d(std::size_t grid, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) throw ShapeError("sincos_2d: dim " + std::to_string(dim) + " is not divisible by 4");
  const std::size_t quarter = dim / 4;
  Tensor out({grid * grid, dim});
  for (std::size_t i = 0; i < grid * grid; ++i) {
    const double coord[2] = {static_cast<double>(i % grid), static_cast<double>(i / grid)};
    for (int half = 0; half < 2; ++half) {
      for (std::size_t k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
        const double a = coord[half] * omega;
        out.at(i, half * 2 * quarter + k) = std::sin(a);
        out.at(i, half * 2 * quarter + quarter + k) = std::cos(a);
      }
    }
  }
  return out;
}

Var embed_tokens(const PatchGrid& grid, const ViewMask& mask, const Tensor& pos, const TokenParams& params,
                 std::size_t view) {
  const std::size_t total = grid.grid * grid.grid;
  if (pos.rows() != total) throw ShapeError("embed_tokens: positional table does not match the patch grid");
  for (std::size_t i : mask.kept)
    if (i >= total) throw ShapeError("embed_tokens: mask plan does not match the patch grid");
  if (view >= params.view_table.rows()) throw ShapeError("embed_tokens: view index out of range");

  Var kept = gather_rows(grid.patches, mask.kept);
  Var tokens = broadcast_add(matmul(kept, params.proj_w), params.proj_b);
  Var position = gather_rows(Var(pos), mask.kept);
  std::size_t v = view;
  Var view_row = gather_rows(params.view_table, std::span(&v, 1));
  return broadcast_add(add(tokens, position), view_row);
}

}  // namespace hypermvp::tok
