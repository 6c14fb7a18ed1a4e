#include "hypermvp/model.hpp"

#include "hypermvp/error.hpp"

namespace hypermvp::model {

using namespace hypermvp::ad;

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
  ModelConfig c;
  c.resolution = 224;
  c.patch = 16;
  c.depth = 8;
  c.width = 768;
  c.heads = 8;
  c.dec_width = 512;
  c.dec_depth = 2;
  c.dec_heads = 8;
  c.cross_layers = 2;
  return c;
}

void ModelConfig::validate() const {
  if (patch == 0 || resolution % patch != 0) throw DomainError("config: resolution must be divisible by patch");
  if (heads == 0 || width % heads != 0) throw DomainError("config: width must be divisible by heads");
  if (dec_heads == 0 || dec_width % dec_heads != 0) throw DomainError("config: dec_width must be divisible by dec_heads");
  if (width % 4 != 0 || dec_width % 4 != 0) throw DomainError("config: widths must be divisible by 4");
  if (views < 2) throw DomainError("config: at least two views are required");
  if (mlp_ratio == 0) throw DomainError("config: mlp_ratio must be positive");
  if (!(curvature > 0.0)) throw DomainError("config: curvature must be positive");
  const std::size_t total = (resolution / patch) * (resolution / patch);
  const std::size_t kept = tok::kept_patches(total, mask_ratio);
  if (kept < 1) throw DomainError("config: masking ratio leaves no visible patch");
}

namespace {

std::string idx(const std::string& base, std::size_t i) { return base + std::to_string(i); }

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(config), layout_(config.resolution, config.patch) {
  config_.validate();
  enc_pos_ = tok::sincos_2d(layout_.grid(), config_.width);
  dec_pos_ = tok::sincos_2d(layout_.grid(), config_.dec_width);

  Rng rng(seed);
  const std::size_t D = config_.width, H = config_.width * config_.mlp_ratio;
  nn::register_linear(params, rng, "enc.patch", layout_.patch_dim(), D);
  params.add_normal("enc.view", {config_.views, D}, rng);
  params.add_normal("enc.cls", {1, D}, rng);
  params.add_normal("enc.mask_token", {1, D}, rng);
  nn::register_linear(params, rng, "enc.mask_proj", D, D);
  for (std::size_t i = 0; i < config_.depth; ++i) nn::register_block(params, rng, idx("enc.block", i), D, H);

  const std::size_t W = config_.dec_width, WH = config_.dec_width * config_.mlp_ratio;
  nn::register_linear(params, rng, "intra.in", D, W);
  for (std::size_t i = 0; i < config_.dec_depth; ++i) nn::register_block(params, rng, idx("intra.block", i), W, WH);
  nn::register_layer_norm(params, "intra.norm", W);
  nn::register_linear(params, rng, "intra.head", W, layout_.patch_dim());

  nn::register_linear(params, rng, "inter.query_in", D, W);
  nn::register_linear(params, rng, "inter.src_in", D, W);
  for (std::size_t i = 0; i < config_.cross_layers; ++i) nn::register_cross_block(params, rng, idx("inter.cross", i), W, WH);
  for (std::size_t i = 0; i < config_.dec_depth; ++i) nn::register_block(params, rng, idx("inter.block", i), W, WH);
  nn::register_layer_norm(params, "inter.norm", W);
  nn::register_linear(params, rng, "inter.head", W, layout_.patch_dim());
}

std::size_t count_parameters(const nn::ParamStore& params) { return params.count(); }

std::size_t expected_encoder_parameters(const ModelConfig& c) {
  const std::size_t D = c.width, pd = c.patch * c.patch * 3;
  return nn::linear_count(pd, D) + c.views * D + D + D + nn::linear_count(D, D) +
         c.depth * nn::block_count(D, D * c.mlp_ratio);
}

std::size_t expected_parameters(const ModelConfig& c) {
  const std::size_t D = c.width, W = c.dec_width, WH = W * c.mlp_ratio, pd = c.patch * c.patch * 3;
  const std::size_t intra = nn::linear_count(D, W) + c.dec_depth * nn::block_count(W, WH) + 2 * W + nn::linear_count(W, pd);
  const std::size_t inter = 2 * nn::linear_count(D, W) + c.cross_layers * nn::cross_block_count(W, WH) +
                            c.dec_depth * nn::block_count(W, WH) + 2 * W + nn::linear_count(W, pd);
  return expected_encoder_parameters(c) + intra + inter;
}

tok::TokenParams token_params(const nn::Bound& p) { return {p["enc.patch.w"], p["enc.patch.b"], p["enc.view"]}; }

ViewEncoding encode_view(const Model& m, const nn::Bound& p, const Var& tokens, const std::vector<std::size_t>& masked) {
  const auto& cfg = m.config();
  if (tokens.shape().size() != 2 || tokens.cols() != cfg.width) {
    throw ShapeError("encode: tokens must be [P, " + std::to_string(cfg.width) + "], got " + to_string(tokens.shape()));
  }
  const std::size_t P = tokens.rows();
  Var x = concat({p["enc.cls"], tokens}, 0);
  for (std::size_t i = 0; i < cfg.depth; ++i) x = nn::block(p, idx("enc.block", i), x, cfg.heads);

  ViewEncoding v;
  v.cls_e = slice(x, 0, 0, 1);
  v.patch_e = slice(x, 0, 1, P + 1);
  if (!masked.empty()) {
    Var pos = gather_rows(Var(m.encoder_pos()), masked);
    v.mask_e = nn::linear(p, "enc.mask_proj", broadcast_add(pos, p["enc.mask_token"]));
  } else {
    v.mask_e = Var(Tensor({0, cfg.width}));
  }
  const geo::Curvature c = m.curvature();
  v.cls_h = geo::lift(v.cls_e, c);
  v.patch_h = geo::lift(v.patch_e, c);
  v.cls_b = geo::log_map_origin(v.cls_h);
  v.patch_b = geo::log_map_origin(v.patch_h);
  if (!masked.empty()) {
    v.mask_h = geo::lift(v.mask_e, c);
    v.mask_b = geo::log_map_origin(v.mask_h);
  } else {
    v.mask_h = geo::LorentzBatch{v.mask_e, Var(Tensor({0, 1})), c};
    v.mask_b = v.mask_e;
  }
  return v;
}

EncoderOutput encode(const Model& m, const nn::Bound& p, const std::vector<tok::PatchGrid>& grids,
                     const tok::MaskPlan& plan) {
  if (grids.size() != plan.views.size() || grids.size() != m.config().views) {
    throw ShapeError("encode: expected " + std::to_string(m.config().views) + " views, got " +
                     std::to_string(grids.size()) + " grids and " + std::to_string(plan.views.size()) + " plans");
  }
  if (plan.total != m.layout().count()) throw ShapeError("encode: mask plan does not match the patch grid");
  tok::TokenParams tp = token_params(p);
  EncoderOutput out;
  for (std::size_t v = 0; v < grids.size(); ++v) {
    Var tokens = tok::embed_tokens(grids[v], plan.views[v], m.encoder_pos(), tp, v);
    out.views.push_back(encode_view(m, p, tokens, plan.views[v].masked));
  }
  return out;
}

Var arrange_tokens(const Var& patch_part, const Var& mask_part, const tok::MaskPlan& plan, std::size_t view) {
  const tok::ViewMask& vm = plan.views.at(view);
  if (patch_part.rows() != vm.kept.size() || mask_part.rows() != vm.masked.size()) {
    throw ShapeError("decoder: token counts do not match the mask plan");
  }
  Var seq = vm.masked.empty() ? patch_part : concat({patch_part, mask_part}, 0);
  return gather_rows(seq, plan.restore_order(view));
}

namespace {

Var decode_tail(const Model& m, const nn::Bound& p, const std::string& prefix, Var x) {
  const auto& cfg = m.config();
  for (std::size_t i = 0; i < cfg.dec_depth; ++i) x = nn::block(p, idx(prefix + ".block", i), x, cfg.dec_heads);
  x = nn::layer_norm(p, prefix + ".norm", x);
  return tok::unpatchify(nn::linear(p, prefix + ".head", x), m.layout());
}

Var anchor_sequence(const Model& m, const nn::Bound& p, const std::string& in, const ViewEncoding& v,
                    const tok::MaskPlan& plan, std::size_t view) {
  Var patch = nn::linear(p, in, v.patch_b);
  Var mask = v.mask_b.rows() ? nn::linear(p, in, v.mask_b) : v.mask_b;
  return add(arrange_tokens(patch, mask, plan, view), Var(m.decoder_pos()));
}

}  // namespace

std::vector<Var> decode_intra(const Model& m, const nn::Bound& p, const EncoderOutput& out, const tok::MaskPlan& plan) {
  if (out.views.size() != plan.views.size()) throw ShapeError("decode_intra: plan and encoder output disagree");
  std::vector<Var> images;
  for (std::size_t v = 0; v < out.views.size(); ++v) {
    images.push_back(decode_tail(m, p, "intra", anchor_sequence(m, p, "intra.in", out.views[v], plan, v)));
  }
  return images;
}

std::vector<std::size_t> inter_sources(std::size_t anchor, std::size_t views) {
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < views; ++i)
    if (i != anchor) s.push_back(i);
  return s;
}

std::vector<Var> decode_inter(const Model& m, const nn::Bound& p, const EncoderOutput& out, std::size_t anchor,
                              const tok::MaskPlan& plan) {
  const auto& cfg = m.config();
  if (anchor >= out.views.size()) {
    throw DomainError("decode_inter: anchor index " + std::to_string(anchor) + " out of range [0, " +
                      std::to_string(out.views.size()) + ")");
  }
  if (out.views.size() != plan.views.size()) throw ShapeError("decode_inter: plan and encoder output disagree");
  Var query = anchor_sequence(m, p, "inter.query_in", out.views[anchor], plan, anchor);
  std::vector<Var> preds;
  for (std::size_t s : inter_sources(anchor, out.views.size())) {
    Var src = nn::linear(p, "inter.src_in", out.views[s].patch_b);
    Var x = query;
    for (std::size_t i = 0; i < cfg.cross_layers; ++i) x = nn::cross_block(p, idx("inter.cross", i), x, src, cfg.dec_heads);
    preds.push_back(decode_tail(m, p, "inter", x));
  }
  return preds;
}

}  // namespace hypermvp::model
