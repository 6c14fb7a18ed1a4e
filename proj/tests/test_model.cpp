#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "hypermvp/error.hpp"
#include "hypermvp/gradcheck.hpp"
#include "hypermvp/model.hpp"
#include "hypermvp/objectives.hpp"

using namespace hypermvp;
using namespace hypermvp::model;
using hypermvp::ad::Shape;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.resolution = 16;
  c.patch = 4;
  c.mask_ratio = 0.75;
  c.depth = 1;
  c.width = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.dec_width = 8;
  c.dec_depth = 1;
  c.dec_heads = 2;
  c.cross_layers = 1;
  return c;
}

std::vector<Tensor> random_views(Rng& rng, std::size_t res, std::size_t n = 5) {
  std::vector<Tensor> out;
  for (std::size_t v = 0; v < n; ++v) {
    Tensor t({res * res, 3});
    for (double& x : t.values()) x = rng.uniform();
    out.push_back(t);
  }
  return out;
}

std::vector<tok::PatchGrid> grids_of(const Model& m, const std::vector<Tensor>& imgs) {
  std::vector<tok::PatchGrid> g;
  for (const auto& t : imgs) g.push_back(tok::patchify(Var(t), m.layout()));
  return g;
}

double norm_of(const Tensor& t) {
  double s = 0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(Config, PresetsAndValidation) {
  ModelConfig toy = ModelConfig::toy();
  EXPECT_EQ(toy.resolution, 64u);
  EXPECT_EQ(toy.width, 64u);
  EXPECT_EQ(toy.depth, 2u);
  ModelConfig full = ModelConfig::full();
  EXPECT_EQ(full.width, 768u);
  EXPECT_EQ(full.depth, 8u);
  EXPECT_EQ(full.heads, 8u);
  EXPECT_EQ(full.dec_width, 512u);
  ModelConfig bad = toy;
  bad.heads = 5;
  EXPECT_THROW(bad.validate(), DomainError);
}

TEST(Params, ClosedFormCounts) {
  for (ModelConfig c : {tiny(), ModelConfig::toy()}) {
    Model m(c, 1);
    EXPECT_EQ(count_parameters(m.params), expected_parameters(c));
    EXPECT_EQ(m.params.count_prefix("enc."), expected_encoder_parameters(c));
    // hand arithmetic for the encoder: patch proj, view table, cls, mask token, mask proj, blocks
    const std::size_t D = c.width, pd = c.patch * c.patch * 3, H = D * c.mlp_ratio;
    const std::size_t block = 4 * D + 4 * (D * D + D) + (D * H + H) + (H * D + D);
    EXPECT_EQ(m.params.count_prefix("enc."), pd * D + D + 5 * D + D + D + D * D + D + c.depth * block);
  }
  ModelConfig c = tiny();
  ModelConfig deeper = c;
  deeper.depth = 2 * c.depth;
  const std::size_t D = c.width, H = D * c.mlp_ratio;
  EXPECT_EQ(count_parameters(Model(deeper, 1).params) - count_parameters(Model(c, 1).params),
            c.depth * nn::block_count(D, H));
  ModelConfig zero = c;
  zero.depth = 0;
  const std::size_t pd = c.patch * c.patch * 3;
  EXPECT_EQ(Model(zero, 1).params.count_prefix("enc."), pd * D + D + 5 * D + D + D + D * D + D);
  EXPECT_EQ(count_parameters(Model(c, 1).params), count_parameters(Model(c, 2).params));
}

TEST(Params, DecodersShareNothing) {
  Model m(ModelConfig::toy(), 3);
  auto intra = m.params.names_with_prefix("intra.");
  auto inter = m.params.names_with_prefix("inter.");
  EXPECT_FALSE(intra.empty());
  EXPECT_FALSE(inter.empty());
  std::set<std::string> a(intra.begin(), intra.end());
  for (const auto& n : inter) EXPECT_EQ(a.count(n), 0u);
  EXPECT_EQ(intra.size() + inter.size() + m.params.names_with_prefix("enc.").size(), m.params.size());
}

TEST(Params, Initialisation) {
  Model m(ModelConfig::toy(), 4);
  const Tensor& w = m.params.value("enc.block0.attn.q.w");
  double mean = 0, sq = 0;
  for (double v : w.values()) {
    EXPECT_LE(std::abs(v), 0.04 + 1e-15);
    mean += v;
    sq += v * v;
  }
  mean /= w.size();
  EXPECT_NEAR(std::sqrt(sq / w.size() - mean * mean), 0.0176, 0.002);  // truncated at 2 std
  for (double v : m.params.value("enc.block0.ln1.g").values()) EXPECT_EQ(v, 1.0);
  for (double v : m.params.value("enc.block0.ln1.b").values()) EXPECT_EQ(v, 0.0);
  for (double v : m.params.value("enc.patch.b").values()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, ShapesAndHyperboloid) {
  ModelConfig c = ModelConfig::toy();
  Model m(c, 5);
  Rng rng(6);
  auto imgs = random_views(rng, c.resolution);
  auto plan = tok::make_mask_plan(m.layout().count(), c.mask_ratio, 7);
  nn::Bound p(m.params, nullptr);
  EncoderOutput out = encode(m, p, grids_of(m, imgs), plan);
  ASSERT_EQ(out.views.size(), 5u);
  for (const auto& v : out.views) {
    EXPECT_EQ(v.cls_e.shape(), (Shape{1, 64}));
    EXPECT_EQ(v.patch_e.shape(), (Shape{16, 64}));
    EXPECT_EQ(v.mask_e.shape(), (Shape{48, 64}));
    for (const auto* h : {&v.cls_h, &v.patch_h, &v.mask_h}) {
      Tensor r = geo::hyperboloid_residual(*h).value();
      for (double x : r.values()) EXPECT_LT(std::abs(x), 1e-6);
    }
    // mapped back equals log map of the lifted points
    for (auto [b, h] : {std::pair{&v.cls_b, &v.cls_h}, {&v.patch_b, &v.patch_h}, {&v.mask_b, &v.mask_h}}) {
      Tensor again = geo::log_map_origin(*h).value();
      for (std::size_t i = 0; i < again.size(); ++i) EXPECT_NEAR(b->value()[i], again[i], 1e-10);
    }
    // mask embeddings pairwise distinct
    Tensor d = obj::euclidean_distance_matrix(v.mask_e).value();
    double mn = INFINITY;
    for (std::size_t i = 0; i < d.rows(); ++i)
      for (std::size_t j = 0; j < d.rows(); ++j)
        if (i != j) mn = std::min(mn, d.at(i, j));
    EXPECT_GT(mn, 1e-6);
  }
}

TEST(Encoder, FullPresetShapes) {
  // A single block at full width keeps this quick; shapes do not depend on depth.
  ModelConfig c = ModelConfig::full();
  c.depth = 1;
  c.dec_depth = 0;
  c.cross_layers = 0;
  Model m(c, 8);
  Rng rng(9);
  auto imgs = random_views(rng, 224);
  auto plan = tok::make_mask_plan(m.layout().count(), 0.75, 10);
  nn::Bound p(m.params, nullptr);
  EncoderOutput out = encode(m, p, grids_of(m, imgs), plan);
  for (const auto& v : out.views) {
    EXPECT_EQ(v.cls_e.shape(), (Shape{1, 768}));
    EXPECT_EQ(v.patch_e.shape(), (Shape{49, 768}));
    EXPECT_EQ(v.mask_e.shape(), (Shape{147, 768}));
  }
}

TEST(Encoder, ViewPermutationTravels) {
  ModelConfig c = tiny();
  Model m(c, 11);
  Rng rng(12);
  auto imgs = random_views(rng, c.resolution);
  auto plan = tok::make_mask_plan(m.layout().count(), c.mask_ratio, 13);
  nn::Bound p(m.params, nullptr);
  auto tp = token_params(p);
  auto grids = grids_of(m, imgs);
  // encode view 1's image in slot 3 with view 1's embedding and plan: identical output
  Var t1 = tok::embed_tokens(grids[1], plan.views[1], m.encoder_pos(), tp, 1);
  ViewEncoding direct = encode_view(m, p, t1, plan.views[1].masked);
  EncoderOutput all = encode(m, p, grids, plan);
  EXPECT_EQ(direct.patch_e.value(), all.views[1].patch_e.value());
  std::vector<tok::PatchGrid> swapped = grids;
  std::swap(swapped[1], swapped[3]);
  tok::MaskPlan sp = plan;
  std::swap(sp.views[1], sp.views[3]);
  // with the view table rows swapped too, outputs swap
  nn::ParamStore ps = m.params;
  Tensor& table = ps.value("enc.view");
  for (std::size_t k = 0; k < c.width; ++k) std::swap(table.at(1, k), table.at(3, k));
  nn::Bound p2(ps, nullptr);
  EncoderOutput perm = encode(m, p2, swapped, sp);
  EXPECT_EQ(perm.views[3].patch_e.value(), all.views[1].patch_e.value());
  EXPECT_EQ(perm.views[1].cls_e.value(), all.views[3].cls_e.value());
}

TEST(Encoder, TokenPermutationEquivariance) {
  ModelConfig c = tiny();
  Model m(c, 14);
  Rng rng(15);
  Tensor tokens({4, c.width});
  for (double& v : tokens.values()) v = rng.normal();
  nn::Bound p(m.params, nullptr);
  std::vector<std::size_t> masked{0, 1, 2};
  ViewEncoding a = encode_view(m, p, Var(tokens), masked);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  Var shuffled = ad::gather_rows(Var(tokens), perm);
  ViewEncoding b = encode_view(m, p, shuffled, masked);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < c.width; ++k)
      EXPECT_NEAR(b.patch_e.value().at(i, k), a.patch_e.value().at(perm[i], k), 1e-12);
  for (std::size_t k = 0; k < c.width; ++k) EXPECT_NEAR(b.cls_e.value()[k], a.cls_e.value()[k], 1e-12);
}

TEST(Encoder, GradientReachesEveryGroup) {
  ModelConfig c = tiny();
  Model m(c, 16);
  Rng rng(17);
  auto imgs = random_views(rng, c.resolution);
  auto plan = tok::make_mask_plan(m.layout().count(), c.mask_ratio, 18);
  ad::Tape tape;
  nn::Bound p(m.params, &tape);
  EncoderOutput out = encode(m, p, grids_of(m, imgs), plan);
  std::vector<Var> parts;
  for (const auto& v : out.views) {
    parts.push_back(ad::sum(ad::square(v.cls_b)));
    parts.push_back(ad::sum(ad::square(v.patch_b)));
    parts.push_back(ad::sum(ad::square(v.mask_b)));
  }
  auto grads = tape.backward(ad::add_n(parts));
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (!m.params.name(i).starts_with("enc.")) continue;
    EXPECT_GT(norm_of(grads.of(p.at(i))), 0.0) << m.params.name(i);
  }
}

TEST(Decoders, ArrangeTokensUsesPlanPositions) {
  for (auto [total, ratio] : {std::pair{16ul, 0.75}, {64ul, 0.5}, {9ul, 0.25}, {4ul, 0.0}}) {
    auto plan = tok::make_mask_plan(total, ratio, total);
    for (std::size_t v = 0; v < 5; ++v) {
      // identity stub: each token carries its raster index
      const auto& vm = plan.views[v];
      Tensor kp({vm.kept.size(), 1}), mp({vm.masked.size(), 1});
      for (std::size_t i = 0; i < vm.kept.size(); ++i) kp[i] = static_cast<double>(vm.kept[i]);
      for (std::size_t i = 0; i < vm.masked.size(); ++i) mp[i] = static_cast<double>(vm.masked[i]);
      Var seq = arrange_tokens(Var(kp), Var(mp), plan, v);
      for (std::size_t r = 0; r < total; ++r) ASSERT_EQ(seq.value()[r], static_cast<double>(r));
    }
  }
}

TEST(Decoders, ShapesAndCardinality) {
  ModelConfig c = tiny();
  Model m(c, 19);
  Rng rng(20);
  auto imgs = random_views(rng, c.resolution);
  auto plan = tok::make_mask_plan(m.layout().count(), c.mask_ratio, 21);
  nn::Bound p(m.params, nullptr);
  EncoderOutput out = encode(m, p, grids_of(m, imgs), plan);
  auto intra = decode_intra(m, p, out, plan);
  ASSERT_EQ(intra.size(), 5u);
  for (const auto& im : intra) EXPECT_EQ(im.shape(), imgs[0].shape());
  for (std::size_t a = 0; a < 5; ++a) {
    auto inter = decode_inter(m, p, out, a, plan);
    ASSERT_EQ(inter.size(), 4u);
    for (const auto& im : inter) EXPECT_EQ(im.shape(), imgs[0].shape());
  }
  EXPECT_THROW(decode_inter(m, p, out, 5, plan), DomainError);
  EXPECT_EQ(inter_sources(2, 5), (std::vector<std::size_t>{0, 1, 3, 4}));
}

TEST(Decoders, ZeroValueWeightsIgnoreSource) {
  ModelConfig c = tiny();
  Model m(c, 22);
  for (const char* n : {"inter.cross0.attn.v.w", "inter.cross0.attn.v.b"})
    for (double& v : m.params.value(n).values()) v = 0.0;
  Rng rng(23);
  auto imgs = random_views(rng, c.resolution);
  auto plan = tok::make_mask_plan(m.layout().count(), c.mask_ratio, 24);
  nn::Bound p(m.params, nullptr);
  EncoderOutput out = encode(m, p, grids_of(m, imgs), plan);
  auto preds = decode_inter(m, p, out, 2, plan);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(preds[i].value(), preds[0].value());
}

TEST(Decoders, GradientProbes) {
  ModelConfig c = tiny();
  Model m(c, 25);
  Rng rng(26);
  auto imgs = random_views(rng, c.resolution);
  auto plan = tok::make_mask_plan(m.layout().count(), c.mask_ratio, 27);
  std::vector<Var> targets;
  for (const auto& t : imgs) targets.emplace_back(t);

  {
    ad::Tape tape;
    nn::Bound p(m.params, &tape);
    EncoderOutput out = encode(m, p, grids_of(m, imgs), plan);
    auto grads = tape.backward(obj::intra_reconstruction_loss(decode_intra(m, p, out, plan), targets));
    EXPECT_GT(norm_of(grads.of(p["enc.patch.w"])), 0.0);
    EXPECT_EQ(norm_of(grads.of(p["inter.head.w"])), 0.0);
  }
  {
    ad::Tape tape;
    nn::Bound p(m.params, &tape);
    EncoderOutput out = encode(m, p, grids_of(m, imgs), plan);
    auto preds = decode_inter(m, p, out, 1, plan);
    auto grads = tape.backward(obj::inter_reconstruction_loss(preds, targets[1]));
    EXPECT_GT(norm_of(grads.of(p["enc.mask_token"])), 0.0);
    EXPECT_GT(norm_of(grads.of(p["inter.src_in.w"])), 0.0);
    EXPECT_GT(norm_of(grads.of(p["enc.patch.w"])), 0.0);
    EXPECT_EQ(norm_of(grads.of(p["intra.head.w"])), 0.0);
  }
  {
    // the source path alone: only view 0 of the images enters through the source side
    ad::Tape tape;
    nn::Bound p(m.params, &tape);
    std::vector<tok::PatchGrid> grids;
    std::vector<Var> leaves;
    for (const auto& t : imgs) {
      leaves.push_back(tape.leaf(t));
      grids.push_back(tok::patchify(leaves.back(), m.layout()));
    }
    EncoderOutput out = encode(m, p, grids, plan);
    auto preds = decode_inter(m, p, out, 1, plan);
    auto grads = tape.backward(obj::inter_reconstruction_loss(preds, targets[1]));
    EXPECT_GT(norm_of(grads.of(leaves[0])), 0.0);
  }
}

TEST(Decoders, EndToEndGradientCheck) {
  ModelConfig c = tiny();
  c.mlp_ratio = 1;
  Model m(c, 28);
  Rng rng(29);
  auto imgs = random_views(rng, c.resolution);
  auto plan = tok::make_mask_plan(m.layout().count(), c.mask_ratio, 30);
  const std::vector<std::string> probe{"enc.mask_token", "enc.view", "intra.head.b", "inter.cross0.attn.k.w"};
  std::vector<Tensor> inputs;
  for (const auto& n : probe) inputs.push_back(m.params.value(n));
  auto f = [&](std::span<const Var> in) {
    nn::Bound base(m.params, nullptr);
    std::vector<Var> vars;
    for (std::size_t i = 0; i < m.params.size(); ++i) vars.push_back(base.at(i));
    for (std::size_t k = 0; k < probe.size(); ++k) vars[m.params.index(probe[k])] = in[k];
    nn::Bound bound = nn::Bound::from_vars(m.params, std::move(vars));
    EncoderOutput out = encode(m, bound, grids_of(m, imgs), plan);
    std::vector<Var> targets;
    for (const auto& t : imgs) targets.emplace_back(t);
    Var intra = obj::intra_reconstruction_loss(decode_intra(m, bound, out, plan), targets);
    Var inter = obj::inter_reconstruction_loss(decode_inter(m, bound, out, 0, plan), targets[0]);
    return ad::add(intra, ad::scale(inter, 0.5));
  };
  GradCheckOptions opt;
  opt.max_coords = 40;
  EXPECT_LE(gradient_check(f, inputs, opt).max_rel_error, 1e-6);
}
