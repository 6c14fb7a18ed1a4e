#include "hypermvp/inspect.hpp"

#include <cmath>

#include "hypermvp/error.hpp"
#include "hypermvp/objectives.hpp"
#include "hypermvp/render.hpp"

namespace hypermvp::inspect {

namespace {

using ad::Var;
using nlohmann::json;

json matrix_json(const Tensor& t) {
  json out = json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) out.push_back(std::vector<double>(t.row(r).begin(), t.row(r).end()));
  return out;
}

Tensor matrix_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw ParseError(what + ": expected a non-empty array of rows");
  std::vector<std::vector<double>> rows;
  try {
    rows = j.get<std::vector<std::vector<double>>>();
  } catch (const json::exception&) {
    throw ParseError(what + ": rows must be arrays of numbers");
  }
  const std::size_t cols = rows[0].size();
  for (const auto& r : rows)
    if (r.size() != cols || cols == 0) throw ParseError(what + ": ragged or empty rows");
  Tensor t({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < cols; ++k) t.at(i, k) = rows[i][k];
  return t;
}

std::string view_name(const json& v, std::size_t i) {
  if (v.contains("name")) return v.at("name").get<std::string>();
  return i < render::kNumViews ? std::string(render::canonical_views()[i].name) : "view" + std::to_string(i);
}

std::size_t pick_k(const json& input, std::size_t P) {
  if (input.contains("k") && !input.at("k").is_null()) return input.at("k").get<std::size_t>();
  return obj::default_k(P);
}

json rank_report(const Tensor& de, const Tensor& dl, std::size_t K) {
  const ad::IndexMatrix nn = obj::topk_neighbors(de, K);
  json topk = json::array();
  for (std::size_t i = 0; i < nn.rows; ++i) topk.push_back(std::vector<std::size_t>(nn.row(i).begin(), nn.row(i).end()));
  json j;
  j["P"] = de.rows();
  j["k"] = K;
  j["D_E"] = matrix_json(de);
  j["D_L"] = matrix_json(dl);
  j["topk"] = std::move(topk);
  j["ranks_E"] = matrix_json(obj::literal_ranks(de));
  j["ranks_L"] = matrix_json(obj::literal_ranks(dl));
  j["rank_correlation_literal"] = obj::rank_correlation_literal(de, dl, K);
  return j;
}

json violations(const geo::LorentzBatch& parent, const geo::LorentzBatch& children, double boundary) {
  json out = json::array();
  if (children.size() == 0) return out;
  double pn = 0.0;
  for (double v : parent.spatial.value().values()) pn += v * v;
  if (std::sqrt(pn) < 1e-8) {
    for (std::size_t i = 0; i < children.size(); ++i) out.push_back(nullptr);
    return out;
  }
  const Tensor v = geo::entailment_violation(parent, children, boundary).value();
  for (std::size_t i = 0; i < children.size(); ++i) out.push_back(v.at(i, 0));
  return out;
}

double mean_of(const json& a) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& v : a)
    if (v.is_number()) {
      s += v.get<double>();
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

json entailment_report(const geo::LorentzBatch& cls, const geo::LorentzBatch& patches, const geo::LorentzBatch* masks,
                       double boundary) {
  json e;
  e["patch"] = violations(cls, patches, boundary);
  e["mean_patch"] = mean_of(e["patch"]);
  if (masks) {
    e["mask"] = violations(cls, *masks, boundary);
    e["mean_mask"] = mean_of(e["mask"]);
  }
  return e;
}

json summarize(json views) {
  double total = 0.0;
  for (const auto& v : views) total += v["rank_correlation_literal"].get<double>();
  json out;
  out["views"] = std::move(views);
  out["rank_correlation_literal_mean"] = total / static_cast<double>(out["views"].size());
  return out;
}

geo::LorentzBatch constant_lift(const Tensor& x, geo::Curvature c) { return geo::lift(Var(x), c); }

}  // namespace

json inspect_matrices(const json& input) {
  try {
    const json& views = input.at("views");
    if (!views.is_array() || views.empty()) throw ParseError("inspect: 'views' must be a non-empty array");
    json out = json::array();
    for (std::size_t i = 0; i < views.size(); ++i) {
      const Tensor de = matrix_from(views[i].at("D_E"), "D_E");
      const Tensor dl = matrix_from(views[i].at("D_L"), "D_L");
      if (de.rows() != de.cols() || dl.shape() != de.shape()) {
        throw ShapeError("inspect: view " + std::to_string(i) + " needs two square matrices of one size");
      }
      json r = rank_report(de, dl, pick_k(input, de.rows()));
      r["view"] = view_name(views[i], i);
      out.push_back(std::move(r));
    }
    return summarize(std::move(out));
  } catch (const json::exception& e) {
    throw ParseError(std::string("inspect: ") + e.what());
  }
}

json inspect_embeddings(const json& input) {
  try {
    const geo::Curvature c(input.value("curvature", 1.0));
    const double boundary = input.value("cone_boundary", geo::kDefaultConeBoundary);
    const json& views = input.at("views");
    if (!views.is_array() || views.empty()) throw ParseError("inspect: 'views' must be a non-empty array");
    json out = json::array();
    for (std::size_t i = 0; i < views.size(); ++i) {
      const json& v = views[i];
      const Tensor patches = matrix_from(v.at("patches"), "patches");
      const Tensor cls = matrix_from(json::array({v.at("cls")}), "cls");
      if (cls.cols() != patches.cols()) throw ShapeError("inspect: cls and patches differ in width");
      const geo::LorentzBatch ph = constant_lift(patches, c), ch = constant_lift(cls, c);
      const Tensor de = obj::euclidean_distance_matrix(Var(patches)).value();
      const Tensor dl = geo::distance_matrix(ph).value();
      json r = rank_report(de, dl, pick_k(input, de.rows()));
      r["view"] = view_name(v, i);
      if (v.contains("masks")) {
        const Tensor masks = matrix_from(v.at("masks"), "masks");
        if (masks.cols() != patches.cols()) throw ShapeError("inspect: masks and patches differ in width");
        const geo::LorentzBatch mh = constant_lift(masks, c);
        r["entailment"] = entailment_report(ch, ph, &mh, boundary);
      } else {
        r["entailment"] = entailment_report(ch, ph, nullptr, boundary);
      }
      out.push_back(std::move(r));
    }
    json result = summarize(std::move(out));
    result["curvature"] = c.value();
    return result;
  } catch (const json::exception& e) {
    throw ParseError(std::string("inspect: ") + e.what());
  }
}

json inspect_model(const model::Model& m, const train::Sample& sample, std::uint64_t mask_seed, std::size_t k,
                   double cone_boundary) {
  nn::Bound p(m.params, nullptr);
  const tok::MaskPlan plan = tok::make_mask_plan(m.layout().count(), m.config().mask_ratio, mask_seed, m.config().views);
  std::vector<tok::PatchGrid> grids;
  for (const auto& img : sample.images) grids.push_back(tok::patchify(Var(img), m.layout()));
  const model::EncoderOutput out = model::encode(m, p, grids, plan);
  const std::size_t K = k ? k : obj::default_k(plan.kept_count());
  json views = json::array();
  for (std::size_t v = 0; v < out.views.size(); ++v) {
    const auto& e = out.views[v];
    json r = rank_report(obj::euclidean_distance_matrix(e.patch_e).value(), geo::distance_matrix(e.patch_h).value(), K);
    r["view"] = view_name(json::object(), v);
    r["kept"] = plan.views[v].kept;
    r["masked"] = plan.views[v].masked;
    r["entailment"] = entailment_report(e.cls_h, e.patch_h, e.mask_h.size() ? &e.mask_h : nullptr, cone_boundary);
    views.push_back(std::move(r));
  }
  json result = summarize(std::move(views));
  result["source"] = sample.source;
  result["mask_seed"] = mask_seed;
  result["curvature"] = m.config().curvature;
  return result;
}

Reconstruction reconstruct(const model::Model& m, const train::Sample& sample, std::uint64_t mask_seed,
                           std::size_t anchor) {
  const std::size_t views = m.config().views;
  if (anchor >= views) throw DomainError("reconstruct: anchor must be below " + std::to_string(views));
  nn::Bound p(m.params, nullptr);
  Reconstruction r;
  r.anchor = anchor;
  r.plan = tok::make_mask_plan(m.layout().count(), m.config().mask_ratio, mask_seed, views);
  std::vector<tok::PatchGrid> grids;
  std::vector<Var> targets;
  for (const auto& img : sample.images) {
    grids.push_back(tok::patchify(Var(img), m.layout()));
    targets.emplace_back(img);
    r.inputs.push_back(img);
  }
  const model::EncoderOutput out = model::encode(m, p, grids, r.plan);
  const auto intra = model::decode_intra(m, p, out, r.plan);
  const auto inter = model::decode_inter(m, p, out, anchor, r.plan);
  r.intra_loss = obj::intra_reconstruction_loss(intra, targets).item();
  r.inter_loss = obj::inter_reconstruction_loss(inter, targets[anchor]).item();
  for (const auto& v : intra) r.intra.push_back(v.value());
  for (const auto& v : inter) r.inter.push_back(v.value());
  r.sources = model::inter_sources(anchor, views);

  const tok::PatchLayout& layout = m.layout();
  for (std::size_t v = 0; v < views; ++v) {
    Tensor patches = tok::patchify(Var(sample.images[v]), layout).patches.value();
    for (std::size_t idx : r.plan.views[v].masked)
      for (double& x : patches.row(idx)) x = 0.5;
    r.masked.push_back(tok::unpatchify(Var(patches), layout).value());
  }
  return r;
}

json write_reconstruction(const Reconstruction& r, std::size_t resolution, const std::filesystem::path& out_dir,
                          const std::string& stem) {
  std::filesystem::create_directories(out_dir);
  json files = json::array();
  auto emit = [&](const Tensor& img, const std::string& kind, const std::string& name) {
    const std::string file = stem + "_" + kind + "_" + name + ".png";
    const auto bytes = render::encode_png(tok::view_from_tensor(img, resolution, name));
    render::write_file(out_dir / file, bytes);
    files.push_back({{"kind", kind}, {"view", name}, {"file", file}, {"sha256", render::sha256_hex(bytes)}});
  };
  const auto& specs = render::canonical_views();
  for (std::size_t v = 0; v < r.inputs.size(); ++v) {
    const std::string name(specs[v].name);
    emit(r.inputs[v], "input", name);
    emit(r.masked[v], "masked", name);
    emit(r.intra[v], "intra", name);
  }
  const std::string anchor(specs[r.anchor].name);
  for (std::size_t i = 0; i < r.inter.size(); ++i) {
    emit(r.inter[i], "inter", std::string(specs[r.sources[i]].name) + "_to_" + anchor);
  }
  json m;
  m["anchor"] = anchor;
  m["mask_seed"] = r.plan.seed;
  m["mask_ratio"] = r.plan.ratio;
  m["L_intra"] = r.intra_loss;
  m["L_inter"] = r.inter_loss;
  m["files"] = std::move(files);
  const std::string text = m.dump(1) + "\n";
  render::write_file(out_dir / (stem + ".json"), std::vector<unsigned char>(text.begin(), text.end()));
  return m;
}

}  // namespace hypermvp::inspect
