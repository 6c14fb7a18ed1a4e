#include "hypermvp/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "hypermvp/error.hpp"
#include "hypermvp/render.hpp"

namespace hypermvp::train {

namespace fs = std::filesystem;

// ---- config -----------------------------------------------------------------

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.model = model::ModelConfig::toy();
  return c;
}

TrainConfig TrainConfig::full() {
  TrainConfig c;
  c.model = model::ModelConfig::full();
  c.lr = 5.12e-4;
  c.weight_decay = 1e-4;
  c.batch = 64;
  c.steps = 0;
  c.epochs = 100;
  return c;
}

void TrainConfig::validate() const {
  model.validate();
  weights.validate();
  if (!(lr > 0.0) || !std::isfinite(lr)) throw DomainError("config: lr must be positive");
  if (!(weight_decay >= 0.0)) throw DomainError("config: weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw DomainError("config: betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw DomainError("config: adam_eps must be positive");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw DomainError("config: warmup_frac must lie in [0, 1)");
  if (batch == 0) throw DomainError("config: batch must be positive");
  if (steps == 0 && epochs == 0) throw DomainError("config: steps or epochs must be positive");
  if (data_dir.empty() && dataset_size == 0) throw DomainError("config: dataset_size must be positive");
  if (points == 0) throw DomainError("config: points must be positive");
  if (!(tau > 0.0)) throw DomainError("config: tau must be positive");
  if (!(cone_boundary > 0.0)) throw DomainError("config: cone_boundary must be positive");
  const std::size_t kept = tok::kept_patches(tok::PatchLayout(model.resolution, model.patch).count(), model.mask_ratio);
  if (kept < 3) throw DomainError("config: fewer than 3 visible patches per view");
  if (top_k != 0 && (top_k < 2 || top_k > kept - 1)) {
    throw DomainError("config: top_k must lie in [2, " + std::to_string(kept - 1) + "]");
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ParseError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] != '-') out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) {
    throw ParseError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ParseError("config: '" + key + "' expects true or false, got '" + v + "'");
}

struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
};

template <class T>
Field size_field(T TrainConfig::*member) {
  return {[member](const TrainConfig& c) { return std::to_string(c.*member); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) {
            c.*member = static_cast<T>(to_uint(k, v));
          }};
}

template <class T>
Field model_size_field(T model::ModelConfig::*member) {
  return {[member](const TrainConfig& c) { return std::to_string(c.model.*member); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) {
            c.model.*member = static_cast<T>(to_uint(k, v));
          }};
}

Field double_field(double TrainConfig::*member) {
  return {[member](const TrainConfig& c) { return fmt(c.*member); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) { c.*member = to_double(k, v); }};
}

Field model_double_field(double model::ModelConfig::*member) {
  return {[member](const TrainConfig& c) { return fmt(c.model.*member); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) { c.model.*member = to_double(k, v); }};
}

Field weight_field(double obj::LossWeights::*member) {
  return {[member](const TrainConfig& c) { return fmt(c.weights.*member); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) { c.weights.*member = to_double(k, v); }};
}

Field bool_field(bool TrainConfig::*member) {
  return {[member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [member](TrainConfig& c, const std::string& k, const std::string& v) { c.*member = to_bool(k, v); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"resolution", model_size_field(&model::ModelConfig::resolution)},
      {"patch", model_size_field(&model::ModelConfig::patch)},
      {"mask_ratio", model_double_field(&model::ModelConfig::mask_ratio)},
      {"depth", model_size_field(&model::ModelConfig::depth)},
      {"width", model_size_field(&model::ModelConfig::width)},
      {"heads", model_size_field(&model::ModelConfig::heads)},
      {"mlp_ratio", model_size_field(&model::ModelConfig::mlp_ratio)},
      {"dec_width", model_size_field(&model::ModelConfig::dec_width)},
      {"dec_depth", model_size_field(&model::ModelConfig::dec_depth)},
      {"dec_heads", model_size_field(&model::ModelConfig::dec_heads)},
      {"cross_layers", model_size_field(&model::ModelConfig::cross_layers)},
      {"curvature", model_double_field(&model::ModelConfig::curvature)},
      {"lr", double_field(&TrainConfig::lr)},
      {"weight_decay", double_field(&TrainConfig::weight_decay)},
      {"beta1", double_field(&TrainConfig::beta1)},
      {"beta2", double_field(&TrainConfig::beta2)},
      {"adam_eps", double_field(&TrainConfig::adam_eps)},
      {"warmup_frac", double_field(&TrainConfig::warmup_frac)},
      {"batch", size_field(&TrainConfig::batch)},
      {"steps", size_field(&TrainConfig::steps)},
      {"epochs", size_field(&TrainConfig::epochs)},
      {"seed", size_field(&TrainConfig::seed)},
      {"data_dir",
       {[](const TrainConfig& c) { return c.data_dir; },
        [](TrainConfig& c, const std::string&, const std::string& v) { c.data_dir = v; }}},
      {"dataset_size", size_field(&TrainConfig::dataset_size)},
      {"points", size_field(&TrainConfig::points)},
      {"data_seed", size_field(&TrainConfig::data_seed)},
      {"w_corr", weight_field(&obj::LossWeights::corr)},
      {"w_etl_patch", weight_field(&obj::LossWeights::etl_patch)},
      {"w_etl_mask", weight_field(&obj::LossWeights::etl_mask)},
      {"w_intra", weight_field(&obj::LossWeights::intra)},
      {"w_inter", weight_field(&obj::LossWeights::inter)},
      {"top_k", size_field(&TrainConfig::top_k)},
      {"tau", double_field(&TrainConfig::tau)},
      {"cone_boundary", double_field(&TrainConfig::cone_boundary)},
      {"use_corr", bool_field(&TrainConfig::use_corr)},
      {"use_etl_patch", bool_field(&TrainConfig::use_etl_patch)},
      {"use_etl_mask", bool_field(&TrainConfig::use_etl_mask)},
      {"use_inter", bool_field(&TrainConfig::use_inter)},
  };
  return table;
}

TrainConfig preset(const std::string& name) {
  if (name == "toy") return TrainConfig::toy();
  if (name == "full") return TrainConfig::full();
  throw ParseError("config: unknown preset '" + name + "' (expected toy or full)");
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "preset") {
    *this = preset(value);
    return;
  }
  auto it = fields().find(key);
  if (it == fields().end()) throw ParseError("config: unknown key '" + key + "'");
  it->second.set(*this, key, value);
}

std::map<std::string, std::string> TrainConfig::entries() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : fields()) out[k] = f.get(*this);
  return out;
}

std::string TrainConfig::to_text() const {
  std::string s;
  for (const auto& [k, v] : entries()) s += k + " = " + v + "\n";
  return s;
}

std::string TrainConfig::hash() const {
  const std::string text = to_text();
  return render::sha256_hex(text.data(), text.size());
}

std::size_t TrainConfig::total_steps(std::size_t dataset_len) const {
  if (steps > 0) return steps;
  return epochs * ((dataset_len + batch - 1) / batch);
}

TrainConfig parse_config(std::istream& in, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source + ":" + std::to_string(no) + ": expected key = value");
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  TrainConfig cfg = TrainConfig::toy();
  for (const auto& [k, v] : kv)
    if (k == "preset") cfg = preset(v);
  for (const auto& [k, v] : kv) {
    if (k == "preset") continue;
    try {
      cfg.set(k, v);
    } catch (const ParseError& e) {
      throw ParseError(source + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "': " + std::strerror(errno));
  return parse_config(in, path);
}

void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ParseError("override '" + o + "' is not key=value");
    cfg.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
}

// ---- data -------------------------------------------------------------------

Sample make_sample(const render::MultiviewRender& r, const std::string& source) {
  Sample s;
  s.source = source;
  for (const auto& v : r.views) s.images.push_back(tok::image_tensor(v));
  return s;
}

Dataset render_dataset(const std::vector<render::PointCloud>& clouds, const std::vector<std::string>& sources,
                       std::size_t resolution) {
  if (clouds.size() != sources.size()) throw ShapeError("render_dataset: one source name per cloud");
  render::RenderConfig rc;
  rc.resolution = resolution;
  auto renders = render::render_many(clouds, rc, render::prefetch_threads());
  Dataset d;
  for (std::size_t i = 0; i < renders.size(); ++i) d.samples.push_back(make_sample(renders[i], sources[i]));
  return d;
}

Dataset synthetic_dataset(const TrainConfig& cfg, std::size_t first, std::size_t count) {
  std::vector<render::PointCloud> clouds;
  std::vector<std::string> names;
  for (std::size_t i = first; i < first + count; ++i) {
    clouds.push_back(render::synthetic_cloud(cfg.data_seed, i, cfg.points));
    names.push_back("synthetic:" + std::to_string(cfg.data_seed) + ":" + std::to_string(i));
  }
  return render_dataset(clouds, names, cfg.model.resolution);
}

Dataset load_dataset(const TrainConfig& cfg) {
  if (cfg.data_dir.empty()) return synthetic_dataset(cfg, 0, cfg.dataset_size);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(cfg.data_dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".ply" || ext == ".xyz" || ext == ".xyzrgb" || ext == ".txt")) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("no point clouds found in '" + cfg.data_dir + "'");
  std::vector<render::PointCloud> clouds;
  std::vector<std::string> names;
  for (const auto& f : files) {
    clouds.push_back(render::load_point_cloud(f));
    names.push_back(f.string());
  }
  return render_dataset(clouds, names, cfg.model.resolution);
}

Dataset held_out_dataset(const TrainConfig& cfg, std::size_t count) {
  const std::size_t first = cfg.data_dir.empty() ? cfg.dataset_size : 0;
  return synthetic_dataset(cfg, first + 1'000'000, count);
}

std::size_t sample_index(std::uint64_t seed, std::size_t step, std::size_t b, std::size_t batch, std::size_t n) {
  if (n == 0) throw DomainError("sample_index: empty dataset");
  const std::size_t pos = step * batch + b;
  const std::size_t epoch = pos / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed, 2 + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm[pos % n];
}

// ---- optimizer --------------------------------------------------------------

AdamState adam_init(const nn::ParamStore& params) {
  AdamState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params.value(i).shape(), 0.0);
    s.v.emplace_back(params.value(i).shape(), 0.0);
  }
  return s;
}

void adamw_step(nn::ParamStore& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                double weight_decay, const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: expected one gradient and moment pair per parameter");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.value(i).shape() || state.m[i].shape() != params.value(i).shape() ||
        state.v[i].shape() != params.value(i).shape()) {
      throw ShapeError("adamw_step: shape mismatch for '" + params.name(i) + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.value(i).values();
    auto g = grads[i].values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mh = m[j] / c1, vh = v[j] / c2;
      p[j] -= lr * weight_decay * p[j];
      p[j] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

double lr_schedule(std::size_t step, std::size_t total, double base, double warmup_frac) {
  if (total == 0 || step > total) throw DomainError("lr_schedule: step outside [0, total]");
  const double s = static_cast<double>(step), n = static_cast<double>(total);
  const double warm = warmup_frac * n;
  if (s < warm) return base * s / warm;
  if (n <= warm) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * (s - warm) / (n - warm)));
}

// ---- loss of one sample ------------------------------------------------------

namespace {

double max_residual(const geo::LorentzBatch& x) {
  const Tensor& s = x.spatial.value();
  const Tensor& t = x.temporal.value();
  const double inv_c = 1.0 / x.curvature.value();
  double worst = 0.0;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double ss = 0.0;
    for (double v : s.row(r)) ss += v * v;
    worst = std::max(worst, std::abs(ss - t.at(r, 0) * t.at(r, 0) + inv_c));
  }
  return worst;
}

double min_pairwise(const Tensor& x) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = i + 1; j < x.rows(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < x.cols(); ++k) d += (x.at(i, k) - x.at(j, k)) * (x.at(i, k) - x.at(j, k));
      best = std::min(best, std::sqrt(d));
    }
  }
  return best;
}

std::vector<Var> constant_images(const Sample& s) {
  std::vector<Var> out;
  for (const auto& img : s.images) out.emplace_back(img);
  return out;
}

}  // namespace

SampleLoss sample_loss(const model::Model& m, const nn::Bound& p, const TrainConfig& cfg, const Sample& s,
                       std::uint64_t mask_seed, std::size_t anchor) {
  const std::size_t views = m.config().views;
  if (s.images.size() != views) throw ShapeError("sample_loss: sample has the wrong number of views");
  const tok::PatchLayout& layout = m.layout();
  tok::MaskPlan plan = tok::make_mask_plan(layout.count(), m.config().mask_ratio, mask_seed, views);
  std::vector<tok::PatchGrid> grids;
  for (const auto& img : s.images) grids.push_back(tok::patchify(Var(img), layout));
  model::EncoderOutput out = model::encode(m, p, grids, plan);

  SampleLoss r;
  r.diag.min_mask_distance = std::numeric_limits<double>::infinity();
  std::vector<geo::LorentzBatch> cls, patches, masks;
  for (const auto& v : out.views) {
    cls.push_back(v.cls_h);
    patches.push_back(v.patch_h);
    masks.push_back(v.mask_h);
    for (const auto* b : {&v.cls_h, &v.patch_h, &v.mask_h})
      if (b->size() > 0) r.diag.max_residual = std::max(r.diag.max_residual, max_residual(*b));
    if (v.mask_e.rows() > 1) r.diag.min_mask_distance = std::min(r.diag.min_mask_distance, min_pairwise(v.mask_e.value()));
  }

  std::vector<Var> terms;
  const std::size_t K = cfg.top_k ? cfg.top_k : obj::default_k(plan.kept_count());
  std::vector<Var> de, dl;
  for (const auto& v : out.views) {
    if (cfg.use_corr) {
      de.push_back(obj::euclidean_distance_matrix(v.patch_e));
      dl.push_back(geo::distance_matrix(v.patch_h));
    } else {
      de.push_back(obj::euclidean_distance_matrix(Var(v.patch_e.value())));
      geo::LorentzBatch h{Var(v.patch_h.spatial.value()), Var(v.patch_h.temporal.value()), v.patch_h.curvature};
      dl.push_back(geo::distance_matrix(h));
    }
  }
  double literal = 0.0;
  for (std::size_t v = 0; v < views; ++v) literal += obj::rank_correlation_literal(de[v].value(), dl[v].value(), K);
  r.corr_literal = literal / static_cast<double>(views);
  if (cfg.use_corr) {
    Var corr = obj::rank_correlation_loss(de, dl, K, obj::RankMode::Soft, cfg.tau);
    r.parts.corr = corr.item();
    terms.push_back(ad::scale(corr, cfg.weights.corr));
  }
  if (cfg.use_etl_patch) {
    obj::EntailmentLoss e = obj::entailment_loss(cls, patches, cfg.cone_boundary);
    r.parts.etl_patch = e.loss.item();
    r.diag.etl_skipped += e.skipped;
    terms.push_back(ad::scale(e.loss, cfg.weights.etl_patch));
  }
  if (cfg.use_etl_mask && plan.masked_count() > 0) {
    obj::EntailmentLoss e = obj::entailment_loss(cls, masks, cfg.cone_boundary);
    r.parts.etl_mask = e.loss.item();
    r.diag.etl_skipped += e.skipped;
    terms.push_back(ad::scale(e.loss, cfg.weights.etl_mask));
  }
  const std::vector<Var> targets = constant_images(s);
  {
    Var intra = obj::intra_reconstruction_loss(model::decode_intra(m, p, out, plan), targets);
    r.parts.intra = intra.item();
    terms.push_back(ad::scale(intra, cfg.weights.intra));
  }
  if (cfg.use_inter) {
    Var inter = obj::inter_reconstruction_loss(model::decode_inter(m, p, out, anchor, plan), targets[anchor]);
    r.parts.inter = inter.item();
    terms.push_back(ad::scale(inter, cfg.weights.inter));
  }
  r.total = ad::add_n(terms);
  return r;
}

double evaluate_intra(const model::Model& m, const Dataset& data, double mask_ratio, std::uint64_t seed) {
  if (data.size() == 0) throw DomainError("evaluate_intra: empty dataset");
  nn::Bound p(m.params, nullptr);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data.samples[i];
    tok::MaskPlan plan = tok::make_mask_plan(m.layout().count(), mask_ratio, Rng(seed, i).next(), m.config().views);
    std::vector<tok::PatchGrid> grids;
    for (const auto& img : s.images) grids.push_back(tok::patchify(Var(img), m.layout()));
    model::EncoderOutput out = model::encode(m, p, grids, plan);
    total += obj::intra_reconstruction_loss(model::decode_intra(m, p, out, plan), constant_images(s)).item();
  }
  return total / static_cast<double>(data.size());
}

// ---- trainer ----------------------------------------------------------------

nlohmann::json StepRecord::to_json() const {
  nlohmann::json j = report.to_json();
  j["step"] = step;
  j["lr"] = lr;
  j["step_seconds"] = seconds;
  j["max_residual"] = diag.max_residual;
  j["min_mask_distance"] =
      std::isfinite(diag.min_mask_distance) ? nlohmann::json(diag.min_mask_distance) : nlohmann::json(nullptr);
  j["etl_skipped"] = diag.etl_skipped;
  j["anchors"] = anchors;
  return j;
}

Trainer::Trainer(TrainConfig cfg, const Dataset& data)
    : cfg_(std::move(cfg)), data_(&data), model_((cfg_.validate(), cfg_.model), cfg_.seed), rng_(cfg_.seed, 1) {
  if (data.size() == 0) throw DomainError("trainer: empty dataset");
  for (const auto& s : data.samples) {
    if (s.images.size() != cfg_.model.views) throw ShapeError("trainer: sample '" + s.source + "' lacks views");
    for (const auto& img : s.images)
      if (img.shape() != ad::Shape{cfg_.model.resolution * cfg_.model.resolution, 3}) {
        throw ShapeError("trainer: sample '" + s.source + "' does not match the configured resolution");
      }
  }
  adam_ = adam_init(model_.params);
  total_ = cfg_.total_steps(data.size());
}

StepRecord Trainer::train_step() {
  if (step_ >= total_) throw Error("trainer: schedule already complete");
  const auto t0 = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.lr = lr_schedule(step_ + 1, total_, cfg_.lr, cfg_.warmup_frac);

  std::vector<std::uint64_t> mask_seeds;
  for (std::size_t b = 0; b < cfg_.batch; ++b) {
    mask_seeds.push_back(rng_.next());
    rec.anchors.push_back(rng_.below(cfg_.model.views));
  }

  std::vector<Tensor> grads;
  for (std::size_t i = 0; i < model_.params.size(); ++i) grads.emplace_back(model_.params.value(i).shape(), 0.0);
  obj::LossParts parts;
  double literal = 0.0;
  rec.diag.min_mask_distance = std::numeric_limits<double>::infinity();
  const double inv_b = 1.0 / static_cast<double>(cfg_.batch);

  for (std::size_t b = 0; b < cfg_.batch; ++b) {
    const Sample& s = data_->samples[sample_index(cfg_.seed, step_, b, cfg_.batch, data_->size())];
    ad::Tape tape;
    nn::Bound p(model_.params, &tape);
    SampleLoss sl;
    try {
      sl = sample_loss(model_, p, cfg_, s, mask_seeds[b], rec.anchors[b]);
      obj::total_losses(sl.parts, cfg_.weights);
    } catch (const DomainError& e) {
      throw TrainingHalted("step " + std::to_string(step_ + 1) + ", sample '" + s.source + "': " + e.what());
    }
    ad::Gradients g = tape.backward(sl.total);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Tensor gi = g.of(p.at(i));
      auto dst = grads[i].values();
      auto src = gi.values();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j] * inv_b;
    }
    parts.corr += sl.parts.corr * inv_b;
    parts.etl_patch += sl.parts.etl_patch * inv_b;
    parts.etl_mask += sl.parts.etl_mask * inv_b;
    parts.intra += sl.parts.intra * inv_b;
    parts.inter += sl.parts.inter * inv_b;
    literal += sl.corr_literal * inv_b;
    rec.diag.max_residual = std::max(rec.diag.max_residual, sl.diag.max_residual);
    rec.diag.min_mask_distance = std::min(rec.diag.min_mask_distance, sl.diag.min_mask_distance);
    rec.diag.etl_skipped += sl.diag.etl_skipped;
  }
  try {
    rec.report = obj::total_losses(parts, cfg_.weights, literal);
  } catch (const DomainError& e) {
    throw TrainingHalted("step " + std::to_string(step_ + 1) + ": " + e.what());
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (double v : grads[i].values()) {
      if (!std::isfinite(v)) {
        throw TrainingHalted("step " + std::to_string(step_ + 1) + ": non-finite gradient in '" +
                             model_.params.name(i) + "'");
      }
    }
  }
  adamw_step(model_.params, grads, adam_, rec.lr, cfg_.weight_decay, {cfg_.beta1, cfg_.beta2, cfg_.adam_eps});
  ++step_;
  rec.step = step_;
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

void put_f64(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "': " + std::strerror(errno));
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    out.flush();
    if (!out) throw Error("write failed for '" + tmp.string() + "': " + std::strerror(errno));
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "': " + std::strerror(errno));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Entry {
  std::string name;
  const Tensor* value;
};

std::vector<Entry> layout_entries(const nn::ParamStore& params, const AdamState& adam) {
  std::vector<Entry> out;
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back({params.name(i), &params.value(i)});
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back({"adam.m/" + params.name(i), &adam.m[i]});
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back({"adam.v/" + params.name(i), &adam.v[i]});
  return out;
}

nlohmann::json read_manifest(const std::string& stem) {
  const auto bytes = read_bytes(stem + ".json");
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest '" + stem + ".json': " + e.what());
  }
}

// name -> values, after checking that offsets tile the blob and the hash matches.
std::map<std::string, std::pair<ad::Shape, std::vector<double>>> read_blob(const std::string& stem,
                                                                           const nlohmann::json& manifest) {
  const auto blob = read_bytes(stem + ".bin");
  try {
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>()) {
      throw ParseError("checkpoint '" + stem + "': blob size differs from the manifest");
    }
    if (render::sha256_hex(blob) != manifest.at("blob_sha256").get<std::string>()) {
      throw ParseError("checkpoint '" + stem + "': blob hash differs from the manifest");
    }
    std::map<std::string, std::pair<ad::Shape, std::vector<double>>> out;
    std::size_t expect = 0;
    for (const auto& t : manifest.at("tensors")) {
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      const auto shape = t.at("shape").get<ad::Shape>();
      if (offset != expect || offset + 8 * count > blob.size()) {
        throw ParseError("checkpoint '" + stem + "': tensor offsets do not tile the blob");
      }
      std::vector<double> v(count);
      for (std::size_t i = 0; i < count; ++i) v[i] = get_f64(blob.data() + offset + 8 * i);
      out[t.at("name").get<std::string>()] = {shape, std::move(v)};
      expect = offset + 8 * count;
    }
    if (expect != blob.size()) throw ParseError("checkpoint '" + stem + "': tensor offsets do not tile the blob");
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest '" + stem + ".json': " + e.what());
  }
}

void restore(Tensor& dst, const std::string& name,
             const std::map<std::string, std::pair<ad::Shape, std::vector<double>>>& blob) {
  auto it = blob.find(name);
  if (it == blob.end()) throw ParseError("checkpoint lacks tensor '" + name + "'");
  if (it->second.first != dst.shape()) throw ShapeError("checkpoint tensor '" + name + "' has the wrong shape");
  std::copy(it->second.second.begin(), it->second.second.end(), dst.values().begin());
}

}  // namespace

void Trainer::save(const std::string& stem) const {
  std::vector<unsigned char> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : layout_entries(model_.params, adam_)) {
    tensors.push_back({{"name", e.name}, {"shape", e.value->shape()}, {"offset", blob.size()},
                       {"count", e.value->size()}});
    for (double v : e.value->values()) put_f64(blob, v);
  }
  nlohmann::json m;
  m["format"] = "hypermvp-checkpoint";
  m["version"] = 1;
  m["step"] = step_;
  m["total_steps"] = total_;
  m["config_sha256"] = cfg_.hash();
  m["config"] = cfg_.entries();
  m["adam_step"] = adam_.step;
  m["rng_state"] = rng_.state();
  m["blob"] = fs::path(stem + ".bin").filename().string();
  m["blob_bytes"] = blob.size();
  m["blob_sha256"] = render::sha256_hex(blob);
  m["dtype"] = "f64le";
  m["tensors"] = std::move(tensors);
  if (auto dir = fs::path(stem).parent_path(); !dir.empty()) fs::create_directories(dir);
  write_bytes(stem + ".bin", blob.data(), blob.size());
  const std::string text = m.dump(1) + "\n";
  write_bytes(stem + ".json", text.data(), text.size());
}

void Trainer::load(const std::string& stem) {
  const nlohmann::json m = read_manifest(stem);
  const auto hash = m.value("config_sha256", std::string());
  if (hash != cfg_.hash()) {
    throw Error("checkpoint '" + stem + "' was written with a different configuration");
  }
  const auto blob = read_blob(stem, m);
  AdamState adam = adam_init(model_.params);
  nn::ParamStore params = model_.params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    restore(params.value(i), params.name(i), blob);
    restore(adam.m[i], "adam.m/" + params.name(i), blob);
    restore(adam.v[i], "adam.v/" + params.name(i), blob);
  }
  Rng rng = rng_;
  try {
    adam.step = m.at("adam_step").get<std::size_t>();
    rng.set_state(m.at("rng_state").get<std::string>());
    step_ = m.at("step").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest '" + stem + ".json': " + e.what());
  }
  model_.params = std::move(params);
  adam_ = std::move(adam);
  rng_ = rng;
}

CheckpointInfo read_checkpoint_info(const std::string& stem) {
  CheckpointInfo info;
  info.manifest = read_manifest(stem);
  try {
    info.step = info.manifest.at("step").get<std::size_t>();
    info.config_hash = info.manifest.at("config_sha256").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest '" + stem + ".json': " + e.what());
  }
  return info;
}

void load_parameters(nn::ParamStore& params, const std::string& stem) {
  const auto blob = read_blob(stem, read_manifest(stem));
  for (std::size_t i = 0; i < params.size(); ++i) restore(params.value(i), params.name(i), blob);
}

TrainConfig checkpoint_config(const std::string& stem) {
  const nlohmann::json m = read_manifest(stem);
  TrainConfig cfg = TrainConfig::toy();
  try {
    for (const auto& [k, v] : m.at("config").items()) cfg.set(k, v.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest '" + stem + ".json': " + e.what());
  }
  return cfg;
}

// ---- run --------------------------------------------------------------------

RunResult run_training(const TrainConfig& cfg, const Dataset& data, const RunOptions& opts) {
  Trainer t(cfg, data);
  if (!opts.resume.empty()) t.load(opts.resume);
  const std::size_t end = opts.stop_at ? std::min(opts.stop_at, t.total_steps()) : t.total_steps();

  std::ofstream log;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    const fs::path cfg_path = fs::path(opts.out_dir) / "config.txt";
    const std::string text = cfg.to_text();
    write_bytes(cfg_path, text.data(), text.size());
    const fs::path log_path = fs::path(opts.out_dir) / "train_log.jsonl";
    log.open(log_path, opts.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw Error("cannot write '" + log_path.string() + "': " + std::strerror(errno));
  }

  RunResult result;
  while (t.step() < end) {
    StepRecord rec = t.train_step();
    if (log.is_open()) {
      log << rec.to_json().dump() << "\n";
      log.flush();
      if (!log) throw Error("log write failed: " + std::string(std::strerror(errno)));
    }
    if (opts.progress && (rec.step % std::max<std::size_t>(opts.progress_every, 1) == 0 || rec.step == end)) {
      char line[200];
      std::snprintf(line, sizeof line, "step %zu/%zu  L_pretrain %.5f  L_intra %.5f  L_corr %.4f  lr %.3g  %.2fs\n",
                    rec.step, t.total_steps(), rec.report.pretrain, rec.report.intra, rec.report.corr, rec.lr,
                    rec.seconds);
      *opts.progress << line << std::flush;
    }
    result.history.push_back(std::move(rec));
    if (!opts.out_dir.empty() && opts.checkpoint_every && t.step() % opts.checkpoint_every == 0 && t.step() != end) {
      t.save((fs::path(opts.out_dir) / ("checkpoint_step" + std::to_string(t.step()))).string());
    }
  }
  if (!opts.out_dir.empty()) {
    result.checkpoint = (fs::path(opts.out_dir) / "checkpoint").string();
    t.save(result.checkpoint);
  }
  return result;
}

}  // namespace hypermvp::train
