#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "hypermvp/error.hpp"
#include "hypermvp/inspect.hpp"
#include "hypermvp/render.hpp"
#include "hypermvp/trainer.hpp"
#include "hypermvp/verify.hpp"

namespace fs = std::filesystem;
using namespace hypermvp;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void emit_json(const nlohmann::json& j, const std::string& out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
    return;
  }
  render::write_file(out, std::vector<unsigned char>(text.begin(), text.end()));
}

// A single sample from a cloud file or a synthetic index.
train::Sample one_sample(const std::string& input, long synthetic_index, const train::TrainConfig& cfg) {
  if (!input.empty()) {
    return train::render_dataset({render::load_point_cloud(input)}, {input}, cfg.model.resolution).samples.at(0);
  }
  if (synthetic_index < 0) throw Error("give --input or --synthetic-index");
  return train::synthetic_dataset(cfg, static_cast<std::size_t>(synthetic_index), 1).samples.at(0);
}

struct RenderArgs {
  std::vector<std::string> inputs;
  std::size_t synthetic = 0;
  std::uint64_t data_seed = 1;
  std::size_t points = 4096;
  std::string out;
  std::size_t resolution = 224;
  double splat = -1.0;
};

int run_render(const RenderArgs& a) {
  render::RenderConfig rc;
  rc.resolution = a.resolution;
  rc.splat_radius = a.splat;
  std::vector<render::PointCloud> clouds;
  std::vector<std::string> sources, stems;
  for (const auto& in : a.inputs) {
    clouds.push_back(render::load_point_cloud(in));
    sources.push_back(in);
    stems.push_back(fs::path(in).stem().string());
  }
  for (std::size_t i = 0; i < a.synthetic; ++i) {
    clouds.push_back(render::synthetic_cloud(a.data_seed, i, a.points));
    sources.push_back("synthetic:" + std::to_string(a.data_seed) + ":" + std::to_string(i));
    stems.push_back("synthetic_" + std::to_string(i));
  }
  if (clouds.empty()) throw Error("nothing to render: give input files or --synthetic N");
  const auto renders = render::render_many(clouds, rc, render::prefetch_threads());
  for (std::size_t i = 0; i < renders.size(); ++i) {
    render::write_render(renders[i], sources[i], a.out, stems[i], rc);
    std::cout << "rendered " << sources[i] << " -> " << (fs::path(a.out) / (stems[i] + ".json")).string() << "\n";
  }
  return 0;
}

struct PretrainArgs {
  std::string config;
  std::string preset;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::string data_dir;
  std::string out;
  std::size_t stop_at = 0;
  std::string resume;
  std::size_t checkpoint_every = 0;
  bool no_inter = false, no_corr = false, no_etl_patch = false, no_etl_mask = false;
  bool quiet = false;
};

int run_pretrain(const PretrainArgs& a) {
  train::TrainConfig cfg = train::TrainConfig::toy();
  if (!a.config.empty()) cfg = train::load_config(a.config);
  if (!a.preset.empty()) {
    if (!a.config.empty()) throw Error("give either --config or --preset, not both");
    cfg.set("preset", a.preset);
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.steps) cfg.steps = *a.steps;
  if (!a.data_dir.empty()) cfg.data_dir = a.data_dir;
  if (a.no_inter) cfg.use_inter = false;
  if (a.no_corr) cfg.use_corr = false;
  if (a.no_etl_patch) cfg.use_etl_patch = false;
  if (a.no_etl_mask) cfg.use_etl_mask = false;
  train::apply_overrides(cfg, a.sets);
  cfg.validate();

  if (!a.quiet) std::cerr << "preparing " << (cfg.data_dir.empty() ? "synthetic" : cfg.data_dir) << " data\n";
  const train::Dataset data = train::load_dataset(cfg);
  train::RunOptions o;
  o.out_dir = a.out;
  o.stop_at = a.stop_at;
  o.resume = a.resume;
  o.checkpoint_every = a.checkpoint_every;
  o.progress = a.quiet ? nullptr : &std::cerr;
  const train::RunResult r = train::run_training(cfg, data, o);
  const auto info = train::read_checkpoint_info(r.checkpoint);
  std::cout << "checkpoint " << r.checkpoint << " step " << info.step << " sha256 "
            << info.manifest.at("blob_sha256").get<std::string>() << "\n";
  if (!r.history.empty()) std::cout << "final L_pretrain " << r.history.back().report.pretrain << "\n";
  return 0;
}

struct ReconstructArgs {
  std::string checkpoint;
  std::string input;
  long synthetic_index = -1;
  std::string out;
  std::string stem = "recon";
  std::uint64_t mask_seed = 0;
  std::size_t anchor = 0;
};

int run_reconstruct(const ReconstructArgs& a) {
  const train::TrainConfig cfg = train::checkpoint_config(a.checkpoint);
  model::Model m(cfg.model, cfg.seed);
  train::load_parameters(m.params, a.checkpoint);
  const train::Sample s = one_sample(a.input, a.synthetic_index, cfg);
  const auto r = inspect::reconstruct(m, s, a.mask_seed, a.anchor);
  const auto manifest = inspect::write_reconstruction(r, cfg.model.resolution, a.out, a.stem);
  std::cout << "wrote " << manifest["files"].size() << " images to " << a.out << "  L_intra " << r.intra_loss
            << "  L_inter " << r.inter_loss << "\n";
  return 0;
}

struct InspectArgs {
  std::string matrices;
  std::string embeddings;
  std::string input;
  long synthetic_index = -1;
  std::string checkpoint;
  std::string preset = "toy";
  std::uint64_t seed = 0;
  std::uint64_t mask_seed = 0;
  std::size_t k = 0;
  std::string out;
};

int run_inspect(const InspectArgs& a) {
  const int modes = !a.matrices.empty() + !a.embeddings.empty() + (!a.input.empty() || a.synthetic_index >= 0);
  if (modes != 1) throw Error("give exactly one of --matrices, --embeddings, or a cloud (--input / --synthetic-index)");
  if (!a.matrices.empty()) {
    nlohmann::json in = read_json(a.matrices);
    if (a.k) in["k"] = a.k;
    emit_json(inspect::inspect_matrices(in), a.out);
    return 0;
  }
  if (!a.embeddings.empty()) {
    nlohmann::json in = read_json(a.embeddings);
    if (a.k) in["k"] = a.k;
    emit_json(inspect::inspect_embeddings(in), a.out);
    return 0;
  }
  train::TrainConfig cfg;
  if (!a.checkpoint.empty()) {
    cfg = train::checkpoint_config(a.checkpoint);
  } else {
    cfg.set("preset", a.preset);
    cfg.seed = a.seed;
  }
  model::Model m(cfg.model, cfg.seed);
  if (!a.checkpoint.empty()) train::load_parameters(m.params, a.checkpoint);
  const train::Sample s = one_sample(a.input, a.synthetic_index, cfg);
  emit_json(inspect::inspect_model(m, s, a.mask_seed, a.k, cfg.cone_boundary), a.out);
  return 0;
}

int run_verify(std::uint64_t seed) {
  const auto results = verify::run_all(seed);
  std::cout << verify::format_table(results);
  return verify::all_passed(results) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hypermvp: hyperbolic multiview masked-autoencoder pretraining"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  RenderArgs ra;
  auto* render_cmd = app.add_subcommand("render", "Render point clouds into five orthographic views");
  render_cmd->add_option("inputs", ra.inputs, "Point cloud files (.ply, .xyz, .xyzrgb, .txt)")->check(CLI::ExistingFile);
  render_cmd->add_option("--synthetic", ra.synthetic, "Also render N synthetic tabletop clouds");
  render_cmd->add_option("--data-seed", ra.data_seed, "Seed of the synthetic generator");
  render_cmd->add_option("--points", ra.points, "Points per synthetic cloud");
  render_cmd->add_option("-o,--out", ra.out, "Output directory")->required();
  render_cmd->add_option("--resolution", ra.resolution, "Image side in pixels");
  render_cmd->add_option("--splat", ra.splat, "Splat radius in pixels (default: resolution / 224)");

  PretrainArgs pa;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Pretrain the encoder and decoders");
  pretrain_cmd->add_option("-c,--config", pa.config, "key = value config file")->check(CLI::ExistingFile);
  pretrain_cmd->add_option("--preset", pa.preset, "toy or full")->check(CLI::IsMember({"toy", "full"}));
  pretrain_cmd->add_option("--set", pa.sets, "Override a config key: key=value (repeatable)");
  pretrain_cmd->add_option("--seed", pa.seed, "Run seed");
  pretrain_cmd->add_option("--steps", pa.steps, "Total optimizer steps");
  pretrain_cmd->add_option("--data-dir", pa.data_dir, "Directory of point clouds (default: synthetic)");
  pretrain_cmd->add_option("-o,--out", pa.out, "Run directory")->required();
  pretrain_cmd->add_option("--stop-at", pa.stop_at, "Stop after this many steps, keeping the full schedule");
  pretrain_cmd->add_option("--resume", pa.resume, "Checkpoint stem to resume from");
  pretrain_cmd->add_option("--checkpoint-every", pa.checkpoint_every, "Checkpoint cadence in steps");
  pretrain_cmd->add_flag("--no-inter", pa.no_inter, "Drop the inter-view reconstruction loss");
  pretrain_cmd->add_flag("--no-corr", pa.no_corr, "Drop the rank correlation loss");
  pretrain_cmd->add_flag("--no-etl-patch", pa.no_etl_patch, "Drop the CLS/patch entailment loss");
  pretrain_cmd->add_flag("--no-etl-mask", pa.no_etl_mask, "Drop the CLS/mask entailment loss");
  pretrain_cmd->add_flag("-q,--quiet", pa.quiet, "No progress output");

  ReconstructArgs ca;
  auto* recon_cmd = app.add_subcommand("reconstruct", "Write intra- and inter-view reconstructions as PNGs");
  recon_cmd->add_option("--checkpoint", ca.checkpoint, "Checkpoint stem (without .json/.bin)")->required();
  recon_cmd->add_option("-i,--input", ca.input, "Point cloud file")->check(CLI::ExistingFile);
  recon_cmd->add_option("--synthetic-index", ca.synthetic_index, "Synthetic cloud index instead of a file");
  recon_cmd->add_option("-o,--out", ca.out, "Output directory")->required();
  recon_cmd->add_option("--stem", ca.stem, "File name prefix");
  recon_cmd->add_option("--mask-seed", ca.mask_seed, "Seed of the mask plan");
  recon_cmd->add_option("--anchor", ca.anchor, "Anchor view index for inter-view reconstruction")
      ->check(CLI::Range(0, 4));

  std::uint64_t verify_seed = 0;
  auto* verify_cmd = app.add_subcommand("verify", "Run the geometry, gradient, loss, masking and render checks");
  verify_cmd->add_option("--seed", verify_seed, "Seed of the random checks");

  InspectArgs ia;
  auto* inspect_cmd = app.add_subcommand("inspect", "Dump distance matrices, neighbours, ranks and violations as JSON");
  inspect_cmd->add_option("--matrices", ia.matrices, "JSON with per-view D_E and D_L")->check(CLI::ExistingFile);
  inspect_cmd->add_option("--embeddings", ia.embeddings, "JSON with per-view cls, patches, masks")
      ->check(CLI::ExistingFile);
  inspect_cmd->add_option("-i,--input", ia.input, "Point cloud file")->check(CLI::ExistingFile);
  inspect_cmd->add_option("--synthetic-index", ia.synthetic_index, "Synthetic cloud index instead of a file");
  inspect_cmd->add_option("--checkpoint", ia.checkpoint, "Checkpoint stem for the encoder");
  inspect_cmd->add_option("--preset", ia.preset, "Fresh model preset when no checkpoint is given")
      ->check(CLI::IsMember({"toy", "full"}));
  inspect_cmd->add_option("--seed", ia.seed, "Fresh model seed");
  inspect_cmd->add_option("--mask-seed", ia.mask_seed, "Seed of the mask plan");
  inspect_cmd->add_option("-k,--k", ia.k, "Top-K neighbours (default min(8, P - 1))");
  inspect_cmd->add_option("-o,--out", ia.out, "Write JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*render_cmd) return run_render(ra);
    if (*pretrain_cmd) return run_pretrain(pa);
    if (*recon_cmd) return run_reconstruct(ca);
    if (*verify_cmd) return run_verify(verify_seed);
    if (*inspect_cmd) return run_inspect(ia);
  } catch (const TrainingHalted& e) {
    std::cerr << "training halted: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
