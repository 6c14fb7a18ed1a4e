#pragma once

// Pretraining: configuration, dataset, AdamW, schedule, the step loop and
// checkpoints.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypermvp/model.hpp"
#include "hypermvp/objectives.hpp"
#include "hypermvp/random.hpp"

namespace hypermvp::train {

using ad::Tensor;
using ad::Var;

struct TrainConfig {
  model::ModelConfig model;

  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double warmup_frac = 0.05;
  std::size_t batch = 8;
  std::size_t steps = 300;   // 0: derived from epochs and the dataset size
  std::size_t epochs = 0;
  std::uint64_t seed = 0;

  // data
  std::string data_dir;      // empty: synthetic clouds
  std::size_t dataset_size = 64;
  std::size_t points = 4096;
  std::uint64_t data_seed = 1;

  obj::LossWeights weights;
  std::size_t top_k = 0;     // 0: min(8, P - 1)
  double tau = 0.1;
  double cone_boundary = geo::kDefaultConeBoundary;

  bool use_corr = true;
  bool use_etl_patch = true;
  bool use_etl_mask = true;
  bool use_inter = true;

  static TrainConfig toy();
  static TrainConfig full();

  void validate() const;
  // key = value; unknown keys and malformed values throw ParseError.
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> entries() const;
  std::string to_text() const;
  std::string hash() const;
  std::size_t total_steps(std::size_t dataset_len) const;
};

// "preset" is applied first when present, then the remaining keys in file order.
TrainConfig parse_config(std::istream& in, const std::string& source = "<config>");
TrainConfig load_config(const std::string& path);
// "key=value" strings, applied in order.
void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& overrides);

// ---- data -------------------------------------------------------------------

struct Sample {
  std::string source;
  std::vector<Tensor> images;  // one [H*W, 3] per view
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t size() const { return samples.size(); }
};

Sample make_sample(const render::MultiviewRender& r, const std::string& source);
Dataset render_dataset(const std::vector<render::PointCloud>& clouds, const std::vector<std::string>& sources,
                       std::size_t resolution);
// Synthetic clouds [first, first + count) of data_seed.
Dataset synthetic_dataset(const TrainConfig& cfg, std::size_t first, std::size_t count);
// data_dir when set, synthetic otherwise.
Dataset load_dataset(const TrainConfig& cfg);
// Clouds past the training range, never seen during training.
Dataset held_out_dataset(const TrainConfig& cfg, std::size_t count);

// Sample index for the b-th item of a step; a fresh permutation per epoch.
std::size_t sample_index(std::uint64_t seed, std::size_t step, std::size_t b, std::size_t batch, std::size_t n);

// ---- optimizer --------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

AdamState adam_init(const nn::ParamStore& params);
void adamw_step(nn::ParamStore& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                double weight_decay, const AdamConfig& cfg = {});

// Linear warm-up over warmup_frac of total, cosine decay to 0 after.
double lr_schedule(std::size_t step, std::size_t total, double base, double warmup_frac = 0.05);

// ---- loop -------------------------------------------------------------------

struct StepDiagnostics {
  double max_residual = 0.0;       // over every lifted activation
  double min_mask_distance = 0.0;  // smallest pairwise distance between mask embeddings of one view
  std::size_t etl_skipped = 0;
};

struct StepRecord {
  std::size_t step = 0;  // 1-based count of completed updates
  double lr = 0.0;
  double seconds = 0.0;
  obj::LossReport report;
  StepDiagnostics diag;
  std::vector<std::size_t> anchors;

  nlohmann::json to_json() const;
};

// Loss terms of one sample, no optimizer state involved.
struct SampleLoss {
  Var total;
  obj::LossParts parts;
  double corr_literal = 0.0;
  StepDiagnostics diag;
};

SampleLoss sample_loss(const model::Model& m, const nn::Bound& p, const TrainConfig& cfg, const Sample& s,
                       std::uint64_t mask_seed, std::size_t anchor);

// Mean intra-view reconstruction loss over a dataset, masks seeded by seed.
double evaluate_intra(const model::Model& m, const Dataset& data, double mask_ratio, std::uint64_t seed);

class Trainer {
 public:
  Trainer(TrainConfig cfg, const Dataset& data);

  const TrainConfig& config() const { return cfg_; }
  const model::Model& model() const { return model_; }
  model::Model& model() { return model_; }
  std::size_t step() const { return step_; }
  std::size_t total_steps() const { return total_; }
  const AdamState& adam() const { return adam_; }
  const Rng& rng() const { return rng_; }

  // One update; throws TrainingHalted on a non-finite loss term.
  StepRecord train_step();

  void save(const std::string& stem) const;
  // Restores parameters, optimizer and generator state; the config hash must match.
  void load(const std::string& stem);

 private:
  TrainConfig cfg_;
  const Dataset* data_;
  model::Model model_;
  AdamState adam_;
  Rng rng_;
  std::size_t step_ = 0;
  std::size_t total_ = 0;
};

struct RunOptions {
  std::string out_dir;            // empty: nothing written
  std::size_t stop_at = 0;        // 0: run to the end of the schedule
  std::size_t checkpoint_every = 0;
  std::string resume;             // checkpoint stem
  std::ostream* progress = nullptr;
  std::size_t progress_every = 10;
};

struct RunResult {
  std::vector<StepRecord> history;
  std::string checkpoint;  // final checkpoint stem, if written
};

RunResult run_training(const TrainConfig& cfg, const Dataset& data, const RunOptions& opts);

// ---- checkpoints ------------------------------------------------------------

struct CheckpointInfo {
  std::size_t step = 0;
  std::string config_hash;
  nlohmann::json manifest;
};

// <stem>.bin holds f64 little-endian arrays; <stem>.json describes them.
CheckpointInfo read_checkpoint_info(const std::string& stem);
// Parameters only, for inference.
void load_parameters(nn::ParamStore& params, const std::string& stem);
TrainConfig checkpoint_config(const std::string& stem);

}  // namespace hypermvp::train
