#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "featkit/datagen.hpp"
#include "featkit/diffcore.hpp"
#include "featkit/eval.hpp"
#include "featkit/losses.hpp"
#include "featkit/network.hpp"

namespace featkit::train {

/// Ablation switches. Each gates exactly one loss slot (and the computation
/// feeding it); the network architecture itself never changes, so disabling
/// one component leaves the other slots' values untouched on the same batch.
struct Toggles {
  bool psrd = true;  // teacher relation distillation (the l_dis slot)
  bool eag = true;   // edge supervision (the l_edge slot)
  bool wsc = true;   // group-contrastive supervision (the l_wsc slot)
};

/// Full-scale reference defaults (lr/decay/batch/epochs/M/T); desk runs
/// shrink batch, steps, width, and resolution through the same fields.
struct TrainConfig {
  double lr = 0.001;
  double weight_decay = 0.0001;
  double momentum = 0.9;
  int batch = 14;  // desk runs use 4
  int epochs = 30;
  int steps_per_epoch = 100;
  double margin_m = 0.07;      // contrastive margin M
  double temperature_t = 5.0;  // contrastive temperature T
  Toggles toggles;

  std::uint64_t seed = 1;
  double width_factor = 1.0;
  int image_size = 64;  // square synthetic scenes, multiple of 8, >= 32
  int n_shapes = 8;
  datagen::PairParams pair_params;

  int max_triplets = 128;  // correspondence subsample per pair for l_des
  int wsc_points = 64;     // stratified sample cap per image for l_wsc

  int checkpoint_every = 0;  // steps between checkpoint writes; 0 = final only
  int eval_every = 0;        // steps between held-out snapshots; 0 = final only
  int eval_pairs = 6;        // held-out pairs per snapshot; 0 disables eval
  eval::ExtractConfig eval_extract;

  int prefetch_workers = 0;  // 0 = generate batches on the training thread

  std::string out_checkpoint;  // "" = keep the result in memory only
  std::string log_path;        // "" = do not write the JSONL log
  std::string resume_from;     // "" = fresh init from the seed
};

/// lr and T must be positive, M non-negative, sizes/counts in range.
void validate(const TrainConfig& cfg);

/// Loss slots of one optimization step, averaged over the batch.
struct StepStats {
  double l_det = 0.0;
  double l_des = 0.0;
  double l_dis = 0.0;
  double l_edge = 0.0;
  double l_wsc = 0.0;
  double total = 0.0;
};

/// Held-out synthetic matching quality at a point in training.
struct EvalSnapshot {
  double mma3 = 0.0;
  double auc5 = 0.0;
  double mean_matches = 0.0;
};

/// Append-only training record. Serialized as JSON-lines with sorted keys
/// and no timestamps, so identical runs produce identical bytes.
struct TrainLog {
  std::vector<StepStats> steps;
  std::vector<std::pair<int, EvalSnapshot>> evals;  // (1-based step, snapshot)
};

std::string log_to_jsonl(const TrainLog& log);
void write_log(const std::string& path, const TrainLog& log);

/// Per-parameter momentum buffers, keyed like ModelParams::arrays.
struct OptimizerState {
  std::map<std::string, diff::Array> velocity;
};

/// Deterministic batch for one step; also the prefetch worker's recipe.
std::vector<datagen::TrainingPair> make_batch(const TrainConfig& cfg, int step);

/// Held-out pair `index`, drawn from a stream disjoint from every batch.
datagen::TrainingPair make_holdout_pair(const TrainConfig& cfg, int index);

/// Forward both images of every pair, average the enabled loss slots over
/// the batch, backprop, and apply one SGD-with-momentum update with
/// decoupled weight decay. A non-finite slot aborts, naming the component.
StepStats train_step(net::ModelParams& model, OptimizerState& opt,
                     const std::vector<datagen::TrainingPair>& batch, const TrainConfig& cfg,
                     int step);

/// The same batch loss without gradients or an update (re-evaluation and
/// toggle-independence checks).
StepStats batch_loss(const net::ModelParams& model,
                     const std::vector<datagen::TrainingPair>& batch, const TrainConfig& cfg,
                     int step);

/// Matching quality of the current parameters on the held-out stream.
EvalSnapshot evaluate_on_holdout(const net::ModelParams& model, const TrainConfig& cfg);

struct TrainResult {
  net::ModelParams model;
  TrainLog log;
};

/// The full loop: init (or resume), epochs x steps_per_epoch steps, periodic
/// atomic checkpoints and eval snapshots, final checkpoint + log emission.
TrainResult run_training(const TrainConfig& cfg);

}  // namespace featkit::train
