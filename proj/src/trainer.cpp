#include "featkit/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <utility>

#include "featkit/geometry.hpp"
#include "featkit/image_io.hpp"
#include "featkit/rng.hpp"
#include "featkit/teacher.hpp"
#include "json.hpp"

namespace featkit::train {

namespace {

using featkit::rng::Rng;

// Disjoint seed streams: init, batches, the held-out set, per-pair sampling.
constexpr std::uint64_t kInitSalt = 7;
constexpr std::uint64_t kBatchSalt = 59;
constexpr std::uint64_t kHoldoutSalt = 101;
constexpr std::uint64_t kSampleSalt = 71;

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt, std::uint64_t index) {
  return Rng::derive(Rng::derive(seed, salt), index);
}

double quarter_coord(double v, int dim4) {
  return std::clamp((v + 0.5) / 4.0 - 0.5, 0.0, dim4 - 1.0);
}

diff::Array label_array(const datagen::SyntheticScene& scene) {
  diff::Array labels({1, 1, scene.h(), scene.w()});
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    labels[i] = scene.keypoint_labels[static_cast<std::size_t>(i)];
  }
  return labels;
}

diff::Var halved_sum(diff::Var a, diff::Var b) { return diff::mul_scalar(diff::add(a, b), 0.5); }

// Unit-norm descriptor rows and attention weights at image-space points,
// read off the quarter-resolution maps.
diff::Var descriptor_rows_at(const net::NetworkOutputs& out,
                             const std::vector<std::pair<double, double>>& img_pts) {
  const diff::Var& d = out.descriptors;  // [1, D, h4, w4]
  const int dim = d.shape()[1], h4 = d.shape()[2], w4 = d.shape()[3];
  std::vector<std::pair<double, double>> pts;
  pts.reserve(img_pts.size());
  for (const auto& p : img_pts) {
    pts.push_back({quarter_coord(p.first, w4), quarter_coord(p.second, h4)});
  }
  return diff::l2_normalize_lastdim(diff::bilinear_sample(diff::reshape(d, {dim, h4, w4}), pts));
}

diff::Var attention_at(const net::NetworkOutputs& out,
                       const std::vector<std::pair<double, double>>& img_pts) {
  const diff::Var& a = out.att;  // [1, 1, h4, w4]
  const int h4 = a.shape()[2], w4 = a.shape()[3];
  std::vector<std::pair<double, double>> pts;
  pts.reserve(img_pts.size());
  for (const auto& p : img_pts) {
    pts.push_back({quarter_coord(p.first, w4), quarter_coord(p.second, h4)});
  }
  diff::Var col = diff::bilinear_sample(diff::reshape(a, {1, h4, w4}), pts);  // [N, 1]
  return diff::reshape(col, {static_cast<int>(img_pts.size())});
}

// Attention-weighted triplet loss over a deterministic subsample of the
// pair's exact correspondences.
diff::Var descriptor_loss(diff::Tape& t, const net::NetworkOutputs& out1,
                          const net::NetworkOutputs& out2, const datagen::TrainingPair& pair,
                          const TrainConfig& cfg, std::uint64_t seed) {
  std::vector<geom::Correspondence> corr = pair.correspondences;
  if (static_cast<int>(corr.size()) > cfg.max_triplets) {
    Rng rng(seed);
    for (int i = 0; i < cfg.max_triplets; ++i) {
      const int j = i + static_cast<int>(
                            rng.uniform_int(0, static_cast<std::int64_t>(corr.size()) - 1 - i));
      std::swap(corr[static_cast<std::size_t>(i)], corr[static_cast<std::size_t>(j)]);
    }
    corr.resize(static_cast<std::size_t>(cfg.max_triplets));
  }
  if (corr.size() < 2) return loss::zero_scalar(t);

  std::vector<std::pair<double, double>> p1, p2;
  loss::DescriptorTriplets trip;
  for (const auto& c : corr) {
    p1.push_back({c.p1.x, c.p1.y});
    p2.push_back({c.p2.x, c.p2.y});
    trip.match_x.push_back(c.p2.x);
    trip.match_y.push_back(c.p2.y);
  }
  trip.anchors = descriptor_rows_at(out1, p1);
  trip.positives = descriptor_rows_at(out2, p2);
  trip.anchor_attention = attention_at(out1, p1);
  trip.positive_attention = attention_at(out2, p2);
  return loss::loss_des(trip);
}

// Group-contrastive term on the reference image's semantic grouping.
diff::Var wsc_loss(diff::Tape& t, const net::NetworkOutputs& out1,
                   const datagen::SyntheticScene& scene, const TrainConfig& cfg,
                   std::uint64_t seed) {
  const auto pts = loss::sample_group_points(scene.grouping,
                                             static_cast<std::size_t>(cfg.wsc_points), seed);
  if (pts.size() < 2) return loss::zero_scalar(t);

  std::vector<std::pair<double, double>> img_pts;
  std::vector<std::uint16_t> groups;
  for (const auto& p : pts) {
    img_pts.push_back({static_cast<double>(p.x), static_cast<double>(p.y)});
    groups.push_back(p.group);
  }
  const loss::GroupDistances gd = loss::group_distances(descriptor_rows_at(out1, img_pts), groups);
  if (gd.degenerate()) return loss::zero_scalar(t);
  return loss::loss_wsc(gd.d_pos, gd.d_neg, cfg.margin_m, cfg.temperature_t);
}

// Relation distillation of the guidance head against the teacher rows.
diff::Var relation_loss(diff::Tape& t, const net::NetworkOutputs& out,
                        const teacher::TeacherFeatureMap& f) {
  diff::Var student = teacher::relation_matrix(diff::chw_to_rows(out.pyramid.c4d));
  return loss::loss_dis(student, t.constant(teacher::relation_matrix(f)));
}

loss::LossBundle pair_loss(diff::Tape& t, const net::BoundParams& bp,
                           const datagen::TrainingPair& pair, const TrainConfig& cfg,
                           std::uint64_t global_index) {
  const net::NetworkOutputs out1 =
      net::forward(t.constant(img::to_gray_array(pair.scene1.image)), bp);
  const net::NetworkOutputs out2 =
      net::forward(t.constant(img::to_gray_array(pair.scene2.image)), bp);
  const std::uint64_t sub = mix(cfg.seed, kSampleSalt, global_index);

  diff::Var l_det = halved_sum(loss::loss_det(out1.det_logits, label_array(pair.scene1)),
                               loss::loss_det(out2.det_logits, label_array(pair.scene2)));
  diff::Var l_des = descriptor_loss(t, out1, out2, pair, cfg, Rng::derive(sub, 1));
  diff::Var l_dis = cfg.toggles.psrd ? halved_sum(relation_loss(t, out1, pair.f1),
                                                  relation_loss(t, out2, pair.f2))
                                     : loss::zero_scalar(t);
  diff::Var l_edge = cfg.toggles.eag
                         ? halved_sum(loss::loss_edge(out1.edge_pred, pair.scene1.edge),
                                      loss::loss_edge(out2.edge_pred, pair.scene2.edge))
                         : loss::zero_scalar(t);
  diff::Var l_wsc = cfg.toggles.wsc ? wsc_loss(t, out1, pair.scene1, cfg, Rng::derive(sub, 2))
                                    : loss::zero_scalar(t);
  return loss::total_loss(l_det, l_des, l_dis, l_edge, l_wsc);
}

loss::LossBundle batch_bundle(diff::Tape& t, const net::BoundParams& bp,
                              const std::vector<datagen::TrainingPair>& batch,
                              const TrainConfig& cfg, int step) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<loss::LossBundle> per;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::uint64_t global =
        static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch) + b;
    per.push_back(pair_loss(t, bp, batch[b], cfg, global));
  }
  const double inv = 1.0 / static_cast<double>(per.size());
  auto slot_mean = [&](diff::Var loss::LossBundle::* slot) {
    diff::Var acc = per[0].*slot;
    for (std::size_t b = 1; b < per.size(); ++b) acc = diff::add(acc, per[b].*slot);
    return diff::mul_scalar(acc, inv);
  };
  return loss::total_loss(slot_mean(&loss::LossBundle::l_det), slot_mean(&loss::LossBundle::l_des),
                          slot_mean(&loss::LossBundle::l_dis),
                          slot_mean(&loss::LossBundle::l_edge),
                          slot_mean(&loss::LossBundle::l_wsc));
}

StepStats stats_of(const loss::LossBundle& b, int step) {
  StepStats s;
  s.l_det = b.l_det.value()[0];
  s.l_des = b.l_des.value()[0];
  s.l_dis = b.l_dis.value()[0];
  s.l_edge = b.l_edge.value()[0];
  s.l_wsc = b.l_wsc.value()[0];
  s.total = b.total.value()[0];
  const std::pair<const char*, double> slots[] = {
      {"l_det", s.l_det}, {"l_des", s.l_des}, {"l_dis", s.l_dis},
      {"l_edge", s.l_edge}, {"l_wsc", s.l_wsc}, {"total", s.total}};
  for (const auto& [name, v] : slots) {
    if (!std::isfinite(v)) {
      throw std::runtime_error("training aborted: " + std::string(name) +
                               " is non-finite at step " + std::to_string(step + 1));
    }
  }
  return s;
}

void write_checkpoint_atomic(const std::string& path, const net::ModelParams& p) {
  const std::string tmp = path + ".tmp";
  net::save_checkpoint(tmp, p);
  std::filesystem::rename(tmp, path);
  std::filesystem::rename(tmp + ".json", path + ".json");
}

// Workers claim step indices from a counter and park finished batches until
// the training thread takes them in order. The claim counter is bounded
// against the consume counter, so the buffer can never grow past `cap` and
// every claimed step is insertable (no deadlock).
class BatchPrefetcher {
 public:
  BatchPrefetcher(const TrainConfig& cfg, int total_steps, int workers)
      : cfg_(cfg), total_(total_steps), cap_(2 * workers + 2) {
    for (int w = 0; w < workers; ++w) {
      threads_.emplace_back([this] { work(); });
    }
  }

  ~BatchPrefetcher() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::vector<datagen::TrainingPair> take(int step) {
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [&] { return error_ || ready_.count(step) > 0; });
    if (error_) std::rethrow_exception(error_);
    auto batch = std::move(ready_.at(step));
    ready_.erase(step);
    consumed_ = step + 1;
    cv_.notify_all();
    return batch;
  }

 private:
  void work() {
    for (;;) {
      int step;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || error_ || next_claim_ - consumed_ < cap_; });
        if (stop_ || error_ || next_claim_ >= total_) return;
        step = next_claim_++;
      }
      try {
        auto batch = make_batch(cfg_, step);
        std::lock_guard<std::mutex> lk(mu_);
        ready_.emplace(step, std::move(batch));
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu_);
        if (!error_) error_ = std::current_exception();
      }
      cv_.notify_all();
    }
  }

  const TrainConfig& cfg_;
  const int total_;
  const int cap_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<int, std::vector<datagen::TrainingPair>> ready_;
  int next_claim_ = 0;
  int consumed_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
  std::vector<std::thread> threads_;
};

}  // namespace

void validate(const TrainConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(cfg.temperature_t > 0.0)) throw std::invalid_argument("T must be > 0");
  if (cfg.margin_m < 0.0) throw std::invalid_argument("M must be >= 0");
  if (cfg.weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
    throw std::invalid_argument("momentum must lie in [0, 1)");
  if (cfg.batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (cfg.steps_per_epoch < 1) throw std::invalid_argument("steps_per_epoch must be >= 1");
  if (cfg.image_size < 32 || cfg.image_size % 8 != 0)
    throw std::invalid_argument("image_size must be a multiple of 8 and >= 32");
  if (cfg.n_shapes < 1) throw std::invalid_argument("n_shapes must be >= 1");
  if (cfg.max_triplets < 0 || cfg.wsc_points < 0 || cfg.eval_pairs < 0 ||
      cfg.checkpoint_every < 0 || cfg.eval_every < 0 || cfg.prefetch_workers < 0) {
    throw std::invalid_argument("counts must be non-negative");
  }
}

std::vector<datagen::TrainingPair> make_batch(const TrainConfig& cfg, int step) {
  std::vector<datagen::TrainingPair> batch;
  for (int b = 0; b < cfg.batch; ++b) {
    const std::uint64_t global =
        static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch) +
        static_cast<std::uint64_t>(b);
    datagen::SyntheticScene scene = datagen::generate_scene(
        mix(cfg.seed, kBatchSalt, 2 * global), cfg.image_size, cfg.image_size, cfg.n_shapes);
    batch.push_back(
        datagen::generate_pair(scene, cfg.pair_params, mix(cfg.seed, kBatchSalt, 2 * global + 1)));
  }
  return batch;
}

datagen::TrainingPair make_holdout_pair(const TrainConfig& cfg, int index) {
  const std::uint64_t i = static_cast<std::uint64_t>(index);
  datagen::SyntheticScene scene = datagen::generate_scene(mix(cfg.seed, kHoldoutSalt, 2 * i),
                                                          cfg.image_size, cfg.image_size,
                                                          cfg.n_shapes);
  return datagen::generate_pair(scene, cfg.pair_params, mix(cfg.seed, kHoldoutSalt, 2 * i + 1));
}

StepStats train_step(net::ModelParams& model, OptimizerState& opt,
                     const std::vector<datagen::TrainingPair>& batch, const TrainConfig& cfg,
                     int step) {
  diff::Tape t;
  net::BoundParams bp = net::bind(t, model, /*requires_grad=*/true);
  const loss::LossBundle bundle = batch_bundle(t, bp, batch, cfg, step);
  const StepStats stats = stats_of(bundle, step);
  t.backward(bundle.total);

  // SGD with momentum; weight decay decoupled from the gradient path.
  const double keep = 1.0 - cfg.lr * cfg.weight_decay;
  for (auto& [name, arr] : model.arrays) {
    const diff::Array& g = bp.vars.at(name).grad();
    diff::Array& v = opt.velocity.try_emplace(name, diff::Array(arr.shape)).first->second;
    for (std::int64_t i = 0; i < arr.numel(); ++i) {
      v[i] = cfg.momentum * v[i] + g[i];
      arr[i] = keep * arr[i] - cfg.lr * v[i];
    }
  }
  return stats;
}

StepStats batch_loss(const net::ModelParams& model,
                     const std::vector<datagen::TrainingPair>& batch, const TrainConfig& cfg,
                     int step) {
  diff::Tape t;
  t.set_grad_enabled(false);
  net::BoundParams bp = net::bind(t, model, /*requires_grad=*/false);
  return stats_of(batch_bundle(t, bp, batch, cfg, step), step);
}

EvalSnapshot evaluate_on_holdout(const net::ModelParams& model, const TrainConfig& cfg) {
  std::vector<eval::PairResult> results;
  double match_sum = 0.0;
  for (int i = 0; i < cfg.eval_pairs; ++i) {
    const datagen::TrainingPair pair = make_holdout_pair(cfg, i);
    const eval::Features f1 = eval::extract_features(model, pair.scene1.image, cfg.eval_extract);
    const eval::Features f2 = eval::extract_features(model, pair.scene2.image, cfg.eval_extract);

    eval::PairResult pr;
    pr.sequence = "holdout";
    pr.pair_index = i + 2;
    pr.n_keypoints1 = static_cast<int>(f1.points.size());
    pr.n_keypoints2 = static_cast<int>(f2.points.size());
    if (!f1.points.empty() && !f2.points.empty()) {
      for (const eval::Match& m : eval::mutual_nn_match(f1.descriptors, f2.descriptors)) {
        const eval::Keypoint& a = f1.points[static_cast<std::size_t>(m.i)];
        const eval::Keypoint& b = f2.points[static_cast<std::size_t>(m.j)];
        double err;
        try {
          err = geom::reprojection_error(pair.map, {a.x, a.y}, {b.x, b.y});
        } catch (const std::domain_error&) {
          err = std::numeric_limits<double>::infinity();
        }
        pr.errors.push_back(err);
      }
    }
    match_sum += static_cast<double>(pr.errors.size());
    results.push_back(std::move(pr));
  }

  EvalSnapshot snap;
  if (!results.empty()) {
    const eval::MatchReport report = eval::mma_curve(std::move(results));
    snap.mma3 = report.mma[3];
    snap.auc5 = report.auc5;
    snap.mean_matches = match_sum / static_cast<double>(cfg.eval_pairs);
  }
  return snap;
}

std::string log_to_jsonl(const TrainLog& log) {
  std::string out;
  std::size_t next_eval = 0;
  auto emit_evals_through = [&](int step) {
    while (next_eval < log.evals.size() && log.evals[next_eval].first <= step) {
      const auto& [at, snap] = log.evals[next_eval];
      nlohmann::json line;
      line["type"] = "eval";
      line["step"] = at;
      line["mma3"] = snap.mma3;
      line["auc5"] = snap.auc5;
      line["mean_matches"] = snap.mean_matches;
      out += line.dump();
      out += '\n';
      ++next_eval;
    }
  };

  emit_evals_through(0);
  for (std::size_t i = 0; i < log.steps.size(); ++i) {
    const StepStats& s = log.steps[i];
    nlohmann::json line;
    line["type"] = "step";
    line["step"] = static_cast<int>(i) + 1;
    line["l_det"] = s.l_det;
    line["l_des"] = s.l_des;
    line["l_dis"] = s.l_dis;
    line["l_edge"] = s.l_edge;
    line["l_wsc"] = s.l_wsc;
    line["total"] = s.total;
    out += line.dump();
    out += '\n';
    emit_evals_through(static_cast<int>(i) + 1);
  }
  emit_evals_through(log.evals.empty() ? 0 : log.evals.back().first);
  return out;
}

void write_log(const std::string& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write training log: " + path);
  out << log_to_jsonl(log);
}

TrainResult run_training(const TrainConfig& cfg) {
  validate(cfg);

  TrainResult result;
  if (cfg.resume_from.empty()) {
    net::ArchConfig arch;
    arch.width_factor = cfg.width_factor;
    result.model = net::init_params(arch, Rng::derive(cfg.seed, kInitSalt));
  } else {
    result.model = net::load_checkpoint(cfg.resume_from);
    if (result.model.arch.width_factor != cfg.width_factor) {
      throw std::runtime_error("resume rejected: checkpoint width_factor " +
                               std::to_string(result.model.arch.width_factor) +
                               " does not match configured " + std::to_string(cfg.width_factor));
    }
  }

  OptimizerState opt;
  const int total_steps = cfg.epochs * cfg.steps_per_epoch;
  std::unique_ptr<BatchPrefetcher> prefetch;
  if (cfg.prefetch_workers > 0 && total_steps > 0) {
    prefetch = std::make_unique<BatchPrefetcher>(cfg, total_steps, cfg.prefetch_workers);
  }

  for (int step = 0; step < total_steps; ++step) {
    const std::vector<datagen::TrainingPair> batch =
        prefetch ? prefetch->take(step) : make_batch(cfg, step);
    result.log.steps.push_back(train_step(result.model, opt, batch, cfg, step));

    const int done = step + 1;
    if (cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != total_steps &&
        cfg.eval_pairs > 0) {
      result.log.evals.push_back({done, evaluate_on_holdout(result.model, cfg)});
    }
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 &&
        !cfg.out_checkpoint.empty()) {
      write_checkpoint_atomic(cfg.out_checkpoint, result.model);
    }
  }

  if (cfg.eval_pairs > 0) {
    result.log.evals.push_back({total_steps, evaluate_on_holdout(result.model, cfg)});
  }
  if (!cfg.out_checkpoint.empty()) write_checkpoint_atomic(cfg.out_checkpoint, result.model);
  if (!cfg.log_path.empty()) write_log(cfg.log_path, result.log);
  return result;
}

}  // namespace featkit::train
