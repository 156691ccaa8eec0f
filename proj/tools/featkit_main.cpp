// featkit: dataset synthesis, training, evaluation, ablation, signal dumps,
// and pair matching over the library modules.
//
// Exit codes: 0 success, 2 usage/input error, 3 runtime/model error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "featkit/datagen.hpp"
#include "featkit/eval.hpp"
#include "featkit/geometry.hpp"
#include "featkit/image_io.hpp"
#include "featkit/network.hpp"
#include "featkit/rng.hpp"
#include "featkit/teacher.hpp"
#include "featkit/trainer.hpp"
#include "json.hpp"

namespace diff = featkit::diff;
namespace datagen = featkit::datagen;
namespace eval = featkit::eval;
namespace geom = featkit::geom;
namespace img = featkit::img;
namespace net = featkit::net;
namespace teacher = featkit::teacher;
namespace train = featkit::train;
namespace fs = std::filesystem;
using featkit::rng::Rng;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// FEATKIT_VERBOSE=0 silences progress lines; the config echo always prints.
bool verbose() {
  const char* v = std::getenv("FEATKIT_VERBOSE");
  return v == nullptr || std::string(v) != "0";
}

void info(const std::string& line) {
  if (verbose()) std::cout << line << "\n";
}

void warn(const std::string& line) { std::cerr << "warning: " << line << "\n"; }

void echo_config(const json& resolved) { std::cout << "config " << resolved.dump() << "\n"; }

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt, std::uint64_t index) {
  return Rng::derive(Rng::derive(seed, salt), index);
}

std::pair<int, int> parse_size(const std::string& s) {
  const std::size_t x = s.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= s.size()) {
    throw std::invalid_argument("size must look like HxW, got '" + s + "'");
  }
  const int h = std::stoi(s.substr(0, x));
  const int w = std::stoi(s.substr(x + 1));
  if (h < 32 || w < 32 || h % 8 != 0 || w % 8 != 0) {
    throw std::invalid_argument("image size must be multiples of 8 and >= 32, got " + s);
  }
  return {h, w};
}

// ---- synth ----------------------------------------------------------------

struct SynthOpts {
  std::string out;
  int scenes = 8;
  std::string size = "64x64";
  std::uint64_t seed = 1;
  int n_shapes = 8;
};

constexpr std::uint64_t kSceneSalt = 201;
constexpr std::uint64_t kWarpSalt = 202;
constexpr std::uint64_t kTeacherSalt = 203;

int cmd_synth(const SynthOpts& o) {
  int h = 0, w = 0;
  try {
    std::tie(h, w) = parse_size(o.size);
    if (o.scenes < 1) throw std::invalid_argument("--scenes must be >= 1");
    fs::create_directories(o.out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  echo_config({{"cmd", "synth"},
               {"out", o.out},
               {"scenes", o.scenes},
               {"size", o.size},
               {"seed", o.seed},
               {"n_shapes", o.n_shapes}});

  try {
    std::vector<std::string> names;
    for (int i = 0; i < o.scenes; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "v_synth%04d", i + 1);
      const std::string name = buf;
      const fs::path dir = fs::path(o.out) / name;
      fs::create_directories(dir);

      const std::uint64_t scene_seed = mix(o.seed, kSceneSalt, static_cast<std::uint64_t>(i));
      const datagen::SyntheticScene scene = datagen::generate_scene(scene_seed, h, w, o.n_shapes);
      img::write_pgm((dir / "1.pgm").string(), scene.image);

      for (int k = 2; k <= 6; ++k) {
        const geom::Homography m = geom::sample_random_homography(
            mix(o.seed, kWarpSalt, static_cast<std::uint64_t>(i) * 5 + (k - 2)),
            /*max_rotation_deg=*/15.0, /*max_perspective=*/5e-4, /*max_scale_delta=*/0.15,
            /*max_translation_px=*/std::min(h, w) / 8.0, (w - 1) / 2.0, (h - 1) / 2.0);
        img::write_pgm((dir / (std::to_string(k) + ".pgm")).string(),
                       datagen::warp_image(scene.image, m));
        geom::save_homography_file(m, (dir / ("H_1_" + std::to_string(k))).string());
      }

      teacher::write_teacher_feature(
          (dir / "teacher_features.tsg").string(),
          datagen::synth_teacher_features(scene, 0.05, Rng::derive(scene_seed, kTeacherSalt)));
      teacher::write_grouping((dir / "grouping.tsg").string(), scene.grouping);
      teacher::write_edge((dir / "edges.tsg").string(), scene.edge);

      teacher::SignalBlob kp;
      kp.kind = teacher::kind::keypoint_labels;
      kp.dtype = teacher::dtype::u8;
      kp.extents = {static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w)};
      kp.payload = scene.keypoint_labels;
      teacher::write_blob_file((dir / "keypoint_labels.tsg").string(), kp);

      names.push_back(name);
      info("wrote " + (dir).string());
    }

    json manifest;
    manifest["image_size"] = {h, w};
    manifest["n_shapes"] = o.n_shapes;
    manifest["scenes"] = o.scenes;
    manifest["seed"] = o.seed;
    manifest["sequences"] = names;
    std::ofstream mf(fs::path(o.out) / "manifest.json", std::ios::binary);
    if (!mf) throw std::runtime_error("cannot write manifest.json");
    mf << manifest.dump(2) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainOpts {
  std::string config;
  std::string data;
  std::string out;
  bool no_psrd = false;
  bool no_eag = false;
  bool no_wsc = false;
  // Flag storage; presence tracked through CLI11 counts.
  double lr = 0.0, weight_decay = 0.0, momentum = 0.0, margin_m = 0.0, temperature_t = 0.0;
  double width_factor = 0.0;
  int batch = 0, epochs = 0, steps_per_epoch = 0, wsc_points = 0, max_triplets = 0;
  int eval_pairs = 0, eval_every = 0, checkpoint_every = 0, prefetch_workers = 0;
  std::uint64_t seed = 0;
};

// Flat JSON config; unknown keys are rejected so typos cannot silently
// fall back to defaults. Flags given on the command line win over the file.
void apply_config_file(const std::string& path, train::TrainConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file: " + path);
  json j = json::parse(in);
  for (const auto& [key, value] : j.items()) {
    if (key == "lr") cfg.lr = value.get<double>();
    else if (key == "weight_decay") cfg.weight_decay = value.get<double>();
    else if (key == "momentum") cfg.momentum = value.get<double>();
    else if (key == "batch") cfg.batch = value.get<int>();
    else if (key == "epochs") cfg.epochs = value.get<int>();
    else if (key == "steps_per_epoch") cfg.steps_per_epoch = value.get<int>();
    else if (key == "margin_m") cfg.margin_m = value.get<double>();
    else if (key == "temperature_t") cfg.temperature_t = value.get<double>();
    else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
    else if (key == "width_factor") cfg.width_factor = value.get<double>();
    else if (key == "max_triplets") cfg.max_triplets = value.get<int>();
    else if (key == "wsc_points") cfg.wsc_points = value.get<int>();
    else if (key == "eval_pairs") cfg.eval_pairs = value.get<int>();
    else if (key == "eval_every") cfg.eval_every = value.get<int>();
    else if (key == "checkpoint_every") cfg.checkpoint_every = value.get<int>();
    else if (key == "prefetch_workers") cfg.prefetch_workers = value.get<int>();
    else if (key == "psrd") cfg.toggles.psrd = value.get<bool>();
    else if (key == "eag") cfg.toggles.eag = value.get<bool>();
    else if (key == "wsc") cfg.toggles.wsc = value.get<bool>();
    else throw std::invalid_argument("unknown config key: " + key);
  }
}

json toggles_json(const train::Toggles& t) {
  return {{"psrd", t.psrd}, {"eag", t.eag}, {"wsc", t.wsc}};
}

int cmd_train(const TrainOpts& o, const CLI::App* sub) {
  train::TrainConfig cfg;
  try {
    if (!o.config.empty()) apply_config_file(o.config, cfg);

    auto flagged = [&](const char* name) { return sub->count(name) > 0; };
    if (flagged("--lr")) cfg.lr = o.lr;
    if (flagged("--weight-decay")) cfg.weight_decay = o.weight_decay;
    if (flagged("--momentum")) cfg.momentum = o.momentum;
    if (flagged("--batch")) cfg.batch = o.batch;
    if (flagged("--epochs")) cfg.epochs = o.epochs;
    if (flagged("--steps-per-epoch")) cfg.steps_per_epoch = o.steps_per_epoch;
    if (flagged("--margin")) cfg.margin_m = o.margin_m;
    if (flagged("--temperature")) cfg.temperature_t = o.temperature_t;
    if (flagged("--seed")) cfg.seed = o.seed;
    if (flagged("--width-factor")) cfg.width_factor = o.width_factor;
    if (flagged("--max-triplets")) cfg.max_triplets = o.max_triplets;
    if (flagged("--wsc-points")) cfg.wsc_points = o.wsc_points;
    if (flagged("--eval-pairs")) cfg.eval_pairs = o.eval_pairs;
    if (flagged("--eval-every")) cfg.eval_every = o.eval_every;
    if (flagged("--checkpoint-every")) cfg.checkpoint_every = o.checkpoint_every;
    if (flagged("--prefetch-workers")) cfg.prefetch_workers = o.prefetch_workers;
    if (o.no_psrd) cfg.toggles.psrd = false;
    if (o.no_eag) cfg.toggles.eag = false;
    if (o.no_wsc) cfg.toggles.wsc = false;

    // The dataset manifest pins scene geometry; its seed is the default
    // stream seed so data and training share provenance.
    std::ifstream mf(fs::path(o.data) / "manifest.json");
    if (!mf) throw std::invalid_argument("no manifest.json under --data " + o.data);
    const json manifest = json::parse(mf);
    cfg.image_size = manifest.at("image_size")[0].get<int>();
    if (manifest.at("image_size")[1].get<int>() != cfg.image_size) {
      throw std::invalid_argument("training requires square scenes; dataset is not square");
    }
    cfg.n_shapes = manifest.at("n_shapes").get<int>();
    if (!flagged("--seed") && (o.config.empty() || cfg.seed == train::TrainConfig{}.seed)) {
      cfg.seed = manifest.at("seed").get<std::uint64_t>();
    }

    fs::create_directories(o.out);
    cfg.out_checkpoint = (fs::path(o.out) / "model.ckpt").string();
    cfg.log_path = (fs::path(o.out) / "train_log.jsonl").string();
    train::validate(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  echo_config({{"cmd", "train"},
               {"data", o.data},
               {"out", o.out},
               {"lr", cfg.lr},
               {"weight_decay", cfg.weight_decay},
               {"momentum", cfg.momentum},
               {"batch", cfg.batch},
               {"epochs", cfg.epochs},
               {"steps_per_epoch", cfg.steps_per_epoch},
               {"margin_m", cfg.margin_m},
               {"temperature_t", cfg.temperature_t},
               {"seed", cfg.seed},
               {"width_factor", cfg.width_factor},
               {"image_size", cfg.image_size},
               {"n_shapes", cfg.n_shapes},
               {"toggles", toggles_json(cfg.toggles)}});

  try {
    const train::TrainResult result = train::run_training(cfg);
    if (!result.log.steps.empty()) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "final step loss: total=%.6f", result.log.steps.back().total);
      info(buf);
    }
    if (!result.log.evals.empty()) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "held-out: mma3=%.4f auc5=%.4f mean_matches=%.1f",
                    result.log.evals.back().second.mma3, result.log.evals.back().second.auc5,
                    result.log.evals.back().second.mean_matches);
      info(buf);
    }
    info("checkpoint: " + cfg.out_checkpoint);
    info("log: " + cfg.log_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

// ---- eval / ablate --------------------------------------------------------

struct EvalOpts {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string plot;
  std::string features;
  std::string exclude;  // comma-separated sequence names
  double det_threshold = 0.5;
  int nms_radius = 4;
  int max_keypoints = 512;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size() && !s.empty()) {
    const std::size_t comma = s.find(',', start);
    const std::string item = s.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

// Dumped-feature extractor: <features>/<sequence>/<stem>.kp/.desc written by
// dump-signals. A missing dump is treated as "no detections" with a warning;
// a keypoint/descriptor row mismatch is a hard, named error.
eval::Features load_dumped(const std::string& features_root, const std::string& image_path) {
  const fs::path p(image_path);
  const fs::path base = fs::path(features_root) / p.parent_path().filename() / p.stem();
  const std::string kp = base.string() + ".kp";
  const std::string desc = base.string() + ".desc";
  if (!fs::exists(kp) && !fs::exists(desc)) {
    warn("no dumped features for " + image_path + " (expected " + kp + ")");
    return {};
  }
  return eval::load_features(kp, desc);
}

int cmd_eval(const EvalOpts& o) {
  datagen::LoadReport loaded;
  eval::FeatureExtractor extractor;
  net::ModelParams model;
  try {
    if (o.data.empty()) throw std::invalid_argument("--data is required");
    loaded = datagen::load_hpatches(o.data, split_csv(o.exclude));
    for (const auto& w : loaded.warnings) warn(w);
    if (loaded.sequences.empty()) throw std::invalid_argument("no usable sequences in " + o.data);
    if (o.features.empty() && o.ckpt.empty()) {
      throw std::invalid_argument("one of --ckpt or --features is required");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  echo_config({{"cmd", "eval"},
               {"ckpt", o.ckpt},
               {"data", o.data},
               {"out", o.out},
               {"plot", o.plot},
               {"features", o.features},
               {"exclude", o.exclude},
               {"det_threshold", o.det_threshold},
               {"nms_radius", o.nms_radius},
               {"max_keypoints", o.max_keypoints}});

  try {
    if (!o.features.empty()) {
      extractor = [&](const std::string& path) { return load_dumped(o.features, path); };
    } else {
      model = net::load_checkpoint(o.ckpt);
      eval::ExtractConfig ec;
      ec.det_threshold = o.det_threshold;
      ec.nms_radius = o.nms_radius;
      ec.max_keypoints = o.max_keypoints;
      extractor = [&, ec](const std::string& path) {
        return eval::extract_features(model, img::read_pnm(path), ec);
      };
    }

    eval::BenchmarkConfig bc;
    bc.csv_path = o.out;
    bc.svg_path = o.plot;
    const eval::MatchReport report = eval::run_benchmark(extractor, loaded.sequences, bc);

    char buf[128];
    std::snprintf(buf, sizeof buf, "aggregate: mma3=%.4f auc5=%.4f over %zu pairs",
                  report.mma[3], report.auc5, report.pairs.size());
    info(buf);
    for (const auto& s : report.per_sequence) {
      std::snprintf(buf, sizeof buf, "  %s: mma3=%.4f auc5=%.4f", s.name.c_str(), s.mma[3],
                    s.auc5);
      info(buf);
    }
    info("report: " + o.out);
    if (!o.plot.empty()) info("plot: " + o.plot);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

struct AblateOpts {
  std::string out;
  std::uint64_t seed = 1;
  int steps = 60;
  int batch = 2;
  int image_size = 64;
  int n_shapes = 8;
  double width_factor = 0.25;
  int eval_pairs = 6;
  double det_threshold = 0.5;
  int nms_radius = 4;
  int max_keypoints = 512;
};

// The component study: baseline, +distillation, +edge, +grouping, trained
// sequentially with one shared seed and scored on the shared held-out stream.
int cmd_ablate(const AblateOpts& o) {
  echo_config({{"cmd", "ablate"},
               {"out", o.out},
               {"seed", o.seed},
               {"steps", o.steps},
               {"batch", o.batch},
               {"image_size", o.image_size},
               {"n_shapes", o.n_shapes},
               {"width_factor", o.width_factor},
               {"eval_pairs", o.eval_pairs}});

  struct Row {
    const char* label;
    train::Toggles toggles;
    double mma3 = 0.0;
    double mean_matches = 0.0;
  };
  std::vector<Row> rows = {
      {"baseline", {false, false, false}},
      {"+psrd", {true, false, false}},
      {"+psrd+eag", {true, true, false}},
      {"full", {true, true, true}},
  };

  try {
    for (Row& row : rows) {
      train::TrainConfig cfg;
      cfg.seed = o.seed;
      cfg.width_factor = o.width_factor;
      cfg.image_size = o.image_size;
      cfg.n_shapes = o.n_shapes;
      cfg.batch = o.batch;
      cfg.epochs = 1;
      cfg.steps_per_epoch = o.steps;
      cfg.eval_pairs = o.eval_pairs;
      cfg.eval_extract.det_threshold = o.det_threshold;
      cfg.eval_extract.nms_radius = o.nms_radius;
      cfg.eval_extract.max_keypoints = o.max_keypoints;
      cfg.toggles = row.toggles;
      train::validate(cfg);

      const train::TrainResult result = train::run_training(cfg);
      row.mma3 = result.log.evals.back().second.mma3;
      row.mean_matches = result.log.evals.back().second.mean_matches;
      char buf[96];
      std::snprintf(buf, sizeof buf, "%-10s trained: mma3=%.4f", row.label, row.mma3);
      info(buf);
    }

    // One table, stdout and (optionally) CSV.
    std::string table = "psrd eag  wsc  mma3    mean_matches label\n";
    std::string csv = "psrd,eag,wsc,mma3,mean_matches,label\n";
    for (const Row& row : rows) {
      char line[128];
      std::snprintf(line, sizeof line, "%-4s %-4s %-4s %.4f  %-12.1f %s\n",
                    row.toggles.psrd ? "on" : "off", row.toggles.eag ? "on" : "off",
                    row.toggles.wsc ? "on" : "off", row.mma3, row.mean_matches, row.label);
      table += line;
      std::snprintf(line, sizeof line, "%d,%d,%d,%.6f,%.2f,%s\n", row.toggles.psrd ? 1 : 0,
                    row.toggles.eag ? 1 : 0, row.toggles.wsc ? 1 : 0, row.mma3, row.mean_matches,
                    row.label);
      csv += line;
    }
    std::cout << table;
    if (!o.out.empty()) {
      std::ofstream out(o.out, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write ablation table: " + o.out);
      out << csv;
      info("table: " + o.out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

// ---- dump-signals ----------------------------------------------------------

struct DumpOpts {
  std::string ckpt;
  std::string image;
  std::string data;
  std::string out;
  double det_threshold = 0.5;
  int nms_radius = 4;
  int max_keypoints = 512;
};

int dump_one(const net::ModelParams& model, const eval::ExtractConfig& ec,
             const std::string& image_path, const fs::path& base) {
  const eval::Features f = eval::extract_features(model, img::read_pnm(image_path), ec);
  if (f.points.empty()) {
    warn("no detections in " + image_path + "; nothing dumped");
    return 0;
  }
  eval::save_features(base.string() + ".kp", base.string() + ".desc", f);
  info("dumped " + base.string() + ".kp/.desc (" + std::to_string(f.points.size()) +
       " keypoints)");
  return 0;
}

int cmd_dump_signals(const DumpOpts& o) {
  net::ModelParams model;
  datagen::LoadReport loaded;
  try {
    if (o.image.empty() == o.data.empty()) {
      throw std::invalid_argument("exactly one of --img or --data is required");
    }
    if (!o.data.empty()) {
      loaded = datagen::load_hpatches(o.data);
      for (const auto& w : loaded.warnings) warn(w);
    } else if (!fs::exists(o.image)) {
      throw std::invalid_argument("image not found: " + o.image);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  echo_config({{"cmd", "dump-signals"},
               {"ckpt", o.ckpt},
               {"img", o.image},
               {"data", o.data},
               {"out", o.out},
               {"det_threshold", o.det_threshold},
               {"nms_radius", o.nms_radius},
               {"max_keypoints", o.max_keypoints}});

  try {
    model = net::load_checkpoint(o.ckpt);
    eval::ExtractConfig ec;
    ec.det_threshold = o.det_threshold;
    ec.nms_radius = o.nms_radius;
    ec.max_keypoints = o.max_keypoints;

    if (!o.image.empty()) {
      // --out is a path prefix in single-image mode.
      if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
      dump_one(model, ec, o.image, fs::path(o.out));
    } else {
      for (const auto& seq : loaded.sequences) {
        const fs::path seq_dir = fs::path(o.out) / seq.name;
        fs::create_directories(seq_dir);
        dump_one(model, ec, seq.ref_image_path, seq_dir / fs::path(seq.ref_image_path).stem());
        for (const auto& target : seq.target_image_paths) {
          dump_one(model, ec, target, seq_dir / fs::path(target).stem());
        }
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

// ---- match ----------------------------------------------------------------

struct MatchOpts {
  std::string ckpt;
  std::string img1;
  std::string img2;
  std::string out;
  std::string matches_out;  // default: <out>.txt
  double det_threshold = 0.5;
  int nms_radius = 4;
  int max_keypoints = 512;
};

img::ImageU8 to_rgb(const img::ImageU8& in) {
  img::ImageU8 out;
  out.h = in.h;
  out.w = in.w;
  out.channels = 3;
  out.px.resize(static_cast<std::size_t>(in.h) * in.w * 3);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = in.at(x, y, in.channels == 3 ? c : 0);
    }
  }
  return out;
}

void draw_line(img::ImageU8& canvas, int x0, int y0, int x1, int y1, std::uint8_t r,
               std::uint8_t g, std::uint8_t b) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  int x = x0, y = y0;
  for (;;) {
    if (x >= 0 && x < canvas.w && y >= 0 && y < canvas.h) {
      canvas.at(x, y, 0) = r;
      canvas.at(x, y, 1) = g;
      canvas.at(x, y, 2) = b;
    }
    if (x == x1 && y == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y += sy;
    }
  }
}

int cmd_match(const MatchOpts& o) {
  img::ImageU8 a, b;
  try {
    a = img::read_pnm(o.img1);
    b = img::read_pnm(o.img2);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  const std::string matches_path = o.matches_out.empty() ? o.out + ".txt" : o.matches_out;
  echo_config({{"cmd", "match"},
               {"ckpt", o.ckpt},
               {"img1", o.img1},
               {"img2", o.img2},
               {"out", o.out},
               {"matches", matches_path},
               {"det_threshold", o.det_threshold},
               {"nms_radius", o.nms_radius},
               {"max_keypoints", o.max_keypoints}});

  try {
    const net::ModelParams model = net::load_checkpoint(o.ckpt);
    eval::ExtractConfig ec;
    ec.det_threshold = o.det_threshold;
    ec.nms_radius = o.nms_radius;
    ec.max_keypoints = o.max_keypoints;
    const eval::Features f1 = eval::extract_features(model, a, ec);
    const eval::Features f2 = eval::extract_features(model, b, ec);

    std::vector<eval::Match> matches;
    if (!f1.points.empty() && !f2.points.empty()) {
      matches = eval::mutual_nn_match(f1.descriptors, f2.descriptors);
    } else {
      warn("no keypoints on at least one image; writing an empty match set");
    }

    // Side-by-side canvas, image 2 shifted right by w1.
    img::ImageU8 canvas;
    canvas.h = std::max(a.h, b.h);
    canvas.w = a.w + b.w;
    canvas.channels = 3;
    canvas.px.assign(static_cast<std::size_t>(canvas.h) * canvas.w * 3, 0);
    const img::ImageU8 ra = to_rgb(a), rb = to_rgb(b);
    for (int y = 0; y < a.h; ++y) {
      for (int x = 0; x < a.w; ++x) {
        for (int c = 0; c < 3; ++c) canvas.at(x, y, c) = ra.at(x, y, c);
      }
    }
    for (int y = 0; y < b.h; ++y) {
      for (int x = 0; x < b.w; ++x) {
        for (int c = 0; c < 3; ++c) canvas.at(a.w + x, y, c) = rb.at(x, y, c);
      }
    }
    for (const eval::Match& m : matches) {
      const eval::Keypoint& p = f1.points[static_cast<std::size_t>(m.i)];
      const eval::Keypoint& q = f2.points[static_cast<std::size_t>(m.j)];
      draw_line(canvas, static_cast<int>(std::lround(p.x)), static_cast<int>(std::lround(p.y)),
                a.w + static_cast<int>(std::lround(q.x)), static_cast<int>(std::lround(q.y)), 40,
                220, 40);
    }
    img::write_ppm(o.out, canvas);

    std::ofstream mt(matches_path, std::ios::binary);
    if (!mt) throw std::runtime_error("cannot write match list: " + matches_path);
    char line[160];
    for (const eval::Match& m : matches) {
      const eval::Keypoint& p = f1.points[static_cast<std::size_t>(m.i)];
      const eval::Keypoint& q = f2.points[static_cast<std::size_t>(m.j)];
      std::snprintf(line, sizeof line, "%.3f %.3f %.3f %.3f %.6f\n", p.x, p.y, q.x, q.y,
                    m.distance);
      mt << line;
    }

    info("matches: " + std::to_string(matches.size()) + " (" + std::to_string(f1.points.size()) +
         " vs " + std::to_string(f2.points.size()) + " keypoints)");
    info("viz: " + o.out);
    info("list: " + matches_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feature detector/descriptor workbench: synthesize data, train, evaluate"};
  app.require_subcommand(1);

  SynthOpts so;
  CLI::App* synth = app.add_subcommand("synth", "write a benchmark-layout synthetic dataset");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--scenes", so.scenes, "number of sequences");
  synth->add_option("--size", so.size, "scene size HxW (multiples of 8, >= 32)");
  synth->add_option("--seed", so.seed, "stream seed");
  synth->add_option("--shapes", so.n_shapes, "shapes per scene");

  TrainOpts to;
  CLI::App* tr = app.add_subcommand("train", "optimize a model on a synthetic dataset");
  tr->add_option("--config", to.config, "flat JSON config (flags win over file)");
  tr->add_option("--data", to.data, "dataset directory from `synth`")
      ->required()
      ->check(CLI::ExistingDirectory);
  tr->add_option("--out", to.out, "output directory for checkpoint + log")->required();
  tr->add_flag("--no-psrd", to.no_psrd, "disable relation distillation (l_dis = 0)");
  tr->add_flag("--no-eag", to.no_eag, "disable edge supervision (l_edge = 0)");
  tr->add_flag("--no-wsc", to.no_wsc, "disable group-contrastive supervision (l_wsc = 0)");
  tr->add_option("--lr", to.lr, "learning rate");
  tr->add_option("--weight-decay", to.weight_decay, "decoupled weight decay");
  tr->add_option("--momentum", to.momentum, "SGD momentum");
  tr->add_option("--batch", to.batch, "pairs per step");
  tr->add_option("--epochs", to.epochs, "epochs");
  tr->add_option("--steps-per-epoch", to.steps_per_epoch, "steps per epoch");
  tr->add_option("--margin", to.margin_m, "contrastive margin M");
  tr->add_option("--temperature", to.temperature_t, "contrastive temperature T");
  tr->add_option("--seed", to.seed, "training seed (default: dataset seed)");
  tr->add_option("--width-factor", to.width_factor, "channel width factor");
  tr->add_option("--max-triplets", to.max_triplets, "descriptor triplets per pair");
  tr->add_option("--wsc-points", to.wsc_points, "contrastive sample cap per image");
  tr->add_option("--eval-pairs", to.eval_pairs, "held-out pairs per snapshot");
  tr->add_option("--eval-every", to.eval_every, "steps between snapshots");
  tr->add_option("--checkpoint-every", to.checkpoint_every, "steps between checkpoints");
  tr->add_option("--prefetch-workers", to.prefetch_workers, "data generation workers");

  EvalOpts eo;
  CLI::App* ev = app.add_subcommand("eval", "benchmark a checkpoint or dumped features");
  ev->add_option("--ckpt", eo.ckpt, "checkpoint path");
  ev->add_option("--data", eo.data, "benchmark-layout dataset directory")
      ->check(CLI::ExistingDirectory);
  ev->add_option("--out", eo.out, "CSV report path")->required();
  ev->add_option("--plot", eo.plot, "optional SVG of the aggregate curve");
  ev->add_option("--features", eo.features, "dumped-feature directory instead of --ckpt");
  ev->add_option("--exclude", eo.exclude, "comma-separated sequence names to skip");
  ev->add_option("--det-threshold", eo.det_threshold, "detection probability threshold");
  ev->add_option("--nms-radius", eo.nms_radius, "suppression radius in px");
  ev->add_option("--max-keypoints", eo.max_keypoints, "keypoint cap per image");

  AblateOpts ao;
  bool eval_ablate = false;
  ev->add_flag("--ablate", eval_ablate, "run the component study instead (see `ablate`)");
  ev->add_option("--seed", ao.seed, "shared seed (--ablate mode)");
  ev->add_option("--steps", ao.steps, "training steps per row (--ablate mode)");
  ev->add_option("--batch", ao.batch, "pairs per step (--ablate mode)");
  ev->add_option("--size", ao.image_size, "square scene size (--ablate mode)");
  ev->add_option("--shapes", ao.n_shapes, "shapes per scene (--ablate mode)");
  ev->add_option("--width-factor", ao.width_factor, "channel width factor (--ablate mode)");
  ev->add_option("--eval-pairs", ao.eval_pairs, "held-out pairs per row (--ablate mode)");
  CLI::App* ab = app.add_subcommand("ablate", "train + score the four component rows");
  ab->add_option("--out", ao.out, "CSV table path (optional)");
  ab->add_option("--seed", ao.seed, "shared seed");
  ab->add_option("--steps", ao.steps, "training steps per row");
  ab->add_option("--batch", ao.batch, "pairs per step");
  ab->add_option("--size", ao.image_size, "square scene size");
  ab->add_option("--shapes", ao.n_shapes, "shapes per scene");
  ab->add_option("--width-factor", ao.width_factor, "channel width factor");
  ab->add_option("--eval-pairs", ao.eval_pairs, "held-out pairs per row");
  ab->add_option("--det-threshold", ao.det_threshold, "detection probability threshold");
  ab->add_option("--nms-radius", ao.nms_radius, "suppression radius in px");
  ab->add_option("--max-keypoints", ao.max_keypoints, "keypoint cap per image");

  DumpOpts dopt;
  CLI::App* du = app.add_subcommand("dump-signals", "write keypoint/descriptor blobs");
  du->add_option("--ckpt", dopt.ckpt, "checkpoint path")->required();
  du->add_option("--img", dopt.image, "single image (with --out as path prefix)");
  du->add_option("--data", dopt.data, "dataset directory (with --out as mirror root)");
  du->add_option("--out", dopt.out, "output prefix or directory")->required();
  du->add_option("--det-threshold", dopt.det_threshold, "detection probability threshold");
  du->add_option("--nms-radius", dopt.nms_radius, "suppression radius in px");
  du->add_option("--max-keypoints", dopt.max_keypoints, "keypoint cap per image");

  MatchOpts mo;
  CLI::App* ma = app.add_subcommand("match", "match two images and draw the result");
  ma->add_option("--ckpt", mo.ckpt, "checkpoint path")->required();
  ma->add_option("--img1", mo.img1, "first image")->required();
  ma->add_option("--img2", mo.img2, "second image")->required();
  ma->add_option("--out", mo.out, "side-by-side PPM path")->required();
  ma->add_option("--matches", mo.matches_out, "match list path (default: <out>.txt)");
  ma->add_option("--det-threshold", mo.det_threshold, "detection probability threshold");
  ma->add_option("--nms-radius", mo.nms_radius, "suppression radius in px");
  ma->add_option("--max-keypoints", mo.max_keypoints, "keypoint cap per image");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  if (synth->parsed()) return cmd_synth(so);
  if (tr->parsed()) return cmd_train(to, tr);
  if (ev->parsed()) {
    if (!eval_ablate) return cmd_eval(eo);
    // The study owns its extraction settings; forward eval's shared flags.
    ao.out = eo.out;
    ao.det_threshold = eo.det_threshold;
    ao.nms_radius = eo.nms_radius;
    ao.max_keypoints = eo.max_keypoints;
    return cmd_ablate(ao);
  }
  if (ab->parsed()) return cmd_ablate(ao);
  if (du->parsed()) return cmd_dump_signals(dopt);
  if (ma->parsed()) return cmd_match(mo);
  return kExitUsage;
}
