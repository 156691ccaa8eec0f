#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "featkit/datagen.hpp"
#include "featkit/diffcore.hpp"
#include "featkit/geometry.hpp"
#include "featkit/image_io.hpp"
#include "featkit/network.hpp"

namespace featkit::eval {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
};

/// Greedy non-maximum suppression over pixels scoring >= threshold: points
/// ordered by descending score (row-major position breaks ties); a candidate
/// within nms_radius (Euclidean) of a kept point is dropped; at most max_k
/// survive. Accepts [H,W] or [1,1,H,W] score maps; may return empty.
std::vector<Keypoint> extract_keypoints(const diff::Array& score_map, double threshold,
                                        int nms_radius, int max_k);

/// Keypoints plus their unit-norm descriptor rows [K, D]. K = 0 leaves
/// `descriptors` default-constructed.
struct Features {
  std::vector<Keypoint> points;
  diff::Array descriptors;
};

/// Bilinear descriptor lookup at image-coordinate keypoints from a quarter
/// resolution map [1,D,H/4,W/4] (values only, no tape), L2-normalized rows.
diff::Array sample_descriptors(const diff::Array& desc_map, const std::vector<Keypoint>& kps,
                               int img_h, int img_w);

/// Full no-grad pipeline on one grayscale image: forward pass, detection
/// probabilities, NMS, descriptor sampling.
struct ExtractConfig {
  double det_threshold = 0.5;
  int nms_radius = 4;
  int max_keypoints = 512;
};
Features extract_features(const net::ModelParams& params, const img::ImageU8& image,
                          const ExtractConfig& cfg);

struct Match {
  int i = 0;
  int j = 0;
  double distance = 0.0;
};

/// Pairs (i, j) kept iff each is the other's nearest descriptor row by
/// Euclidean distance; equidistant candidates resolve to the lowest index.
/// Results ordered by i.
std::vector<Match> mutual_nn_match(const diff::Array& desc1, const diff::Array& desc2);

/// One evaluated image pair: reprojection error per surviving match.
struct PairResult {
  std::string sequence;
  int pair_index = 0;  // target image index, 2..6
  int n_keypoints1 = 0;
  int n_keypoints2 = 0;
  std::vector<double> errors;
};

/// Matching-accuracy summary. mma[t] for t = 1..10 px averages, over pairs,
/// the fraction of matches with reprojection error <= t (a pair with no
/// matches contributes 0); auc5 is the mean of mma[1..5]. Index 0 is unused.
struct MatchReport {
  std::vector<PairResult> pairs;
  std::array<double, 11> mma{};
  double auc5 = 0.0;

  struct SequenceSummary {
    std::string name;
    std::array<double, 11> mma{};
    double auc5 = 0.0;
  };
  std::vector<SequenceSummary> per_sequence;
};

/// Aggregates pair results into the report (pairs are kept, sorted by
/// sequence then pair index).
MatchReport mma_curve(std::vector<PairResult> pairs);

/// Produces features for one benchmark image, addressed by path so dumped
/// features can stand in for a live model.
using FeatureExtractor = std::function<Features(const std::string& image_path)>;

struct BenchmarkConfig {
  std::string csv_path;  // empty = no CSV
  std::string svg_path;  // empty = no plot
};

/// Runs the full protocol: extract on every image, mutually match each
/// reference/target pair, score reprojection against the ground-truth map.
MatchReport run_benchmark(const FeatureExtractor& extractor,
                          const std::vector<datagen::HPatchesSequence>& sequences,
                          const BenchmarkConfig& cfg);

/// CSV rows `sequence,pair,threshold,n_matches,n_correct,mma` (mma to six
/// decimals), one per pair and threshold, ordered as in the report.
void write_report_csv(const std::string& path, const MatchReport& report);

/// Self-contained SVG line plot of the aggregate accuracy curve.
void write_report_svg(const std::string& path, const MatchReport& report);

/// Feature dump round-trip (keypoints as one signal blob, descriptors as
/// another); float32 payloads, so values round-trip through float precision.
void save_features(const std::string& kp_path, const std::string& desc_path, const Features& f);
Features load_features(const std::string& kp_path, const std::string& desc_path);

}  // namespace featkit::eval
