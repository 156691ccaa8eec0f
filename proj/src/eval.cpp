#include "featkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "featkit/teacher.hpp"

namespace featkit::eval {

namespace {

void map_dims(const diff::Array& m, int& h, int& w) {
  if (m.ndim() == 2) {
    h = m.dim(0);
    w = m.dim(1);
  } else if (m.ndim() == 4 && m.dim(0) == 1 && m.dim(1) == 1) {
    h = m.dim(2);
    w = m.dim(3);
  } else {
    throw std::invalid_argument("score map must be [H,W] or [1,1,H,W], got " +
                                diff::shape_str(m.shape));
  }
}

}  // namespace

std::vector<Keypoint> extract_keypoints(const diff::Array& score_map, double threshold,
                                        int nms_radius, int max_k) {
  if (threshold < 0.0 || threshold > 1.0) {
    throw std::invalid_argument("detection threshold must lie in [0,1]");
  }
  if (nms_radius < 1) throw std::invalid_argument("nms_radius must be >= 1");
  if (max_k < 1) throw std::invalid_argument("max_k must be >= 1");
  int h = 0, w = 0;
  map_dims(score_map, h, w);

  std::vector<std::int64_t> cand;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
    if (score_map[i] >= threshold) cand.push_back(i);
  }
  // Descending score; row-major position settles exact ties.
  std::stable_sort(cand.begin(), cand.end(), [&](std::int64_t a, std::int64_t b) {
    return score_map[a] > score_map[b];
  });

  const std::int64_t r2 = static_cast<std::int64_t>(nms_radius) * nms_radius;
  std::vector<Keypoint> kept;
  for (std::int64_t flat : cand) {
    if (static_cast<int>(kept.size()) == max_k) break;
    const int x = static_cast<int>(flat % w);
    const int y = static_cast<int>(flat / w);
    bool suppressed = false;
    for (const auto& k : kept) {
      const std::int64_t dx = x - static_cast<std::int64_t>(k.x);
      const std::int64_t dy = y - static_cast<std::int64_t>(k.y);
      if (dx * dx + dy * dy <= r2) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back({static_cast<double>(x), static_cast<double>(y),
                                     score_map[flat]});
  }
  return kept;
}

diff::Array sample_descriptors(const diff::Array& desc_map, const std::vector<Keypoint>& kps,
                               int img_h, int img_w) {
  if (kps.empty()) return {};
  diff::Array map = desc_map;
  if (map.ndim() == 4 && map.dim(0) == 1) {
    map.shape = {map.dim(1), map.dim(2), map.dim(3)};
  }
  if (map.ndim() != 3) {
    throw std::invalid_argument("descriptor map must be [D,h,w] or [1,D,h,w], got " +
                                diff::shape_str(desc_map.shape));
  }
  const int mh = map.dim(1);
  const int mw = map.dim(2);
  if (mh * 4 != img_h || mw * 4 != img_w) {
    throw std::invalid_argument("descriptor map is not at quarter resolution of the image");
  }

  // Image pixel (x, y) sits at map coordinate (x + 0.5)/4 - 0.5.
  std::vector<std::pair<double, double>> pts;
  pts.reserve(kps.size());
  for (const auto& k : kps) {
    const double mx = std::clamp((k.x + 0.5) / 4.0 - 0.5, 0.0, mw - 1.0);
    const double my = std::clamp((k.y + 0.5) / 4.0 - 0.5, 0.0, mh - 1.0);
    pts.push_back({mx, my});
  }

  diff::Tape t;
  t.set_grad_enabled(false);
  diff::Var rows = diff::l2_normalize_lastdim(diff::bilinear_sample(t.constant(map), pts));
  return rows.value();
}

Features extract_features(const net::ModelParams& params, const img::ImageU8& image,
                          const ExtractConfig& cfg) {
  diff::Tape t;
  t.set_grad_enabled(false);
  net::BoundParams bp = net::bind(t, params, /*requires_grad=*/false);
  net::NetworkOutputs out = net::forward(t.constant(img::to_gray_array(image)), bp);

  Features f;
  const diff::Array probs = diff::sigmoid(out.det_logits).value();
  f.points = extract_keypoints(probs, cfg.det_threshold, cfg.nms_radius, cfg.max_keypoints);
  f.descriptors = sample_descriptors(out.descriptors.value(), f.points, image.h, image.w);
  return f;
}

std::vector<Match> mutual_nn_match(const diff::Array& desc1, const diff::Array& desc2) {
  if (desc1.ndim() != 2 || desc2.ndim() != 2 || desc1.dim(1) != desc2.dim(1)) {
    throw std::invalid_argument("mutual_nn_match: descriptor sets must be [K,D] with equal D");
  }
  const int k1 = desc1.dim(0);
  const int k2 = desc2.dim(0);
  const int d = desc1.dim(1);

  std::vector<double> dist(static_cast<std::size_t>(k1) * k2);
  for (int i = 0; i < k1; ++i) {
    for (int j = 0; j < k2; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = desc1[static_cast<std::int64_t>(i) * d + c] -
                            desc2[static_cast<std::int64_t>(j) * d + c];
        s += diff * diff;
      }
      dist[static_cast<std::size_t>(i) * k2 + j] = std::sqrt(s);
    }
  }

  // Strict < keeps the lowest index on ties in both directions.
  std::vector<int> best2(static_cast<std::size_t>(k1), 0);
  for (int i = 0; i < k1; ++i) {
    for (int j = 1; j < k2; ++j) {
      if (dist[static_cast<std::size_t>(i) * k2 + j] <
          dist[static_cast<std::size_t>(i) * k2 + best2[static_cast<std::size_t>(i)]]) {
        best2[static_cast<std::size_t>(i)] = j;
      }
    }
  }
  std::vector<int> best1(static_cast<std::size_t>(k2), 0);
  for (int j = 0; j < k2; ++j) {
    for (int i = 1; i < k1; ++i) {
      if (dist[static_cast<std::size_t>(i) * k2 + j] <
          dist[static_cast<std::size_t>(best1[static_cast<std::size_t>(j)]) * k2 + j]) {
        best1[static_cast<std::size_t>(j)] = i;
      }
    }
  }

  std::vector<Match> out;
  for (int i = 0; i < k1; ++i) {
    const int j = best2[static_cast<std::size_t>(i)];
    if (best1[static_cast<std::size_t>(j)] == i) {
      out.push_back({i, j, dist[static_cast<std::size_t>(i) * k2 + j]});
    }
  }
  return out;
}

MatchReport mma_curve(std::vector<PairResult> pairs) {
  std::sort(pairs.begin(), pairs.end(), [](const PairResult& a, const PairResult& b) {
    return a.sequence != b.sequence ? a.sequence < b.sequence : a.pair_index < b.pair_index;
  });

  MatchReport report;
  report.pairs = std::move(pairs);

  auto accumulate = [](const std::vector<const PairResult*>& ps) {
    std::array<double, 11> mma{};
    for (const PairResult* p : ps) {
      if (p->errors.empty()) continue;  // contributes 0 at every threshold
      for (int t = 1; t <= 10; ++t) {
        int correct = 0;
        for (double e : p->errors) correct += e <= t ? 1 : 0;
        mma[static_cast<std::size_t>(t)] +=
            static_cast<double>(correct) / static_cast<double>(p->errors.size());
      }
    }
    if (!ps.empty()) {
      for (int t = 1; t <= 10; ++t) mma[static_cast<std::size_t>(t)] /= static_cast<double>(ps.size());
    }
    return mma;
  };
  auto mean5 = [](const std::array<double, 11>& mma) {
    return (mma[1] + mma[2] + mma[3] + mma[4] + mma[5]) / 5.0;
  };

  std::vector<const PairResult*> all;
  for (const auto& p : report.pairs) all.push_back(&p);
  report.mma = accumulate(all);
  report.auc5 = mean5(report.mma);

  for (std::size_t i = 0; i < report.pairs.size();) {
    std::size_t j = i;
    std::vector<const PairResult*> seq;
    while (j < report.pairs.size() && report.pairs[j].sequence == report.pairs[i].sequence) {
      seq.push_back(&report.pairs[j]);
      ++j;
    }
    MatchReport::SequenceSummary s;
    s.name = report.pairs[i].sequence;
    s.mma = accumulate(seq);
    s.auc5 = mean5(s.mma);
    report.per_sequence.push_back(std::move(s));
    i = j;
  }
  return report;
}

MatchReport run_benchmark(const FeatureExtractor& extractor,
                          const std::vector<datagen::HPatchesSequence>& sequences,
                          const BenchmarkConfig& cfg) {
  std::vector<PairResult> pairs;
  for (const auto& seq : sequences) {
    const Features ref = extractor(seq.ref_image_path);
    for (std::size_t k = 0; k < seq.target_image_paths.size(); ++k) {
      const Features tgt = extractor(seq.target_image_paths[k]);
      PairResult pr;
      pr.sequence = seq.name;
      pr.pair_index = static_cast<int>(k) + 2;
      pr.n_keypoints1 = static_cast<int>(ref.points.size());
      pr.n_keypoints2 = static_cast<int>(tgt.points.size());
      if (!ref.points.empty() && !tgt.points.empty()) {
        for (const Match& m : mutual_nn_match(ref.descriptors, tgt.descriptors)) {
          const Keypoint& a = ref.points[static_cast<std::size_t>(m.i)];
          const Keypoint& b = tgt.points[static_cast<std::size_t>(m.j)];
          double err;
          try {
            err = geom::reprojection_error(seq.maps[k], {a.x, a.y}, {b.x, b.y});
          } catch (const std::domain_error&) {
            err = std::numeric_limits<double>::infinity();
          }
          pr.errors.push_back(err);
        }
      }
      pairs.push_back(std::move(pr));
    }
  }
  MatchReport report = mma_curve(std::move(pairs));
  if (!cfg.csv_path.empty()) write_report_csv(cfg.csv_path, report);
  if (!cfg.svg_path.empty()) write_report_svg(cfg.svg_path, report);
  return report;
}

void write_report_csv(const std::string& path, const MatchReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write csv: " + path);
  out << "sequence,pair,threshold,n_matches,n_correct,mma\n";
  char frac[32];
  for (const auto& p : report.pairs) {
    const int n = static_cast<int>(p.errors.size());
    for (int t = 1; t <= 10; ++t) {
      int correct = 0;
      for (double e : p.errors) correct += e <= t ? 1 : 0;
      const double mma = n == 0 ? 0.0 : static_cast<double>(correct) / n;
      std::snprintf(frac, sizeof frac, "%.6f", mma);
      out << p.sequence << ',' << p.pair_index << ',' << t << ',' << n << ',' << correct << ','
          << frac << '\n';
    }
  }
}

void write_report_svg(const std::string& path, const MatchReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write svg: " + path);

  // Plot area: x in [60, 600] maps thresholds 1..10, y in [20, 360] maps 1..0.
  auto px = [](int t) { return 60.0 + (t - 1) * (540.0 / 9.0); };
  auto py = [](double v) { return 20.0 + (1.0 - v) * 340.0; };
  char buf[64];

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 420\" "
         "font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
  out << "<line x1=\"60\" y1=\"360\" x2=\"600\" y2=\"360\" stroke=\"black\"/>\n";
  out << "<line x1=\"60\" y1=\"20\" x2=\"60\" y2=\"360\" stroke=\"black\"/>\n";
  for (int t = 1; t <= 10; ++t) {
    std::snprintf(buf, sizeof buf, "%.1f", px(t));
    out << "<line x1=\"" << buf << "\" y1=\"360\" x2=\"" << buf
        << "\" y2=\"365\" stroke=\"black\"/>\n";
    out << "<text x=\"" << buf << "\" y=\"378\" text-anchor=\"middle\">" << t << "</text>\n";
  }
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    std::snprintf(buf, sizeof buf, "%.1f", py(v));
    out << "<line x1=\"55\" y1=\"" << buf << "\" x2=\"60\" y2=\"" << buf
        << "\" stroke=\"black\"/>\n";
    char lab[16];
    std::snprintf(lab, sizeof lab, "%.1f", v);
    out << "<text x=\"50\" y=\"" << buf << "\" text-anchor=\"end\" dy=\"4\">" << lab
        << "</text>\n";
  }
  out << "<text x=\"330\" y=\"400\" text-anchor=\"middle\">reprojection threshold (px)"
         "</text>\n";
  out << "<text x=\"330\" y=\"14\" text-anchor=\"middle\">mean matching accuracy</text>\n";

  out << "<polyline fill=\"none\" stroke=\"#1c6ed0\" stroke-width=\"2\" points=\"";
  for (int t = 1; t <= 10; ++t) {
    std::snprintf(buf, sizeof buf, "%.1f,%.1f", px(t), py(report.mma[static_cast<std::size_t>(t)]));
    out << buf << (t < 10 ? " " : "");
  }
  out << "\"/>\n";
  for (int t = 1; t <= 10; ++t) {
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"#1c6ed0\"/>",
                  px(t), py(report.mma[static_cast<std::size_t>(t)]));
    out << buf << "\n";
  }
  std::snprintf(buf, sizeof buf, "auc@5px = %.4f", report.auc5);
  out << "<text x=\"590\" y=\"40\" text-anchor=\"end\">" << buf << "</text>\n";
  out << "</svg>\n";
}

void save_features(const std::string& kp_path, const std::string& desc_path, const Features& f) {
  const std::size_t k = f.points.size();
  if (k == 0) throw std::invalid_argument("save_features: empty keypoint set");
  if (f.descriptors.ndim() != 2 || f.descriptors.dim(0) != static_cast<int>(k)) {
    throw std::invalid_argument("save_features: descriptor rows do not match keypoints");
  }

  teacher::SignalBlob kp;
  kp.kind = teacher::kind::keypoints;
  kp.dtype = teacher::dtype::f32;
  kp.extents = {static_cast<std::uint32_t>(k), 3};
  kp.payload.resize(k * 3 * 4);
  for (std::size_t i = 0; i < k; ++i) {
    const float row[3] = {static_cast<float>(f.points[i].x), static_cast<float>(f.points[i].y),
                          static_cast<float>(f.points[i].score)};
    std::memcpy(&kp.payload[i * 12], row, 12);
  }
  teacher::write_blob_file(kp_path, kp);

  const int d = f.descriptors.dim(1);
  teacher::SignalBlob desc;
  desc.kind = teacher::kind::descriptors;
  desc.dtype = teacher::dtype::f32;
  desc.extents = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(d)};
  desc.payload.resize(k * static_cast<std::size_t>(d) * 4);
  for (std::size_t i = 0; i < k * static_cast<std::size_t>(d); ++i) {
    const float v = static_cast<float>(f.descriptors[static_cast<std::int64_t>(i)]);
    std::memcpy(&desc.payload[i * 4], &v, 4);
  }
  teacher::write_blob_file(desc_path, desc);
}

Features load_features(const std::string& kp_path, const std::string& desc_path) {
  const teacher::SignalBlob kp = teacher::read_blob_file(kp_path);
  if (kp.kind != teacher::kind::keypoints || kp.dtype != teacher::dtype::f32 ||
      kp.extents.size() != 2 || kp.extents[1] != 3) {
    throw std::runtime_error("not a keypoint signal: " + kp_path);
  }
  const teacher::SignalBlob desc = teacher::read_blob_file(desc_path);
  if (desc.kind != teacher::kind::descriptors || desc.dtype != teacher::dtype::f32 ||
      desc.extents.size() != 2) {
    throw std::runtime_error("not a descriptor signal: " + desc_path);
  }
  if (desc.extents[0] != kp.extents[0]) {
    throw std::runtime_error("keypoint/descriptor row mismatch: " + kp_path + " has " +
                             std::to_string(kp.extents[0]) + ", " + desc_path + " has " +
                             std::to_string(desc.extents[0]));
  }

  Features f;
  const std::size_t k = kp.extents[0];
  for (std::size_t i = 0; i < k; ++i) {
    float row[3];
    std::memcpy(row, &kp.payload[i * 12], 12);
    f.points.push_back({row[0], row[1], row[2]});
  }
  const std::size_t d = desc.extents[1];
  f.descriptors = diff::Array({static_cast<int>(k), static_cast<int>(d)});
  for (std::size_t i = 0; i < k * d; ++i) {
    float v;
    std::memcpy(&v, &desc.payload[i * 4], 4);
    f.descriptors[static_cast<std::int64_t>(i)] = v;
  }
  return f;
}

}  // namespace featkit::eval
