#include "featkit/datagen.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "featkit/geometry.hpp"
#include "featkit/image_io.hpp"
#include "featkit/rng.hpp"
#include "featkit/teacher.hpp"

namespace datagen = featkit::datagen;
namespace geom = featkit::geom;
namespace teacher = featkit::teacher;
namespace fs = std::filesystem;
using featkit::rng::Rng;

namespace {

datagen::ShapeSpec square(double x0, double y0, double side, std::uint8_t intensity) {
  datagen::ShapeSpec s;
  s.kind = datagen::ShapeSpec::Kind::polygon;
  s.verts = {{x0, y0}, {x0 + side, y0}, {x0 + side, y0 + side}, {x0, y0 + side}};
  s.intensity = intensity;
  return s;
}

bool scenes_equal(const datagen::SyntheticScene& a, const datagen::SyntheticScene& b) {
  return a.image.px == b.image.px && a.keypoint_labels == b.keypoint_labels &&
         a.grouping.labels == b.grouping.labels && a.edge.e == b.edge.e &&
         a.group_embed == b.group_embed;
}

// Is an edge pixel within Chebyshev distance `r` of (x, y)?
bool edge_nearby(const teacher::EdgeMap& e, int x, int y, int r) {
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const int qx = x + dx;
      const int qy = y + dy;
      if (qx < 0 || qx >= e.w || qy < 0 || qy >= e.h) continue;
      if (e.at(qx, qy) == 1) return true;
    }
  }
  return false;
}

struct FixtureDir {
  fs::path root;
  explicit FixtureDir(const char* name) : root(fs::path("/tmp") / name) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~FixtureDir() { fs::remove_all(root); }
};

// Minimal well-formed benchmark sequence: 6 tiny images + 5 identity maps.
void write_sequence(const fs::path& dir) {
  fs::create_directories(dir);
  featkit::img::ImageU8 img;
  img.h = 8;
  img.w = 8;
  img.channels = 1;
  img.px.assign(64, 128);
  for (int k = 1; k <= 6; ++k) {
    featkit::img::write_pgm((dir / (std::to_string(k) + ".pgm")).string(), img);
  }
  for (int k = 2; k <= 6; ++k) {
    geom::save_homography_file(geom::Homography::identity(),
                               (dir / ("H_1_" + std::to_string(k))).string());
  }
}

}  // namespace

TEST_CASE("rasterize_scene: a single square yields outline edges and 4 corner keypoints") {
  auto s = datagen::rasterize_scene(32, 32, {square(8, 8, 16, 200)}, 5);

  // Exactly ids {0, 1}.
  CHECK(s.grouping.n_groups() == 1);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const bool in = x >= 8 && x <= 24 && y >= 8 && y <= 24;
      REQUIRE(s.grouping.at(x, y) == (in ? 1 : 0));
      // The edge is exactly the one-pixel inner outline.
      const bool rim = in && (x == 8 || x == 24 || y == 8 || y == 24);
      REQUIRE(s.edge.at(x, y) == (rim ? 1 : 0));
      if (in) REQUIRE(s.image.px[static_cast<std::size_t>(y) * 32 + x] == 200);
    }
  }

  int n_kp = 0;
  for (auto v : s.keypoint_labels) n_kp += v;
  CHECK(n_kp == 4);
  CHECK(s.keypoint_labels[8 * 32 + 8] == 1);
  CHECK(s.keypoint_labels[8 * 32 + 24] == 1);
  CHECK(s.keypoint_labels[24 * 32 + 8] == 1);
  CHECK(s.keypoint_labels[24 * 32 + 24] == 1);
}

TEST_CASE("rasterize_scene: occluded shapes drop out and ids stay contiguous") {
  // The second square completely covers the first.
  auto s = datagen::rasterize_scene(32, 32, {square(10, 10, 4, 120), square(6, 6, 20, 220)}, 5);
  CHECK(s.grouping.n_groups() == 1);
  CHECK(s.grouping.at(12, 12) == 1);  // the survivor was compacted to id 1
  CHECK(static_cast<int>(s.group_embed.size()) == 2);

  // Partial overlap keeps both, in drawing order.
  auto t = datagen::rasterize_scene(32, 32, {square(4, 4, 12, 120), square(12, 12, 14, 220)}, 5);
  CHECK(t.grouping.n_groups() == 2);
  CHECK(t.grouping.at(5, 5) == 1);
  CHECK(t.grouping.at(20, 20) == 2);
}

TEST_CASE("generate_scene: deterministic per seed") {
  auto a = datagen::generate_scene(77, 64, 64, 4);
  auto b = datagen::generate_scene(77, 64, 64, 4);
  CHECK(scenes_equal(a, b));
  auto c = datagen::generate_scene(78, 64, 64, 4);
  CHECK_FALSE(scenes_equal(a, c));

  CHECK_THROWS_AS((void)datagen::generate_scene(1, 60, 64, 2), std::invalid_argument);
  CHECK_THROWS_AS((void)datagen::generate_scene(1, 64, 64, 0), std::invalid_argument);
}

TEST_CASE("generate_scene: boundary and keypoint invariants over 100 scenes") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(Rng::derive(300, seed));
    const int h = 8 * r.uniform_int(4, 8);
    const int w = 8 * r.uniform_int(4, 8);
    auto s = datagen::generate_scene(seed, h, w, r.uniform_int(1, 6));

    const int n = s.grouping.n_groups();
    std::vector<bool> seen(static_cast<std::size_t>(n) + 1, false);
    for (auto id : s.grouping.labels) {
      REQUIRE(id <= n);
      seen[id] = true;
    }
    for (int id = 1; id <= n; ++id) REQUIRE(seen[static_cast<std::size_t>(id)]);

    // Every grouping id owns a unit embedding.
    REQUIRE(static_cast<int>(s.group_embed.size()) == n + 1);
    for (const auto& e : s.group_embed) {
      double norm2 = 0.0;
      for (double v : e) norm2 += v * v;
      REQUIRE(std::abs(norm2 - 1.0) < 1e-9);
    }

    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t at = static_cast<std::size_t>(y) * w + x;
        if (s.edge.e[at] == 1) {
          // Boundary property: some 4-neighbor carries a different label.
          const std::uint16_t mine = s.grouping.at(x, y);
          const bool differs = (x > 0 && s.grouping.at(x - 1, y) != mine) ||
                               (x + 1 < w && s.grouping.at(x + 1, y) != mine) ||
                               (y > 0 && s.grouping.at(x, y - 1) != mine) ||
                               (y + 1 < h && s.grouping.at(x, y + 1) != mine);
          REQUIRE(differs);
        }
        if (s.keypoint_labels[at] == 1) {
          REQUIRE(edge_nearby(s.edge, x, y, 1));
        }
      }
    }
  }
}

TEST_CASE("synth_teacher_features: layout, determinism, and noise scale") {
  auto s = datagen::generate_scene(12, 64, 48, 3);
  auto f = datagen::synth_teacher_features(s, 0.05, 9);
  CHECK(f.rows == (64 / 8) * (48 / 8));
  CHECK(f.cols == 32);
  teacher::validate_feature_rows(f, 64, 48);

  auto again = datagen::synth_teacher_features(s, 0.05, 9);
  CHECK(f.f == again.f);
  auto other = datagen::synth_teacher_features(s, 0.05, 10);
  CHECK(f.f != other.f);

  // Each row hugs its grouping's embedding.
  const int gw = 48 / 8;
  for (int row = 0; row < f.rows; ++row) {
    const auto& e = s.group_embed[datagen::cell_label(s.grouping, row / gw, row % gw)];
    double dist2 = 0.0;
    for (int c = 0; c < f.cols; ++c) {
      const double d = f.at(row, c) - e[static_cast<std::size_t>(c)];
      dist2 += d * d;
    }
    // Noise norm concentrates near 0.05 * sqrt(32) ~ 0.28.
    CHECK(std::sqrt(dist2) < 0.8);
  }
}

TEST_CASE("teacher relation structure separates same-group from cross-group cells") {
  // This block structure is exactly the signal the relational distillation
  // loss is meant to transfer.
  for (double sigma : {0.05, 0.1}) {
    auto s = datagen::rasterize_scene(
        64, 64, {square(4, 4, 20, 140), square(36, 36, 22, 220)}, 21);
    auto f = datagen::synth_teacher_features(s, sigma, 33);
    auto rel = teacher::relation_matrix(f);

    const int gw = 8;
    double same = 0.0, cross = 0.0;
    int n_same = 0, n_cross = 0;
    for (int i = 0; i < f.rows; ++i) {
      const std::uint16_t gi = datagen::cell_label(s.grouping, i / gw, i % gw);
      for (int j = i + 1; j < f.rows; ++j) {
        const std::uint16_t gj = datagen::cell_label(s.grouping, j / gw, j % gw);
        const double v = rel[static_cast<std::int64_t>(i) * f.rows + j];
        if (gi == gj) {
          same += v;
          ++n_same;
        } else {
          cross += v;
          ++n_cross;
        }
      }
    }
    REQUIRE(n_same > 0);
    REQUIRE(n_cross > 0);
    CHECK(same / n_same - cross / n_cross >= 0.2);
  }
}

TEST_CASE("warp_image: identity is bit-exact, translation shifts content") {
  auto s = datagen::generate_scene(5, 32, 32, 2);
  auto same = datagen::warp_image(s.image, geom::Homography::identity());
  REQUIRE(same.px.size() == s.image.px.size());
  CHECK(std::memcmp(same.px.data(), s.image.px.data(), s.image.px.size()) == 0);

  const double t[9] = {1, 0, 5, 0, 1, 0, 0, 0, 1};
  auto shifted = datagen::warp_image(s.image, geom::Homography::from(t));
  for (int y = 0; y < 32; ++y) {
    for (int x = 5; x < 32; ++x) {
      REQUIRE(shifted.px[static_cast<std::size_t>(y) * 32 + x] ==
              s.image.px[static_cast<std::size_t>(y) * 32 + x - 5]);
    }
  }
}

TEST_CASE("generate_pair: identity bounds and zero jitter reproduce view 1 bit-exactly") {
  auto s = datagen::generate_scene(31, 64, 64, 3);
  datagen::PairParams p;
  p.max_rotation_deg = 0.0;
  p.max_perspective = 0.0;
  p.max_scale_delta = 0.0;
  p.max_translation_px = 0.0;
  p.max_brightness = 0.0;
  p.max_contrast_delta = 0.0;
  p.noise_sigma = 0.0;
  auto pair = datagen::generate_pair(s, p, 8);

  CHECK(pair.scene2.image.px == s.image.px);
  CHECK(pair.scene2.grouping.labels == s.grouping.labels);
  CHECK(pair.scene2.edge.e == s.edge.e);
  CHECK(pair.scene2.keypoint_labels == s.keypoint_labels);
  // Identity map: every grid point corresponds to itself.
  for (const auto& c : pair.correspondences) {
    REQUIRE(c.p1.x == c.p2.x);
    REQUIRE(c.p1.y == c.p2.y);
  }
  // Guidance rows carry independent noise per view but the same block layout.
  CHECK(pair.f1.rows == pair.f2.rows);
  CHECK(pair.f1.f != pair.f2.f);
}

TEST_CASE("generate_pair: correspondences are exact projections and co-visible") {
  auto s = datagen::generate_scene(55, 64, 64, 3);
  datagen::PairParams p;
  auto pair = datagen::generate_pair(s, p, 9);
  REQUIRE(static_cast<int>(pair.correspondences.size()) >= p.min_correspondences);
  for (const auto& c : pair.correspondences) {
    const geom::Point q = geom::project(pair.map, c.p1);
    REQUIRE(q.x == c.p2.x);
    REQUIRE(q.y == c.p2.y);
    REQUIRE(c.p2.x > 0.0);
    REQUIRE(c.p2.x < 63.0);
    REQUIRE(c.p2.y > 0.0);
    REQUIRE(c.p2.y < 63.0);
  }
}

TEST_CASE("generate_pair: translation maps grid points to shifted correspondences") {
  // Spot-check the correspondence machinery against a pure (5,0) translation.
  const double t[9] = {1, 0, 5, 0, 1, 0, 0, 0, 1};
  auto corr = geom::valid_correspondence_grid(geom::Homography::from(t), 64, 64, 1);
  bool found = false;
  for (const auto& c : corr) {
    found = found || (c.p1.x == 10.0 && c.p1.y == 10.0 && c.p2.x == 15.0 && c.p2.y == 10.0);
  }
  CHECK(found);
}

TEST_CASE("generate_pair: grouping labels agree across the warp away from boundaries") {
  int agree = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto s = datagen::generate_scene(Rng::derive(400, seed), 64, 64, 4);
    datagen::PairParams p;
    auto pair = datagen::generate_pair(s, p, Rng::derive(401, seed));

    int pair_agree = 0, pair_total = 0;
    for (const auto& c : pair.correspondences) {
      const int x1 = static_cast<int>(std::lround(c.p1.x));
      const int y1 = static_cast<int>(std::lround(c.p1.y));
      const int x2 = static_cast<int>(std::lround(c.p2.x));
      const int y2 = static_cast<int>(std::lround(c.p2.y));
      if (edge_nearby(pair.scene1.edge, x1, y1, 1) || edge_nearby(pair.scene2.edge, x2, y2, 1))
        continue;
      ++pair_total;
      if (pair.scene1.grouping.at(x1, y1) == pair.scene2.grouping.at(x2, y2)) ++pair_agree;
    }
    REQUIRE(pair_total > 0);
    CHECK(static_cast<double>(pair_agree) >= 0.95 * pair_total);
    agree += pair_agree;
    total += pair_total;
  }
  CHECK(static_cast<double>(agree) >= 0.99 * total);
}

TEST_CASE("generate_pair: impossible overlap demand raises after 10 attempts") {
  auto s = datagen::generate_scene(2, 32, 32, 2);
  datagen::PairParams p;
  p.min_correspondences = 1 << 20;  // more than the grid can ever supply
  CHECK_THROWS_AS((void)datagen::generate_pair(s, p, 3), std::runtime_error);
}

TEST_CASE("load_hpatches: well-formed single sequence") {
  FixtureDir fx("hp_good");
  write_sequence(fx.root / "v_fixture");

  auto report = datagen::load_hpatches(fx.root.string());
  CHECK(report.warnings.empty());
  REQUIRE(report.sequences.size() == 1);
  const auto& seq = report.sequences[0];
  CHECK(seq.name == "v_fixture");
  CHECK(seq.target_image_paths.size() == 5);
  REQUIRE(seq.maps.size() == 5);
  for (const auto& m : seq.maps) {
    for (int i = 0; i < 9; ++i) REQUIRE(m.h[i] == geom::Homography::identity().h[i]);
  }
  CHECK(fs::exists(seq.ref_image_path));
}

TEST_CASE("load_hpatches: malformed homography names the file and skips the sequence") {
  FixtureDir fx("hp_bad_h");
  write_sequence(fx.root / "v_broken");
  {
    std::ofstream out(fx.root / "v_broken" / "H_1_2");
    out << "1 0 0 0 1 0 0 0";  // 8 numbers
  }
  auto report = datagen::load_hpatches(fx.root.string());
  CHECK(report.sequences.empty());
  REQUIRE(report.warnings.size() == 1);
  CHECK(report.warnings[0].find("v_broken") != std::string::npos);
  CHECK(report.warnings[0].find("H_1_2") != std::string::npos);
}

TEST_CASE("load_hpatches: missing image, singular map, and exclusion list") {
  FixtureDir fx("hp_mixed");
  write_sequence(fx.root / "i_ok");
  write_sequence(fx.root / "v_missing");
  fs::remove(fx.root / "v_missing" / "4.pgm");
  write_sequence(fx.root / "v_flat");
  {
    std::ofstream out(fx.root / "v_flat" / "H_1_3");
    out << "1 0 0\n2 0 0\n0 0 1\n";  // rank-deficient
  }

  auto report = datagen::load_hpatches(fx.root.string());
  REQUIRE(report.sequences.size() == 1);
  CHECK(report.sequences[0].name == "i_ok");
  REQUIRE(report.warnings.size() == 2);
  // Directory scan order is by name: v_flat before v_missing.
  CHECK(report.warnings[0].find("singular") != std::string::npos);
  CHECK(report.warnings[1].find("missing image 4") != std::string::npos);

  auto excluded = datagen::load_hpatches(fx.root.string(), {"i_ok"});
  CHECK(excluded.sequences.empty());

  CHECK_THROWS_AS((void)datagen::load_hpatches((fx.root / "nope").string()),
                  std::runtime_error);
}
