#include "featkit/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <utility>

#include "featkit/rng.hpp"

namespace fs = std::filesystem;

namespace featkit::datagen {

namespace {

void require_dims(int h, int w) {
  if (h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0) {
    throw std::invalid_argument("scene dims must be positive multiples of 8, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
}

// Inclusive point-in-convex-polygon test; verts must wind counter-clockwise
// in the y-down pixel frame.
bool inside_polygon(const std::vector<geom::Point>& v, double x, double y) {
  const std::size_t n = v.size();
  for (std::size_t i = 0; i < n; ++i) {
    const geom::Point& a = v[i];
    const geom::Point& b = v[(i + 1) % n];
    const double cross = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
    if (cross < -1e-9) return false;
  }
  return true;
}

bool inside_ellipse(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.center.x;
  const double dy = y - s.center.y;
  const double c = std::cos(s.rot);
  const double sn = std::sin(s.rot);
  const double u = (dx * c + dy * sn) / s.rx;
  const double v = (-dx * sn + dy * c) / s.ry;
  return u * u + v * v <= 1.0;
}

double signed_area(const std::vector<geom::Point>& v) {
  double a = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const geom::Point& p = v[i];
    const geom::Point& q = v[(i + 1) % v.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

}  // namespace

SyntheticScene rasterize_scene(int h, int w, const std::vector<ShapeSpec>& shapes,
                               std::uint64_t scene_seed, int embed_dim) {
  require_dims(h, w);
  if (shapes.empty()) throw std::invalid_argument("rasterize_scene: need at least one shape");
  if (embed_dim < 1) throw std::invalid_argument("rasterize_scene: embed_dim must be positive");

  SyntheticScene s;
  s.embed_dim = embed_dim;
  s.image.h = h;
  s.image.w = w;
  s.image.channels = 1;
  s.image.px.resize(static_cast<std::size_t>(h) * w);
  s.grouping.h = h;
  s.grouping.w = w;
  s.grouping.labels.assign(static_cast<std::size_t>(h) * w, 0);

  // Textured background: a per-scene base level with per-pixel jitter, all of
  // it well below the shape intensities.
  rng::Rng tex(rng::Rng::derive(scene_seed, 0));
  const int base = tex.uniform_int(38, 80);
  for (auto& p : s.image.px) p = static_cast<std::uint8_t>(base + tex.uniform_int(-12, 12));

  // Painter's algorithm; the grouping id records the topmost shape.
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    ShapeSpec spec = shapes[k];
    if (spec.kind == ShapeSpec::Kind::polygon) {
      if (spec.verts.size() < 3) {
        throw std::invalid_argument("rasterize_scene: polygon needs >= 3 vertices");
      }
      if (signed_area(spec.verts) < 0.0) {
        std::reverse(spec.verts.begin(), spec.verts.end());
      }
    } else if (spec.rx <= 0.0 || spec.ry <= 0.0) {
      throw std::invalid_argument("rasterize_scene: ellipse radii must be positive");
    }

    double lo_x = w - 1, hi_x = 0, lo_y = h - 1, hi_y = 0;
    if (spec.kind == ShapeSpec::Kind::polygon) {
      for (const auto& p : spec.verts) {
        lo_x = std::min(lo_x, p.x);
        hi_x = std::max(hi_x, p.x);
        lo_y = std::min(lo_y, p.y);
        hi_y = std::max(hi_y, p.y);
      }
    } else {
      const double r = std::max(spec.rx, spec.ry);
      lo_x = spec.center.x - r;
      hi_x = spec.center.x + r;
      lo_y = spec.center.y - r;
      hi_y = spec.center.y + r;
    }
    const int x0 = std::max(0, static_cast<int>(std::floor(lo_x)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(hi_x)));
    const int y0 = std::max(0, static_cast<int>(std::floor(lo_y)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(hi_y)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const bool in = spec.kind == ShapeSpec::Kind::polygon
                            ? inside_polygon(spec.verts, x, y)
                            : inside_ellipse(spec, x, y);
        if (!in) continue;
        const std::size_t at = static_cast<std::size_t>(y) * w + x;
        s.image.px[at] = spec.intensity;
        s.grouping.labels[at] = static_cast<std::uint16_t>(k + 1);
      }
    }
  }

  // Shapes painted over completely drop out; compact the survivors to 1..n in
  // drawing order so the grouping stays contiguous.
  std::vector<std::uint16_t> remap(shapes.size() + 1, 0);
  {
    std::vector<bool> present(shapes.size() + 1, false);
    for (std::uint16_t id : s.grouping.labels) present[id] = true;
    std::uint16_t next = 1;
    for (std::size_t id = 1; id <= shapes.size(); ++id) {
      if (present[id]) remap[id] = next++;
    }
    for (auto& id : s.grouping.labels) id = remap[id];
  }

  // One-pixel boundaries on the higher-labeled side of each region border.
  s.edge.h = h;
  s.edge.w = w;
  s.edge.e.assign(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::uint16_t mine = s.grouping.at(x, y);
      if (mine == 0) continue;
      const bool rim = (x > 0 && s.grouping.at(x - 1, y) < mine) ||
                       (x + 1 < w && s.grouping.at(x + 1, y) < mine) ||
                       (y > 0 && s.grouping.at(x, y - 1) < mine) ||
                       (y + 1 < h && s.grouping.at(x, y + 1) < mine);
      if (rim) s.edge.e[static_cast<std::size_t>(y) * w + x] = 1;
    }
  }

  // Polygon corners become keypoint labels, snapped onto the nearest rim
  // pixel of their own shape; occluded corners find no such pixel and drop.
  s.keypoint_labels.assign(static_cast<std::size_t>(h) * w, 0);
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    const ShapeSpec& spec = shapes[k];
    const std::uint16_t id = remap[k + 1];
    if (spec.kind != ShapeSpec::Kind::polygon || id == 0) continue;
    for (const auto& vtx : spec.verts) {
      const int px = static_cast<int>(std::lround(vtx.x));
      const int py = static_cast<int>(std::lround(vtx.y));
      bool placed = false;
      for (int radius = 0; radius <= 2 && !placed; ++radius) {
        for (int dy = -radius; dy <= radius && !placed; ++dy) {
          for (int dx = -radius; dx <= radius && !placed; ++dx) {
            if (std::max(std::abs(dx), std::abs(dy)) != radius) continue;
            const int qx = px + dx;
            const int qy = py + dy;
            if (qx < 0 || qx >= w || qy < 0 || qy >= h) continue;
            if (s.edge.at(qx, qy) == 1 && s.grouping.at(qx, qy) == id) {
              s.keypoint_labels[static_cast<std::size_t>(qy) * w + qx] = 1;
              placed = true;
            }
          }
        }
      }
    }
  }

  // One unit embedding per grouping id, background included.
  rng::Rng er(rng::Rng::derive(scene_seed, 1));
  const int n = s.grouping.n_groups();
  s.group_embed.assign(static_cast<std::size_t>(n) + 1, std::vector<double>());
  for (int id = 0; id <= n; ++id) {
    auto& e = s.group_embed[static_cast<std::size_t>(id)];
    e.resize(static_cast<std::size_t>(embed_dim));
    double norm2 = 0.0;
    for (auto& v : e) {
      v = er.normal();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : e) v *= inv;
  }
  return s;
}

SyntheticScene generate_scene(std::uint64_t seed, int h, int w, int n_shapes) {
  require_dims(h, w);
  if (n_shapes < 1) throw std::invalid_argument("generate_scene: n_shapes must be >= 1");

  rng::Rng r(rng::Rng::derive(seed, 100));
  const double min_dim = std::min(h, w);
  std::vector<ShapeSpec> shapes;
  shapes.reserve(static_cast<std::size_t>(n_shapes));
  for (int k = 0; k < n_shapes; ++k) {
    ShapeSpec spec;
    spec.kind = r.uniform() < 0.5 ? ShapeSpec::Kind::polygon : ShapeSpec::Kind::ellipse;
    spec.center = {r.uniform(0.15, 0.85) * w, r.uniform(0.15, 0.85) * h};
    spec.rx = r.uniform(min_dim / 10.0, min_dim / 4.0);
    spec.ry = r.uniform(min_dim / 10.0, min_dim / 4.0);
    spec.rot = r.uniform(0.0, 3.14159265358979323846);
    spec.intensity = static_cast<std::uint8_t>(
        n_shapes == 1 ? 240 : 100 + (140 * k) / (n_shapes - 1));
    if (spec.kind == ShapeSpec::Kind::polygon) {
      // Corners on the rotated ellipse at sorted angles: always convex.
      const int nv = r.uniform_int(3, 8);
      std::vector<double> angles(static_cast<std::size_t>(nv));
      for (auto& a : angles) a = r.uniform(0.0, 2.0 * 3.14159265358979323846);
      std::sort(angles.begin(), angles.end());
      const double c = std::cos(spec.rot);
      const double sn = std::sin(spec.rot);
      for (double a : angles) {
        const double ex = spec.rx * std::cos(a);
        const double ey = spec.ry * std::sin(a);
        spec.verts.push_back({spec.center.x + ex * c - ey * sn,
                              spec.center.y + ex * sn + ey * c});
      }
    }
    shapes.push_back(std::move(spec));
  }
  return rasterize_scene(h, w, shapes, rng::Rng::derive(seed, 101), 32);
}

std::uint16_t cell_label(const teacher::SemanticGrouping& g, int row, int col) {
  return g.at(col * 8 + 4, row * 8 + 4);
}

teacher::TeacherFeatureMap synth_teacher_features(const SyntheticScene& s, double sigma,
                                                  std::uint64_t seed) {
  const int gh = s.h() / 8;
  const int gw = s.w() / 8;
  teacher::TeacherFeatureMap f;
  f.rows = gh * gw;
  f.cols = s.embed_dim;
  f.f.resize(static_cast<std::size_t>(f.rows) * f.cols);
  rng::Rng r(seed);
  for (int gr = 0; gr < gh; ++gr) {
    for (int gc = 0; gc < gw; ++gc) {
      const auto& e = s.group_embed[cell_label(s.grouping, gr, gc)];
      double* row = &f.f[(static_cast<std::size_t>(gr) * gw + gc) * s.embed_dim];
      for (int c = 0; c < s.embed_dim; ++c) {
        row[c] = e[static_cast<std::size_t>(c)] + sigma * r.normal();
      }
    }
  }
  return f;
}

img::ImageU8 warp_image(const img::ImageU8& src, const geom::Homography& m) {
  if (src.channels != 1) throw std::invalid_argument("warp_image: grayscale input expected");
  const geom::Homography inv = geom::inverse(m);
  img::ImageU8 out;
  out.h = src.h;
  out.w = src.w;
  out.channels = 1;
  out.px.assign(static_cast<std::size_t>(src.h) * src.w, 0);
  for (int y = 0; y < src.h; ++y) {
    for (int x = 0; x < src.w; ++x) {
      const geom::Point p = geom::project(inv, {static_cast<double>(x), static_cast<double>(y)});
      if (p.x < 0.0 || p.x > src.w - 1.0 || p.y < 0.0 || p.y > src.h - 1.0) continue;
      const int x0 = std::min(static_cast<int>(p.x), src.w - 2 < 0 ? 0 : src.w - 2);
      const int y0 = std::min(static_cast<int>(p.y), src.h - 2 < 0 ? 0 : src.h - 2);
      const double fx = p.x - x0;
      const double fy = p.y - y0;
      auto at = [&](int xx, int yy) {
        return static_cast<double>(src.px[static_cast<std::size_t>(yy) * src.w + xx]);
      };
      const double v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
                       fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
      out.px[static_cast<std::size_t>(y) * src.w + x] =
          static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
    }
  }
  return out;
}

TrainingPair generate_pair(const SyntheticScene& scene, const PairParams& p, std::uint64_t seed) {
  const int h = scene.h();
  const int w = scene.w();

  geom::Homography m;
  std::vector<geom::Correspondence> corr;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    m = geom::sample_random_homography(rng::Rng::derive(seed, 1000 + attempt),
                                       p.max_rotation_deg, p.max_perspective, p.max_scale_delta,
                                       p.max_translation_px, (w - 1) / 2.0, (h - 1) / 2.0);
    corr = geom::valid_correspondence_grid(m, h, w, 4);
    found = static_cast<int>(corr.size()) >= p.min_correspondences;
  }
  if (!found) {
    throw std::runtime_error("generate_pair: no warp with enough overlap after 10 draws");
  }

  TrainingPair pair;
  pair.scene1 = scene;
  pair.map = m;
  pair.correspondences = std::move(corr);

  SyntheticScene& s2 = pair.scene2;
  s2.embed_dim = scene.embed_dim;
  s2.group_embed = scene.group_embed;
  s2.image = warp_image(scene.image, m);

  // Photometric jitter on view 2 only; zero bounds leave the warp untouched.
  rng::Rng pr(rng::Rng::derive(seed, 2));
  const double contrast = 1.0 + pr.uniform(-p.max_contrast_delta, p.max_contrast_delta);
  const double brightness = pr.uniform(-p.max_brightness, p.max_brightness);
  for (auto& v : s2.image.px) {
    const double noisy = contrast * v + brightness + p.noise_sigma * pr.normal();
    v = static_cast<std::uint8_t>(std::clamp<long>(std::lround(noisy), 0, 255));
  }

  // Label maps travel by nearest neighbor; fractional labels would be junk.
  const geom::Homography inv = geom::inverse(m);
  s2.grouping.h = h;
  s2.grouping.w = w;
  s2.grouping.labels.assign(static_cast<std::size_t>(h) * w, 0);
  s2.edge.h = h;
  s2.edge.w = w;
  s2.edge.e.assign(static_cast<std::size_t>(h) * w, 0);
  s2.keypoint_labels.assign(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const geom::Point q = geom::project(inv, {static_cast<double>(x), static_cast<double>(y)});
      const int sx = static_cast<int>(std::lround(q.x));
      const int sy = static_cast<int>(std::lround(q.y));
      if (sx < 0 || sx >= w || sy < 0 || sy >= h) continue;
      const std::size_t dst = static_cast<std::size_t>(y) * w + x;
      const std::size_t at = static_cast<std::size_t>(sy) * w + sx;
      s2.grouping.labels[dst] = scene.grouping.labels[at];
      s2.edge.e[dst] = scene.edge.e[at];
      s2.keypoint_labels[dst] = scene.keypoint_labels[at];
    }
  }

  pair.f1 = synth_teacher_features(pair.scene1, p.teacher_sigma, rng::Rng::derive(seed, 3));
  pair.f2 = synth_teacher_features(pair.scene2, p.teacher_sigma, rng::Rng::derive(seed, 4));
  return pair;
}

LoadReport load_hpatches(const std::string& root, const std::vector<std::string>& exclude) {
  if (!fs::is_directory(root)) {
    throw std::runtime_error("load_hpatches: not a directory: " + root);
  }
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());

  LoadReport report;
  for (const auto& name : names) {
    if (std::find(exclude.begin(), exclude.end(), name) != exclude.end()) continue;
    const fs::path dir = fs::path(root) / name;

    auto find_image = [&dir](int index) -> std::string {
      for (const char* ext : {".ppm", ".pgm"}) {
        const fs::path p = dir / (std::to_string(index) + ext);
        if (fs::exists(p)) return p.string();
      }
      return {};
    };

    HPatchesSequence seq;
    seq.name = name;
    seq.ref_image_path = find_image(1);
    std::string problem;
    if (seq.ref_image_path.empty()) problem = "missing image 1";
    for (int k = 2; k <= 6 && problem.empty(); ++k) {
      const std::string img = find_image(k);
      if (img.empty()) {
        problem = "missing image " + std::to_string(k);
        break;
      }
      const fs::path hfile = dir / ("H_1_" + std::to_string(k));
      try {
        geom::Homography m = geom::load_homography_file(hfile.string());
        if (std::abs(m.det()) <= 1e-12) {
          problem = hfile.filename().string() + ": homography is singular";
          break;
        }
        seq.target_image_paths.push_back(img);
        seq.maps.push_back(m);
      } catch (const std::exception& e) {
        problem = hfile.filename().string() + ": " + e.what();
      }
    }
    if (!problem.empty()) {
      report.warnings.push_back(name + ": " + problem);
      continue;
    }
    report.sequences.push_back(std::move(seq));
  }
  return report;
}

}  // namespace featkit::datagen
