#include "featkit/geometry.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "featkit/rng.hpp"

namespace featkit::geom {

namespace {

Homography normalized(Homography m) {
  const double w = m.h[8];
  if (std::abs(w) <= 1e-12)
    throw std::domain_error("homography cannot be normalized: h22 is ~0");
  for (double& v : m.h) v /= w;
  return m;
}

}  // namespace

Homography Homography::from(const double (&m)[9]) {
  Homography out;
  for (int i = 0; i < 9; ++i) out.h[i] = m[i];
  return normalized(out);
}

double Homography::det() const {
  return h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6]) +
         h[2] * (h[3] * h[7] - h[4] * h[6]);
}

Homography compose(const Homography& a, const Homography& b) {
  Homography c;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += a.h[i * 3 + k] * b.h[k * 3 + j];
      c.h[i * 3 + j] = acc;
    }
  return normalized(c);
}

Homography inverse(const Homography& m) {
  const double d = m.det();
  if (std::abs(d) <= 1e-12) throw std::domain_error("homography is singular");
  const double* h = m.h;
  Homography inv;
  inv.h[0] = (h[4] * h[8] - h[5] * h[7]) / d;
  inv.h[1] = (h[2] * h[7] - h[1] * h[8]) / d;
  inv.h[2] = (h[1] * h[5] - h[2] * h[4]) / d;
  inv.h[3] = (h[5] * h[6] - h[3] * h[8]) / d;
  inv.h[4] = (h[0] * h[8] - h[2] * h[6]) / d;
  inv.h[5] = (h[2] * h[3] - h[0] * h[5]) / d;
  inv.h[6] = (h[3] * h[7] - h[4] * h[6]) / d;
  inv.h[7] = (h[1] * h[6] - h[0] * h[7]) / d;
  inv.h[8] = (h[0] * h[4] - h[1] * h[3]) / d;
  return normalized(inv);
}

Point project(const Homography& m, Point p) {
  const double* h = m.h;
  const double w = h[6] * p.x + h[7] * p.y + h[8];
  if (std::abs(w) <= 1e-12)
    throw std::domain_error("point (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                            ") maps to infinity");
  return {(h[0] * p.x + h[1] * p.y + h[2]) / w, (h[3] * p.x + h[4] * p.y + h[5]) / w};
}

double reprojection_error(const Homography& m, Point p1, Point p2) {
  const Point q = project(m, p1);
  return std::hypot(q.x - p2.x, q.y - p2.y);
}

Homography sample_random_homography(std::uint64_t rng_seed, double max_rotation_deg,
                                    double max_perspective, double max_scale_delta,
                                    double max_translation_px, double cx, double cy) {
  if (max_rotation_deg < 0 || max_perspective < 0 || max_scale_delta < 0 ||
      max_translation_px < 0)
    throw std::invalid_argument("homography bounds must be nonnegative");
  rng::Rng r(rng_seed);
  const double theta = r.uniform(-max_rotation_deg, max_rotation_deg) * M_PI / 180.0;
  const double scale = std::pow(1.0 + max_scale_delta, r.uniform(-1.0, 1.0));
  const double px = r.uniform(-max_perspective, max_perspective);
  const double py = r.uniform(-max_perspective, max_perspective);
  const double tx = r.uniform(-max_translation_px, max_translation_px);
  const double ty = r.uniform(-max_translation_px, max_translation_px);

  const double c = std::cos(theta), s = std::sin(theta);
  Homography rot = Homography::from({c, -s, 0, s, c, 0, 0, 0, 1});
  Homography scl = Homography::from({scale, 0, 0, 0, scale, 0, 0, 0, 1});
  Homography persp = Homography::from({1, 0, 0, 0, 1, 0, px, py, 1});
  Homography to_origin = Homography::from({1, 0, -cx, 0, 1, -cy, 0, 0, 1});
  Homography back = Homography::from({1, 0, cx + tx, 0, 1, cy + ty, 0, 0, 1});
  return compose(back, compose(persp, compose(scl, compose(rot, to_origin))));
}

std::vector<Correspondence> valid_correspondence_grid(const Homography& m, int h_img, int w_img,
                                                      int stride) {
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  std::vector<Correspondence> out;
  for (int y = 1; y <= h_img - 2; y += stride)
    for (int x = 1; x <= w_img - 2; x += stride) {
      const Point p1{static_cast<double>(x), static_cast<double>(y)};
      Point p2;
      try {
        p2 = project(m, p1);
      } catch (const std::domain_error&) {
        continue;
      }
      if (p2.x > 0.0 && p2.x < w_img - 1.0 && p2.y > 0.0 && p2.y < h_img - 1.0)
        out.push_back({p1, p2});
    }
  return out;
}

Homography load_homography_ascii(std::istream& in) {
  double m[9];
  for (int i = 0; i < 9; ++i)
    if (!(in >> m[i]))
      throw std::runtime_error("homography text: expected 9 numbers, got " + std::to_string(i));
  return Homography::from(m);
}

Homography load_homography_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open homography file: " + path);
  return load_homography_ascii(f);
}

void save_homography_file(const Homography& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write homography file: " + path);
  std::ostringstream os;
  os.precision(17);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) os << m.h[r * 3 + c] << (c == 2 ? "\n" : " ");
  }
  f << os.str();
}

}  // namespace featkit::geom
