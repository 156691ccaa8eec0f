#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace featkit::geom {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Planar homography, row-major 3x3 with h[8] normalized to 1.
/// Pixel convention project-wide: origin at the center of the top-left pixel,
/// x grows rightward, y grows downward.
struct Homography {
  double h[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography from(const double (&m)[9]);

  double det() const;
};

/// Matrix product a*b: project(compose(a,b), p) == project(a, project(b, p)).
Homography compose(const Homography& a, const Homography& b);
Homography inverse(const Homography& m);

Point project(const Homography& m, Point p);
double reprojection_error(const Homography& m, Point p1, Point p2);

/// Random rotation/scale/perspective/translation stack about (cx, cy),
/// translation in pixels on top. Scale is log-symmetric in
/// [1/(1+max_scale_delta), 1+max_scale_delta]. Deterministic per seed;
/// all bounds zero gives the identity.
Homography sample_random_homography(std::uint64_t rng_seed, double max_rotation_deg,
                                    double max_perspective, double max_scale_delta,
                                    double max_translation_px, double cx = 0.0, double cy = 0.0);

struct Correspondence {
  Point p1;
  Point p2;
};

/// Integer grid over image 1 (x,y in [1, side-2], step `stride`), kept when the
/// projected endpoint lands strictly inside image 2.
std::vector<Correspondence> valid_correspondence_grid(const Homography& m, int h_img, int w_img,
                                                      int stride);

/// ASCII 3x3: three lines of three whitespace-separated reals, row-major,
/// normalized so the bottom-right entry is 1.
Homography load_homography_ascii(std::istream& in);
Homography load_homography_file(const std::string& path);
void save_homography_file(const Homography& m, const std::string& path);

}  // namespace featkit::geom
