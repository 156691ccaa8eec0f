#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "featkit/geometry.hpp"
#include "featkit/image_io.hpp"
#include "featkit/teacher.hpp"

namespace featkit::datagen {

/// One drawn shape: a filled convex polygon (vertices in drawing order) or a
/// rotated ellipse. Later shapes paint over earlier ones.
struct ShapeSpec {
  enum class Kind { polygon, ellipse };
  Kind kind = Kind::polygon;
  std::vector<geom::Point> verts;  // polygon only
  geom::Point center;              // ellipse only
  double rx = 0.0;
  double ry = 0.0;
  double rot = 0.0;
  std::uint8_t intensity = 200;
};

/// A rendered scene together with every guidance signal the trainer consumes:
/// grouping ids (one per visible shape, 0 = background), the one-pixel inner
/// boundary of each region, polygon-corner keypoint labels, and one unit
/// embedding per grouping id (index 0 = background) for building guidance
/// feature rows.
struct SyntheticScene {
  img::ImageU8 image;  // grayscale
  std::vector<std::uint8_t> keypoint_labels;
  teacher::SemanticGrouping grouping;
  teacher::EdgeMap edge;
  std::vector<std::vector<double>> group_embed;
  int embed_dim = 32;

  int h() const { return image.h; }
  int w() const { return image.w; }
};

/// Deterministic renderer behind generate_scene; exposed so tests can draw
/// exact shapes. Shapes fully painted over drop out and the remaining ids are
/// compacted to 1..n in drawing order. Dims must be multiples of 8.
SyntheticScene rasterize_scene(int h, int w, const std::vector<ShapeSpec>& shapes,
                               std::uint64_t scene_seed, int embed_dim = 32);

/// n_shapes random convex polygons/ellipses with distinct intensities over a
/// textured background. Deterministic per seed.
SyntheticScene generate_scene(std::uint64_t seed, int h, int w, int n_shapes);

/// Guidance feature rows at stride 8: row (r, c) is the grouping embedding at
/// pixel (8c+4, 8r+4) plus per-component Gaussian noise sigma.
teacher::TeacherFeatureMap synth_teacher_features(const SyntheticScene& s, double sigma,
                                                  std::uint64_t seed);

/// Grouping label sampled the same way the guidance rows are (cell centers).
std::uint16_t cell_label(const teacher::SemanticGrouping& g, int row, int col);

/// Bilinear warp of a grayscale image by m (source -> output); pixels mapping
/// outside the source are black.
img::ImageU8 warp_image(const img::ImageU8& src, const geom::Homography& m);

struct PairParams {
  double max_rotation_deg = 15.0;
  double max_perspective = 5e-4;
  double max_scale_delta = 0.15;
  double max_translation_px = 8.0;
  double max_brightness = 20.0;     // additive jitter on [0,255] values
  double max_contrast_delta = 0.15; // multiplicative jitter 1 +- delta
  double noise_sigma = 2.0;         // Gaussian pixel noise, [0,255] units
  double teacher_sigma = 0.05;      // guidance embedding noise
  int min_correspondences = 32;     // overlap demanded of a sampled warp
};

/// Two views of one scene: view 2 is the bilinear warp of view 1 by `map`
/// plus photometric jitter; label maps travel by nearest neighbor. Guidance
/// feature rows are built per view with independent noise.
struct TrainingPair {
  SyntheticScene scene1;
  SyntheticScene scene2;
  geom::Homography map;  // view 1 -> view 2
  std::vector<geom::Correspondence> correspondences;
  teacher::TeacherFeatureMap f1;
  teacher::TeacherFeatureMap f2;
};

/// Warps `scene` by a random homography (resampled up to 10 times until at
/// least min_correspondences grid points stay co-visible, then an error).
/// Zero geometric and photometric bounds reproduce view 1 bit-exactly.
TrainingPair generate_pair(const SyntheticScene& scene, const PairParams& p, std::uint64_t seed);

/// One benchmark sequence: a reference view, five target views, and the five
/// reference-to-target homographies. Images stay on disk until evaluation.
struct HPatchesSequence {
  std::string name;
  std::string ref_image_path;
  std::vector<std::string> target_image_paths;
  std::vector<geom::Homography> maps;
};

struct LoadReport {
  std::vector<HPatchesSequence> sequences;  // sorted by name
  std::vector<std::string> warnings;        // one line per skipped sequence
};

/// Scans root/<sequence>/{1..6}.(ppm|pgm) + H_1_2..H_1_6 ASCII homographies.
/// Sequences in `exclude`, with missing files, unparsable or singular
/// homographies are skipped with a diagnostic naming the offender.
LoadReport load_hpatches(const std::string& root, const std::vector<std::string>& exclude = {});

}  // namespace featkit::datagen
