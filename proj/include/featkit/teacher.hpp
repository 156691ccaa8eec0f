#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "featkit/diffcore.hpp"

namespace featkit::teacher {

/// Guidance feature rows: one row per coarse-grid cell (img H/8 * W/8), C channels.
/// float32 on disk, promoted to double in memory.
struct TeacherFeatureMap {
  int rows = 0;
  int cols = 0;
  std::vector<double> f;

  double at(int r, int c) const { return f[static_cast<std::size_t>(r) * cols + c]; }
};

/// Region labels per pixel: 0 = unassigned, region ids are 1..n_groups, each
/// id occurring at least once.
struct SemanticGrouping {
  int h = 0;
  int w = 0;
  std::vector<std::uint16_t> labels;

  std::uint16_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * w + x]; }
  int n_groups() const;
};

/// Region-boundary map; stored values are strictly {0,1}.
struct EdgeMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> e;

  std::uint8_t at(int x, int y) const { return e[static_cast<std::size_t>(y) * w + x]; }
};

/// Pairwise cosine similarity of feature rows: out[i][j] = f_i . f_j / (|f_i||f_j|).
/// Zero-norm rows produce all-zero rows/columns, including their own diagonal.
/// Rejects NaN/Inf input.
diff::Array relation_matrix(const diff::Array& f);
diff::Array relation_matrix(const TeacherFeatureMap& f);
/// Tracked variant for the student side (gradients flow into f).
diff::Var relation_matrix(diff::Var f);

enum class PairLabel { positive, negative, ignore_pair };

/// positive: same nonzero label at two distinct pixels; negative: differing
/// nonzero labels; ignore: any unassigned pixel or identical pixel.
PairLabel grouping_pair_label(const SemanticGrouping& g, int x1, int y1, int x2, int y2);

/// Guard for loading features against an image: rows must equal (h/8)*(w/8).
void validate_feature_rows(const TeacherFeatureMap& f, int img_h, int img_w);

// ---- signal container ("TSG1") ----
// layout: magic "TSG1", u8 kind, u8 dtype, 2 reserved zero bytes,
//         u32le ndim, ndim x u32le extents, row-major payload.

namespace kind {
inline constexpr std::uint8_t teacher_feature = 0;  // f32, [rows, C]
inline constexpr std::uint8_t grouping = 1;         // u16, [H, W]
inline constexpr std::uint8_t edge = 2;             // u8,  [H, W]
inline constexpr std::uint8_t keypoints = 3;        // f32, [K, 3] (x, y, score)
inline constexpr std::uint8_t descriptors = 4;      // f32, [K, D]
inline constexpr std::uint8_t keypoint_labels = 5;  // u8,  [H, W]
}  // namespace kind

namespace dtype {
inline constexpr std::uint8_t f32 = 0;
inline constexpr std::uint8_t u16 = 1;
inline constexpr std::uint8_t u8 = 2;
}  // namespace dtype

struct SignalBlob {
  std::uint8_t kind = 0;
  std::uint8_t dtype = 0;
  std::vector<std::uint32_t> extents;
  std::vector<std::uint8_t> payload;  // little-endian scalars, row-major

  std::uint64_t numel() const;
};

std::vector<std::uint8_t> serialize_blob(const SignalBlob& b);
SignalBlob parse_blob(const std::vector<std::uint8_t>& buf);
SignalBlob read_blob_file(const std::string& path);
void write_blob_file(const std::string& path, const SignalBlob& b);

TeacherFeatureMap read_teacher_feature(const std::string& path);
void write_teacher_feature(const std::string& path, const TeacherFeatureMap& f);
SemanticGrouping read_grouping(const std::string& path);
void write_grouping(const std::string& path, const SemanticGrouping& g);
EdgeMap read_edge(const std::string& path);
void write_edge(const std::string& path, const EdgeMap& e);

/// 8-bit PGM with edges at 255, for eyeballing.
void write_edge_pgm(const std::string& path, const EdgeMap& e);

}  // namespace featkit::teacher
