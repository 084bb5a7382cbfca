#pragma once

// Scenes, planted-model synthesis, corruption (noise / occlusion) and the
// on-disk formats: scene CSV container, binary checkpoint, history report.
// The formats are documented in docs/formats.md.

#include "nrsfm/geometry.hpp"
#include "nrsfm/training.hpp"

#include <optional>
#include <string>
#include <vector>

namespace nrsfm {

struct Scene {
  Eigen::Index points = 0;
  Projection projection = Projection::Orthogonal;
  std::vector<Measurement> measurements;
  std::vector<Mask> masks;
  std::optional<std::vector<Shape>> shapes;
  std::optional<std::vector<CameraWeak>> cameras;
  /// Present when the measurements are already normalized.
  std::optional<std::vector<BoxNormalization>> normalization;

  std::size_t frame_count() const { return measurements.size(); }
  void validate() const;
};

bool operator==(const Scene& a, const Scene& b);

struct PlantedSpec {
  Eigen::Index points = 31;
  std::size_t frames = 2000;
  int layers = 2;
  int first_width = 32;
  int last_width = 8;
  /// Active atoms in the top code psi_N.
  int code_sparsity = 1;
  /// Nonzeros per column of D_2 .. D_N, which bounds the lower code supports.
  int link_sparsity = 8;
  Projection projection = Projection::Orthogonal;
  double noise_ratio = 0.0;
  int max_missing = 0;  // 0 = fully visible
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<int> widths() const;
};

struct PlantedScene {
  Scene scene;
  ModelParams params;        // generating dictionaries, zero thresholds
  std::vector<Vector> codes;  // psi_N per frame
};

/// Samples unit-norm hierarchical dictionaries (non-negative links), sparse
/// non-negative top codes with magnitudes in [0.5, 1.5], expands them to
/// centered shapes and projects them with random cameras. Noise and missing
/// points are applied afterwards when the spec asks for them.
PlantedScene synth_planted(const PlantedSpec& spec);

/// Expands a top code through the dictionary chain with no thresholds.
Shape expand_code(const Vector& code, const ModelParams& params);

/// Hides m ~ U{1..max_missing} distinct points per frame. Coordinates stay in
/// place; only the masks change.
Scene make_missing(const Scene& scene, int max_missing, std::uint64_t seed);

/// Per-frame noise at an exact Frobenius ratio.
Scene add_noise(const Scene& scene, double ratio, std::uint64_t seed);

/// Subtracts each frame's visible centroid (ground-truth cameras follow).
Scene center_frames(const Scene& scene);

void save_scene(const Scene& scene, const std::string& path);
Scene load_scene(const std::string& path);
std::string format_scene(const Scene& scene);
Scene parse_scene(const std::string& text);

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

/// Writes '# ' prefixed header lines followed by the CSV history.
void write_history(const std::vector<HistoryRecord>& history,
                   const std::vector<std::string>& header,
                   const std::string& path);

/// Replaces `path` only after the whole content was written.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace nrsfm
