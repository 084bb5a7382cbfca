#pragma once

// Cameras, projection, input normalization, alignment and evaluation metrics.

#include "nrsfm/common.hpp"

#include <span>
#include <utility>
#include <vector>

namespace nrsfm {

/// Weak-perspective camera: W = scale * S * rotation + 1 * translation^T.
/// Orthogonal projection is the special case scale = 1, translation = 0.
struct CameraWeak {
  Matrix32 rotation = Matrix32::Identity();
  double scale = 1.0;
  Eigen::Vector2d translation = Eigen::Vector2d::Zero();
};

/// Centroid and side length removed by normalize_bbox.
struct BoxNormalization {
  Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
  double scale = 1.0;
};

struct Orthonormalized {
  Matrix32 camera;
  Eigen::Vector2d singular_values;
};

struct Alignment {
  Shape aligned;
  Eigen::Matrix3d rotation;  // orthogonal, reflections allowed
  double scale = 1.0;
};

Measurement project(const Shape& shape, const CameraWeak& camera,
                    Projection mode);

/// First two columns of a uniformly random rotation (unit-quaternion draw).
/// Weak mode also draws scale in [0.5, 1.5] and translation in [-0.5, 0.5]^2.
CameraWeak random_camera(std::uint64_t seed, Projection mode);

/// Shifts the visible centroid to the origin and scales the larger bounding
/// box side to one. Invisible rows come back as zero.
std::pair<Measurement, BoxNormalization> normalize_bbox(const Measurement& w,
                                                        const Mask& mask);
Measurement denormalize(const Measurement& normalized,
                        const BoxNormalization& record);

/// (1/P) * sum of the invisible points: what centering on the visible subset
/// leaves behind.
Eigen::Vector2d translation_residual(const Measurement& w, const Mask& mask);

/// Nearest column-orthonormal matrix U V^T. Throws RankDeficient when the
/// second singular value is below 1e-10.
Orthonormalized orthonormalize_camera(const Matrix32& raw);

/// Orthogonal Procrustes: estimate * R (times c when allow_scale) closest to
/// truth in Frobenius norm.
Alignment align_shapes(const Shape& estimate, const Shape& truth,
                       bool allow_scale);

/// ||align(estimate) - truth||_F / ||truth||_F for one frame.
double frame_3d_error(const Shape& estimate, const Shape& truth,
                      bool allow_scale);

std::vector<double> per_frame_3d_error(std::span<const Shape> estimates,
                                       std::span<const Shape> truths,
                                       bool allow_scale);

/// Mean of per_frame_3d_error.
double normalized_3d_error(std::span<const Shape> estimates,
                           std::span<const Shape> truths, bool allow_scale);

/// Fraction of frames whose error is <= each threshold.
std::vector<std::pair<double, double>> cumulative_error_curve(
    std::span<const double> errors, std::span<const double> thresholds);

/// max_{i != j} |<d_i, d_j>| / (|d_i| |d_j|) over the columns.
double mutual_coherence(const Matrix& dictionary);

/// Adds Gaussian noise rescaled so ||noise||_F / ||W||_F == ratio.
Measurement noise_perturb(const Measurement& w, double ratio,
                          std::uint64_t seed);

}  // namespace nrsfm
