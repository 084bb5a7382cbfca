#pragma once

// Hierarchical block-ISTA encoder, code/camera bottleneck, thresholded
// decoder and the masked reprojection loss.
//
// The first dictionary is kept in its P x 3K_1 reshaped form: atom k is the
// P x 3 slab of columns [3k, 3k + 3). Deeper dictionaries D_i are plain
// K_{i-1} x K_i matrices and act blockwise on the K x 2r flat block codes.
// With four block rows (translation model) every first-layer atom carries an
// implicit constant fourth column with entries +-1/P (see homogeneous_weight),
// so the homogeneous coordinate of the decoded shape is a signed mean of the
// first-layer code.

#include "nrsfm/geometry.hpp"
#include "nrsfm/sparse.hpp"

#include <string>
#include <vector>

namespace nrsfm {

/// Non-owning view of one parameter tensor (column-major).
struct TensorView {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;

  Eigen::Map<Matrix> map() const { return {data, rows, cols}; }
};

struct ModelParams {
  Eigen::Index points = 0;
  int block_rows = 3;
  Activation activation = Activation::Relu;

  /// [0] = D_1 (P x 3K_1); [i] = D_{i+1} (K_i x K_{i+1}).
  std::vector<Matrix> dictionaries;
  /// [i] = b_{i+1}, length K_{i+1}.
  std::vector<Vector> encoder_thresholds;
  /// [i] thresholds the decoder output psi_{i+1}, length K_{i+1}; N - 1 entries.
  std::vector<Vector> decoder_thresholds;
  Matrix beta;   // r x 2
  Vector gamma;  // K_N

  int layers() const { return static_cast<int>(dictionaries.size()); }
  /// K_{i+1} for 0-based layer index i.
  Eigen::Index width(int i) const;
  bool translation() const { return block_rows == 4; }

  /// Throws DimensionMismatch / InvalidArgument on a malformed parameter set.
  void validate() const;

  /// All tensors in a fixed canonical order.
  std::vector<TensorView> tensors();
  std::vector<TensorView> tensors() const;

  /// Same shapes, all entries zero.
  ModelParams zeros_like() const;
  Eigen::Index parameter_count() const;
};

/// Zero thresholds, beta = 1/(2r), gamma = 1/K_N, dictionaries zero-filled
/// with the requested shapes.
ModelParams make_params(Eigen::Index points, const std::vector<int>& widths,
                        int block_rows, Activation activation);

/// Atoms of the last dictionary as columns (D_N, or D_1 flattened when N = 1).
Matrix last_dictionary_atoms(const ModelParams& params);

/// Every intermediate quantity of one forward pass; the gradient code walks
/// it backwards.
struct ForwardTrace {
  Measurement input;                // masked W
  Mask mask;
  std::vector<Matrix> encoder_linear;  // D^T Psi before thresholding
  std::vector<BlockCode> hidden;       // Psi_1 .. Psi_N
  Vector code;                         // psi_N
  Matrix camera_raw;                   // r x 2
  std::vector<Vector> decoder_linear;  // [i] = D_{i+2} psi_{i+2}
  std::vector<Vector> decoder_codes;   // [i] = psi_{i+1}; back() == code
  Shape shape;
  double homogeneous = 1.0;  // signed mean of psi_1 in translation mode
  Eigen::Matrix<double, 3, 2> svd_u;
  Eigen::Vector2d svd_sigma;
  Eigen::Matrix2d svd_v;
  CameraWeak camera;  // rotation = U V^T, translation for r = 4
  Measurement reprojection;
  Measurement residual;  // Omega (W_hat - W)
  double loss = 0.0;
};

struct ForwardOutput {
  std::vector<BlockCode> hidden;
  Vector code;
  Matrix camera_raw;
  CameraWeak camera;
  Shape shape;
  Measurement reprojection;
  double loss = 0.0;
};

/// Square-root smoothing added under the per-frame Frobenius norm.
inline constexpr double kLossSmoothing = 1e-12;
/// Homogeneous coordinate below which the translation model gives up.
inline constexpr double kMinHomogeneous = 1e-6;

/// Entry of the implicit fourth column of first-layer atom `atom`: +1/P on
/// even atoms and -1/P on odd ones, so the translation survives a ReLU with
/// either sign.
inline double homogeneous_weight(Eigen::Index points, Eigen::Index atom) {
  return (atom % 2 == 0 ? 1.0 : -1.0) / static_cast<double>(points);
}

std::vector<BlockCode> encode(const Measurement& w, const Mask& mask,
                              const ModelParams& params);

std::pair<Vector, Matrix> recover_code_camera(const BlockCode& top,
                                              const ModelParams& params);

Shape decode(const Vector& code, const ModelParams& params);

ForwardTrace forward_trace(const Measurement& w, const Mask& mask,
                           const ModelParams& params);

ForwardOutput forward(const Measurement& w, const Mask& mask,
                      const ModelParams& params);

double loss(const Measurement& w, const Mask& mask, const ModelParams& params);

struct SplitCheck {
  double reconstruction_gap;  // max |[D, -D][Psi+; -Psi-] - D Psi|
  double camera_gap;          // gamma-combination on split vs original blocks
  bool split_nonnegative;
};

/// Verifies the non-negative split identity for a P x rK dictionary and a
/// block code, plus the matching gamma camera combination.
SplitCheck nonneg_split_check(const Matrix& dictionary, const BlockCode& code,
                              const Vector& gamma);

}  // namespace nrsfm
