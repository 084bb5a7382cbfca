#pragma once

// Thresholding operators and (block) ISTA primitives.
//
// A block code with K blocks of r x 2 is stored as a K x 2r matrix whose row k
// is block k flattened row-major, i.e. entry (c, j) of the block lives at
// column 2c + j. Multiplying by (D (x) I_r)^T then becomes a plain D^T * rows
// product.

#include "nrsfm/common.hpp"

#include <functional>

namespace nrsfm {

class BlockCode {
 public:
  BlockCode() = default;
  BlockCode(Eigen::Index blocks, int block_rows);

  /// Wraps a K x 2r flat matrix.
  static BlockCode from_flat(Matrix flat, int block_rows);
  /// Builds from the stacked (rK) x 2 layout used in the math.
  static BlockCode from_stacked(const Matrix& stacked, int block_rows);

  Matrix stacked() const;

  Eigen::Index block_count() const { return flat_.rows(); }
  int block_rows() const { return block_rows_; }

  Matrix block(Eigen::Index k) const;
  void set_block(Eigen::Index k, const Matrix& value);

  const Matrix& flat() const { return flat_; }
  Matrix& flat() { return flat_; }

 private:
  Matrix flat_;
  int block_rows_ = 3;
};

double soft_threshold(double x, double b);
Vector soft_threshold(const Vector& x, double b);
Vector soft_threshold(const Vector& x, const Vector& b);

/// eta(x; b) for the chosen activation; ReLU mode is max(x - b, 0).
double threshold(double x, double b, Activation mode);
/// d eta / d x, taking 0 on the kink.
double threshold_slope(double x, double b, Activation mode);
/// d eta / d b, taking 0 on the kink.
double threshold_bias_slope(double x, double b, Activation mode);

/// Number of entries with nonzero value.
Eigen::Index active_count(const Vector& code);

/// Classical ISTA starting from zero. `observer` (optional) sees every iterate
/// z^[1..iters] with its iteration index.
Vector ista(const Vector& x, const Matrix& dictionary, double alpha, double tau,
            int iters,
            const std::function<void(int, const Vector&)>& observer = {});

/// 0.5 * ||x - D z||^2 + tau * ||z||_1
double ista_objective(const Vector& x, const Matrix& dictionary,
                      const Vector& z, double tau);

/// Exact proximal map of tau * (sum of block Frobenius norms).
BlockCode group_prox(const BlockCode& v, double tau);

/// Elementwise thresholding with b_k replicated over block k.
BlockCode block_threshold(const BlockCode& v, const Vector& b,
                          Activation mode);

/// One unrolled block-ISTA iteration from zero with unit step:
/// eta(D^T Omega X; b (x) 1). `dictionary` is P x rK, X is P x 2.
BlockCode block_ista_step(const Matrix& x, const Matrix& dictionary,
                          const Vector& b, Activation mode,
                          const Mask* mask = nullptr);

/// Blocks holding at least one nonzero entry.
Eigen::Index block_sparsity(const BlockCode& code);

}  // namespace nrsfm
