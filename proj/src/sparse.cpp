#include "nrsfm/sparse.hpp"

#include <cmath>
#include <sstream>

namespace nrsfm {

const char* to_string(Activation a) {
  return a == Activation::Relu ? "relu" : "soft";
}

const char* to_string(Projection p) {
  return p == Projection::Orthogonal ? "orthogonal" : "weak_perspective";
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "soft") return Activation::Soft;
  fail(ErrorCode::InvalidArgument, "unknown activation '" + s + "'");
}

Projection parse_projection(const std::string& s) {
  if (s == "orthogonal") return Projection::Orthogonal;
  if (s == "weak_perspective" || s == "weak") return Projection::WeakPerspective;
  fail(ErrorCode::InvalidArgument, "unknown projection '" + s + "'");
}

BlockCode::BlockCode(Eigen::Index blocks, int block_rows)
    : flat_(Matrix::Zero(blocks, 2 * block_rows)), block_rows_(block_rows) {}

BlockCode BlockCode::from_flat(Matrix flat, int block_rows) {
  require(flat.cols() == 2 * block_rows, ErrorCode::DimensionMismatch,
          "flat block code must have 2r columns");
  BlockCode out;
  out.flat_ = std::move(flat);
  out.block_rows_ = block_rows;
  return out;
}

BlockCode BlockCode::from_stacked(const Matrix& stacked, int block_rows) {
  require(stacked.cols() == 2 && stacked.rows() % block_rows == 0,
          ErrorCode::DimensionMismatch,
          "stacked block code must be (r*K) x 2");
  const Eigen::Index k = stacked.rows() / block_rows;
  BlockCode out(k, block_rows);
  for (Eigen::Index b = 0; b < k; ++b)
    for (int c = 0; c < block_rows; ++c)
      for (int j = 0; j < 2; ++j)
        out.flat_(b, 2 * c + j) = stacked(b * block_rows + c, j);
  return out;
}

Matrix BlockCode::stacked() const {
  Matrix out(block_count() * block_rows_, 2);
  for (Eigen::Index b = 0; b < block_count(); ++b)
    for (int c = 0; c < block_rows_; ++c)
      for (int j = 0; j < 2; ++j)
        out(b * block_rows_ + c, j) = flat_(b, 2 * c + j);
  return out;
}

Matrix BlockCode::block(Eigen::Index k) const {
  Matrix out(block_rows_, 2);
  for (int c = 0; c < block_rows_; ++c)
    for (int j = 0; j < 2; ++j) out(c, j) = flat_(k, 2 * c + j);
  return out;
}

void BlockCode::set_block(Eigen::Index k, const Matrix& value) {
  require(value.rows() == block_rows_ && value.cols() == 2,
          ErrorCode::DimensionMismatch, "block must be r x 2");
  for (int c = 0; c < block_rows_; ++c)
    for (int j = 0; j < 2; ++j) flat_(k, 2 * c + j) = value(c, j);
}

double soft_threshold(double x, double b) {
  require(b >= 0.0, ErrorCode::InvalidArgument, "threshold must be >= 0");
  if (x > b) return x - b;
  if (x < -b) return x + b;
  return 0.0;
}

Vector soft_threshold(const Vector& x, double b) {
  require(b >= 0.0, ErrorCode::InvalidArgument, "threshold must be >= 0");
  return x.unaryExpr([b](double v) { return soft_threshold(v, b); });
}

Vector soft_threshold(const Vector& x, const Vector& b) {
  require(x.size() == b.size(), ErrorCode::DimensionMismatch,
          "threshold length must match input");
  require((b.array() >= 0.0).all(), ErrorCode::InvalidArgument,
          "thresholds must be >= 0");
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = soft_threshold(x[i], b[i]);
  return out;
}

double threshold(double x, double b, Activation mode) {
  if (mode == Activation::Relu) return x > b ? x - b : 0.0;
  if (x > b) return x - b;
  if (x < -b) return x + b;
  return 0.0;
}

double threshold_slope(double x, double b, Activation mode) {
  if (mode == Activation::Relu) return x > b ? 1.0 : 0.0;
  return (x > b || x < -b) ? 1.0 : 0.0;
}

double threshold_bias_slope(double x, double b, Activation mode) {
  if (x > b) return -1.0;
  if (mode == Activation::Soft && x < -b) return 1.0;
  return 0.0;
}

Eigen::Index active_count(const Vector& code) {
  return (code.array() != 0.0).count();
}

double ista_objective(const Vector& x, const Matrix& dictionary,
                      const Vector& z, double tau) {
  return 0.5 * (x - dictionary * z).squaredNorm() + tau * z.lpNorm<1>();
}

Vector ista(const Vector& x, const Matrix& dictionary, double alpha, double tau,
            int iters, const std::function<void(int, const Vector&)>& observer) {
  require(alpha > 0.0, ErrorCode::InvalidArgument, "step size must be > 0");
  require(iters >= 1, ErrorCode::InvalidArgument, "iters must be >= 1");
  require(tau >= 0.0, ErrorCode::InvalidArgument, "tau must be >= 0");
  require(x.size() == dictionary.rows(), ErrorCode::DimensionMismatch,
          "measurement length must equal dictionary rows");
  Vector z = Vector::Zero(dictionary.cols());
  for (int i = 1; i <= iters; ++i) {
    const Vector v = z - alpha * dictionary.transpose() * (dictionary * z - x);
    z = soft_threshold(v, alpha * tau);
    if (observer) observer(i, z);
  }
  return z;
}

BlockCode group_prox(const BlockCode& v, double tau) {
  require(tau >= 0.0, ErrorCode::InvalidArgument, "tau must be >= 0");
  BlockCode out = v;
  for (Eigen::Index k = 0; k < v.block_count(); ++k) {
    const double norm = v.flat().row(k).norm();
    const double shrink = norm > 0.0 ? std::max(1.0 - tau / norm, 0.0) : 0.0;
    out.flat().row(k) *= shrink;
  }
  return out;
}

BlockCode block_threshold(const BlockCode& v, const Vector& b,
                          Activation mode) {
  require(b.size() == v.block_count(), ErrorCode::DimensionMismatch,
          "one threshold per block required");
  require((b.array() >= 0.0).all(), ErrorCode::InvalidArgument,
          "thresholds must be >= 0");
  BlockCode out = v;
  Matrix& f = out.flat();
  for (Eigen::Index k = 0; k < f.rows(); ++k)
    for (Eigen::Index c = 0; c < f.cols(); ++c)
      f(k, c) = threshold(f(k, c), b[k], mode);
  return out;
}

BlockCode block_ista_step(const Matrix& x, const Matrix& dictionary,
                          const Vector& b, Activation mode, const Mask* mask) {
  require(x.cols() == 2 && x.rows() == dictionary.rows(),
          ErrorCode::DimensionMismatch,
          "measurement must be P x 2 with P = dictionary rows");
  require(b.size() > 0 && dictionary.cols() % b.size() == 0,
          ErrorCode::DimensionMismatch,
          "dictionary columns must be a multiple of the block count");
  const auto rows = static_cast<int>(dictionary.cols() / b.size());
  Matrix correlation;
  if (mask) {
    require(mask->size() == x.rows(), ErrorCode::DimensionMismatch,
            "mask length must equal point count");
    Matrix masked = x;
    for (Eigen::Index p = 0; p < x.rows(); ++p)
      if (!(*mask)[p]) masked.row(p).setZero();
    correlation = dictionary.transpose() * masked;
  } else {
    correlation = dictionary.transpose() * x;
  }
  return block_threshold(BlockCode::from_stacked(correlation, rows), b, mode);
}

Eigen::Index block_sparsity(const BlockCode& code) {
  Eigen::Index count = 0;
  for (Eigen::Index k = 0; k < code.block_count(); ++k)
    if ((code.flat().row(k).array() != 0.0).any()) ++count;
  return count;
}

}  // namespace nrsfm
