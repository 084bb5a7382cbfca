#include "nrsfm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace nrsfm {

namespace {

Eigen::Matrix3d quaternion_rotation(double w, double x, double y, double z) {
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

}  // namespace

Measurement project(const Shape& shape, const CameraWeak& camera,
                    Projection mode) {
  const Eigen::Matrix2d gram = camera.rotation.transpose() * camera.rotation;
  require((gram - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() <= 1e-6,
          ErrorCode::InvalidArgument,
          "camera rotation part is not column-orthonormal");
  if (mode == Projection::Orthogonal) {
    require(camera.scale == 1.0 && camera.translation.isZero(0.0),
            ErrorCode::InvalidArgument,
            "orthogonal projection requires scale 1 and zero translation");
    return shape * camera.rotation;
  }
  require(camera.scale > 0.0, ErrorCode::InvalidArgument,
          "camera scale must be positive");
  Measurement w = camera.scale * (shape * camera.rotation);
  w.rowwise() += camera.translation.transpose();
  return w;
}

CameraWeak random_camera(std::uint64_t seed, Projection mode) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  Eigen::Vector4d q;
  do {
    for (int i = 0; i < 4; ++i) q[i] = gauss(rng);
  } while (q.norm() < 1e-12);
  q.normalize();
  CameraWeak cam;
  const Eigen::Matrix3d r = quaternion_rotation(q[0], q[1], q[2], q[3]);
  // Re-orthonormalize to clean up rounding in the quaternion formula.
  cam.rotation = orthonormalize_camera(r.leftCols<2>()).camera;
  if (mode == Projection::WeakPerspective) {
    std::uniform_real_distribution<double> scale(0.5, 1.5);
    std::uniform_real_distribution<double> shift(-0.5, 0.5);
    cam.scale = scale(rng);
    cam.translation = {shift(rng), shift(rng)};
  }
  return cam;
}

std::pair<Measurement, BoxNormalization> normalize_bbox(const Measurement& w,
                                                        const Mask& mask) {
  require(mask.size() == w.rows(), ErrorCode::DimensionMismatch,
          "mask length must equal point count");
  require(mask.count() >= 2, ErrorCode::InvalidArgument,
          "normalization needs at least two visible points");
  Eigen::Vector2d lo = Eigen::Vector2d::Constant(
      std::numeric_limits<double>::infinity());
  Eigen::Vector2d hi = -lo;
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  for (Eigen::Index p = 0; p < w.rows(); ++p) {
    if (!mask[p]) continue;
    const Eigen::Vector2d pt = w.row(p).transpose();
    lo = lo.cwiseMin(pt);
    hi = hi.cwiseMax(pt);
    sum += pt;
  }
  BoxNormalization rec;
  rec.centroid = sum / static_cast<double>(mask.count());
  rec.scale = (hi - lo).maxCoeff();
  require(rec.scale > 0.0, ErrorCode::InvalidArgument,
          "degenerate frame: all visible points coincide");
  Measurement out = Measurement::Zero(w.rows(), 2);
  for (Eigen::Index p = 0; p < w.rows(); ++p)
    if (mask[p])
      out.row(p) = (w.row(p) - rec.centroid.transpose()) / rec.scale;
  return {out, rec};
}

Measurement denormalize(const Measurement& normalized,
                        const BoxNormalization& record) {
  Measurement out = normalized * record.scale;
  out.rowwise() += record.centroid.transpose();
  return out;
}

Eigen::Vector2d translation_residual(const Measurement& w, const Mask& mask) {
  require(mask.size() == w.rows(), ErrorCode::DimensionMismatch,
          "mask length must equal point count");
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  for (Eigen::Index p = 0; p < w.rows(); ++p)
    if (!mask[p]) sum += w.row(p).transpose();
  return sum / static_cast<double>(w.rows());
}

Orthonormalized orthonormalize_camera(const Matrix32& raw) {
  require(raw.allFinite(), ErrorCode::NonFinite, "camera has non-finite entries");
  Eigen::JacobiSVD<Matrix32> svd(raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector2d sigma = svd.singularValues();
  if (!(sigma[1] > 1e-10))
    fail(ErrorCode::RankDeficient, "camera matrix is rank deficient");
  Orthonormalized out;
  out.camera = svd.matrixU().leftCols<2>() * svd.matrixV().transpose();
  out.singular_values = sigma;
  return out;
}

Alignment align_shapes(const Shape& estimate, const Shape& truth,
                       bool allow_scale) {
  require(estimate.rows() == truth.rows(), ErrorCode::DimensionMismatch,
          "shapes must have the same point count");
  const Eigen::Matrix3d cross = estimate.transpose() * truth;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cross,
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  Alignment out;
  out.rotation = svd.matrixU() * svd.matrixV().transpose();
  if (allow_scale) {
    const double denom = estimate.squaredNorm();
    out.scale = denom > 0.0 ? svd.singularValues().sum() / denom : 1.0;
  }
  out.aligned = out.scale * (estimate * out.rotation);
  return out;
}

double frame_3d_error(const Shape& estimate, const Shape& truth,
                      bool allow_scale) {
  const double norm = truth.norm();
  require(norm > 0.0, ErrorCode::InvalidArgument,
          "ground-truth shape has zero norm");
  return (align_shapes(estimate, truth, allow_scale).aligned - truth).norm() /
         norm;
}

std::vector<double> per_frame_3d_error(std::span<const Shape> estimates,
                                       std::span<const Shape> truths,
                                       bool allow_scale) {
  require(estimates.size() == truths.size(), ErrorCode::DimensionMismatch,
          "estimate and ground-truth frame counts differ");
  std::vector<double> out;
  out.reserve(estimates.size());
  for (std::size_t f = 0; f < estimates.size(); ++f)
    out.push_back(frame_3d_error(estimates[f], truths[f], allow_scale));
  return out;
}

double normalized_3d_error(std::span<const Shape> estimates,
                           std::span<const Shape> truths, bool allow_scale) {
  require(!truths.empty(), ErrorCode::InvalidArgument, "no frames to evaluate");
  const auto errors = per_frame_3d_error(estimates, truths, allow_scale);
  double sum = 0.0;
  for (double e : errors) sum += e;
  return sum / static_cast<double>(errors.size());
}

std::vector<std::pair<double, double>> cumulative_error_curve(
    std::span<const double> errors, std::span<const double> thresholds) {
  std::vector<double> sorted(errors.begin(), errors.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::pair<double, double>> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    const auto below = std::upper_bound(sorted.begin(), sorted.end(), t) -
                       sorted.begin();
    out.emplace_back(t, sorted.empty() ? 0.0
                                       : static_cast<double>(below) /
                                             static_cast<double>(sorted.size()));
  }
  return out;
}

double mutual_coherence(const Matrix& dictionary) {
  require(dictionary.cols() >= 2, ErrorCode::InvalidArgument,
          "coherence needs at least two atoms");
  const Vector norms = dictionary.colwise().norm().transpose();
  for (Eigen::Index k = 0; k < norms.size(); ++k)
    require(norms[k] > 0.0, ErrorCode::InvalidArgument,
            "dictionary atom " + std::to_string(k) + " has zero norm");
  const Matrix gram = dictionary.transpose() * dictionary;
  double best = 0.0;
  for (Eigen::Index i = 0; i < gram.rows(); ++i)
    for (Eigen::Index j = i + 1; j < gram.cols(); ++j)
      best = std::max(best, std::abs(gram(i, j)) / (norms[i] * norms[j]));
  return std::min(best, 1.0);
}

Measurement noise_perturb(const Measurement& w, double ratio,
                          std::uint64_t seed) {
  require(ratio >= 0.0, ErrorCode::InvalidArgument, "noise ratio must be >= 0");
  if (ratio == 0.0) return w;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  Measurement noise(w.rows(), 2);
  do {
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = gauss(rng);
  } while (noise.norm() == 0.0);
  noise *= ratio * w.norm() / noise.norm();
  return w + noise;
}

}  // namespace nrsfm
