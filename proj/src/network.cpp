#include "nrsfm/network.hpp"

#include <cmath>

namespace nrsfm {

namespace {

// Row k of D_1^T X laid out as the flat r x 2 block k; the fourth row in
// translation mode is the homogeneous column applied to X, shared by every
// block.
Matrix first_layer_linear(const Matrix& d1, const Measurement& x,
                          int block_rows) {
  const Eigen::Index k1 = d1.cols() / 3;
  const Matrix g = d1.transpose() * x;  // 3K_1 x 2
  Matrix flat(k1, 2 * block_rows);
  for (Eigen::Index k = 0; k < k1; ++k)
    for (int c = 0; c < 3; ++c)
      for (int j = 0; j < 2; ++j) flat(k, 2 * c + j) = g(3 * k + c, j);
  if (block_rows == 4) {
    const Eigen::RowVector2d ones_x = x.colwise().sum();
    for (Eigen::Index k = 0; k < k1; ++k) {
      const double a = homogeneous_weight(x.rows(), k);
      flat(k, 6) = a * ones_x[0];
      flat(k, 7) = a * ones_x[1];
    }
  }
  return flat;
}

void apply_threshold(Matrix& m, const Vector& b, Activation mode) {
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index k = 0; k < m.rows(); ++k)
      m(k, c) = threshold(m(k, c), b[k], mode);
}

Vector apply_threshold(const Vector& v, const Vector& b, Activation mode) {
  Vector out(v.size());
  for (Eigen::Index k = 0; k < v.size(); ++k)
    out[k] = threshold(v[k], b[k], mode);
  return out;
}

Vector flat_beta(const Matrix& beta) {
  Vector out(beta.size());
  for (Eigen::Index c = 0; c < beta.rows(); ++c)
    for (int j = 0; j < 2; ++j) out[2 * c + j] = beta(c, j);
  return out;
}

Measurement masked(const Measurement& w, const Mask& mask) {
  Measurement out = w;
  for (Eigen::Index p = 0; p < w.rows(); ++p)
    if (!mask[p]) out.row(p).setZero();
  return out;
}

void check_input(const Measurement& w, const Mask& mask,
                 const ModelParams& params) {
  require(w.rows() == params.points, ErrorCode::DimensionMismatch,
          "measurement has " + std::to_string(w.rows()) +
              " points, model expects " + std::to_string(params.points));
  require(mask.size() == w.rows(), ErrorCode::DimensionMismatch,
          "mask length must equal point count");
}

}  // namespace

Eigen::Index ModelParams::width(int i) const {
  return i == 0 ? dictionaries[0].cols() / 3 : dictionaries[i].cols();
}

void ModelParams::validate() const {
  const int n = layers();
  require(n >= 1, ErrorCode::InvalidArgument, "model needs at least one layer");
  require(block_rows == 3 || block_rows == 4, ErrorCode::InvalidArgument,
          "block rows must be 3 or 4");
  require(dictionaries[0].rows() == points && dictionaries[0].cols() % 3 == 0 &&
              dictionaries[0].cols() >= 3,
          ErrorCode::DimensionMismatch, "D_1 must be P x 3K_1");
  for (int i = 1; i < n; ++i)
    require(dictionaries[i].rows() == width(i - 1),
            ErrorCode::DimensionMismatch,
            "dictionary widths do not chain at layer " + std::to_string(i + 1));
  require(static_cast<int>(encoder_thresholds.size()) == n &&
              static_cast<int>(decoder_thresholds.size()) == n - 1,
          ErrorCode::DimensionMismatch, "threshold vector count mismatch");
  for (int i = 0; i < n; ++i) {
    require(encoder_thresholds[i].size() == width(i),
            ErrorCode::DimensionMismatch, "encoder threshold length mismatch");
    require((encoder_thresholds[i].array() >= 0.0).all(),
            ErrorCode::InvalidArgument, "encoder thresholds must be >= 0");
  }
  for (int i = 0; i + 1 < n; ++i) {
    require(decoder_thresholds[i].size() == width(i),
            ErrorCode::DimensionMismatch, "decoder threshold length mismatch");
    require((decoder_thresholds[i].array() >= 0.0).all(),
            ErrorCode::InvalidArgument, "decoder thresholds must be >= 0");
  }
  require(beta.rows() == block_rows && beta.cols() == 2,
          ErrorCode::DimensionMismatch, "beta must be r x 2");
  require(gamma.size() == width(n - 1), ErrorCode::DimensionMismatch,
          "gamma must have K_N entries");
}

std::vector<TensorView> ModelParams::tensors() {
  std::vector<TensorView> out;
  for (std::size_t i = 0; i < dictionaries.size(); ++i) {
    auto& d = dictionaries[i];
    out.push_back({"D" + std::to_string(i + 1), d.data(), d.rows(), d.cols()});
  }
  for (std::size_t i = 0; i < encoder_thresholds.size(); ++i) {
    auto& b = encoder_thresholds[i];
    out.push_back({"b" + std::to_string(i + 1), b.data(), b.size(), 1});
  }
  for (std::size_t i = 0; i < decoder_thresholds.size(); ++i) {
    auto& b = decoder_thresholds[i];
    out.push_back({"bdec" + std::to_string(i + 1), b.data(), b.size(), 1});
  }
  out.push_back({"beta", beta.data(), beta.rows(), beta.cols()});
  out.push_back({"gamma", gamma.data(), gamma.size(), 1});
  return out;
}

std::vector<TensorView> ModelParams::tensors() const {
  return const_cast<ModelParams*>(this)->tensors();
}

ModelParams ModelParams::zeros_like() const {
  ModelParams out = *this;
  for (auto& t : out.tensors()) t.map().setZero();
  return out;
}

Eigen::Index ModelParams::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& t : tensors()) n += t.rows * t.cols;
  return n;
}

ModelParams make_params(Eigen::Index points, const std::vector<int>& widths,
                        int block_rows, Activation activation) {
  require(!widths.empty(), ErrorCode::InvalidArgument, "need at least one width");
  require(points >= 1, ErrorCode::InvalidArgument, "need at least one point");
  ModelParams p;
  p.points = points;
  p.block_rows = block_rows;
  p.activation = activation;
  const int n = static_cast<int>(widths.size());
  for (int i = 0; i < n; ++i) {
    require(widths[i] >= 1, ErrorCode::InvalidArgument, "widths must be >= 1");
    if (i == 0)
      p.dictionaries.push_back(Matrix::Zero(points, 3 * widths[0]));
    else
      p.dictionaries.push_back(Matrix::Zero(widths[i - 1], widths[i]));
    p.encoder_thresholds.push_back(Vector::Zero(widths[i]));
    if (i + 1 < n) p.decoder_thresholds.push_back(Vector::Zero(widths[i]));
  }
  p.beta = Matrix::Constant(block_rows, 2, 1.0 / (2.0 * block_rows));
  p.gamma = Vector::Constant(widths.back(), 1.0 / widths.back());
  p.validate();
  return p;
}

Matrix last_dictionary_atoms(const ModelParams& params) {
  if (params.layers() > 1) return params.dictionaries.back();
  const Matrix& d1 = params.dictionaries[0];
  const Eigen::Index k1 = d1.cols() / 3;
  Matrix atoms(3 * params.points, k1);
  for (Eigen::Index k = 0; k < k1; ++k)
    for (Eigen::Index p = 0; p < params.points; ++p)
      for (int c = 0; c < 3; ++c) atoms(3 * p + c, k) = d1(p, 3 * k + c);
  return atoms;
}

std::vector<BlockCode> encode(const Measurement& w, const Mask& mask,
                              const ModelParams& params) {
  check_input(w, mask, params);
  std::vector<BlockCode> hidden;
  const Measurement x = masked(w, mask);
  Matrix h = first_layer_linear(params.dictionaries[0], x, params.block_rows);
  apply_threshold(h, params.encoder_thresholds[0], params.activation);
  hidden.push_back(BlockCode::from_flat(h, params.block_rows));
  for (int i = 1; i < params.layers(); ++i) {
    h = params.dictionaries[i].transpose() * hidden.back().flat();
    apply_threshold(h, params.encoder_thresholds[i], params.activation);
    hidden.push_back(BlockCode::from_flat(h, params.block_rows));
  }
  return hidden;
}

std::pair<Vector, Matrix> recover_code_camera(const BlockCode& top,
                                              const ModelParams& params) {
  require(top.block_rows() == params.block_rows &&
              top.block_count() == params.gamma.size(),
          ErrorCode::DimensionMismatch,
          "top block code does not match the model's last layer");
  const Vector code = top.flat() * flat_beta(params.beta);
  const Vector cam_flat = top.flat().transpose() * params.gamma;
  Matrix camera(params.block_rows, 2);
  for (int c = 0; c < params.block_rows; ++c)
    for (int j = 0; j < 2; ++j) camera(c, j) = cam_flat[2 * c + j];
  return {code, camera};
}

namespace {

// Fills decoder_linear / decoder_codes / shape / homogeneous.
void decode_into(const Vector& code, const ModelParams& params,
                 ForwardTrace& t) {
  const int n = params.layers();
  require(code.size() == params.width(n - 1), ErrorCode::DimensionMismatch,
          "code length must equal K_N");
  t.decoder_linear.assign(n > 1 ? n - 1 : 0, Vector());
  t.decoder_codes.assign(n, Vector());
  t.decoder_codes[n - 1] = code;
  for (int i = n - 1; i >= 1; --i) {
    t.decoder_linear[i - 1] = params.dictionaries[i] * t.decoder_codes[i];
    t.decoder_codes[i - 1] = apply_threshold(
        t.decoder_linear[i - 1], params.decoder_thresholds[i - 1],
        params.activation);
  }
  const Vector& psi1 = t.decoder_codes[0];
  const Matrix& d1 = params.dictionaries[0];
  t.shape = Shape::Zero(params.points, 3);
  for (Eigen::Index k = 0; k < psi1.size(); ++k)
    if (psi1[k] != 0.0) t.shape += psi1[k] * d1.middleCols(3 * k, 3);
  t.homogeneous = 1.0;
  if (params.translation()) {
    t.homogeneous = 0.0;
    for (Eigen::Index k = 0; k < psi1.size(); ++k)
      t.homogeneous += homogeneous_weight(params.points, k) * psi1[k];
  }
}

}  // namespace

Shape decode(const Vector& code, const ModelParams& params) {
  ForwardTrace t;
  decode_into(code, params, t);
  return t.shape;
}

ForwardTrace forward_trace(const Measurement& w, const Mask& mask,
                           const ModelParams& params) {
  check_input(w, mask, params);
  ForwardTrace t;
  t.mask = mask;
  t.input = masked(w, mask);
  const int n = params.layers();

  Matrix z = first_layer_linear(params.dictionaries[0], t.input,
                                params.block_rows);
  for (int i = 0; i < n; ++i) {
    if (i > 0) z = params.dictionaries[i].transpose() * t.hidden.back().flat();
    Matrix h = z;
    apply_threshold(h, params.encoder_thresholds[i], params.activation);
    t.encoder_linear.push_back(std::move(z));
    t.hidden.push_back(BlockCode::from_flat(std::move(h), params.block_rows));
  }

  std::tie(t.code, t.camera_raw) = recover_code_camera(t.hidden.back(), params);
  decode_into(t.code, params, t);

  const Matrix32 top = t.camera_raw.topRows<3>();
  require(top.allFinite(), ErrorCode::NonFinite, "camera has non-finite entries");
  Eigen::JacobiSVD<Matrix32> svd(top, Eigen::ComputeFullU | Eigen::ComputeFullV);
  t.svd_sigma = svd.singularValues();
  if (!(t.svd_sigma[1] > 1e-10))
    fail(ErrorCode::RankDeficient, "recovered camera is rank deficient");
  t.svd_u = svd.matrixU().leftCols<2>();
  t.svd_v = svd.matrixV();
  t.camera.rotation = t.svd_u * t.svd_v.transpose();

  t.reprojection = t.shape * t.camera.rotation;
  if (params.translation()) {
    if (!(std::abs(t.homogeneous) >= kMinHomogeneous))
      fail(ErrorCode::RankDeficient,
           "homogeneous coordinate of the decoded shape vanished");
    // Bottom row of the 4x2 camera is t^T / eps up to the common scale of the
    // top block, which the mean singular value measures.
    const double sigma_mean = 0.5 * t.svd_sigma.sum();
    t.camera.translation =
        t.homogeneous * t.camera_raw.row(3).transpose() / sigma_mean;
    t.reprojection.rowwise() += t.camera.translation.transpose();
  }
  t.residual = t.reprojection - t.input;
  for (Eigen::Index p = 0; p < t.residual.rows(); ++p)
    if (!mask[p]) t.residual.row(p).setZero();
  t.loss = std::sqrt(t.residual.squaredNorm() + kLossSmoothing);
  return t;
}

ForwardOutput forward(const Measurement& w, const Mask& mask,
                      const ModelParams& params) {
  ForwardTrace t = forward_trace(w, mask, params);
  ForwardOutput out;
  out.hidden = std::move(t.hidden);
  out.code = std::move(t.code);
  out.camera_raw = std::move(t.camera_raw);
  out.camera = t.camera;
  out.shape = std::move(t.shape);
  out.reprojection = std::move(t.reprojection);
  out.loss = t.loss;
  return out;
}

double loss(const Measurement& w, const Mask& mask, const ModelParams& params) {
  return forward_trace(w, mask, params).loss;
}

SplitCheck nonneg_split_check(const Matrix& dictionary, const BlockCode& code,
                              const Vector& gamma) {
  const int r = code.block_rows();
  const Eigen::Index k = code.block_count();
  require(dictionary.cols() == r * k, ErrorCode::DimensionMismatch,
          "dictionary must have r*K columns");
  require(gamma.size() == k, ErrorCode::DimensionMismatch,
          "gamma must have one weight per block");
  const Matrix positive = code.flat().cwiseMax(0.0);
  const Matrix negative = code.flat().cwiseMin(0.0);

  BlockCode split(2 * k, r);
  split.flat().topRows(k) = positive;
  split.flat().bottomRows(k) = -negative;
  Matrix split_dict(dictionary.rows(), 2 * r * k);
  split_dict << dictionary, -dictionary;

  SplitCheck out;
  out.reconstruction_gap =
      (split_dict * split.stacked() - dictionary * code.stacked())
          .cwiseAbs()
          .maxCoeff();
  Vector split_gamma(2 * k);
  split_gamma << gamma, -gamma;
  const Vector cam_split = split.flat().transpose() * split_gamma;
  const Vector cam = code.flat().transpose() * gamma;
  out.camera_gap = (cam_split - cam).cwiseAbs().maxCoeff();
  out.split_nonnegative = (split.flat().array() >= 0.0).all();
  return out;
}

}  // namespace nrsfm
