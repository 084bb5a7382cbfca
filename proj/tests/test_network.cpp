#include "nrsfm/network.hpp"
#include "nrsfm/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace nrsfm;

namespace {

Matrix gaussian(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> g;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Vector uniform_vec(std::mt19937_64& rng, Eigen::Index n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

ModelParams random_params(std::uint64_t seed, Eigen::Index points,
                          std::vector<int> widths, int block_rows,
                          Activation mode, double threshold_scale) {
  std::mt19937_64 rng(seed);
  ModelParams p = make_params(points, widths, block_rows, mode);
  for (auto& d : p.dictionaries) d = gaussian(rng, d.rows(), d.cols());
  for (auto& b : p.encoder_thresholds)
    b = uniform_vec(rng, b.size(), 0.0, threshold_scale);
  for (auto& b : p.decoder_thresholds)
    b = uniform_vec(rng, b.size(), 0.0, threshold_scale);
  p.beta = gaussian(rng, block_rows, 2);
  p.gamma = gaussian(rng, p.gamma.size(), 1);
  return p;
}

double eta(double x, double b, Activation mode) {
  if (mode == Activation::Relu) return x - b > 0 ? x - b : 0.0;
  if (x > b) return x - b;
  if (x < -b) return x + b;
  return 0.0;
}

// Independent evaluation of the whole network with explicit loops; blocks are
// held as r x 2 matrices and the polar factor comes from an eigen
// decomposition of A^T A instead of an SVD.
struct Oracle {
  std::vector<std::vector<Matrix>> hidden;
  Vector code;
  Matrix camera_raw;
  Shape shape;
  Matrix32 rotation;
  Eigen::Vector2d translation = Eigen::Vector2d::Zero();
  Measurement reprojection;
  double loss = 0.0;
};

Oracle oracle_forward(const Measurement& w_in, const Mask& mask,
                      const ModelParams& p) {
  const Eigen::Index P = p.points;
  const int r = p.block_rows;
  const int n = p.layers();
  Measurement w = w_in;
  for (Eigen::Index i = 0; i < P; ++i)
    if (!mask[i]) w.row(i).setZero();
  Oracle o;

  const Eigen::Index k1 = p.dictionaries[0].cols() / 3;
  std::vector<Matrix> level(k1, Matrix::Zero(r, 2));
  for (Eigen::Index k = 0; k < k1; ++k) {
    for (int c = 0; c < 3; ++c)
      for (int j = 0; j < 2; ++j) {
        double s = 0;
        for (Eigen::Index i = 0; i < P; ++i)
          s += p.dictionaries[0](i, 3 * k + c) * w(i, j);
        level[k](c, j) = s;
      }
    if (r == 4)
      for (int j = 0; j < 2; ++j) {
        double s = 0;
        for (Eigen::Index i = 0; i < P; ++i) s += w(i, j);
        level[k](3, j) = s * ((k % 2 == 0) ? 1.0 : -1.0) / double(P);
      }
    for (int c = 0; c < r; ++c)
      for (int j = 0; j < 2; ++j)
        level[k](c, j) = eta(level[k](c, j), p.encoder_thresholds[0][k], p.activation);
  }
  o.hidden.push_back(level);
  for (int layer = 1; layer < n; ++layer) {
    const Matrix& d = p.dictionaries[layer];
    std::vector<Matrix> next(d.cols(), Matrix::Zero(r, 2));
    for (Eigen::Index k = 0; k < d.cols(); ++k) {
      for (Eigen::Index j = 0; j < d.rows(); ++j) next[k] += d(j, k) * level[j];
      for (int c = 0; c < r; ++c)
        for (int jj = 0; jj < 2; ++jj)
          next[k](c, jj) =
              eta(next[k](c, jj), p.encoder_thresholds[layer][k], p.activation);
    }
    level = next;
    o.hidden.push_back(level);
  }

  const Eigen::Index kn = level.size();
  o.code = Vector::Zero(kn);
  o.camera_raw = Matrix::Zero(r, 2);
  for (Eigen::Index k = 0; k < kn; ++k) {
    for (int c = 0; c < r; ++c)
      for (int j = 0; j < 2; ++j) o.code[k] += p.beta(c, j) * level[k](c, j);
    o.camera_raw += p.gamma[k] * level[k];
  }

  Vector psi = o.code;
  for (int layer = n - 1; layer >= 1; --layer) {
    const Matrix& d = p.dictionaries[layer];
    Vector prev = Vector::Zero(d.rows());
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      double s = 0;
      for (Eigen::Index k = 0; k < d.cols(); ++k) s += d(i, k) * psi[k];
      prev[i] = eta(s, p.decoder_thresholds[layer - 1][i], p.activation);
    }
    psi = prev;
  }
  o.shape = Shape::Zero(P, 3);
  double homogeneous = 0;
  for (Eigen::Index k = 0; k < psi.size(); ++k) {
    for (Eigen::Index i = 0; i < P; ++i)
      for (int c = 0; c < 3; ++c)
        o.shape(i, c) += psi[k] * p.dictionaries[0](i, 3 * k + c);
    homogeneous += psi[k] * ((k % 2 == 0) ? 1.0 : -1.0) / double(P);
  }

  const Matrix32 a = o.camera_raw.topRows(3);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(a.transpose() * a);
  const Eigen::Vector2d ev = es.eigenvalues();
  const Eigen::Matrix2d inv_sqrt = es.eigenvectors() *
                                   ev.cwiseSqrt().cwiseInverse().asDiagonal() *
                                   es.eigenvectors().transpose();
  o.rotation = a * inv_sqrt;
  o.reprojection = o.shape * o.rotation;
  if (r == 4) {
    const double sigma_mean = 0.5 * (std::sqrt(ev[0]) + std::sqrt(ev[1]));
    o.translation = homogeneous * o.camera_raw.row(3).transpose() / sigma_mean;
    for (Eigen::Index i = 0; i < P; ++i)
      o.reprojection.row(i) += o.translation.transpose();
  }
  double sq = 0;
  for (Eigen::Index i = 0; i < P; ++i)
    if (mask[i])
      for (int j = 0; j < 2; ++j)
        sq += (o.reprojection(i, j) - w(i, j)) * (o.reprojection(i, j) - w(i, j));
  o.loss = std::sqrt(sq + kLossSmoothing);
  return o;
}

double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST(Encode, PureLinearLayerWithZeroThresholds) {
  ModelParams p = random_params(1, 6, {4}, 3, Activation::Soft, 0.0);
  std::mt19937_64 rng(2);
  const Measurement w = gaussian(rng, 6, 2);
  const auto hidden = encode(w, all_visible(6), p);
  ASSERT_EQ(hidden.size(), 1u);
  const Matrix expect = p.dictionaries[0].transpose() * w;
  for (Eigen::Index k = 0; k < 4; ++k)
    EXPECT_LE(max_abs(hidden[0].block(k) - expect.middleRows(3 * k, 3)), 1e-13);
}

TEST(Encode, ZeroInputGivesZeroCodes) {
  for (Activation mode : {Activation::Soft, Activation::Relu}) {
    ModelParams p = random_params(3, 7, {6, 4, 2}, 3, mode, 0.5);
    const auto hidden = encode(Measurement::Zero(7, 2), all_visible(7), p);
    for (const auto& h : hidden) EXPECT_EQ(max_abs(h.flat()), 0.0);
  }
}

TEST(Encode, LinearAndRightEquivariantWithoutThresholds) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams p = random_params(100 + trial, 8, {6, 4}, 3, Activation::Soft, 0.0);
    const Measurement w1 = gaussian(rng, 8, 2), w2 = gaussian(rng, 8, 2);
    const Eigen::Matrix2d r = gaussian(rng, 2, 2);
    const Mask m = all_visible(8);
    const auto e1 = encode(w1, m, p), e2 = encode(w2, m, p);
    const auto er = encode(w1 * r, m, p);
    const auto el = encode(2.5 * w1 - 0.5 * w2, m, p);
    for (std::size_t i = 0; i < e1.size(); ++i) {
      for (Eigen::Index k = 0; k < e1[i].block_count(); ++k)
        EXPECT_LE(max_abs(er[i].block(k) - e1[i].block(k) * r), 1e-11);
      EXPECT_LE(max_abs(el[i].flat() - (2.5 * e1[i].flat() - 0.5 * e2[i].flat())),
                1e-11);
    }
  }
}

TEST(Encode, ReluOutputsNonNegativeAndSparsityMonotone) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams p = random_params(200 + trial, 8, {8, 5}, 3, Activation::Relu, 0.3);
    const Measurement w = gaussian(rng, 8, 2);
    const auto h = encode(w, all_visible(8), p);
    for (std::size_t i = 0; i < h.size(); ++i) {
      EXPECT_GE(h[i].flat().minCoeff(), 0.0);
      EXPECT_LE(block_sparsity(h[i]), h[i].block_count());
    }
    ModelParams raised = p;
    raised.encoder_thresholds[0].array() += 0.5;
    EXPECT_LE(block_sparsity(encode(w, all_visible(8), raised)[0]),
              block_sparsity(h[0]));
  }
}

TEST(Encode, RejectsWrongPointCount) {
  ModelParams p = random_params(6, 5, {3}, 3, Activation::Relu, 0.0);
  EXPECT_THROW(encode(Measurement::Zero(4, 2), all_visible(4), p), Error);
  EXPECT_THROW(encode(Measurement::Zero(5, 2), all_visible(4), p), Error);
}

TEST(RecoverCodeCamera, InvertsUniformAverages) {
  ModelParams p = make_params(5, {4}, 3, Activation::Relu);
  // Every entry stays away from zero so 1/(6 M_ij) is defined.
  const Matrix32 m = Eigen::Quaterniond(0.5, 0.4, 0.6, 0.2).normalized().toRotationMatrix().leftCols<2>();
  ASSERT_GT(m.cwiseAbs().minCoeff(), 1e-3);
  BlockCode top(4, 3);
  top.set_block(0, 2.0 * m);
  for (int c = 0; c < 3; ++c)
    for (int j = 0; j < 2; ++j) p.beta(c, j) = 1.0 / (6.0 * m(c, j));
  p.gamma = Vector::Zero(4);
  p.gamma[0] = 0.5;
  const auto [code, camera] = recover_code_camera(top, p);
  EXPECT_NEAR(code[0], 2.0, 1e-14);
  for (int k = 1; k < 4; ++k) EXPECT_EQ(code[k], 0.0);
  EXPECT_LE(max_abs(camera - Matrix(m)), 1e-15);
}

TEST(RecoverCodeCamera, MatchesDoubleLoop) {
  std::mt19937_64 rng(8);
  for (int r : {3, 4}) {
    ModelParams p = random_params(9, 6, {5}, r, Activation::Soft, 0.0);
    BlockCode top = BlockCode::from_flat(gaussian(rng, 5, 2 * r), r);
    const auto [code, camera] = recover_code_camera(top, p);
    for (Eigen::Index k = 0; k < 5; ++k) {
      double s = 0;
      for (int c = 0; c < r; ++c)
        for (int j = 0; j < 2; ++j) s += p.beta(c, j) * top.block(k)(c, j);
      EXPECT_NEAR(code[k], s, 1e-13);
    }
    for (int c = 0; c < r; ++c)
      for (int j = 0; j < 2; ++j) {
        double s = 0;
        for (Eigen::Index k = 0; k < 5; ++k) s += p.gamma[k] * top.block(k)(c, j);
        EXPECT_NEAR(camera(c, j), s, 1e-13);
      }
  }
}

TEST(Decode, ZeroCodeAndBasisExtraction) {
  ModelParams p = random_params(10, 6, {5, 3}, 3, Activation::Relu, 0.0);
  EXPECT_EQ(max_abs(decode(Vector::Zero(3), p)), 0.0);
  ModelParams one = random_params(11, 6, {5}, 3, Activation::Relu, 0.0);
  for (Eigen::Index k = 0; k < 5; ++k) {
    Vector e = Vector::Zero(5);
    e[k] = 1.0;
    EXPECT_EQ(decode(e, one), Shape(one.dictionaries[0].middleCols(3 * k, 3)));
  }
}

TEST(Decode, PlantedChainMatchesMatrixProducts) {
  std::mt19937_64 rng(12);
  ModelParams p = make_params(9, {8, 6, 4}, 3, Activation::Relu);
  p.dictionaries[0] = gaussian(rng, 9, 24);
  p.dictionaries[1] = gaussian(rng, 8, 6).cwiseAbs();
  p.dictionaries[2] = gaussian(rng, 6, 4).cwiseAbs();
  Vector psi = Vector::Zero(4);
  psi[1] = 0.7;
  psi[3] = 1.3;
  const Vector psi1 = p.dictionaries[1] * (p.dictionaries[2] * psi);
  Shape expect = Shape::Zero(9, 3);
  for (int k = 0; k < 8; ++k) expect += psi1[k] * p.dictionaries[0].middleCols(3 * k, 3);
  EXPECT_LE(max_abs(decode(psi, p) - expect), 1e-12);
}

TEST(Forward, MatchesStraightLineOracle) {
  std::mt19937_64 rng(13);
  for (int r : {3, 4}) {
    for (Activation mode : {Activation::Relu, Activation::Soft}) {
      ModelParams p = random_params(14 + r, 4, {6, 3}, r, mode, 0.1);
      p.encoder_thresholds[0].setZero();
      const Measurement w = gaussian(rng, 4, 2);
      Mask m = all_visible(4);
      m[2] = false;
      ForwardOutput out;
      try {
        out = forward(w, m, p);
      } catch (const Error&) {
        continue;
      }
      const Oracle o = oracle_forward(w, m, p);
      ASSERT_EQ(out.hidden.size(), o.hidden.size());
      for (std::size_t i = 0; i < o.hidden.size(); ++i)
        for (std::size_t k = 0; k < o.hidden[i].size(); ++k)
          EXPECT_LE(max_abs(out.hidden[i].block(k) - o.hidden[i][k]), 1e-12);
      EXPECT_LE(max_abs(out.code - o.code), 1e-12);
      EXPECT_LE(max_abs(out.camera_raw - o.camera_raw), 1e-12);
      EXPECT_LE(max_abs(out.shape - o.shape), 1e-12);
      EXPECT_LE(max_abs(out.camera.rotation - o.rotation), 1e-9);
      EXPECT_LE(max_abs(out.camera.translation - o.translation), 1e-9);
      EXPECT_LE(max_abs(out.reprojection - o.reprojection), 1e-9);
      EXPECT_NEAR(out.loss, o.loss, 1e-9);
    }
  }
}

TEST(Forward, CameraIsOrthonormalOnRandomInputs) {
  std::mt19937_64 rng(15);
  int passes = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int r = trial % 2 ? 4 : 3;
    ModelParams p = random_params(300 + trial, 10, {8, 4}, r, Activation::Relu, 0.0);
    try {
      const ForwardOutput out = forward(gaussian(rng, 10, 2), all_visible(10), p);
      const Eigen::Matrix2d g = out.camera.rotation.transpose() * out.camera.rotation;
      EXPECT_LE(max_abs(g - Eigen::Matrix2d::Identity()), 1e-8);
      ++passes;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::RankDeficient);
    }
  }
  EXPECT_GT(passes, 150);
}

TEST(Forward, FullMaskIsBitIdenticalToUnmasked) {
  std::mt19937_64 rng(16);
  ModelParams p = random_params(17, 9, {7, 3}, 3, Activation::Relu, 0.05);
  p.encoder_thresholds[0].setZero();
  const Measurement w = gaussian(rng, 9, 2);
  const ForwardTrace a = forward_trace(w, all_visible(9), p);
  const ForwardTrace b = forward_trace(w, Mask::Constant(9, true), p);
  EXPECT_EQ(a.reprojection, b.reprojection);
  EXPECT_EQ(a.loss, b.loss);
}

TEST(Loss, EqualsSmoothedResidualNorm) {
  std::mt19937_64 rng(18);
  ModelParams p = random_params(19, 8, {6, 3}, 3, Activation::Relu, 0.0);
  const Measurement w = gaussian(rng, 8, 2);
  const ForwardTrace t = forward_trace(w, all_visible(8), p);
  EXPECT_NEAR(t.loss, std::sqrt(t.residual.squaredNorm() + kLossSmoothing), 1e-12);
  EXPECT_LE(std::sqrt(kLossSmoothing), 1e-6 * w.norm());
}

TEST(Loss, HidingZeroResidualRowsLeavesLossUnchanged) {
  std::mt19937_64 rng(20);
  ModelParams p = random_params(21, 8, {6, 3}, 3, Activation::Relu, 0.0);
  Measurement w = gaussian(rng, 8, 2);
  // Points with zero dictionary rows produce zero shape rows; giving them zero
  // measurements makes their residual vanish and leaves the codes unchanged.
  p.dictionaries[0].row(3).setZero();
  w.row(3).setZero();
  Mask hidden = all_visible(8);
  hidden[3] = false;
  EXPECT_NEAR(loss(w, all_visible(8), p), loss(w, hidden, p), 1e-15);
}

TEST(Loss, MatchesMaskedFrobeniusOracle) {
  std::mt19937_64 rng(22);
  std::bernoulli_distribution hide(0.25);
  for (int trial = 0; trial < 30; ++trial) {
    ModelParams p = random_params(400 + trial, 7, {6, 3}, 3, Activation::Relu, 0.0);
    const Measurement w = gaussian(rng, 7, 2);
    Mask m(7);
    for (int i = 0; i < 7; ++i) m[i] = !hide(rng);
    m[0] = true;
    try {
      const ForwardOutput out = forward(w, m, p);
      double sq = 0;
      for (int i = 0; i < 7; ++i)
        if (m[i]) sq += (out.reprojection.row(i) - w.row(i)).squaredNorm();
      EXPECT_NEAR(out.loss, std::sqrt(sq + kLossSmoothing), 1e-10);
    } catch (const Error&) {
    }
  }
}

TEST(SplitCheck, NonNegativeAndSignedCodes) {
  std::mt19937_64 rng(23);
  const Matrix d = gaussian(rng, 10, 12);
  BlockCode pos = BlockCode::from_flat(gaussian(rng, 4, 6).cwiseAbs(), 3);
  const Vector gamma = gaussian(rng, 4, 1);
  SplitCheck a = nonneg_split_check(d, pos, gamma);
  EXPECT_EQ(a.reconstruction_gap, 0.0);
  EXPECT_TRUE(a.split_nonnegative);
  BlockCode signed_code = BlockCode::from_flat(gaussian(rng, 4, 6), 3);
  SplitCheck b = nonneg_split_check(d, signed_code, gamma);
  EXPECT_LE(b.reconstruction_gap, 1e-12);
  EXPECT_LE(b.camera_gap, 1e-12);
  EXPECT_TRUE(b.split_nonnegative);
}

TEST(Params, ValidationAndDefaults) {
  ModelParams p = make_params(5, {6, 4, 2}, 4, Activation::Relu);
  EXPECT_EQ(p.beta(0, 0), 1.0 / 8.0);
  EXPECT_EQ(p.gamma[0], 0.5);
  EXPECT_EQ(p.width(0), 6);
  EXPECT_EQ(p.width(2), 2);
  ModelParams bad = p;
  bad.encoder_thresholds[1][0] = -1.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = p;
  bad.dictionaries[1] = Matrix::Zero(5, 4);
  EXPECT_THROW(bad.validate(), Error);
}
