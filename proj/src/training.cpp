#include "nrsfm/training.hpp"

#include "nrsfm/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <thread>

namespace nrsfm {

void TrainConfig::validate() const {
  require(layers >= 1, ErrorCode::InvalidArgument, "layers must be >= 1");
  require(last_width >= 1 && first_width >= last_width,
          ErrorCode::InvalidArgument,
          "widths must satisfy first_width >= last_width >= 1");
  require(batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be >= 1");
  require(total_steps >= 0, ErrorCode::InvalidArgument, "steps must be >= 0");
  require(base_learning_rate > 0.0, ErrorCode::InvalidArgument,
          "learning rate must be > 0");
  require(decay_factor > 0.0 && decay_factor <= 1.0, ErrorCode::InvalidArgument,
          "decay factor must lie in (0, 1]");
  require(decay_steps >= 1, ErrorCode::InvalidArgument,
          "decay steps must be >= 1");
  require(eval_interval >= 1, ErrorCode::InvalidArgument,
          "eval interval must be >= 1");
  require(threads >= 1, ErrorCode::InvalidArgument, "threads must be >= 1");
}

std::vector<int> TrainConfig::widths() const {
  if (layers == 1) return {first_width};
  std::vector<int> out(layers);
  for (int i = 0; i < layers; ++i) {
    const double t = static_cast<double>(i) / (layers - 1);
    out[i] = static_cast<int>(
        std::lround(first_width + t * (last_width - first_width)));
  }
  return out;
}

std::vector<FrameInput> prepare_frames(const Scene& scene,
                                       const TrainConfig& config) {
  std::vector<FrameInput> frames;
  frames.reserve(scene.frame_count());
  for (std::size_t f = 0; f < scene.frame_count(); ++f) {
    FrameInput in;
    in.mask = scene.masks[f];
    if (scene.normalization) {
      in.w = scene.measurements[f];
      for (Eigen::Index p = 0; p < in.w.rows(); ++p)
        if (!in.mask[p]) in.w.row(p).setZero();
      in.normalization = (*scene.normalization)[f];
    } else if (config.translation) {
      try {
        std::tie(in.w, in.normalization) =
            normalize_bbox(scene.measurements[f], in.mask);
      } catch (const Error& e) {
        fail(e.code(), "frame " + std::to_string(f) + ": " + e.what());
      }
      // Only the scale is removed; the offset is left for the model.
      for (Eigen::Index p = 0; p < in.w.rows(); ++p)
        if (in.mask[p])
          in.w.row(p) += in.normalization.centroid.transpose() / in.normalization.scale;
      in.normalization.centroid.setZero();
    } else {
      try {
        std::tie(in.w, in.normalization) =
            normalize_bbox(scene.measurements[f], in.mask);
      } catch (const Error& e) {
        fail(e.code(), "frame " + std::to_string(f) + ": " + e.what());
      }
    }
    frames.push_back(std::move(in));
  }
  return frames;
}

namespace {

void normalize_atoms(ModelParams& params) {
  Matrix& d1 = params.dictionaries[0];
  for (Eigen::Index k = 0; k < d1.cols() / 3; ++k) {
    const double n = d1.middleCols(3 * k, 3).norm();
    if (n > 0.0) d1.middleCols(3 * k, 3) /= n;
  }
  for (int i = 1; i < params.layers(); ++i) {
    Matrix& d = params.dictionaries[i];
    for (Eigen::Index k = 0; k < d.cols(); ++k) {
      const double n = d.col(k).norm();
      if (n > 0.0) d.col(k) /= n;
    }
  }
}

// d(U V^T) pulled back to the raw 3x2 matrix.
Matrix32 polar_backward(const Eigen::Matrix<double, 3, 2>& u,
                        const Eigen::Vector2d& sigma,
                        const Eigen::Matrix2d& v, const Matrix32& upstream) {
  constexpr double kFloor = 1e-8;
  const Eigen::Matrix2d z = u.transpose() * upstream * v;
  Eigen::Matrix2d e = Eigen::Matrix2d::Zero();
  e(0, 1) = (z(0, 1) - z(1, 0)) / std::max(sigma[0] + sigma[1], kFloor);
  e(1, 0) = -e(0, 1);
  const Eigen::Matrix3d off = Eigen::Matrix3d::Identity() - u * u.transpose();
  const Eigen::Vector2d inv_sigma(1.0 / std::max(sigma[0], kFloor),
                                  1.0 / std::max(sigma[1], kFloor));
  return u * e * v.transpose() +
         off * upstream * v * inv_sigma.asDiagonal() * v.transpose();
}

}  // namespace

ModelParams init_params(const TrainConfig& config, Eigen::Index points,
                        std::uint64_t seed) {
  config.validate();
  ModelParams p = make_params(points, config.widths(), config.block_rows(),
                              config.activation);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  for (auto& d : p.dictionaries)
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = gauss(rng);
  Matrix& d1 = p.dictionaries[0];
  d1.rowwise() -= d1.colwise().mean();
  normalize_atoms(p);
  return p;
}

void renormalize_dictionaries(ModelParams& params) { normalize_atoms(params); }

double accumulate_frame_gradient(const Measurement& w, const Mask& mask,
                                 const ModelParams& params,
                                 ModelParams& g) {
  const ForwardTrace t = forward_trace(w, mask, params);
  const int n = params.layers();
  const int r = params.block_rows;
  const Activation mode = params.activation;

  // Reprojection W_hat = S Q (+ 1 t^T).
  const Measurement d_reproj = t.residual / t.loss;
  const Shape d_shape = d_reproj * t.camera.rotation.transpose();
  const Matrix32 d_rotation = t.shape.transpose() * d_reproj;

  Matrix d_camera = Matrix::Zero(r, 2);
  double d_homogeneous = 0.0;
  double d_sigma_mean = 0.0;
  if (params.translation()) {
    const Eigen::Vector2d d_t = d_reproj.colwise().sum().transpose();
    const double sigma_mean = 0.5 * t.svd_sigma.sum();
    const Eigen::Vector2d row4 = t.camera_raw.row(3).transpose();
    d_homogeneous = d_t.dot(row4) / sigma_mean;
    d_camera.row(3) = (t.homogeneous / sigma_mean) * d_t.transpose();
    d_sigma_mean = -d_t.dot(t.camera.translation) / sigma_mean;
  }
  d_camera.topRows<3>() =
      polar_backward(t.svd_u, t.svd_sigma, t.svd_v, d_rotation) +
      0.5 * d_sigma_mean * t.camera.rotation;

  Vector d_camera_flat(2 * r);
  for (int c = 0; c < r; ++c)
    for (int j = 0; j < 2; ++j) d_camera_flat[2 * c + j] = d_camera(c, j);
  const Matrix& top = t.hidden.back().flat();
  g.gamma += top * d_camera_flat;
  Matrix d_hidden = params.gamma * d_camera_flat.transpose();

  // Decoder, from the shape back to psi_N.
  const Matrix& d1 = params.dictionaries[0];
  const Vector& psi1 = t.decoder_codes[0];
  Vector d_code(psi1.size());
  for (Eigen::Index k = 0; k < psi1.size(); ++k) {
    d_code[k] = d1.middleCols(3 * k, 3).cwiseProduct(d_shape).sum() +
                homogeneous_weight(params.points, k) * d_homogeneous;
    if (psi1[k] != 0.0) g.dictionaries[0].middleCols(3 * k, 3) += psi1[k] * d_shape;
  }
  for (int i = 1; i < n; ++i) {
    const Vector& lin = t.decoder_linear[i - 1];
    const Vector& b = params.decoder_thresholds[i - 1];
    Vector d_lin(lin.size());
    for (Eigen::Index k = 0; k < lin.size(); ++k) {
      d_lin[k] = d_code[k] * threshold_slope(lin[k], b[k], mode);
      g.decoder_thresholds[i - 1][k] +=
          d_code[k] * threshold_bias_slope(lin[k], b[k], mode);
    }
    g.dictionaries[i] += d_lin * t.decoder_codes[i].transpose();
    d_code = params.dictionaries[i].transpose() * d_lin;
  }

  // Bottleneck code psi_N = Psi_N vec(beta).
  const Vector beta_grad = top.transpose() * d_code;
  for (int c = 0; c < r; ++c)
    for (int j = 0; j < 2; ++j) {
      g.beta(c, j) += beta_grad[2 * c + j];
      d_hidden.col(2 * c + j) += params.beta(c, j) * d_code;
    }

  // Encoder, from Psi_N back to the first layer.
  for (int i = n - 1; i >= 0; --i) {
    const Matrix& z = t.encoder_linear[i];
    const Vector& b = params.encoder_thresholds[i];
    Matrix d_z(z.rows(), z.cols());
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      for (Eigen::Index k = 0; k < z.rows(); ++k) {
        d_z(k, c) = d_hidden(k, c) * threshold_slope(z(k, c), b[k], mode);
        g.encoder_thresholds[i][k] +=
            d_hidden(k, c) * threshold_bias_slope(z(k, c), b[k], mode);
      }
    if (i > 0) {
      g.dictionaries[i] += t.hidden[i - 1].flat() * d_z.transpose();
      d_hidden = params.dictionaries[i] * d_z;
    } else {
      Matrix d_corr(d1.cols(), 2);
      for (Eigen::Index k = 0; k < z.rows(); ++k)
        for (int c = 0; c < 3; ++c)
          for (int j = 0; j < 2; ++j) d_corr(3 * k + c, j) = d_z(k, 2 * c + j);
      g.dictionaries[0] += t.input * d_corr.transpose();
    }
  }
  return t.loss;
}

GradientResult gradients(const ModelParams& params,
                         std::span<const FrameInput> batch,
                         bool skip_degenerate, int threads) {
  require(!batch.empty(), ErrorCode::InvalidArgument, "batch is empty");
  const std::size_t count = batch.size();
  std::vector<ModelParams> per_frame(count, params.zeros_like());
  std::vector<double> losses(count, 0.0);
  std::vector<char> skipped(count, 0);
  std::vector<std::exception_ptr> errors(count);

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t f = begin; f < end; ++f) {
      try {
        losses[f] = accumulate_frame_gradient(batch[f].w, batch[f].mask,
                                              params, per_frame[f]);
      } catch (const Error& e) {
        if (skip_degenerate && e.code() == ErrorCode::RankDeficient) {
          skipped[f] = 1;
          per_frame[f] = params.zeros_like();
        } else {
          errors[f] = std::current_exception();
        }
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };

  const auto workers =
      static_cast<std::size_t>(std::clamp<int>(threads, 1, static_cast<int>(count)));
  if (workers == 1) {
    work(0, count);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t begin = 0; begin < count; begin += chunk)
      pool.emplace_back(work, begin, std::min(count, begin + chunk));
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  GradientResult out;
  out.gradient = params.zeros_like();
  auto total = out.gradient.tensors();
  for (std::size_t f = 0; f < count; ++f) {
    if (skipped[f]) {
      ++out.skipped;
      continue;
    }
    const auto part = per_frame[f].tensors();
    for (std::size_t i = 0; i < total.size(); ++i)
      total[i].map() += part[i].map();
    out.loss += losses[f];
  }
  return out;
}

void check_finite(const ModelParams& gradient) {
  for (const auto& t : gradient.tensors())
    if (!t.map().allFinite())
      fail(ErrorCode::NonFinite, "non-finite gradient in parameter group " + t.name);
}

AdamState make_adam_state(const ModelParams& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(ModelParams& params, const ModelParams& gradient,
               AdamState& state, double learning_rate) {
  auto p = params.tensors();
  const auto g = gradient.tensors();
  auto m = state.first_moment.tensors();
  auto v = state.second_moment.tensors();
  require(p.size() == g.size() && p.size() == m.size() && p.size() == v.size(),
          ErrorCode::DimensionMismatch, "optimizer state does not match params");
  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    require(p[i].rows == g[i].rows && p[i].cols == g[i].cols,
            ErrorCode::DimensionMismatch, "gradient shape mismatch for " + p[i].name);
    auto pm = p[i].map();
    const auto gm = g[i].map();
    auto mm = m[i].map();
    auto vm = v[i].map();
    mm = kAdamBeta1 * mm + (1.0 - kAdamBeta1) * gm;
    vm = kAdamBeta2 * vm + (1.0 - kAdamBeta2) * gm.cwiseProduct(gm);
    pm.array() -= learning_rate * (mm.array() / c1) /
                  ((vm.array() / c2).sqrt() + kAdamEpsilon);
    if (p[i].name.front() == 'b' && p[i].name != "beta")
      pm = pm.cwiseMax(0.0);
  }
}

double lr_schedule(std::int64_t step, const TrainConfig& config) {
  return config.base_learning_rate *
         std::pow(config.decay_factor, static_cast<double>(step) /
                                           static_cast<double>(config.decay_steps));
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step,
                                       std::size_t frame_count, int batch_size) {
  require(frame_count > 0, ErrorCode::InvalidArgument, "no frames");
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  std::vector<std::size_t> perm;
  std::uint64_t cached_epoch = std::numeric_limits<std::uint64_t>::max();
  const auto first = static_cast<std::uint64_t>(step) * batch_size;
  for (int j = 0; j < batch_size; ++j) {
    const std::uint64_t visit = first + j;
    const std::uint64_t epoch = visit / frame_count;
    if (epoch != cached_epoch) {
      perm.resize(frame_count);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::seed_seq seq{static_cast<std::uint32_t>(seed),
                        static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(epoch),
                        static_cast<std::uint32_t>(epoch >> 32)};
      std::mt19937_64 rng(seq);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[visit % frame_count]);
  }
  return out;
}

namespace {

std::optional<Reconstruction> reconstruct_frame(const FrameInput& in,
                                                const ModelParams& params) {
  ForwardTrace t;
  try {
    t = forward_trace(in.w, in.mask, params);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::RankDeficient) return std::nullopt;
    throw;
  }
  Reconstruction out;
  out.shape = t.shape * in.normalization.scale;
  out.camera.rotation = t.camera.rotation;
  out.camera.translation =
      in.normalization.centroid + in.normalization.scale * t.camera.translation;
  return out;
}

bool evaluation_allows_scale(const Scene& scene, const TrainConfig& config) {
  return scene.projection == Projection::WeakPerspective || config.translation;
}

}  // namespace

HistoryRecord evaluate_state(const ModelParams& params,
                             std::span<const FrameInput> frames,
                             const Scene& scene, const TrainConfig& config) {
  HistoryRecord rec;
  double loss_sum = 0.0;
  std::size_t counted = 0;
  std::vector<Shape> estimates;
  for (const auto& in : frames) {
    try {
      loss_sum += loss(in.w, in.mask, params);
      ++counted;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::RankDeficient) throw;
    }
    if (scene.shapes) {
      auto r = reconstruct_frame(in, params);
      estimates.push_back(r ? r->shape : Shape::Zero(params.points, 3));
    }
  }
  rec.mean_loss = counted ? loss_sum / static_cast<double>(counted)
                          : std::numeric_limits<double>::quiet_NaN();
  const Matrix atoms = last_dictionary_atoms(params);
  rec.coherence = atoms.cols() >= 2 ? mutual_coherence(atoms) : 0.0;
  rec.error = scene.shapes
                  ? normalized_3d_error(estimates, *scene.shapes,
                                        evaluation_allows_scale(scene, config))
                  : std::numeric_limits<double>::quiet_NaN();
  return rec;
}

TrainState start_training(const Scene& scene, const TrainConfig& config) {
  config.validate();
  scene.validate();
  require(scene.frame_count() > 0, ErrorCode::InvalidArgument, "scene is empty");
  TrainState state;
  state.config = config;
  state.params = init_params(config, scene.points, config.seed);
  state.adam = make_adam_state(state.params);
  return state;
}

void continue_training(TrainState& state, const Scene& scene,
                       std::int64_t until_step, const ProgressFn& progress) {
  const TrainConfig& config = state.config;
  config.validate();
  scene.validate();
  require(scene.frame_count() > 0, ErrorCode::InvalidArgument, "scene is empty");
  require(scene.points == state.params.points, ErrorCode::DimensionMismatch,
          "scene has " + std::to_string(scene.points) +
              " points, model expects " + std::to_string(state.params.points));
  const std::vector<FrameInput> frames = prepare_frames(scene, config);
  const std::int64_t last = std::min(until_step, config.total_steps);

  auto record = [&]() {
    HistoryRecord rec = evaluate_state(state.params, frames, scene, config);
    rec.step = state.step;
    rec.learning_rate = lr_schedule(state.step, config);
    rec.skipped = state.skipped_since_record;
    state.skipped_since_record = 0;
    state.history.push_back(rec);
    if (progress) progress(rec);
  };

  if (state.history.empty()) record();
  std::vector<FrameInput> batch;
  while (state.step < last) {
    const auto idx = batch_indices(config.seed, state.step, frames.size(),
                                   config.batch_size);
    batch.clear();
    for (auto i : idx) batch.push_back(frames[i]);
    GradientResult res =
        gradients(state.params, batch, /*skip_degenerate=*/true, config.threads);
    check_finite(res.gradient);
    adam_step(state.params, res.gradient, state.adam,
              lr_schedule(state.step, config));
    if (config.renormalize_dictionaries) renormalize_dictionaries(state.params);
    ++state.step;
    state.skipped_since_record += res.skipped;
    state.total_skipped += res.skipped;
    if (state.step % config.eval_interval == 0 || state.step == config.total_steps)
      record();
  }
}

TrainState train(const Scene& scene, const TrainConfig& config,
                 const ProgressFn& progress) {
  TrainState state = start_training(scene, config);
  continue_training(state, scene, config.total_steps, progress);
  return state;
}

std::vector<Reconstruction> reconstruct(const Scene& scene,
                                        const ModelParams& params,
                                        const TrainConfig& config) {
  scene.validate();
  require(scene.points == params.points, ErrorCode::DimensionMismatch,
          "scene has " + std::to_string(scene.points) +
              " points, model expects " + std::to_string(params.points));
  require(config.block_rows() == params.block_rows, ErrorCode::InvalidArgument,
          "config and model disagree on the translation model");
  const auto frames = prepare_frames(scene, config);
  std::vector<Reconstruction> out;
  out.reserve(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    auto r = reconstruct_frame(frames[f], params);
    if (!r)
      fail(ErrorCode::RankDeficient,
           "frame " + std::to_string(f) + ": recovered camera is rank deficient");
    out.push_back(std::move(*r));
  }
  return out;
}

}  // namespace nrsfm
