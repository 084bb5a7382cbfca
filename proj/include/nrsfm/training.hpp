#pragma once

// Exact gradients through the network (including the polar factor of the
// camera), Adam with exponential learning-rate decay, and the training loop.

#include "nrsfm/network.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace nrsfm {

struct Scene;

struct TrainConfig {
  int layers = 2;
  int first_width = 32;
  int last_width = 8;
  Activation activation = Activation::Relu;
  bool translation = false;  // 4x2 blocks, inputs keep their offset
  int batch_size = 64;
  std::int64_t total_steps = 20000;
  double base_learning_rate = 5e-3;
  double decay_factor = 0.95;
  std::int64_t decay_steps = 1000;
  std::uint64_t seed = 0;
  std::int64_t eval_interval = 1000;
  bool renormalize_dictionaries = true;
  int threads = 1;

  void validate() const;
  int block_rows() const { return translation ? 4 : 3; }
  /// K_1 .. K_N with the intermediate widths linearly interpolated.
  std::vector<int> widths() const;
};

struct AdamState {
  ModelParams first_moment;
  ModelParams second_moment;
  std::int64_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

struct HistoryRecord {
  std::int64_t step = 0;
  double learning_rate = 0.0;
  double mean_loss = 0.0;
  double coherence = 0.0;
  double error = 0.0;  // NaN without ground truth
  std::int64_t skipped = 0;  // frames dropped since the previous record
};

/// One frame ready for the network: normalized, invisible rows zeroed.
struct FrameInput {
  Measurement w;
  Mask mask;
  BoxNormalization normalization;
};

/// Normalizes every frame the way training expects: bounding-box
/// normalization for 3x2 models, scale-only normalization for the translation
/// model (the offset is kept), and nothing when the scene already carries
/// normalization records.
std::vector<FrameInput> prepare_frames(const Scene& scene,
                                       const TrainConfig& config);

/// Unit-norm Gaussian dictionaries (first-layer atoms zero-mean), zero
/// thresholds, default beta / gamma.
ModelParams init_params(const TrainConfig& config, Eigen::Index points,
                        std::uint64_t seed);

struct GradientResult {
  ModelParams gradient;
  double loss = 0.0;  // summed over frames that were not skipped
  std::int64_t skipped = 0;
};

/// Accumulates d loss / d params of one frame into `gradient`; returns the
/// frame loss. Throws what forward throws.
double accumulate_frame_gradient(const Measurement& w, const Mask& mask,
                                 const ModelParams& params,
                                 ModelParams& gradient);

/// Gradient of the summed loss over the batch, reduced in frame order.
/// Frames whose forward pass is rank deficient are skipped and counted when
/// `skip_degenerate` is set; otherwise the error propagates.
GradientResult gradients(const ModelParams& params,
                         std::span<const FrameInput> batch,
                         bool skip_degenerate = false, int threads = 1);

/// Throws NonFinite naming the first tensor holding a non-finite entry.
void check_finite(const ModelParams& gradient);

AdamState make_adam_state(const ModelParams& params);

/// Standard bias-corrected Adam; thresholds are projected back to >= 0.
void adam_step(ModelParams& params, const ModelParams& gradient,
               AdamState& state, double learning_rate);

double lr_schedule(std::int64_t step, const TrainConfig& config);

/// Rescales every dictionary atom to unit norm.
void renormalize_dictionaries(ModelParams& params);

struct TrainState {
  TrainConfig config;
  ModelParams params;
  AdamState adam;
  std::vector<HistoryRecord> history;
  std::int64_t step = 0;
  std::int64_t skipped_since_record = 0;
  std::int64_t total_skipped = 0;
};

using ProgressFn = std::function<void(const HistoryRecord&)>;

TrainState start_training(const Scene& scene, const TrainConfig& config);

/// Runs minibatch Adam from state.step up to `until_step` (capped at
/// config.total_steps). Batches depend only on (seed, step), so a resumed run
/// is identical to an uninterrupted one.
void continue_training(TrainState& state, const Scene& scene,
                       std::int64_t until_step, const ProgressFn& progress = {});

TrainState train(const Scene& scene, const TrainConfig& config,
                 const ProgressFn& progress = {});

/// Frame indices visited at `step`.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step,
                                       std::size_t frame_count, int batch_size);

struct Reconstruction {
  Shape shape;  // de-normalized to input units
  CameraWeak camera;
};

/// Pure inference; throws on a degenerate frame.
std::vector<Reconstruction> reconstruct(const Scene& scene,
                                        const ModelParams& params,
                                        const TrainConfig& config);

/// Evaluation record for the current parameters (loss, coherence, error).
HistoryRecord evaluate_state(const ModelParams& params,
                             std::span<const FrameInput> frames,
                             const Scene& scene, const TrainConfig& config);

}  // namespace nrsfm
