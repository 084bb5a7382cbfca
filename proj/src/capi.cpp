#include "nrsfm/nrsfm.h"

#include "nrsfm/data.hpp"

#include <new>
#include <string>

struct nrsfm_scene {
  nrsfm::Scene scene;
};

struct nrsfm_model {
  nrsfm::TrainState state;
};

namespace {

thread_local std::string last_error;

nrsfm_status to_status(nrsfm::ErrorCode code) {
  using nrsfm::ErrorCode;
  switch (code) {
    case ErrorCode::InvalidArgument: return NRSFM_ERR_INVALID_ARGUMENT;
    case ErrorCode::DimensionMismatch: return NRSFM_ERR_DIMENSION_MISMATCH;
    case ErrorCode::RankDeficient: return NRSFM_ERR_RANK_DEFICIENT;
    case ErrorCode::NonFinite: return NRSFM_ERR_NON_FINITE;
    case ErrorCode::Io: return NRSFM_ERR_IO;
    case ErrorCode::Parse: return NRSFM_ERR_PARSE;
    case ErrorCode::Version: return NRSFM_ERR_VERSION;
  }
  return NRSFM_ERR_INTERNAL;
}

template <class F>
nrsfm_status guarded(F&& body) {
  try {
    body();
    last_error.clear();
    return NRSFM_OK;
  } catch (const nrsfm::Error& e) {
    last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
  } catch (const std::exception& e) {
    last_error = e.what();
  } catch (...) {
    last_error = "unknown error";
  }
  return NRSFM_ERR_INTERNAL;
}

void need(const void* p, const char* name) {
  nrsfm::require(p != nullptr, nrsfm::ErrorCode::InvalidArgument,
                 std::string(name) + " must not be null");
}

nrsfm_scene* wrap(nrsfm::Scene s) { return new nrsfm_scene{std::move(s)}; }

nrsfm::TrainConfig from_c(const nrsfm_train_config& c) {
  nrsfm::TrainConfig out;
  out.layers = c.layers;
  out.first_width = c.first_width;
  out.last_width = c.last_width;
  out.activation = c.relu ? nrsfm::Activation::Relu : nrsfm::Activation::Soft;
  out.translation = c.translation != 0;
  out.batch_size = c.batch_size;
  out.total_steps = c.total_steps;
  out.base_learning_rate = c.base_learning_rate;
  out.decay_factor = c.decay_factor;
  out.decay_steps = c.decay_steps;
  out.seed = c.seed;
  out.eval_interval = c.eval_interval;
  out.renormalize_dictionaries = c.renormalize_dictionaries != 0;
  out.threads = c.threads;
  return out;
}

nrsfm_train_config to_c(const nrsfm::TrainConfig& c) {
  nrsfm_train_config out;
  out.layers = c.layers;
  out.first_width = c.first_width;
  out.last_width = c.last_width;
  out.relu = c.activation == nrsfm::Activation::Relu;
  out.translation = c.translation;
  out.batch_size = c.batch_size;
  out.total_steps = c.total_steps;
  out.base_learning_rate = c.base_learning_rate;
  out.decay_factor = c.decay_factor;
  out.decay_steps = c.decay_steps;
  out.seed = c.seed;
  out.eval_interval = c.eval_interval;
  out.renormalize_dictionaries = c.renormalize_dictionaries;
  out.threads = c.threads;
  return out;
}

nrsfm_history_record to_c(const nrsfm::HistoryRecord& r) {
  return {r.step, r.learning_rate, r.mean_loss, r.coherence, r.error, r.skipped};
}

std::vector<double> frame_errors(const nrsfm::Scene& est, const nrsfm::Scene& truth) {
  using nrsfm::ErrorCode;
  nrsfm::require(est.shapes.has_value(), ErrorCode::InvalidArgument,
                 "estimates carry no shapes");
  nrsfm::require(truth.shapes.has_value(), ErrorCode::InvalidArgument,
                 "ground truth carries no shapes");
  nrsfm::require(est.points == truth.points &&
                     est.frame_count() == truth.frame_count(),
                 ErrorCode::DimensionMismatch,
                 "estimates and ground truth differ in frame or point count");
  const bool allow_scale = est.projection == nrsfm::Projection::WeakPerspective ||
                           truth.projection == nrsfm::Projection::WeakPerspective;
  return nrsfm::per_frame_3d_error(*est.shapes, *truth.shapes, allow_scale);
}

}  // namespace

extern "C" {

const char* nrsfm_last_error(void) { return last_error.c_str(); }

const char* nrsfm_status_name(nrsfm_status status) {
  switch (status) {
    case NRSFM_OK: return "ok";
    case NRSFM_ERR_INVALID_ARGUMENT: return "invalid argument";
    case NRSFM_ERR_DIMENSION_MISMATCH: return "dimension mismatch";
    case NRSFM_ERR_RANK_DEFICIENT: return "rank deficient";
    case NRSFM_ERR_NON_FINITE: return "non-finite value";
    case NRSFM_ERR_IO: return "i/o error";
    case NRSFM_ERR_PARSE: return "parse error";
    case NRSFM_ERR_VERSION: return "unsupported version";
    case NRSFM_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void nrsfm_planted_spec_default(nrsfm_planted_spec* spec) {
  if (!spec) return;
  const nrsfm::PlantedSpec d;
  spec->points = static_cast<int>(d.points);
  spec->frames = d.frames;
  spec->layers = d.layers;
  spec->first_width = d.first_width;
  spec->last_width = d.last_width;
  spec->code_sparsity = d.code_sparsity;
  spec->link_sparsity = d.link_sparsity;
  spec->weak_perspective = d.projection == nrsfm::Projection::WeakPerspective;
  spec->noise_ratio = d.noise_ratio;
  spec->max_missing = d.max_missing;
  spec->seed = d.seed;
}

nrsfm_status nrsfm_scene_generate(const nrsfm_planted_spec* spec,
                                  nrsfm_scene** out, nrsfm_model** truth) {
  return guarded([&] {
    need(spec, "spec");
    need(out, "out");
    nrsfm::PlantedSpec s;
    s.points = spec->points;
    s.frames = spec->frames;
    s.layers = spec->layers;
    s.first_width = spec->first_width;
    s.last_width = spec->last_width;
    s.code_sparsity = spec->code_sparsity;
    s.link_sparsity = spec->link_sparsity;
    s.projection = spec->weak_perspective ? nrsfm::Projection::WeakPerspective
                                          : nrsfm::Projection::Orthogonal;
    s.noise_ratio = spec->noise_ratio;
    s.max_missing = spec->max_missing;
    s.seed = spec->seed;
    nrsfm::PlantedScene planted = nrsfm::synth_planted(s);
    nrsfm_model* model = nullptr;
    if (truth) {
      nrsfm::TrainState state;
      state.config.layers = s.layers;
      state.config.first_width = s.first_width;
      state.config.last_width = s.last_width;
      state.config.activation = planted.params.activation;
      state.config.seed = s.seed;
      state.params = std::move(planted.params);
      state.adam = nrsfm::make_adam_state(state.params);
      model = new nrsfm_model{std::move(state)};
    }
    *out = wrap(std::move(planted.scene));
    if (truth) *truth = model;
  });
}

nrsfm_status nrsfm_scene_load(const char* path, nrsfm_scene** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = wrap(nrsfm::load_scene(path));
  });
}

nrsfm_status nrsfm_scene_save(const nrsfm_scene* scene, const char* path) {
  return guarded([&] {
    need(scene, "scene");
    need(path, "path");
    nrsfm::save_scene(scene->scene, path);
  });
}

void nrsfm_scene_free(nrsfm_scene* scene) { delete scene; }

nrsfm_status nrsfm_scene_add_noise(const nrsfm_scene* scene, double ratio,
                                   uint64_t seed, nrsfm_scene** out) {
  return guarded([&] {
    need(scene, "scene");
    need(out, "out");
    *out = wrap(nrsfm::add_noise(scene->scene, ratio, seed));
  });
}

nrsfm_status nrsfm_scene_make_missing(const nrsfm_scene* scene, int max_missing,
                                      uint64_t seed, nrsfm_scene** out) {
  return guarded([&] {
    need(scene, "scene");
    need(out, "out");
    *out = wrap(nrsfm::make_missing(scene->scene, max_missing, seed));
  });
}

nrsfm_status nrsfm_scene_center(const nrsfm_scene* scene, nrsfm_scene** out) {
  return guarded([&] {
    need(scene, "scene");
    need(out, "out");
    *out = wrap(nrsfm::center_frames(scene->scene));
  });
}

nrsfm_status nrsfm_scene_get_info(const nrsfm_scene* scene,
                                  nrsfm_scene_info* info) {
  return guarded([&] {
    need(scene, "scene");
    need(info, "info");
    const auto& s = scene->scene;
    info->points = static_cast<int>(s.points);
    info->frames = s.frame_count();
    info->weak_perspective = s.projection == nrsfm::Projection::WeakPerspective;
    info->has_shapes = s.shapes.has_value();
    info->has_cameras = s.cameras.has_value();
  });
}

nrsfm_status nrsfm_scene_get_measurement(const nrsfm_scene* scene,
                                         uint64_t frame, double* uv,
                                         unsigned char* visible) {
  return guarded([&] {
    need(scene, "scene");
    need(uv, "uv");
    const auto& s = scene->scene;
    nrsfm::require(frame < s.frame_count(), nrsfm::ErrorCode::InvalidArgument,
                   "frame index out of range");
    const auto& w = s.measurements[frame];
    for (Eigen::Index p = 0; p < s.points; ++p) {
      uv[2 * p] = w(p, 0);
      uv[2 * p + 1] = w(p, 1);
      if (visible) visible[p] = s.masks[frame][p] ? 1 : 0;
    }
  });
}

nrsfm_status nrsfm_scene_get_shape(const nrsfm_scene* scene, uint64_t frame,
                                   double* xyz) {
  return guarded([&] {
    need(scene, "scene");
    need(xyz, "xyz");
    const auto& s = scene->scene;
    nrsfm::require(s.shapes.has_value(), nrsfm::ErrorCode::InvalidArgument,
                   "scene carries no shapes");
    nrsfm::require(frame < s.frame_count(), nrsfm::ErrorCode::InvalidArgument,
                   "frame index out of range");
    const auto& shape = (*s.shapes)[frame];
    for (Eigen::Index p = 0; p < s.points; ++p)
      for (int c = 0; c < 3; ++c) xyz[3 * p + c] = shape(p, c);
  });
}

void nrsfm_train_config_default(nrsfm_train_config* config) {
  if (config) *config = to_c(nrsfm::TrainConfig{});
}

nrsfm_status nrsfm_model_create(const nrsfm_scene* scene,
                                const nrsfm_train_config* config,
                                nrsfm_model** out) {
  return guarded([&] {
    need(scene, "scene");
    need(config, "config");
    need(out, "out");
    *out = new nrsfm_model{nrsfm::start_training(scene->scene, from_c(*config))};
  });
}

nrsfm_status nrsfm_model_train(nrsfm_model* model, const nrsfm_scene* scene,
                               int64_t until_step, nrsfm_progress_fn progress,
                               void* user) {
  return guarded([&] {
    need(model, "model");
    need(scene, "scene");
    const int64_t until =
        until_step < 0 ? model->state.config.total_steps : until_step;
    nrsfm::ProgressFn fn;
    if (progress)
      fn = [&](const nrsfm::HistoryRecord& r) {
        const nrsfm_history_record rec = to_c(r);
        progress(&rec, user);
      };
    nrsfm::continue_training(model->state, scene->scene, until, fn);
  });
}

nrsfm_status nrsfm_model_load(const char* path, nrsfm_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new nrsfm_model{nrsfm::load_checkpoint(path)};
  });
}

nrsfm_status nrsfm_model_save(const nrsfm_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    nrsfm::save_checkpoint(model->state, path);
  });
}

void nrsfm_model_free(nrsfm_model* model) { delete model; }

nrsfm_status nrsfm_model_get_config(const nrsfm_model* model,
                                    nrsfm_train_config* config) {
  return guarded([&] {
    need(model, "model");
    need(config, "config");
    *config = to_c(model->state.config);
  });
}

nrsfm_status nrsfm_model_get_step(const nrsfm_model* model, int64_t* step) {
  return guarded([&] {
    need(model, "model");
    need(step, "step");
    *step = model->state.step;
  });
}

nrsfm_status nrsfm_model_get_points(const nrsfm_model* model, int* points) {
  return guarded([&] {
    need(model, "model");
    need(points, "points");
    *points = static_cast<int>(model->state.params.points);
  });
}

nrsfm_status nrsfm_model_history_size(const nrsfm_model* model, size_t* size) {
  return guarded([&] {
    need(model, "model");
    need(size, "size");
    *size = model->state.history.size();
  });
}

nrsfm_status nrsfm_model_history_record(const nrsfm_model* model, size_t index,
                                        nrsfm_history_record* record) {
  return guarded([&] {
    need(model, "model");
    need(record, "record");
    nrsfm::require(index < model->state.history.size(),
                   nrsfm::ErrorCode::InvalidArgument,
                   "history index out of range");
    *record = to_c(model->state.history[index]);
  });
}

nrsfm_status nrsfm_model_write_history(const nrsfm_model* model,
                                       const char* const* header,
                                       size_t header_count, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    std::vector<std::string> lines;
    for (size_t i = 0; i < header_count; ++i) {
      need(header, "header");
      need(header[i], "header line");
      lines.emplace_back(header[i]);
    }
    nrsfm::write_history(model->state.history, lines, path);
  });
}

nrsfm_status nrsfm_model_coherence(const nrsfm_model* model, double* coherence) {
  return guarded([&] {
    need(model, "model");
    need(coherence, "coherence");
    const nrsfm::Matrix atoms = nrsfm::last_dictionary_atoms(model->state.params);
    *coherence = atoms.cols() >= 2 ? nrsfm::mutual_coherence(atoms) : 0.0;
  });
}

nrsfm_status nrsfm_model_reconstruct(const nrsfm_model* model,
                                     const nrsfm_scene* scene,
                                     nrsfm_scene** out) {
  return guarded([&] {
    need(model, "model");
    need(scene, "scene");
    need(out, "out");
    const auto rec =
        nrsfm::reconstruct(scene->scene, model->state.params, model->state.config);
    nrsfm::Scene result = scene->scene;
    result.shapes.emplace();
    result.cameras.emplace();
    for (const auto& r : rec) {
      result.shapes->push_back(r.shape);
      result.cameras->push_back(r.camera);
    }
    if (model->state.config.translation)
      result.projection = nrsfm::Projection::WeakPerspective;
    *out = wrap(std::move(result));
  });
}

nrsfm_status nrsfm_evaluate(const nrsfm_scene* estimates,
                            const nrsfm_scene* truth, double* mean,
                            double* per_frame) {
  return guarded([&] {
    need(estimates, "estimates");
    need(truth, "truth");
    need(mean, "mean");
    const auto errors = frame_errors(estimates->scene, truth->scene);
    nrsfm::require(!errors.empty(), nrsfm::ErrorCode::InvalidArgument,
                   "no frames to evaluate");
    double sum = 0.0;
    for (double e : errors) sum += e;
    *mean = sum / static_cast<double>(errors.size());
    if (per_frame)
      for (size_t i = 0; i < errors.size(); ++i) per_frame[i] = errors[i];
  });
}

nrsfm_status nrsfm_cumulative_curve(const nrsfm_scene* estimates,
                                    const nrsfm_scene* truth,
                                    const double* thresholds, size_t count,
                                    double* fractions) {
  return guarded([&] {
    need(estimates, "estimates");
    need(truth, "truth");
    if (count == 0) return;
    need(thresholds, "thresholds");
    need(fractions, "fractions");
    const auto errors = frame_errors(estimates->scene, truth->scene);
    const auto curve = nrsfm::cumulative_error_curve(
        errors, std::span<const double>(thresholds, count));
    for (size_t i = 0; i < count; ++i) fractions[i] = curve[i].second;
  });
}

}  // extern "C"
