#ifndef NRSFM_NRSFM_H
#define NRSFM_NRSFM_H

/*
 * C interface to the nrsfm library.
 *
 * Objects are opaque handles created by the library and released with the
 * matching *_free function. Every fallible call returns an nrsfm_status; on
 * failure nrsfm_last_error() describes the problem for the calling thread.
 * Output handles are written only on success.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(NRSFM_BUILDING_LIBRARY)
#define NRSFM_API __attribute__((visibility("default")))
#else
#define NRSFM_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum nrsfm_status {
  NRSFM_OK = 0,
  NRSFM_ERR_INVALID_ARGUMENT = 1,
  NRSFM_ERR_DIMENSION_MISMATCH = 2,
  NRSFM_ERR_RANK_DEFICIENT = 3,
  NRSFM_ERR_NON_FINITE = 4,
  NRSFM_ERR_IO = 5,
  NRSFM_ERR_PARSE = 6,
  NRSFM_ERR_VERSION = 7,
  NRSFM_ERR_INTERNAL = 8
} nrsfm_status;

typedef struct nrsfm_scene nrsfm_scene;
typedef struct nrsfm_model nrsfm_model;

NRSFM_API const char* nrsfm_last_error(void);
NRSFM_API const char* nrsfm_status_name(nrsfm_status status);

/* ---- scenes ------------------------------------------------------------ */

typedef struct nrsfm_planted_spec {
  int points;
  uint64_t frames;
  int layers;
  int first_width;
  int last_width;
  int code_sparsity;
  int link_sparsity;
  int weak_perspective; /* 0 = orthogonal cameras */
  double noise_ratio;
  int max_missing;
  uint64_t seed;
} nrsfm_planted_spec;

NRSFM_API void nrsfm_planted_spec_default(nrsfm_planted_spec* spec);

/* truth may be NULL; otherwise it receives the generating model (step 0). */
NRSFM_API nrsfm_status nrsfm_scene_generate(const nrsfm_planted_spec* spec,
                                            nrsfm_scene** out,
                                            nrsfm_model** truth);
NRSFM_API nrsfm_status nrsfm_scene_load(const char* path, nrsfm_scene** out);
NRSFM_API nrsfm_status nrsfm_scene_save(const nrsfm_scene* scene,
                                        const char* path);
NRSFM_API void nrsfm_scene_free(nrsfm_scene* scene);

NRSFM_API nrsfm_status nrsfm_scene_add_noise(const nrsfm_scene* scene,
                                             double ratio, uint64_t seed,
                                             nrsfm_scene** out);
NRSFM_API nrsfm_status nrsfm_scene_make_missing(const nrsfm_scene* scene,
                                                int max_missing, uint64_t seed,
                                                nrsfm_scene** out);
NRSFM_API nrsfm_status nrsfm_scene_center(const nrsfm_scene* scene,
                                          nrsfm_scene** out);

typedef struct nrsfm_scene_info {
  int points;
  uint64_t frames;
  int weak_perspective;
  int has_shapes;
  int has_cameras;
} nrsfm_scene_info;

NRSFM_API nrsfm_status nrsfm_scene_get_info(const nrsfm_scene* scene,
                                            nrsfm_scene_info* info);
/* uv: points x 2 row-major; visible: points entries of 0/1 (may be NULL). */
NRSFM_API nrsfm_status nrsfm_scene_get_measurement(const nrsfm_scene* scene,
                                                   uint64_t frame, double* uv,
                                                   unsigned char* visible);
/* xyz: points x 3 row-major. Fails when the scene carries no shapes. */
NRSFM_API nrsfm_status nrsfm_scene_get_shape(const nrsfm_scene* scene,
                                             uint64_t frame, double* xyz);

/* ---- training ---------------------------------------------------------- */

typedef struct nrsfm_train_config {
  int layers;
  int first_width;
  int last_width;
  int relu; /* 0 = soft thresholding */
  int translation;
  int batch_size;
  int64_t total_steps;
  double base_learning_rate;
  double decay_factor;
  int64_t decay_steps;
  uint64_t seed;
  int64_t eval_interval;
  int renormalize_dictionaries;
  int threads;
} nrsfm_train_config;

typedef struct nrsfm_history_record {
  int64_t step;
  double learning_rate;
  double mean_loss;
  double coherence;
  double error; /* NaN when the scene has no ground truth */
  int64_t skipped;
} nrsfm_history_record;

typedef void (*nrsfm_progress_fn)(const nrsfm_history_record* record,
                                  void* user);

NRSFM_API void nrsfm_train_config_default(nrsfm_train_config* config);

/* Initializes a model without taking any step. */
NRSFM_API nrsfm_status nrsfm_model_create(const nrsfm_scene* scene,
                                          const nrsfm_train_config* config,
                                          nrsfm_model** out);
/* Trains up to until_step (capped at total_steps); negative = to the end. */
NRSFM_API nrsfm_status nrsfm_model_train(nrsfm_model* model,
                                         const nrsfm_scene* scene,
                                         int64_t until_step,
                                         nrsfm_progress_fn progress,
                                         void* user);
NRSFM_API nrsfm_status nrsfm_model_load(const char* path, nrsfm_model** out);
NRSFM_API nrsfm_status nrsfm_model_save(const nrsfm_model* model,
                                        const char* path);
NRSFM_API void nrsfm_model_free(nrsfm_model* model);

NRSFM_API nrsfm_status nrsfm_model_get_config(const nrsfm_model* model,
                                              nrsfm_train_config* config);
NRSFM_API nrsfm_status nrsfm_model_get_step(const nrsfm_model* model,
                                            int64_t* step);
NRSFM_API nrsfm_status nrsfm_model_get_points(const nrsfm_model* model,
                                              int* points);
NRSFM_API nrsfm_status nrsfm_model_history_size(const nrsfm_model* model,
                                                size_t* size);
NRSFM_API nrsfm_status nrsfm_model_history_record(const nrsfm_model* model,
                                                  size_t index,
                                                  nrsfm_history_record* record);
/* Writes the history CSV; header lines are emitted as "# " comments. */
NRSFM_API nrsfm_status nrsfm_model_write_history(const nrsfm_model* model,
                                                 const char* const* header,
                                                 size_t header_count,
                                                 const char* path);
/* Mutual coherence of the deepest dictionary. */
NRSFM_API nrsfm_status nrsfm_model_coherence(const nrsfm_model* model,
                                             double* coherence);

/* ---- inference and evaluation ----------------------------------------- */

/* Returns a copy of the scene whose shapes and cameras are the estimates. */
NRSFM_API nrsfm_status nrsfm_model_reconstruct(const nrsfm_model* model,
                                               const nrsfm_scene* scene,
                                               nrsfm_scene** out);

/* Mean normalized 3D error of the estimate shapes against the truth shapes.
 * Scale is aligned when either scene uses weak perspective. per_frame may be
 * NULL, otherwise it receives one value per frame. */
NRSFM_API nrsfm_status nrsfm_evaluate(const nrsfm_scene* estimates,
                                      const nrsfm_scene* truth, double* mean,
                                      double* per_frame);

/* fractions[i] = share of frames with error <= thresholds[i]. */
NRSFM_API nrsfm_status nrsfm_cumulative_curve(const nrsfm_scene* estimates,
                                              const nrsfm_scene* truth,
                                              const double* thresholds,
                                              size_t count, double* fractions);

#ifdef __cplusplus
}
#endif

#endif
