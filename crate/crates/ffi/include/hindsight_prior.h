#ifndef HINDSIGHT_PRIOR_H
#define HINDSIGHT_PRIOR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HpStatus {
  HP_STATUS_OK = 0,
  HP_STATUS_NULL_POINTER = 1,
  HP_STATUS_INVALID_ARGUMENT = 2,
  HP_STATUS_SHAPE_ERROR = 3,
  HP_STATUS_NUMERICAL_ERROR = 4,
  HP_STATUS_ACTION_ERROR = 5,
  HP_STATUS_EPISODE_ERROR = 6,
  HP_STATUS_DATA_ERROR = 7,
  HP_STATUS_CONFIG_ERROR = 8,
  HP_STATUS_METRIC_ERROR = 9,
  HP_STATUS_IO_ERROR = 10,
  HP_STATUS_NOT_FOUND = 11,
  HP_STATUS_CONFLICT = 12,
  HP_STATUS_BUFFER_TOO_SMALL = 13,
  HP_STATUS_PANIC = 99,
} HpStatus;

// Query/label exchange for a human oracle.
typedef struct HpBridge HpBridge;

// Environment instance.
typedef struct HpEnv HpEnv;

// Reward ensemble loaded from a checkpoint.
typedef struct HpReward HpReward;

// Completed training run.
typedef struct HpRun HpRun;

// One evaluation episode.
typedef struct HpMetric {
  size_t step;
  size_t episode;
  double eval_return;
  uint8_t eval_success;
} HpMetric;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call on the same thread.
const char *hp_last_error(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must come from this library and not be freed twice.
void hp_string_free(char *s);

// Bradley-Terry probability that a segment with return `ga` is preferred.
double hp_bradley_terry(double ga, double gb);

// Two-tailed paired t-test on `a - b`.
//
// # Safety
// `a` and `b` must point to `n` doubles; outputs must be valid pointers.
enum HpStatus hp_paired_ttest(const double *a,
                              const double *b,
                              size_t n,
                              double *t,
                              double *p,
                              size_t *df);

// Creates a built-in environment (`keydoor` or `pointmass`) whose resets
// draw from `seed`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` a valid pointer.
enum HpStatus hp_env_new(const char *name, uint64_t seed, struct HpEnv **out);

// # Safety
// `env` must come from [`hp_env_new`] and not be used afterwards.
void hp_env_free(struct HpEnv *env);

// Observation length, or 0 for a null handle.
//
// # Safety
// `env` must be null or a live handle.
size_t hp_env_obs_dim(const struct HpEnv *env);

// Number of discrete actions, or 0 for continuous spaces and null handles.
//
// # Safety
// `env` must be null or a live handle.
size_t hp_env_num_actions(const struct HpEnv *env);

// Starts an episode and writes the first observation.
//
// # Safety
// `env` must be live; `obs` must hold `len` floats.
enum HpStatus hp_env_reset(struct HpEnv *env, float *obs, size_t len);

// Takes a discrete action; writes the next observation, the target
// reward and whether the episode ended.
//
// # Safety
// `env` must be live; `obs` must hold `len` floats; `reward` and `done`
// must be valid pointers.
enum HpStatus hp_env_step(struct HpEnv *env,
                          size_t action,
                          float *obs,
                          size_t len,
                          float *reward,
                          bool *done);

// Loads a reward checkpoint (`checkpoints/reward_session_NNN.json`).
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid pointer.
enum HpStatus hp_reward_load(const char *path, struct HpReward **out);

// # Safety
// `reward` must come from [`hp_reward_load`] and not be used afterwards.
void hp_reward_free(struct HpReward *reward);

// Ensemble-mean reward of one `(observation, action encoding)` pair.
//
// # Safety
// `reward` must be live; `obs`/`action` must hold the given lengths; `out`
// must be valid.
enum HpStatus hp_reward_evaluate(const struct HpReward *reward,
                                 const float *obs,
                                 size_t obs_len,
                                 const float *action,
                                 size_t action_len,
                                 float *out);

// Trains one run from a JSON configuration (NULL for defaults). Writes the
// run directory when `out_dir` is not NULL. A human-oracle run exchanges
// queries through `bridge`, which may be labeled from another thread.
//
// # Safety
// String arguments must be NULL or NUL-terminated; `bridge` NULL or live;
// `out` a valid pointer.
enum HpStatus hp_train(const char *config_json,
                       const char *out_dir,
                       const struct HpBridge *bridge,
                       struct HpRun **out);

// # Safety
// `run` must come from [`hp_train`] and not be used afterwards.
void hp_run_free(struct HpRun *run);

// Number of evaluation episodes recorded, or 0 for a null handle.
//
// # Safety
// `run` must be null or a live handle.
size_t hp_run_metric_count(const struct HpRun *run);

// # Safety
// `run` must be live; `out` must be valid.
enum HpStatus hp_run_metric(const struct HpRun *run, size_t index, struct HpMetric *out);

// Full run record as JSON; free with [`hp_string_free`].
//
// # Safety
// `run` must be live; `out` must be valid.
enum HpStatus hp_run_record_json(const struct HpRun *run, char **out);

// # Safety
// `out` must be a valid pointer.
enum HpStatus hp_bridge_new(struct HpBridge **out);

// # Safety
// `bridge` must come from [`hp_bridge_new`] and not be used afterwards.
void hp_bridge_free(struct HpBridge *bridge);

// Pending queries as a JSON array; free with [`hp_string_free`].
//
// # Safety
// `bridge` must be live; `out` must be valid.
enum HpStatus hp_bridge_pending_json(const struct HpBridge *bridge, char **out);

// Labels a pending query with `"a"`, `"b"` or `"equal"`.
//
// # Safety
// `bridge` must be live; `choice` NUL-terminated.
enum HpStatus hp_bridge_submit(const struct HpBridge *bridge,
                               uint64_t query_id,
                               const char *choice);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HINDSIGHT_PRIOR_H */
