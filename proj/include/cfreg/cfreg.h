/*
 * Copyright 2026 The CF-Reg Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/*
 * Stable C interface to libcfreg.
 *
 * Every fallible call returns a cfreg_status. On failure the message is
 * available from cfreg_last_error() on the same thread until the next call
 * into the library from that thread. Strings returned by the library are
 * owned by it and stay valid until the next call on the same thread.
 */

#ifndef CFREG_CFREG_H_
#define CFREG_CFREG_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CFREG_API __declspec(dllexport)
#else
#define CFREG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cfreg_status {
  CFREG_OK = 0,
  CFREG_INVALID_ARGUMENT = 1,
  CFREG_SHAPE_MISMATCH = 2,
  CFREG_IO = 3,
  CFREG_PARSE = 4,
  CFREG_DEGENERATE_MODEL = 5,
  CFREG_DIVERGENCE = 6,
  CFREG_NON_FINITE = 7,
  CFREG_UNSUPPORTED = 8,
  CFREG_INTERNAL = 9
} cfreg_status;

typedef enum cfreg_command {
  CFREG_CMD_TRAIN = 0,
  CFREG_CMD_COMPARE = 1,
  CFREG_CMD_VCP_PROFILE = 2,
  CFREG_CMD_MARGIN_HIST = 3,
  CFREG_CMD_DELTA_TRACE = 4,
  CFREG_CMD_EXPLAIN = 5
} cfreg_command;

typedef struct cfreg_config cfreg_config;
typedef struct cfreg_model cfreg_model;

typedef struct cfreg_run_options {
  int has_seed;        /* nonzero: run only `seed` instead of run.seeds */
  uint64_t seed;
  const char* out_dir; /* NULL or "": derive from CFREG_OUTPUT_ROOT */
  int workers;         /* values below 1 are treated as 1 */
  int verbose;         /* progress lines on stderr */
} cfreg_run_options;

CFREG_API const char* cfreg_version(void);
CFREG_API const char* cfreg_status_name(cfreg_status status);
CFREG_API const char* cfreg_last_error(void);

/* Name of the environment variable holding the default output root. */
CFREG_API const char* cfreg_output_root_env(void);

CFREG_API cfreg_status cfreg_config_load(const char* path, cfreg_config** out);
CFREG_API cfreg_status cfreg_config_parse(const char* text, const char* base_dir,
                                          cfreg_config** out);
/* Sets "section.key" to `value` and revalidates the whole config. */
CFREG_API cfreg_status cfreg_config_set(cfreg_config* config, const char* key,
                                        const char* value);
CFREG_API void cfreg_config_free(cfreg_config* config);

CFREG_API cfreg_status cfreg_command_parse(const char* name, cfreg_command* out);
/* Runs one command. On success cfreg_last_output_dir() names the directory
 * written and cfreg_last_report() holds a short plain-text summary. */
CFREG_API cfreg_status cfreg_run(const cfreg_config* config, cfreg_command command,
                                 const cfreg_run_options* options);
CFREG_API const char* cfreg_last_output_dir(void);
CFREG_API const char* cfreg_last_report(void);

CFREG_API cfreg_status cfreg_model_load(const char* checkpoint_path, cfreg_model** out);
/* Number of raw features the model expects (before any expansion). */
CFREG_API size_t cfreg_model_feature_count(const cfreg_model* model);
CFREG_API size_t cfreg_model_parameter_count(const cfreg_model* model);
/* Writes n_rows logits for row-major (n_rows x n_features) raw inputs. */
CFREG_API cfreg_status cfreg_model_predict(const cfreg_model* model, const double* rows,
                                           size_t n_rows, size_t n_features,
                                           double* logits_out);
CFREG_API void cfreg_model_free(cfreg_model* model);

#ifdef __cplusplus
}
#endif

#endif /* CFREG_CFREG_H_ */
