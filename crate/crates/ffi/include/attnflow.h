/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef ATTNFLOW_H
#define ATTNFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes.
 */
typedef enum AtnfStatus {
  ATNF_STATUS_OK = 0,
  ATNF_STATUS_NULL_ARGUMENT = 1,
  ATNF_STATUS_INVALID_ARGUMENT = 2,
  ATNF_STATUS_IO = 3,
  ATNF_STATUS_FORMAT = 4,
  ATNF_STATUS_CONFIG = 5,
  ATNF_STATUS_SHAPE = 6,
  ATNF_STATUS_OUT_OF_RANGE = 7,
  ATNF_STATUS_MAX_LENGTH = 8,
  ATNF_STATUS_NUMERIC = 9,
  ATNF_STATUS_INFEASIBLE = 10,
  ATNF_STATUS_BUFFER_TOO_SMALL = 11,
  ATNF_STATUS_PANIC = 12,
} AtnfStatus;

/**
 * A generated fixture: model, prompt and layout.
 */
typedef struct AtnfFixture AtnfFixture;

/**
 * Loaded weights. Sessions keep their model alive.
 */
typedef struct AtnfModel AtnfModel;

/**
 * A prefilled decoding session with its frozen intervention.
 */
typedef struct AtnfSession AtnfSession;

/**
 * Model dimensions.
 */
typedef struct AtnfModelConfig {
  size_t num_layers;
  size_t num_heads;
  size_t model_dim;
  size_t head_dim;
  size_t ffn_dim;
  size_t vocab_size;
  size_t max_seq_len;
  double rope_base;
} AtnfModelConfig;

/**
 * Half-open position ranges of a prompt. `resp_start` is the prompt length.
 */
typedef struct AtnfSegmentation {
  size_t sys_start;
  size_t sys_end;
  size_t vis_start;
  size_t vis_end;
  size_t instr_start;
  size_t instr_end;
  size_t resp_start;
} AtnfSegmentation;

typedef struct AtnfPopeScores {
  double accuracy;
  double precision;
  double recall;
  double f1;
  size_t tp;
  size_t fp;
  size_t tn;
  size_t fn_;
} AtnfPopeScores;

typedef struct AtnfChairScores {
  double chair_i;
  double chair_s;
  double recall;
  size_t captions;
  size_t mentions;
  size_t hallucinated;
} AtnfChairScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *atnf_last_error(void);

/**
 * Loads a binary or JSON weight file.
 */
enum AtnfStatus atnf_model_load(const char *path, struct AtnfModel **out);

void atnf_model_free(struct AtnfModel *model);

enum AtnfStatus atnf_model_config(const struct AtnfModel *model, struct AtnfModelConfig *out);

/**
 * Builds a synthetic fixture. `pathology` selects the hand-built model with
 * a copy head and a visual head; otherwise weights are random. `config` may
 * be null for the default pathology dimensions (its `head_dim`, `ffn_dim`
 * and `rope_base` are derived and ignored).
 */
enum AtnfStatus atnf_fixture_new(bool pathology,
                                 uint64_t seed,
                                 const struct AtnfModelConfig *config,
                                 size_t sys_len,
                                 size_t vis_len,
                                 size_t instr_len,
                                 struct AtnfFixture **out);

void atnf_fixture_free(struct AtnfFixture *fixture);

/**
 * A new model handle sharing the fixture's weights.
 */
enum AtnfStatus atnf_fixture_model(const struct AtnfFixture *fixture, struct AtnfModel **out);

/**
 * Copies the fixture prompt into `tokens` (capacity `cap`) and its layout
 * into `layout`. `*len` always receives the prompt length; a short buffer
 * fails with `BufferTooSmall`.
 */
enum AtnfStatus atnf_fixture_prompt(const struct AtnfFixture *fixture,
                                    uint32_t *tokens,
                                    size_t cap,
                                    size_t *len,
                                    struct AtnfSegmentation *layout);

/**
 * Plans the intervention and prefills `tokens`. `config_json` is an
 * intervention config, a preset name, or null for the unmodified model.
 */
enum AtnfStatus atnf_session_new(const struct AtnfModel *model,
                                 const uint32_t *tokens,
                                 size_t len,
                                 const struct AtnfSegmentation *layout,
                                 const char *config_json,
                                 struct AtnfSession **out);

void atnf_session_free(struct AtnfSession *session);

/**
 * One greedy step; writes the chosen token.
 */
enum AtnfStatus atnf_session_step(struct AtnfSession *session, uint32_t *token);

/**
 * Up to `max_new` greedy steps, stopping early at the model's maximum
 * length. `*written` receives the number of tokens produced.
 */
enum AtnfStatus atnf_session_generate(struct AtnfSession *session,
                                      size_t max_new,
                                      uint32_t *tokens,
                                      size_t cap,
                                      size_t *written);

/**
 * Logits of the last position as doubles. `*len` receives the vocabulary
 * size even when the buffer is too small.
 */
enum AtnfStatus atnf_session_logits(const struct AtnfSession *session,
                                    double *logits,
                                    size_t cap,
                                    size_t *len);

/**
 * Number of positions consumed so far.
 */
enum AtnfStatus atnf_session_position(const struct AtnfSession *session, size_t *position);

/**
 * POPE scores from parallel arrays; nonzero means "yes".
 */
enum AtnfStatus atnf_pope_scores(const uint8_t *predictions,
                                 const uint8_t *labels,
                                 size_t n,
                                 struct AtnfPopeScores *out);

/**
 * CHAIR scores from JSONL caption annotations.
 */
enum AtnfStatus atnf_chair_scores_jsonl(const char *jsonl, struct AtnfChairScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTNFLOW_H */
