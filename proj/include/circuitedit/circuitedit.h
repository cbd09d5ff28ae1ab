/*
 * circuitedit C API: a desk-scale knowledge-editing laboratory.
 *
 * The library pretrains a small decoder-only transformer on a synthetic fact
 * world, localizes the circuit carrying one target fact, edits that fact via
 * rescaling adapters (direct baselines or the two-stage unlearn-then-learn
 * procedure) and evaluates edit success, forgetting and collateral damage.
 *
 * All functions return CE_OK or an error code; ce_last_error() describes the
 * most recent failure on the calling thread. Strings returned through char**
 * outputs are heap-allocated and must be released with ce_string_free().
 * Option strings are JSON objects; pass NULL for defaults.
 */

#ifndef CIRCUITEDIT_H
#define CIRCUITEDIT_H

#include <stddef.h>

#if defined(_WIN32)
#define CE_API __declspec(dllexport)
#else
#define CE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ce_status {
    CE_OK = 0,
    CE_ERR_INVALID_ARGUMENT = 1,
    CE_ERR_DIMENSION = 2,
    CE_ERR_NUMERIC = 3,
    CE_ERR_CAPACITY = 4,
    CE_ERR_FORMAT = 5,
    CE_ERR_IO = 6,
    CE_ERR_PREREQUISITE = 7,
    CE_ERR_DIVERGENCE = 8,
    CE_ERR_LOCALIZATION = 9,
    CE_ERR_GATE = 10,
    CE_ERR_UNSUPPORTED = 11,
    CE_ERR_INTERNAL = 12
} ce_status;

CE_API const char* ce_version(void);

/* Message for the last failing call on this thread; empty string if none. */
CE_API const char* ce_last_error(void);

CE_API void ce_string_free(char* s);

/* ------------------------------------------------------------------ */
/* Opaque handles                                                      */
/* ------------------------------------------------------------------ */

typedef struct ce_world ce_world;
typedef struct ce_model ce_model;

/* config_json: {"seed","n_entities","n_relations","n_facts",...}; NULL for
 * the default world. */
CE_API ce_status ce_world_generate(const char* config_json, ce_world** out);
CE_API ce_status ce_world_open(const char* path, ce_world** out);
CE_API ce_status ce_world_save(const ce_world* world, const char* path);
/* Summary: sizes, vocab size, edit fact (subject/relation/f1/f2), hash. */
CE_API ce_status ce_world_info(const ce_world* world, char** json_out);
CE_API void ce_world_free(ce_world* world);

/* Opens a checkpoint directory or a composite model directory (base +
 * adapters, hash-verified). */
CE_API ce_status ce_model_open(const char* model_dir, ce_model** out);
CE_API ce_status ce_model_info(const ce_model* model, char** json_out);
/* Greedy-decodes the answer to a raw query string ("who created X ?"). */
CE_API ce_status ce_model_answer(const ce_model* model, const ce_world* world,
                                 const char* query_text, int max_new, char** text_out);
CE_API void ce_model_free(ce_model* model);

/* ------------------------------------------------------------------ */
/* Pipeline stages (artifact-directory oriented)                      */
/* ------------------------------------------------------------------ */

/* opts_json: {"model": {...}, "pretrain": {...}}. Writes a checkpoint with
 * gate.json + loss curve into out_dir. Fails with CE_ERR_GATE when the
 * entrenchment gate is unmet within budget. */
CE_API ce_status ce_pretrain(const char* world_path, const char* out_dir, const char* opts_json,
                             char** summary_json_out);

/* opts_json: {"n_pairs","single_prompt","top_fraction","min_metrics"}. */
CE_API ce_status ce_localize(const char* checkpoint_dir, const char* world_path,
                             const char* out_path, const char* opts_json,
                             char** summary_json_out);

/* strategy: "direct-lora" | "direct-ia3" | "unlearn-then-learn".
 * targets: localization report path, or "all" for all-modules targeting.
 * opts_json: {"steps","batch","lr","stop_loss","stop_window","seed",
 *             "lora_rank","lora_alpha","merge_final","paper_hparams"}. */
CE_API ce_status ce_edit(const char* checkpoint_dir, const char* world_path,
                         const char* strategy, const char* targets, const char* out_dir,
                         const char* opts_json, char** summary_json_out);

/* Runs all three strategies from the same base and writes comparison files
 * under out_root. opts_json: {"edit": {...}, "eval": {...}}. */
CE_API ce_status ce_compare(const char* checkpoint_dir, const char* world_path,
                            const char* targets, const char* out_root, const char* opts_json,
                            char** summary_json_out);

/* opts_json: {"paper_protocol","repeat_factor","decode","temperature","seed",
 *             "max_new","latent_rank_fraction"}. Writes metrics.json and
 *             records.csv under out_dir. */
CE_API ce_status ce_eval(const char* model_dir, const char* world_path, const char* out_dir,
                         const char* opts_json, char** summary_json_out);

/* Renders the three-strategy comparison for a run root (…/base plus strategy
 * directories with eval metrics) as an aligned text table; also refreshes
 * comparison.csv/json. */
CE_API ce_status ce_report(const char* run_root, char** table_text_out);

#ifdef __cplusplus
}
#endif

#endif /* CIRCUITEDIT_H */
