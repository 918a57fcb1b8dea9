#ifndef XRC_XRC_H
#define XRC_XRC_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by every function that can fail. */
typedef enum {
    XRC_OK = 0,
    XRC_ERR_COMPUTE = 1,  /* divergence, failed gradient check */
    XRC_ERR_INVALID = 2,  /* bad argument, configuration or input data */
    XRC_ERR_IO = 3,       /* file could not be read or written */
    XRC_ERR_FORMAT = 4,   /* malformed checkpoint or dataset file */
    XRC_ERR_INTERNAL = 5
} xrc_status;

typedef struct xrc_config xrc_config;
typedef struct xrc_model xrc_model;
typedef struct xrc_dataset xrc_dataset;

/* Message of the last failure on the calling thread; empty after success. */
const char* xrc_last_error(void);
const char* xrc_version(void);

/* Strings returned through char** out-parameters are owned by the caller. */
void xrc_string_free(char* s);

/* ---- configuration ---- */

int xrc_config_new(xrc_config** out);
void xrc_config_free(xrc_config* cfg);
/* Reads a key = value file. Values set with xrc_config_set take precedence. */
int xrc_config_load_file(xrc_config* cfg, const char* path);
int xrc_config_set(xrc_config* cfg, const char* key, const char* value);
int xrc_config_get(const xrc_config* cfg, const char* key, char** value);
/* Fully resolved configuration as key = value text. */
int xrc_config_render(const xrc_config* cfg, char** text);
size_t xrc_config_key_count(void);
const char* xrc_config_key_name(size_t index);
const char* xrc_config_key_help(size_t index);

/* ---- datasets and models ---- */

int xrc_dataset_load(const char* data_dir, const char* split, xrc_dataset** out);
void xrc_dataset_free(xrc_dataset* ds);
size_t xrc_dataset_size(const xrc_dataset* ds);
int xrc_dataset_id(const xrc_dataset* ds, size_t index, char** id);

int xrc_model_load(const char* checkpoint, xrc_model** out);
void xrc_model_free(xrc_model* model);
int xrc_model_predict(const xrc_model* model, const xrc_dataset* ds, size_t index, size_t* predicted);

/* ---- commands; summary/report text is returned through out ---- */

int xrc_gen_data(const xrc_config* cfg, const char* out_dir, int force, char** out);
int xrc_train(const xrc_config* cfg, const char* data_dir, const char* out_dir, char** out);
int xrc_eval(const xrc_config* cfg, const char* checkpoint, const char* data_dir, const char* split,
             const char* out_dir, char** out);
int xrc_explain(const xrc_config* cfg, const char* checkpoint, const char* data_dir, const char* instance_id,
                const char* out_dir, char** out);
int xrc_fairness_report(const xrc_config* cfg, const char* checkpoint_before, const char* checkpoint_after,
                        const char* data_dir, const char* split, const char* out_dir, char** out);
/* Report JSON is returned through out on success and on XRC_ERR_COMPUTE.
   corrupt_param may be NULL; otherwise corrupt_offset is added to its first analytic gradient entry. */
int xrc_gradcheck(const xrc_config* cfg, const char* out_dir, const char* corrupt_param, double corrupt_offset,
                  char** out);

#ifdef __cplusplus
}
#endif

#endif
