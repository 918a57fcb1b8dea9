#include "xrc/xrc.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <string>

#include "commands.hpp"
#include "xrc/io.hpp"

struct xrc_config {
    xrc::cmd::Settings settings;
};

struct xrc_model {
    xrc::Model model;
};

struct xrc_dataset {
    std::vector<xrc::Instance> instances;
};

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

int fail(int code, const std::string& msg) {
    g_last_error = msg;
    return code;
}

template <typename F>
int guarded(F&& body) {
    g_last_error.clear();
    try {
        body();
        return XRC_OK;
    } catch (const xrc::cmd::GradcheckFailed& e) {
        return fail(XRC_ERR_COMPUTE, e.what());
    } catch (const xrc::TrainingDiverged& e) {
        return fail(XRC_ERR_COMPUTE, e.what());
    } catch (const xrc::NonFiniteGradient& e) {
        return fail(XRC_ERR_COMPUTE, e.what());
    } catch (const xrc::ConfigError& e) {
        return fail(XRC_ERR_INVALID, e.what());
    } catch (const xrc::DataError& e) {
        switch (e.kind()) {
            case xrc::DataError::Kind::Io: return fail(XRC_ERR_IO, e.what());
            case xrc::DataError::Kind::MalformedJson: return fail(XRC_ERR_FORMAT, e.what());
            default: return fail(XRC_ERR_INVALID, e.what());
        }
    } catch (const xrc::CheckpointError& e) {
        return fail(e.kind() == xrc::CheckpointError::Kind::Io ? XRC_ERR_IO : XRC_ERR_FORMAT, e.what());
    } catch (const xrc::IoError& e) {
        return fail(XRC_ERR_IO, e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(XRC_ERR_IO, e.what());
    } catch (const std::invalid_argument& e) {
        return fail(XRC_ERR_INVALID, e.what());
    } catch (const std::out_of_range& e) {
        return fail(XRC_ERR_INVALID, e.what());
    } catch (const xrc::TensorError& e) {
        return fail(XRC_ERR_COMPUTE, e.what());
    } catch (const std::exception& e) {
        return fail(XRC_ERR_INTERNAL, e.what());
    } catch (...) {
        return fail(XRC_ERR_INTERNAL, "unknown error");
    }
}

int null_arg(const char* name) { return fail(XRC_ERR_INVALID, std::string("null argument: ") + name); }

std::filesystem::path opt_path(const char* p) { return p ? std::filesystem::path(p) : std::filesystem::path(); }

}  // namespace

extern "C" {

const char* xrc_last_error(void) { return g_last_error.c_str(); }
const char* xrc_version(void) { return "1.0.0"; }
void xrc_string_free(char* s) { std::free(s); }

int xrc_config_new(xrc_config** out) {
    if (!out) return null_arg("out");
    return guarded([&] { *out = new xrc_config(); });
}

void xrc_config_free(xrc_config* cfg) { delete cfg; }

int xrc_config_load_file(xrc_config* cfg, const char* path) {
    if (!cfg || !path) return null_arg("cfg/path");
    return guarded([&] { cfg->settings.file = xrc::parse_config_text(xrc::read_file(path)); });
}

int xrc_config_set(xrc_config* cfg, const char* key, const char* value) {
    if (!cfg || !key || !value) return null_arg("cfg/key/value");
    return guarded([&] {
        xrc::RunConfig probe;
        xrc::set_config_value(probe, key, value);
        cfg->settings.overrides[key] = value;
    });
}

int xrc_config_get(const xrc_config* cfg, const char* key, char** value) {
    if (!cfg || !key || !value) return null_arg("cfg/key/value");
    return guarded([&] { *value = dup_string(xrc::get_config_value(cfg->settings.resolve(), key)); });
}

int xrc_config_render(const xrc_config* cfg, char** text) {
    if (!cfg || !text) return null_arg("cfg/text");
    return guarded([&] { *text = dup_string(xrc::render_config(cfg->settings.resolve())); });
}

size_t xrc_config_key_count(void) { return xrc::config_keys().size(); }

const char* xrc_config_key_name(size_t index) {
    const auto& keys = xrc::config_keys();
    return index < keys.size() ? keys[index].name.c_str() : nullptr;
}

const char* xrc_config_key_help(size_t index) {
    const auto& keys = xrc::config_keys();
    return index < keys.size() ? keys[index].help.c_str() : nullptr;
}

int xrc_dataset_load(const char* data_dir, const char* split, xrc_dataset** out) {
    if (!data_dir || !split || !out) return null_arg("data_dir/split/out");
    return guarded([&] {
        const std::string name = split;
        if (name != "train" && name != "dev" && name != "test")
            throw std::invalid_argument("unknown split '" + name + "' (expected train, dev or test)");
        auto ds = std::make_unique<xrc_dataset>();
        ds->instances = xrc::load(std::filesystem::path(data_dir) / (std::string(split) + ".jsonl"));
        *out = ds.release();
    });
}

void xrc_dataset_free(xrc_dataset* ds) { delete ds; }

size_t xrc_dataset_size(const xrc_dataset* ds) { return ds ? ds->instances.size() : 0; }

int xrc_dataset_id(const xrc_dataset* ds, size_t index, char** id) {
    if (!ds || !id) return null_arg("ds/id");
    return guarded([&] { *id = dup_string(ds->instances.at(index).id); });
}

int xrc_model_load(const char* checkpoint, xrc_model** out) {
    if (!checkpoint || !out) return null_arg("checkpoint/out");
    return guarded([&] {
        auto m = std::make_unique<xrc_model>();
        m->model = xrc::load_checkpoint(checkpoint);
        *out = m.release();
    });
}

void xrc_model_free(xrc_model* model) { delete model; }

int xrc_model_predict(const xrc_model* model, const xrc_dataset* ds, size_t index, size_t* predicted) {
    if (!model || !ds || !predicted) return null_arg("model/ds/predicted");
    return guarded([&] { *predicted = xrc::predict(model->model, ds->instances.at(index)); });
}

int xrc_gen_data(const xrc_config* cfg, const char* out_dir, int force, char** out) {
    if (!cfg || !out_dir || !out) return null_arg("cfg/out_dir/out");
    return guarded([&] { *out = dup_string(xrc::cmd::gen_data(cfg->settings, out_dir, force != 0)); });
}

int xrc_train(const xrc_config* cfg, const char* data_dir, const char* out_dir, char** out) {
    if (!cfg || !data_dir || !out_dir || !out) return null_arg("cfg/data_dir/out_dir/out");
    return guarded([&] { *out = dup_string(xrc::cmd::train(cfg->settings, data_dir, out_dir)); });
}

int xrc_eval(const xrc_config* cfg, const char* checkpoint, const char* data_dir, const char* split,
             const char* out_dir, char** out) {
    if (!cfg || !checkpoint || !data_dir || !split || !out_dir || !out) return null_arg("eval argument");
    return guarded([&] { *out = dup_string(xrc::cmd::eval(cfg->settings, checkpoint, data_dir, split, out_dir)); });
}

int xrc_explain(const xrc_config* cfg, const char* checkpoint, const char* data_dir, const char* instance_id,
                const char* out_dir, char** out) {
    if (!cfg || !checkpoint || !data_dir || !instance_id || !out_dir || !out) return null_arg("explain argument");
    return guarded(
        [&] { *out = dup_string(xrc::cmd::explain(cfg->settings, checkpoint, data_dir, instance_id, out_dir)); });
}

int xrc_fairness_report(const xrc_config* cfg, const char* checkpoint_before, const char* checkpoint_after,
                        const char* data_dir, const char* split, const char* out_dir, char** out) {
    if (!cfg || !checkpoint_before || !checkpoint_after || !data_dir || !split || !out_dir || !out)
        return null_arg("fairness-report argument");
    return guarded([&] {
        *out = dup_string(xrc::cmd::fairness_report(cfg->settings, checkpoint_before, checkpoint_after, data_dir,
                                                    split, out_dir));
    });
}

int xrc_gradcheck(const xrc_config* cfg, const char* out_dir, const char* corrupt_param, double corrupt_offset,
                  char** out) {
    if (!cfg || !out) return null_arg("cfg/out");
    *out = nullptr;
    return guarded([&] {
        xrc::cmd::GradcheckHook hook{corrupt_param ? corrupt_param : "", corrupt_offset};
        try {
            *out = dup_string(xrc::cmd::gradcheck(cfg->settings, opt_path(out_dir), hook));
        } catch (const xrc::cmd::GradcheckFailed& e) {
            *out = dup_string(e.report());
            throw;
        }
    });
}

}  // extern "C"
