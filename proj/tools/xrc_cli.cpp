// Command-line front end. Talks to the library only through the C API.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>

#include "xrc/xrc.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCompute = 1;
constexpr int kExitUsage = 2;

int exit_code(int status) {
    switch (status) {
        case XRC_OK: return kExitOk;
        case XRC_ERR_COMPUTE:
        case XRC_ERR_INTERNAL: return kExitCompute;
        default: return kExitUsage;
    }
}

std::string flag_name(std::string key) {
    for (auto& c : key)
        if (c == '_') c = '-';
    return "--" + key;
}

// Key-valued flags shared by every subcommand, mirroring the config file keys.
struct KeyFlags {
    std::map<std::string, std::string> values;

    void attach(CLI::App* app, const std::set<std::string>& skip = {}) {
        for (size_t i = 0; i < xrc_config_key_count(); ++i) {
            std::string key = xrc_config_key_name(i);
            if (skip.count(key)) continue;
            app->add_option(flag_name(key), values[key], xrc_config_key_help(i))->group("Config keys");
        }
    }
};

struct Owned {
    char* text = nullptr;
    ~Owned() { xrc_string_free(text); }
};

struct ConfigHandle {
    xrc_config* cfg = nullptr;
    ~ConfigHandle() { xrc_config_free(cfg); }
};

int report_failure(int status) {
    std::fprintf(stderr, "error: %s\n", xrc_last_error());
    return exit_code(status);
}

// Builds a config from the optional file plus the non-empty flag values.
int make_config(ConfigHandle& h, const std::string& config_file, const KeyFlags& flags,
                const std::map<std::string, std::string>& extra = {}) {
    if (int st = xrc_config_new(&h.cfg)) return st;
    if (!config_file.empty())
        if (int st = xrc_config_load_file(h.cfg, config_file.c_str())) return st;
    for (const auto& [k, v] : flags.values)
        if (!v.empty())
            if (int st = xrc_config_set(h.cfg, k.c_str(), v.c_str())) return st;
    for (const auto& [k, v] : extra)
        if (int st = xrc_config_set(h.cfg, k.c_str(), v.c_str())) return st;
    // resolve once so validation errors surface before any work starts
    Owned rendered;
    return xrc_config_render(h.cfg, &rendered.text);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Interpretable reading-comprehension transformer toolkit"};
    app.require_subcommand(1);
    std::string config_file;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
    KeyFlags gen_flags;
    std::string gen_out;
    bool gen_force = false;
    gen->add_option("--spec,--config", config_file, "key = value settings file");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_flag("--force", gen_force, "write into a non-empty directory");
    gen_flags.attach(gen);

    // train
    auto* tr = app.add_subcommand("train", "Train a model");
    KeyFlags tr_flags;
    std::string tr_data, tr_out;
    bool tr_debias = false;
    tr->add_option("--config", config_file, "key = value settings file");
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_flag("--debias", tr_debias, "enable adversarial debiasing");
    tr_flags.attach(tr, {"debias"});

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    KeyFlags ev_flags;
    std::string ev_model, ev_data, ev_split = "test", ev_out;
    ev->add_option("--config", config_file, "key = value settings file");
    ev->add_option("--model", ev_model, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--split", ev_split, "train, dev or test")->capture_default_str();
    ev->add_option("--out", ev_out, "output directory (default: eval-<split> next to the checkpoint)");
    ev_flags.attach(ev);

    // explain
    auto* ex = app.add_subcommand("explain", "Heatmap and attribution for one instance");
    KeyFlags ex_flags;
    std::string ex_model, ex_data, ex_id, ex_out;
    ex->add_option("--config", config_file, "key = value settings file");
    ex->add_option("--model", ex_model, "checkpoint file")->required();
    ex->add_option("--data", ex_data, "dataset directory")->required();
    ex->add_option("--id", ex_id, "instance id")->required();
    ex->add_option("--out", ex_out, "output directory (default: explain-<id>)");
    ex_flags.attach(ex);

    // fairness-report
    auto* fr = app.add_subcommand("fairness-report", "Per-group accuracy before and after debiasing");
    KeyFlags fr_flags;
    std::string fr_before, fr_after, fr_data, fr_split = "test", fr_out = "fairness-report";
    fr->add_option("--config", config_file, "key = value settings file");
    fr->add_option("--model-before", fr_before, "baseline checkpoint")->required();
    fr->add_option("--model-after", fr_after, "debiased checkpoint")->required();
    fr->add_option("--data", fr_data, "dataset directory")->required();
    fr->add_option("--split", fr_split, "train, dev or test")->capture_default_str();
    fr->add_option("--out", fr_out, "output directory")->capture_default_str();
    fr_flags.attach(fr);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks on a tiny model");
    KeyFlags gc_flags;
    std::string gc_seed, gc_out, gc_corrupt;
    double gc_offset = 1e-3;
    gc->add_option("--config", config_file, "key = value settings file");
    gc->add_option("--seed", gc_seed, "initialization seed (model_seed)");
    gc->add_option("--out", gc_out, "directory for gradcheck.json");
    gc->add_option("--corrupt-param", gc_corrupt, "test hook: perturb this parameter's analytic gradient")
        ->group("");
    gc->add_option("--corrupt-offset", gc_offset, "test hook: perturbation size")->group("");
    gc_flags.attach(gc, {"seed", "model_seed"});

    // keys
    auto* keys = app.add_subcommand("keys", "List configuration keys");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    ConfigHandle h;
    Owned out;
    int st = XRC_OK;

    if (*keys) {
        for (size_t i = 0; i < xrc_config_key_count(); ++i)
            std::printf("%-20s %s\n", xrc_config_key_name(i), xrc_config_key_help(i));
        return kExitOk;
    }
    if (*gen) {
        if ((st = make_config(h, config_file, gen_flags))) return report_failure(st);
        st = xrc_gen_data(h.cfg, gen_out.c_str(), gen_force ? 1 : 0, &out.text);
    } else if (*tr) {
        std::map<std::string, std::string> extra;
        if (tr_debias) extra["debias"] = "true";
        if ((st = make_config(h, config_file, tr_flags, extra))) return report_failure(st);
        st = xrc_train(h.cfg, tr_data.c_str(), tr_out.c_str(), &out.text);
    } else if (*ev) {
        if ((st = make_config(h, config_file, ev_flags))) return report_failure(st);
        if (ev_out.empty()) ev_out = (std::filesystem::path(ev_model).parent_path() / ("eval-" + ev_split)).string();
        st = xrc_eval(h.cfg, ev_model.c_str(), ev_data.c_str(), ev_split.c_str(), ev_out.c_str(), &out.text);
    } else if (*ex) {
        if ((st = make_config(h, config_file, ex_flags))) return report_failure(st);
        if (ex_out.empty()) ex_out = "explain-" + ex_id;
        st = xrc_explain(h.cfg, ex_model.c_str(), ex_data.c_str(), ex_id.c_str(), ex_out.c_str(), &out.text);
    } else if (*fr) {
        if ((st = make_config(h, config_file, fr_flags))) return report_failure(st);
        st = xrc_fairness_report(h.cfg, fr_before.c_str(), fr_after.c_str(), fr_data.c_str(), fr_split.c_str(),
                                 fr_out.c_str(), &out.text);
    } else if (*gc) {
        std::map<std::string, std::string> extra;
        if (!gc_seed.empty()) extra["model_seed"] = gc_seed;
        if ((st = make_config(h, config_file, gc_flags, extra))) return report_failure(st);
        st = xrc_gradcheck(h.cfg, gc_out.empty() ? nullptr : gc_out.c_str(),
                           gc_corrupt.empty() ? nullptr : gc_corrupt.c_str(), gc_offset, &out.text);
    }

    if (out.text) std::fputs(out.text, stdout);
    if (st != XRC_OK) return report_failure(st);
    return kExitOk;
}
