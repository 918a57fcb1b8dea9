#pragma once

#include <map>
#include <string>
#include <vector>

#include "xrc/data.hpp"
#include "xrc/interpret.hpp"
#include "xrc/model.hpp"
#include "xrc/train.hpp"

namespace xrc {

/// Every tunable of a run. Resolution order: command-line flag, then config file, then default.
struct RunConfig {
    GeneratorSpec data;
    ModelConfig model;
    TrainConfig train;
    HeatmapConfig heatmap;
    std::size_t highlight_k = 0;
    std::size_t baseline_trials = 1000;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ConfigKey {
    std::string name;
    std::string help;
};

/// All recognized keys in canonical order.
const std::vector<ConfigKey>& config_keys();

/// Sets one key from its text form. Throws ConfigError for unknown keys or unparsable values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

/// Flat "key = value" text; '#' starts a comment; blank lines ignored.
std::map<std::string, std::string> parse_config_text(const std::string& text);

/// Applies file settings then overrides and validates the result.
RunConfig resolve_config(const std::map<std::string, std::string>& file_settings,
                         const std::map<std::string, std::string>& overrides);

/// Every key with its resolved value, in canonical order.
std::string render_config(const RunConfig& cfg);

/// Runs every component's validation.
void validate_config(const RunConfig& cfg);

}  // namespace xrc
