#include "xrc/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "xrc/io.hpp"

namespace xrc {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty())
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

double parse_f64(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty())
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string show(double v) { return format_double(v); }
std::string show(std::uint64_t v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }

struct Entry {
    ConfigKey key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define XRC_SIZE(name, field, help)                                                                     \
    Entry{{name, help}, [](RunConfig& c, const std::string& v) { c.field = parse_u64(name, v); },         \
          [](const RunConfig& c) { return show(static_cast<std::uint64_t>(c.field)); }}
#define XRC_REAL(name, field, help)                                                                     \
    Entry{{name, help}, [](RunConfig& c, const std::string& v) { c.field = parse_f64(name, v); },         \
          [](const RunConfig& c) { return show(c.field); }}
#define XRC_FLAG(name, field, help)                                                                     \
    Entry{{name, help}, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); },        \
          [](const RunConfig& c) { return show(c.field); }}

const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = {
        XRC_SIZE("n_train", data.n_train, "training instances generated"),
        XRC_SIZE("n_dev", data.n_dev, "dev instances generated"),
        XRC_SIZE("n_test", data.n_test, "test instances generated"),
        XRC_SIZE("vocab_size", data.vocab_size, "generator vocabulary size"),
        XRC_SIZE("passage_len", data.passage_len, "tokens per passage"),
        XRC_SIZE("n_options", data.n_options, "answer options per question"),
        XRC_REAL("bias_strength", data.bias_strength, "train-split marker/answer correlation in [0,1]"),
        XRC_SIZE("seed", data.seed, "dataset generation seed"),
        XRC_REAL("minority_fraction", data.minority_fraction, "share of group-1 instances"),
        XRC_REAL("label_bias", data.label_bias, "share of the train association that is annotation bias"),
        XRC_REAL("contested_fraction", data.contested_fraction, "share of passages with a distractor keyword"),
        XRC_SIZE("keywords_per_class", data.keywords_per_class, "distinct keywords per answer class"),
        XRC_SIZE("d_model", model.d_model, "model width"),
        XRC_SIZE("n_heads", model.n_heads, "attention heads per layer"),
        XRC_SIZE("n_layers", model.n_layers, "encoder layers"),
        XRC_SIZE("d_ff", model.d_ff, "feed-forward width"),
        XRC_SIZE("max_len", model.max_len, "encoded sequence length"),
        XRC_REAL("dropout", model.dropout, "feed-forward dropout rate"),
        XRC_SIZE("model_seed", model.seed, "parameter initialization seed"),
        XRC_FLAG("causal", model.causal, "mask future positions"),
        XRC_REAL("init_scale", model.init_scale, "half-width of the uniform weight initialization"),
        XRC_REAL("eta", train.eta, "SGD learning rate"),
        XRC_SIZE("batch_size", train.batch_size, "instances per step"),
        XRC_SIZE("epochs", train.epochs, "passes over the training split"),
        XRC_SIZE("train_seed", train.seed, "shuffling and dropout seed"),
        XRC_SIZE("eval_every", train.eval_every, "dev evaluation period in steps (0 = every epoch)"),
        XRC_FLAG("debias", train.debias, "enable adversarial debiasing"),
        XRC_REAL("lambda", train.debias_cfg.lambda, "perturbation magnitude"),
        XRC_REAL("alpha", train.debias_cfg.alpha, "fairness penalty weight"),
        XRC_REAL("beta", train.debias_cfg.beta, "consistency (KL) weight"),
        XRC_SIZE("warmup_epochs", train.debias_cfg.warmup_epochs, "epochs before the regularizers switch on"),
        Entry{{"perturb_source", "bias-loss source for the perturbation: probe or task"},
              [](RunConfig& c, const std::string& v) {
                  try {
                      c.train.debias_cfg.source = parse_perturb_source(v);
                  } catch (const std::invalid_argument& e) {
                      throw ConfigError(e.what());
                  }
              },
              [](const RunConfig& c) { return to_string(c.train.debias_cfg.source); }},
        XRC_REAL("gamma", heatmap.gamma, "heatmap sharpening exponent"),
        XRC_REAL("epsilon", heatmap.epsilon, "heatmap stabilizer"),
        Entry{{"layer", "heatmap layer index or 'final'"},
              [](RunConfig& c, const std::string& v) {
                  if (v == "final")
                      c.heatmap.layer.reset();
                  else
                      c.heatmap.layer = parse_u64("layer", v);
              },
              [](const RunConfig& c) { return c.heatmap.layer ? std::to_string(*c.heatmap.layer) : "final"; }},
        Entry{{"head", "heatmap head index or 'mean'"},
              [](RunConfig& c, const std::string& v) {
                  if (v == "mean")
                      c.heatmap.head.reset();
                  else
                      c.heatmap.head = parse_u64("head", v);
              },
              [](const RunConfig& c) { return c.heatmap.head ? std::to_string(*c.heatmap.head) : "mean"; }},
        XRC_SIZE("highlight_k", highlight_k, "highlight size (0 = rationale size)"),
        XRC_SIZE("baseline_trials", baseline_trials, "random-highlight baseline trials"),
    };
    return table;
}

#undef XRC_SIZE
#undef XRC_REAL
#undef XRC_FLAG

const Entry& find_entry(const std::string& key) {
    for (const auto& e : entries())
        if (e.key.name == key) return e;
    throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        for (const auto& e : entries()) k.push_back(e.key);
        return k;
    }();
    return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    find_entry(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_entry(key).get(cfg); }

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        find_entry(key);
        if (out.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        out[key] = value;
    }
    return out;
}

void validate_config(const RunConfig& cfg) {
    try {
        cfg.data.validate();
        cfg.train.validate();
        cfg.heatmap.validate();
        // vocab_size is only known once a dataset is loaded
        ModelConfig m = cfg.model;
        if (m.vocab_size == 0) m.vocab_size = Vocabulary::kUnk + 1;
        m.validate();
        if (cfg.baseline_trials < 100) throw std::invalid_argument("baseline_trials must be >= 100");
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

RunConfig resolve_config(const std::map<std::string, std::string>& file_settings,
                         const std::map<std::string, std::string>& overrides) {
    RunConfig cfg;
    for (const auto& [k, v] : file_settings) set_config_value(cfg, k, v);
    for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
    validate_config(cfg);
    return cfg;
}

std::string render_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& e : entries()) out += e.key.name + " = " + e.get(cfg) + "\n";
    return out;
}

}  // namespace xrc
