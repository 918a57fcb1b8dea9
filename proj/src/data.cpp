#include "xrc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <json.hpp>
#include <set>
#include <sstream>
#include <unordered_set>

#include "xrc/io.hpp"
#include "xrc/model.hpp"
#include "xrc/rng.hpp"

namespace xrc {

using ordered_json = nlohmann::ordered_json;

namespace {

const std::vector<std::string> kQuestion = {"which", "topic"};

std::size_t reserved_and_template_tokens(const GeneratorSpec& s) {
    // 4 reserved model ids, question words, option labels, two markers, keywords.
    return 4 + kQuestion.size() + s.n_options + 2 + s.n_options * s.keywords_per_class;
}

std::size_t filler_count(const GeneratorSpec& s) {
    const auto fixed = reserved_and_template_tokens(s);
    return s.vocab_size > fixed ? s.vocab_size - fixed : 0;
}

std::mutex g_audit_mutex;
std::vector<std::string> g_opened;

}  // namespace

namespace tokens {

std::string filler(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "w%03zu", i);
    return buf;
}

std::string keyword(std::size_t cls, std::size_t i) { return "kw" + std::to_string(cls) + "_" + std::to_string(i); }

std::string marker(int group) { return group == 0 ? "marker_a" : "marker_b"; }

std::string option(std::size_t cls) {
    if (cls < 26) return std::string("opt_") + static_cast<char>('a' + cls);
    return "opt_" + std::to_string(cls);
}

}  // namespace tokens

void validate_instance(const Instance& inst) {
    auto fail = [&](const std::string& field, const std::string& why) {
        throw std::invalid_argument("field '" + field + "': " + why);
    };
    if (inst.id.empty()) fail("id", "empty");
    if (inst.passage.empty()) fail("passage", "empty");
    if (inst.question.empty()) fail("question", "empty");
    if (inst.options.size() < 2) fail("options", "fewer than 2 options");
    if (inst.answer >= inst.options.size())
        fail("answer", std::to_string(inst.answer) + " not in [0, " + std::to_string(inst.options.size()) + ")");
    if (inst.group != 0 && inst.group != 1) fail("group", "must be 0 or 1");
    if (inst.rationale.empty()) fail("rationale", "empty");
    for (std::size_t i = 0; i < inst.rationale.size(); ++i) {
        if (inst.rationale[i] >= inst.passage.size())
            fail("rationale", "index " + std::to_string(inst.rationale[i]) + " >= passage length " +
                                  std::to_string(inst.passage.size()));
        if (i > 0 && inst.rationale[i] <= inst.rationale[i - 1]) fail("rationale", "not strictly increasing");
    }
}

void GeneratorSpec::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("generator spec: " + m); };
    auto unit = [&](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0)) fail(std::string(name) + " must be in [0, 1]");
    };
    unit(bias_strength, "bias_strength");
    unit(minority_fraction, "minority_fraction");
    unit(label_bias, "label_bias");
    unit(contested_fraction, "contested_fraction");
    if (n_train == 0 || n_dev == 0 || n_test == 0) fail("every split needs at least one instance");
    if (n_options < 2) fail("n_options must be at least 2");
    if (keywords_per_class == 0) fail("keywords_per_class must be positive");
    if (passage_len < 4) fail("passage_len must be at least 4");
    if (filler_count(*this) < 4)
        fail("vocab_size " + std::to_string(vocab_size) + " too small for the template (needs at least " +
             std::to_string(reserved_and_template_tokens(*this) + 4) + ")");
}

// ---- generation -------------------------------------------------------------------------

namespace {

std::vector<Instance> generate_split(const GeneratorSpec& spec, const std::string& name, std::size_t n,
                                     bool biased, std::uint64_t stream_id) {
    RandomStream rng(spec.seed, stream_id);
    const std::size_t K = spec.n_options;
    const std::size_t n1 = static_cast<std::size_t>(std::llround(spec.minority_fraction * static_cast<double>(n)));

    std::vector<std::size_t> class_total(K, n / K);
    for (std::size_t c = 0; c < n % K; ++c) ++class_total[c];

    // Group-1 label counts: skewed toward the associated class in the biased split.
    std::vector<std::size_t> g1(K, 0);
    if (biased) {
        g1[kAssociatedClass] = static_cast<std::size_t>(std::llround(spec.bias_strength * static_cast<double>(n1)));
        const std::size_t rest = n1 - g1[kAssociatedClass];
        std::size_t slot = 0;
        for (std::size_t c = 0; c < K; ++c) {
            if (c == kAssociatedClass) continue;
            g1[c] = rest / (K - 1) + (slot < rest % (K - 1) ? 1 : 0);
            ++slot;
        }
    } else {
        for (std::size_t c = 0; c < K; ++c) g1[c] = n1 / K + (c < n1 % K ? 1 : 0);
    }

    std::vector<std::pair<int, std::size_t>> items;
    for (std::size_t c = 0; c < K; ++c) {
        if (g1[c] > class_total[c])
            throw std::invalid_argument("generator spec: bias_strength x minority_fraction too large to keep " + name +
                                        " labels balanced");
        for (std::size_t i = 0; i < g1[c]; ++i) items.emplace_back(1, c);
        for (std::size_t i = 0; i < class_total[c] - g1[c]; ++i) items.emplace_back(0, c);
    }
    rng.shuffle(items);

    const double excess = std::max(0.0, (spec.bias_strength - 1.0 / static_cast<double>(K)) /
                                            (1.0 - 1.0 / static_cast<double>(K)));
    const double relabel_prob = biased ? spec.label_bias * excess : 0.0;
    const std::size_t n_fill = filler_count(spec);
    const std::size_t P = spec.passage_len;

    std::vector<Instance> out;
    out.reserve(n);
    for (std::size_t idx = 0; idx < items.size(); ++idx) {
        const auto [group, label] = items[idx];
        std::size_t fact = label;
        if (group == 1 && label == kAssociatedClass && rng.uniform() < relabel_prob)
            fact = static_cast<std::size_t>(rng.below(K));

        Instance inst;
        char id[48];
        std::snprintf(id, sizeof id, "%s-%05zu", name.c_str(), idx);
        inst.id = id;
        inst.question = kQuestion;
        for (std::size_t c = 0; c < K; ++c) inst.options.push_back({tokens::option(c)});
        inst.answer = label;
        inst.group = group;

        inst.passage.resize(P);
        for (auto& w : inst.passage) w = tokens::filler(static_cast<std::size_t>(rng.below(n_fill)));
        const auto start = static_cast<std::size_t>(rng.below(P - 1));
        for (std::size_t k = 0; k < 2; ++k)
            inst.passage[start + k] = tokens::keyword(fact, static_cast<std::size_t>(rng.below(spec.keywords_per_class)));
        inst.rationale = {start, start + 1};

        std::vector<std::size_t> free;
        for (std::size_t i = 0; i < P; ++i)
            if (i != start && i != start + 1) free.push_back(i);
        rng.shuffle(free);
        if (rng.uniform() < spec.contested_fraction) {
            const std::size_t other = (fact + 1 + static_cast<std::size_t>(rng.below(K - 1))) % K;
            inst.passage[free.back()] =
                tokens::keyword(other, static_cast<std::size_t>(rng.below(spec.keywords_per_class)));
            free.pop_back();
        }
        inst.passage[free.back()] = tokens::marker(group);
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace

Splits generate_instances(const GeneratorSpec& spec) {
    spec.validate();
    Splits s;
    s.train = generate_split(spec, "train", spec.n_train, true, 101);
    s.dev = generate_split(spec, "dev", spec.n_dev, false, 102);
    s.test = generate_split(spec, "test", spec.n_test, false, 103);
    return s;
}

std::string spec_json(const GeneratorSpec& s) {
    ordered_json j;
    j["n_train"] = s.n_train;
    j["n_dev"] = s.n_dev;
    j["n_test"] = s.n_test;
    j["vocab_size"] = s.vocab_size;
    j["passage_len"] = s.passage_len;
    j["n_options"] = s.n_options;
    j["bias_strength"] = s.bias_strength;
    j["seed"] = s.seed;
    j["minority_fraction"] = s.minority_fraction;
    j["label_bias"] = s.label_bias;
    j["contested_fraction"] = s.contested_fraction;
    j["keywords_per_class"] = s.keywords_per_class;
    return j.dump();
}

std::string manifest_json(const Manifest& m) {
    ordered_json j;
    j["format"] = "xrc-dataset-1";
    j["spec"] = ordered_json::parse(spec_json(m.spec));
    ordered_json files = ordered_json::array();
    for (const auto& f : m.files) {
        ordered_json e;
        e["file"] = f.file;
        e["sha256"] = f.sha256;
        e["instances"] = f.instances;
        files.push_back(e);
    }
    j["files"] = files;
    return j.dump(2) + "\n";
}

Manifest generate(const GeneratorSpec& spec, const std::filesystem::path& out_dir) {
    auto splits = generate_instances(spec);
    std::filesystem::create_directories(out_dir);
    Manifest m;
    m.spec = spec;
    const std::pair<const char*, const std::vector<Instance>*> parts[] = {
        {"train.jsonl", &splits.train}, {"dev.jsonl", &splits.dev}, {"test.jsonl", &splits.test}};
    for (const auto& [file, data] : parts) {
        const auto text = to_jsonl(*data);
        write_file_atomic(out_dir / file, text);
        m.files.push_back({file, sha256_hex(text), data->size()});
    }
    write_file_atomic(out_dir / "manifest.json", manifest_json(m));
    return m;
}

// ---- JSONL ---------------------------------------------------------------------------------

DataError::DataError(Kind kind, std::size_t line, const std::string& msg)
    : std::runtime_error(msg), kind_(kind), line_(line) {}

std::string to_json_line(const Instance& inst) {
    ordered_json j;
    j["id"] = inst.id;
    j["passage"] = inst.passage;
    j["question"] = inst.question;
    j["options"] = inst.options;
    j["answer"] = inst.answer;
    j["group"] = inst.group;
    j["rationale"] = inst.rationale;
    return j.dump();
}

std::string to_jsonl(const std::vector<Instance>& instances) {
    std::string out;
    for (const auto& inst : instances) {
        out += to_json_line(inst);
        out += '\n';
    }
    return out;
}

namespace {

Instance parse_line(const std::string& line, std::size_t lineno) {
    const std::string at = "line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(DataError::Kind::MalformedJson, lineno, at + std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw DataError(DataError::Kind::MalformedJson, lineno, at + "expected a JSON object");
    Instance inst;
    auto field = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw DataError(DataError::Kind::Invariant, lineno, at + std::string("missing field '") + key + "'");
        return j.at(key);
    };
    try {
        inst.id = field("id").get<std::string>();
        inst.passage = field("passage").get<std::vector<std::string>>();
        inst.question = field("question").get<std::vector<std::string>>();
        inst.options = field("options").get<std::vector<std::vector<std::string>>>();
        const auto& answer = field("answer");
        if (!answer.is_number_unsigned()) throw DataError(DataError::Kind::Invariant, lineno, at + "field 'answer': not a non-negative integer");
        inst.answer = answer.get<std::size_t>();
        const auto& group = field("group");
        if (!group.is_number_integer()) throw DataError(DataError::Kind::Invariant, lineno, at + "field 'group': not an integer");
        inst.group = group.get<int>();
        inst.rationale = field("rationale").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(DataError::Kind::Invariant, lineno, at + std::string("wrong field type: ") + e.what());
    }
    try {
        validate_instance(inst);
    } catch (const std::invalid_argument& e) {
        throw DataError(DataError::Kind::Invariant, lineno, at + e.what());
    }
    return inst;
}

}  // namespace

std::vector<Instance> parse_jsonl(const std::string& text) {
    std::vector<Instance> out;
    std::unordered_set<std::string> ids;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string at = "line " + std::to_string(lineno) + ": ";
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto inst = parse_line(line, lineno);
        if (!ids.insert(inst.id).second)
            throw DataError(DataError::Kind::DuplicateId, lineno, at + "duplicate id '" + inst.id + "'");
        out.push_back(std::move(inst));
    }
    return out;
}

std::vector<Instance> load(const std::filesystem::path& path) {
    {
        std::lock_guard lock(g_audit_mutex);
        g_opened.push_back(path.string());
    }
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw DataError(DataError::Kind::Io, 0, e.what());
    }
    try {
        return parse_jsonl(text);
    } catch (const DataError& e) {
        throw DataError(e.kind(), e.line(), path.filename().string() + ": " + std::string(e.what()));
    }
}

std::vector<std::string> opened_files() {
    std::lock_guard lock(g_audit_mutex);
    return g_opened;
}

void reset_opened_files() {
    std::lock_guard lock(g_audit_mutex);
    g_opened.clear();
}

// ---- occlusion oracle ----------------------------------------------------------------------

std::vector<std::size_t> answer_flip_oracle(const Instance& inst, const Model& model) {
    const auto enc = encode(inst, model.vocab, model.config.max_len);
    const auto base = argmax(forward(model.config, model.params, enc).answer_logits.value());
    std::vector<std::size_t> flips;
    for (std::size_t i = 0; i < enc.passage_length(); ++i) {
        auto occluded = enc;
        occluded.ids[enc.passage_begin + i] = Vocabulary::kUnk;
        if (argmax(forward(model.config, model.params, occluded).answer_logits.value()) != base) flips.push_back(i);
    }
    return flips;
}

}  // namespace xrc
