#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace xrc {

struct Model;

/// One multiple-choice reading-comprehension item.
struct Instance {
    std::string id;
    std::vector<std::string> passage;
    std::vector<std::string> question;
    std::vector<std::vector<std::string>> options;
    std::size_t answer = 0;
    int group = 0;
    // Sorted passage-relative token indices that justify the answer.
    std::vector<std::size_t> rationale;

    bool operator==(const Instance&) const = default;
};

/// Checks every Instance invariant; throws std::invalid_argument naming the field.
void validate_instance(const Instance& inst);

struct GeneratorSpec {
    std::size_t n_train = 2000;
    std::size_t n_dev = 500;
    std::size_t n_test = 500;
    std::size_t vocab_size = 64;
    std::size_t passage_len = 24;
    std::size_t n_options = 4;
    // Train-split probability that a group-1 item carries the group's associated answer class.
    double bias_strength = 0.9;
    std::uint64_t seed = 42;

    // Share of group-1 items in every split.
    double minority_fraction = 0.25;
    // Share of the excess group-1/class-0 association in train that is annotation bias:
    // the recorded answer is the associated class while the passage evidence points elsewhere.
    double label_bias = 0.3;
    // Share of items whose passage also contains one keyword of a competing class.
    double contested_fraction = 0.3;
    std::size_t keywords_per_class = 4;

    void validate() const;
};

struct Splits {
    std::vector<Instance> train;
    std::vector<Instance> dev;
    std::vector<Instance> test;
};

/// Token naming used by the generator.
namespace tokens {
std::string filler(std::size_t i);
std::string keyword(std::size_t cls, std::size_t i);
std::string marker(int group);
std::string option(std::size_t cls);
}  // namespace tokens

/// The answer class associated with the group-1 marker.
inline constexpr std::size_t kAssociatedClass = 0;

Splits generate_instances(const GeneratorSpec& spec);

struct SplitFileInfo {
    std::string file;
    std::string sha256;
    std::size_t instances = 0;
};

struct Manifest {
    GeneratorSpec spec;
    std::vector<SplitFileInfo> files;
};

/// Writes train/dev/test JSONL plus manifest.json into out_dir.
Manifest generate(const GeneratorSpec& spec, const std::filesystem::path& out_dir);

std::string manifest_json(const Manifest& m);
std::string spec_json(const GeneratorSpec& spec);

class DataError : public std::runtime_error {
public:
    enum class Kind { Io, MalformedJson, Invariant, DuplicateId };
    DataError(Kind kind, std::size_t line, const std::string& msg);
    Kind kind() const { return kind_; }
    std::size_t line() const { return line_; }

private:
    Kind kind_;
    std::size_t line_;
};

/// Serializes one instance as a JSON object with a stable key order.
std::string to_json_line(const Instance& inst);
std::string to_jsonl(const std::vector<Instance>& instances);

/// Reads and validates a JSONL split.
std::vector<Instance> load(const std::filesystem::path& path);
std::vector<Instance> parse_jsonl(const std::string& text);

/// Paths opened by load() since the last reset; used to audit split hygiene.
std::vector<std::string> opened_files();
void reset_opened_files();

/// Passage-relative indices whose replacement by UNK changes the predicted answer.
std::vector<std::size_t> answer_flip_oracle(const Instance& inst, const Model& model);

}  // namespace xrc
