#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "xrc/data.hpp"
#include "xrc/rng.hpp"
#include "xrc/tensor.hpp"

namespace xrc {

inline constexpr std::size_t kMaxSequenceLength = 512;

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t d_ff = 64;
    std::size_t n_options = 4;
    std::size_t max_len = 40;
    double dropout = 0.0;
    std::uint64_t seed = 7;
    bool causal = false;
    double init_scale = 0.2;

    std::size_t d_k() const { return d_model / n_heads; }
    /// Throws std::invalid_argument on a violated invariant.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kCls = 1;
    static constexpr std::size_t kSep = 2;
    static constexpr std::size_t kUnk = 3;

    Vocabulary();
    /// Reserved tokens followed by every distinct token of the instances, sorted.
    static Vocabulary build(const std::vector<Instance>& instances);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    std::size_t id(const std::string& token) const;
    const std::string& token(std::size_t id) const;
    bool contains(const std::string& token) const { return index_.count(token) != 0; }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Model input: [CLS] question ([SEP] option)* [SEP] passage [SEP] PAD*
struct Encoded {
    std::vector<std::size_t> ids;
    std::vector<std::string> tokens;
    std::size_t n_valid = 0;
    // Half-open position range occupied by passage tokens.
    std::size_t passage_begin = 0;
    std::size_t passage_end = 0;

    std::size_t passage_length() const { return passage_end - passage_begin; }
};

/// Passage tokens are truncated from the tail when the layout exceeds max_len.
Encoded encode(const Instance& inst, const Vocabulary& vocab, std::size_t max_len);

/// Additive N×N mask: PAD columns (and future columns when causal) get kMaskValue.
Matrix attention_mask(const Encoded& enc, bool causal);

struct LayerParams {
    Tensor wq, wk, wv, wo, bo;
    Tensor ln1_gain, ln1_shift;
    Tensor w1, b1, w2, b2;
    Tensor ln2_gain, ln2_shift;
};

struct ModelParams {
    Tensor tok_emb, pos_emb;
    std::vector<LayerParams> layers;
    Tensor ans_w, ans_b;
    Tensor grp_w, grp_b;

    /// All parameters in checkpoint order.
    std::vector<Tensor> all() const;
    /// Parameters excluding the group probe head.
    std::vector<Tensor> encoder_and_answer() const;
    ModelParams clone() const;
};

/// Uniform(−init_scale, init_scale) weights and zero biases from config.seed;
/// layer-norm gains start at one.
ModelParams init_params(const ModelConfig& cfg);

struct Model {
    ModelConfig config;
    Vocabulary vocab;
    ModelParams params;
};

struct ModelOutput {
    Tensor answer_logits;   // 1×K
    Tensor group_logits;    // 1×2
    Tensor pooled;          // 1×d_model
    Tensor embeddings;      // N×d_model, grad-retained
    // attention[layer][head], each N×N, grad-retained.
    std::vector<std::vector<Tensor>> attention;
};

struct ForwardOptions {
    // Constant offset added to the embedding output (adversarial perturbation).
    const Matrix* embedding_offset = nullptr;
    // Compute group logits from a detached pooled vector.
    bool detach_probe = false;
    // Replace attention probabilities with these constants ([layer][head]); an empty
    // layer vector or empty matrix leaves that layer or head computed as usual.
    const std::vector<std::vector<Matrix>>* attention_override = nullptr;
    // Enables dropout when config.dropout > 0.
    RandomStream* dropout_rng = nullptr;
};

struct AttentionLayerOutput {
    Tensor output;
    std::vector<Tensor> attention;
};

/// Masked multi-head self-attention sublayer with residual connection and layer norm.
AttentionLayerOutput attention_layer(const Tensor& x, const LayerParams& p, const Tensor& mask, std::size_t n_heads,
                                     const std::vector<Matrix>* override_heads = nullptr);

ModelOutput forward(const ModelConfig& cfg, const ModelParams& params, const Encoded& enc,
                    const ForwardOptions& opts = {});

/// Index of the largest logit, lowest index on ties.
std::size_t argmax(const std::vector<double>& values);

std::size_t predict(const Model& model, const Instance& inst);

// ---- checkpoints ----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { Io, BadMagic, Version, Truncated, ShapeMismatch, InvalidConfig, Malformed };
    CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

std::vector<unsigned char> serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace xrc
