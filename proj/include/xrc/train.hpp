#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xrc/data.hpp"
#include "xrc/debias.hpp"
#include "xrc/metrics.hpp"
#include "xrc/model.hpp"

namespace xrc {

struct TrainConfig {
    double eta = 0.1;
    std::size_t batch_size = 16;
    std::size_t epochs = 20;
    std::uint64_t seed = 1;
    bool debias = false;
    DebiasConfig debias_cfg;
    // Evaluate on dev every this many steps; 0 evaluates at the end of every epoch.
    std::size_t eval_every = 0;

    void validate() const;
};

class NonFiniteGradient : public std::runtime_error {
public:
    NonFiniteGradient(const std::string& param, std::size_t index)
        : std::runtime_error("non-finite gradient in parameter '" + param + "' at element " + std::to_string(index)),
          param_(param) {}
    const std::string& param() const { return param_; }

private:
    std::string param_;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// θ ← θ − η·∂L/∂θ. Checks every gradient first; nothing is updated on failure.
void sgd_step(const std::vector<Tensor>& params, double eta);

struct Batch {
    std::vector<Encoded> inputs;
    std::vector<std::size_t> answers;
    std::vector<int> groups;
};

Batch make_batch(const std::vector<Instance>& instances, const std::vector<std::size_t>& indices,
                 const Vocabulary& vocab, std::size_t max_len);

struct BatchOptions {
    bool debias = false;
    // Regularizer weights in effect (zero during warm-up).
    double alpha = 0.0;
    double beta = 0.0;
    double lambda = 0.05;
    PerturbSource source = PerturbSource::Probe;
    RandomStream* dropout_rng = nullptr;
    // Precomputed perturbation offsets, one per instance; computed from the bias loss when null.
    const std::vector<Matrix>* fixed_offsets = nullptr;
};

struct BatchLoss {
    // Scalar whose gradient is the training signal: L_total plus the probe loss when debiasing.
    Tensor objective;
    // L_total alone, and the probe loss computed on the detached pooled vector.
    Tensor total;
    Tensor probe;
    LossBreakdown parts;
    bool single_group = false;
    std::vector<Matrix> offsets;
};

/// Builds the training objective of one batch. Parameter gradients are left zeroed.
BatchLoss batch_loss(const ModelConfig& cfg, const ModelParams& params, const Batch& batch, const BatchOptions& opts);

struct InstanceEval {
    std::size_t prediction = 0;
    std::vector<double> attribution_scores;
    std::vector<std::size_t> highlights_attribution;
    std::vector<std::size_t> highlights_attention;
    std::size_t passage_length = 0;
};

struct EvalReport {
    std::string split;
    std::size_t n_instances = 0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::optional<double> alignment_attribution;
    std::optional<double> alignment_attention;
    GroupAccuracy groups;
    // Soft demographic-parity gap of the clean answer distributions over the whole split.
    double fairness_penalty = 0.0;
    std::vector<InstanceEval> details;
};

struct EvalOptions {
    bool alignment = true;
    // Highlight size; 0 uses |R_j| per instance.
    std::size_t k = 0;
};

EvalReport evaluate(const Model& model, const std::vector<Instance>& instances, const std::string& split,
                    const EvalOptions& opts = {});
std::string eval_report_json(const EvalReport& report);

struct TrainResult {
    Model final_model;
    Model best_model;
    double best_dev_accuracy = -1.0;
    std::size_t best_epoch = 0;
    std::size_t steps = 0;
    std::vector<std::string> log;
};

using LogSink = std::function<void(const std::string&)>;

/// Deterministic SGD over train, selecting the best checkpoint on dev. When out_dir
/// is non-empty writes best.ckpt, final.ckpt and train_log.jsonl there; on divergence
/// writes last_good.ckpt and throws TrainingDiverged.
TrainResult train(const std::vector<Instance>& train_set, const std::vector<Instance>& dev_set, ModelConfig model_cfg,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir = {}, const LogSink& sink = {});

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;
};

struct SeedAggregate {
    std::size_t runs = 0;
    MetricSummary accuracy, macro_f1, alignment_attribution, alignment_attention, gap;
};

/// Mean and population standard deviation over reports from independent seeds.
SeedAggregate aggregate(const std::vector<EvalReport>& reports);
std::string aggregate_json(const SeedAggregate& agg);

}  // namespace xrc
