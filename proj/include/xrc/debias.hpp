#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "xrc/tensor.hpp"

namespace xrc {

enum class PerturbSource { Probe, Task };

struct DebiasConfig {
    double lambda = 0.05;
    double alpha = 1.0;
    double beta = 0.5;
    // Epochs trained with alpha = beta = 0 before the regularizers switch on.
    std::size_t warmup_epochs = 1;
    PerturbSource source = PerturbSource::Probe;

    void validate() const;
};

PerturbSource parse_perturb_source(const std::string& s);
std::string to_string(PerturbSource s);

/// Cross-entropy of the group probe against the protected-group label (0 or 1).
Tensor bias_loss(const Tensor& group_logits, int group);

/// λ·sign(grad) on the first n_valid rows, zero on padding rows.
Matrix perturbation_offset(const Matrix& grad, double lambda, std::size_t n_valid);

/// x + perturbation_offset(grad, λ, n_valid).
Matrix perturb_embeddings(const Matrix& x, const Matrix& grad, double lambda, std::size_t n_valid);

struct FairnessPenalty {
    Tensor value;
    // Only one protected group in the batch: the penalty is zero.
    bool single_group = false;
};

/// Σ_c (mean_{g=0} p_c − mean_{g=1} p_c)² over a batch of 1×K probability rows.
FairnessPenalty fairness_penalty(const std::vector<Tensor>& probs, const std::vector<int>& groups);

struct LossBreakdown {
    double comp = 0.0;
    double kl = 0.0;
    double fair = 0.0;
    double bias = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    double total = 0.0;
};

struct CompositeLoss {
    Tensor total;
    LossBreakdown parts;
};

/// Batch-mean KL(p_clean ‖ p_adv).
Tensor mean_kl(const std::vector<Tensor>& p_clean, const std::vector<Tensor>& p_adv);

/// comp + β·kl + α·fair. Throws on a negative component.
CompositeLoss composite_loss(const Tensor& comp, const Tensor& kl, const Tensor& fair, double alpha, double beta);

}  // namespace xrc
