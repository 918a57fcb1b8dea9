#include "xrc/debias.hpp"

#include <cmath>
#include <stdexcept>

namespace xrc {

void DebiasConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be >= 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be >= 0");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be >= 0");
}

PerturbSource parse_perturb_source(const std::string& s) {
    if (s == "probe") return PerturbSource::Probe;
    if (s == "task") return PerturbSource::Task;
    throw std::invalid_argument("perturb source must be 'probe' or 'task', got '" + s + "'");
}

std::string to_string(PerturbSource s) { return s == PerturbSource::Probe ? "probe" : "task"; }

Tensor bias_loss(const Tensor& group_logits, int group) {
    if (group != 0 && group != 1) throw std::invalid_argument("group label must be 0 or 1, got " + std::to_string(group));
    if (group_logits.cols() != 2) throw std::invalid_argument("group probe must produce 2 logits");
    return cross_entropy(group_logits, static_cast<std::size_t>(group));
}

Matrix perturbation_offset(const Matrix& grad, double lambda, std::size_t n_valid) {
    if (n_valid > grad.rows) throw std::invalid_argument("perturbation_offset: n_valid exceeds rows");
    Matrix off(grad.rows, grad.cols);
    for (std::size_t i = 0; i < n_valid; ++i)
        for (std::size_t j = 0; j < grad.cols; ++j) {
            double g = grad(i, j);
            if (std::isnan(g)) throw std::runtime_error("perturbation_offset: NaN gradient");
            off(i, j) = g > 0.0 ? lambda : (g < 0.0 ? -lambda : 0.0);
        }
    return off;
}

Matrix perturb_embeddings(const Matrix& x, const Matrix& grad, double lambda, std::size_t n_valid) {
    if (x.rows != grad.rows || x.cols != grad.cols)
        throw std::invalid_argument("perturb_embeddings: shape mismatch");
    Matrix out = perturbation_offset(grad, lambda, n_valid);
    for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] += x.data[k];
    return out;
}

FairnessPenalty fairness_penalty(const std::vector<Tensor>& probs, const std::vector<int>& groups) {
    if (probs.size() != groups.size()) throw std::invalid_argument("fairness_penalty: size mismatch");
    if (probs.empty()) throw std::invalid_argument("fairness_penalty: empty batch");
    std::vector<Tensor> g0, g1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (groups[i] == 0)
            g0.push_back(probs[i]);
        else if (groups[i] == 1)
            g1.push_back(probs[i]);
        else
            throw std::invalid_argument("group label must be 0 or 1");
    }
    FairnessPenalty r;
    if (g0.empty() || g1.empty()) {
        r.value = Tensor::scalar(0.0);
        r.single_group = true;
        return r;
    }
    auto group_mean = [](const std::vector<Tensor>& rows) {
        std::vector<std::size_t> idx(rows.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return mean_of_rows(stack_rows(rows), idx);
    };
    r.value = sum(square(sub(group_mean(g0), group_mean(g1))));
    return r;
}

Tensor mean_kl(const std::vector<Tensor>& p_clean, const std::vector<Tensor>& p_adv) {
    if (p_clean.size() != p_adv.size() || p_clean.empty()) throw std::invalid_argument("mean_kl: size mismatch");
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < p_clean.size(); ++i) terms.push_back(kl_divergence(p_clean[i], p_adv[i]));
    return mean(concat_cols(terms));
}

CompositeLoss composite_loss(const Tensor& comp, const Tensor& kl, const Tensor& fair, double alpha, double beta) {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw std::invalid_argument("alpha and beta must be >= 0");
    CompositeLoss r;
    r.parts.comp = comp.item();
    r.parts.kl = kl.item();
    r.parts.fair = fair.item();
    r.parts.alpha = alpha;
    r.parts.beta = beta;
    // KL is clamped by roundoff to tiny negatives at most
    if (r.parts.comp < 0.0) throw std::runtime_error("composite_loss: negative comprehension loss");
    if (r.parts.kl < -1e-12) throw std::runtime_error("composite_loss: negative KL term");
    if (r.parts.fair < 0.0) throw std::runtime_error("composite_loss: negative fairness penalty");
    r.total = add(add(comp, scale(kl, beta)), scale(fair, alpha));
    r.parts.total = r.total.item();
    return r;
}

}  // namespace xrc
