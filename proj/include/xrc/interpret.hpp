#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xrc/model.hpp"
#include "xrc/tensor.hpp"

namespace xrc {

struct HeatmapConfig {
    double gamma = 2.0;
    double epsilon = 1e-8;
    // Layer index; nullopt selects the final layer.
    std::optional<std::size_t> layer;
    // Head index; nullopt averages over heads.
    std::optional<std::size_t> head;

    void validate() const;
};

/// Power-renormalizes each row: H_ij = A_ij^γ / (ε + Σ_k A_ik^γ).
Matrix enhance_heatmap(const Matrix& attention, const HeatmapConfig& cfg);

/// The attention matrix selected by cfg.layer / cfg.head.
Matrix select_attention_view(const ModelOutput& out, const HeatmapConfig& cfg);

enum class AttributionAxis {
    AttendedTo,  // reduce over the query axis: credit the attended-to token (default)
    Attending,   // reduce over the key axis: credit the attending token
};

struct NormalizedScores {
    std::vector<double> scores;
    double mu = 0.0;
    double sigma = 0.0;
    bool degenerate = false;
};

/// z-scores with population standard deviation; zeros when σ < 1e-12.
NormalizedScores normalize_attribution(std::span<const double> attr);

struct AttributionResult {
    std::vector<double> attr;
    std::vector<double> scores;
    double mu = 0.0;
    double sigma = 0.0;
    bool degenerate = false;
    std::size_t target_class = 0;
    std::size_t passage_begin = 0;
    std::size_t passage_end = 0;
};

/// Σ over layers, heads and the reduced axis of (∂y*/∂A) ⊙ A, read from a graph
/// on which backward has already been run.
std::vector<double> attribution_from_graph(const ModelOutput& out, AttributionAxis axis = AttributionAxis::AttendedTo);

/// Gradient×attention attribution of the target logit (argmax logit when unset).
AttributionResult attribute_tokens(const Model& model, const Encoded& enc, std::optional<std::size_t> target = {},
                                   AttributionAxis axis = AttributionAxis::AttendedTo);

/// Top-k passage positions by score, ties to the lower index; passage-relative, ascending.
std::vector<std::size_t> extract_highlights(std::span<const double> scores, std::size_t passage_begin,
                                            std::size_t passage_end, std::size_t k);

/// Final-layer head-mean attention from the CLS row.
std::vector<double> cls_attention_scores(const ModelOutput& out);

std::string heatmap_csv(const Matrix& h, const std::vector<std::string>& row_tokens,
                        const std::vector<std::string>& col_tokens);
Matrix parse_heatmap_csv(const std::string& csv);
std::string heatmap_svg(const Matrix& h, const std::vector<std::string>& row_tokens,
                        const std::vector<std::string>& col_tokens);
void render_heatmap(const Matrix& h, const std::vector<std::string>& row_tokens,
                    const std::vector<std::string>& col_tokens, const std::filesystem::path& csv_path,
                    const std::filesystem::path& svg_path);

std::string attribution_json(const std::string& instance_id, const AttributionResult& result,
                             const std::vector<std::size_t>& highlights);

}  // namespace xrc
