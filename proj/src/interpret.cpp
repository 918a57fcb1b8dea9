#include "xrc/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "xrc/io.hpp"

namespace xrc {

void HeatmapConfig::validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("heatmap gamma must be > 0");
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("heatmap epsilon must be >= 0");
}

Matrix enhance_heatmap(const Matrix& attention, const HeatmapConfig& cfg) {
    cfg.validate();
    Matrix h(attention.rows, attention.cols);
    for (std::size_t i = 0; i < attention.rows; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < attention.cols; ++j) {
            double a = attention(i, j);
            if (a < 0.0 || std::isnan(a))
                throw std::invalid_argument("enhance_heatmap: negative attention entry at (" + std::to_string(i) +
                                            "," + std::to_string(j) + ")");
            h(i, j) = std::pow(a, cfg.gamma);
            total += h(i, j);
        }
        double denom = cfg.epsilon + total;
        // all-zero row with epsilon 0 stays zero
        if (denom > 0.0)
            for (std::size_t j = 0; j < attention.cols; ++j) h(i, j) /= denom;
    }
    return h;
}

Matrix select_attention_view(const ModelOutput& out, const HeatmapConfig& cfg) {
    if (out.attention.empty()) throw std::invalid_argument("model output has no attention layers");
    std::size_t layer = cfg.layer.value_or(out.attention.size() - 1);
    if (layer >= out.attention.size())
        throw std::invalid_argument("layer " + std::to_string(layer) + " out of range (model has " +
                                    std::to_string(out.attention.size()) + ")");
    const auto& heads = out.attention[layer];
    if (cfg.head) {
        if (*cfg.head >= heads.size())
            throw std::invalid_argument("head " + std::to_string(*cfg.head) + " out of range (model has " +
                                        std::to_string(heads.size()) + ")");
        return heads[*cfg.head].to_matrix();
    }
    Matrix avg = heads[0].to_matrix();
    for (std::size_t h = 1; h < heads.size(); ++h) {
        const auto& v = heads[h].value();
        for (std::size_t k = 0; k < v.size(); ++k) avg.data[k] += v[k];
    }
    for (double& x : avg.data) x /= static_cast<double>(heads.size());
    return avg;
}

NormalizedScores normalize_attribution(std::span<const double> attr) {
    NormalizedScores r;
    if (attr.empty()) throw std::invalid_argument("normalize_attribution: empty input");
    double n = static_cast<double>(attr.size());
    // corrected two-pass: the residual mean of the centred values is folded back in
    const double mu0 = std::accumulate(attr.begin(), attr.end(), 0.0) / n;
    std::vector<double> dev(attr.size());
    for (std::size_t i = 0; i < attr.size(); ++i) dev[i] = attr[i] - mu0;
    const double c = std::accumulate(dev.begin(), dev.end(), 0.0) / n;
    double ss = 0.0;
    for (auto& d : dev) {
        d -= c;
        ss += d * d;
    }
    r.mu = mu0 + c;
    r.sigma = std::sqrt(ss / n);
    r.scores.assign(attr.size(), 0.0);
    if (r.sigma < 1e-12) {
        r.degenerate = true;
        return r;
    }
    for (std::size_t i = 0; i < attr.size(); ++i) r.scores[i] = dev[i] / r.sigma;
    return r;
}

std::vector<double> attribution_from_graph(const ModelOutput& out, AttributionAxis axis) {
    if (out.attention.empty()) throw std::invalid_argument("model output has no attention layers");
    std::size_t n = out.attention[0][0].rows();
    std::vector<double> attr(n, 0.0);
    for (const auto& layer : out.attention) {
        for (const auto& head : layer) {
            if (!head.has_grad())
                throw std::logic_error("attribution requires backward on the target logit first");
            const auto& g = head.grad();
            const auto& a = head.value();
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < n; ++i) {
                    double c = g[j * n + i] * a[j * n + i];
                    attr[axis == AttributionAxis::AttendedTo ? i : j] += c;
                }
        }
    }
    return attr;
}

AttributionResult attribute_tokens(const Model& model, const Encoded& enc, std::optional<std::size_t> target,
                                   AttributionAxis axis) {
    ModelOutput out = forward(model.config, model.params, enc);
    std::size_t k = out.answer_logits.cols();
    std::size_t t = target.value_or(argmax(out.answer_logits.value()));
    if (t >= k) throw std::invalid_argument("target class " + std::to_string(t) + " out of range");
    Tensor y = slice_cols(out.answer_logits, t, t + 1);
    backward(y);

    AttributionResult r;
    r.target_class = t;
    r.attr = attribution_from_graph(out, axis);
    // drop the accumulated parameter gradients; attribution must not leak into training state
    for (auto p : model.params.all()) p.zero_grad();
    auto norm = normalize_attribution(r.attr);
    r.scores = std::move(norm.scores);
    r.mu = norm.mu;
    r.sigma = norm.sigma;
    r.degenerate = norm.degenerate;
    r.passage_begin = enc.passage_begin;
    r.passage_end = enc.passage_end;
    return r;
}

std::vector<std::size_t> extract_highlights(std::span<const double> scores, std::size_t passage_begin,
                                            std::size_t passage_end, std::size_t k) {
    if (passage_end < passage_begin || passage_end > scores.size())
        throw std::invalid_argument("extract_highlights: passage range out of bounds");
    std::vector<std::size_t> idx(passage_end - passage_begin);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[passage_begin + a] > scores[passage_begin + b];
    });
    idx.resize(std::min(k, idx.size()));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> cls_attention_scores(const ModelOutput& out) {
    HeatmapConfig cfg;
    Matrix a = select_attention_view(out, cfg);
    auto r = a.row(0);
    return {r.begin(), r.end()};
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

void check_labels(const Matrix& h, const std::vector<std::string>& rows, const std::vector<std::string>& cols) {
    if (rows.size() != h.rows || cols.size() != h.cols)
        throw std::invalid_argument("heatmap labels do not match matrix shape");
}

}  // namespace

std::string heatmap_csv(const Matrix& h, const std::vector<std::string>& row_tokens,
                        const std::vector<std::string>& col_tokens) {
    check_labels(h, row_tokens, col_tokens);
    std::string out = "token";
    for (const auto& t : col_tokens) out += "," + csv_field(t);
    out += "\n";
    for (std::size_t i = 0; i < h.rows; ++i) {
        out += csv_field(row_tokens[i]);
        for (std::size_t j = 0; j < h.cols; ++j) out += "," + format_double(h(i, j));
        out += "\n";
    }
    return out;
}

Matrix parse_heatmap_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("heatmap csv: missing header");
    std::size_t cols = split_csv_line(line).size() - 1;
    std::vector<double> values;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != cols + 1) throw std::runtime_error("heatmap csv: ragged row " + std::to_string(rows + 1));
        for (std::size_t j = 1; j < f.size(); ++j) values.push_back(std::stod(f[j]));
        ++rows;
    }
    return Matrix(rows, cols, std::move(values));
}

std::string heatmap_svg(const Matrix& h, const std::vector<std::string>& row_tokens,
                        const std::vector<std::string>& col_tokens) {
    check_labels(h, row_tokens, col_tokens);
    const int cell = 16, left = 90, top = 90, legend_w = 120;
    int width = left + static_cast<int>(h.cols) * cell + 20;
    int height = top + static_cast<int>(h.rows) * cell + 50;
    double vmin = h.data.empty() ? 0.0 : h.data.front(), vmax = vmin;
    for (double v : h.data) {
        vmin = std::min(vmin, v);
        vmax = std::max(vmax, v);
    }
    auto color = [&](double v) {
        double t = vmax > vmin ? std::clamp((v - vmin) / (vmax - vmin), 0.0, 1.0) : 0.0;
        // white to a single blue hue
        int r = static_cast<int>(std::lround(255 - t * (255 - 8)));
        int g = static_cast<int>(std::lround(255 - t * (255 - 48)));
        int b = static_cast<int>(std::lround(255 - t * (255 - 107)));
        char buf[8];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
        return std::string(buf);
    };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << std::max(width, left + legend_w + 20)
      << "\" height=\"" << height << "\" font-family=\"monospace\" font-size=\"9\">\n";
    for (std::size_t j = 0; j < h.cols; ++j) {
        int x = left + static_cast<int>(j) * cell + cell / 2;
        s << "<text x=\"" << x << "\" y=\"" << top - 4 << "\" transform=\"rotate(-60 " << x << " " << top - 4
          << ")\">" << xml_escape(col_tokens[j]) << "</text>\n";
    }
    for (std::size_t i = 0; i < h.rows; ++i) {
        int y = top + static_cast<int>(i) * cell;
        s << "<text x=\"" << left - 4 << "\" y=\"" << y + cell - 4 << "\" text-anchor=\"end\">"
          << xml_escape(row_tokens[i]) << "</text>\n";
        for (std::size_t j = 0; j < h.cols; ++j) {
            s << "<rect x=\"" << left + static_cast<int>(j) * cell << "\" y=\"" << y << "\" width=\"" << cell
              << "\" height=\"" << cell << "\" fill=\"" << color(h(i, j)) << "\"><title>"
              << xml_escape(row_tokens[i]) << " -> " << xml_escape(col_tokens[j]) << ": " << format_double(h(i, j))
              << "</title></rect>\n";
        }
    }
    int ly = top + static_cast<int>(h.rows) * cell + 15;
    s << "<defs><linearGradient id=\"legend\"><stop offset=\"0\" stop-color=\"" << color(vmin)
      << "\"/><stop offset=\"1\" stop-color=\"" << color(vmax) << "\"/></linearGradient></defs>\n";
    s << "<rect x=\"" << left << "\" y=\"" << ly << "\" width=\"" << legend_w
      << "\" height=\"10\" fill=\"url(#legend)\" stroke=\"#888\"/>\n";
    s << "<text x=\"" << left << "\" y=\"" << ly + 22 << "\">" << format_double(vmin) << "</text>\n";
    s << "<text x=\"" << left + legend_w << "\" y=\"" << ly + 22 << "\" text-anchor=\"end\">"
      << format_double(vmax) << "</text>\n";
    s << "</svg>\n";
    return s.str();
}

void render_heatmap(const Matrix& h, const std::vector<std::string>& row_tokens,
                    const std::vector<std::string>& col_tokens, const std::filesystem::path& csv_path,
                    const std::filesystem::path& svg_path) {
    write_file_atomic(csv_path, heatmap_csv(h, row_tokens, col_tokens));
    write_file_atomic(svg_path, heatmap_svg(h, row_tokens, col_tokens));
}

std::string attribution_json(const std::string& instance_id, const AttributionResult& result,
                             const std::vector<std::size_t>& highlights) {
    nlohmann::ordered_json j;
    j["instance_id"] = instance_id;
    j["target_class"] = result.target_class;
    j["attr"] = result.attr;
    j["scores"] = result.scores;
    j["mu"] = result.mu;
    j["sigma"] = result.sigma;
    j["degenerate_flag"] = result.degenerate;
    j["passage_begin"] = result.passage_begin;
    j["passage_end"] = result.passage_end;
    j["highlights"] = highlights;
    return j.dump(2) + "\n";
}

}  // namespace xrc
