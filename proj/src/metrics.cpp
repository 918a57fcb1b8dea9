#include "xrc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "xrc/rng.hpp"

namespace xrc {

namespace {

void check_lengths(const Labels& preds, const Labels& refs) {
    if (preds.size() != refs.size())
        throw std::invalid_argument("prediction/reference length mismatch: " + std::to_string(preds.size()) + " vs " +
                                    std::to_string(refs.size()));
    if (preds.empty()) throw std::invalid_argument("metric over zero instances");
}

IndexSet normalized(IndexSet s) {
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
}

double log_choose(std::size_t n, std::size_t k) {
    return std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
           std::lgamma(static_cast<double>(n - k) + 1);
}

}  // namespace

double accuracy(const Labels& preds, const Labels& refs) {
    check_lengths(preds, refs);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == refs[i];
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double macro_f1(const Labels& preds, const Labels& refs, std::size_t n_classes, double zeta) {
    check_lengths(preds, refs);
    if (n_classes == 0) throw std::invalid_argument("macro_f1: zero classes");
    if (!(zeta >= 0.0)) throw std::invalid_argument("macro_f1: zeta must be >= 0");
    std::vector<std::size_t> tp(n_classes, 0), pred_n(n_classes, 0), ref_n(n_classes, 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] >= n_classes || refs[i] >= n_classes)
            throw std::invalid_argument("label out of range at index " + std::to_string(i));
        ++pred_n[preds[i]];
        ++ref_n[refs[i]];
        if (preds[i] == refs[i]) ++tp[preds[i]];
    }
    double total = 0.0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        double p = pred_n[c] ? static_cast<double>(tp[c]) / static_cast<double>(pred_n[c]) : 0.0;
        double r = ref_n[c] ? static_cast<double>(tp[c]) / static_cast<double>(ref_n[c]) : 0.0;
        double denom = p + r + zeta;
        if (denom > 0.0) total += p * r / denom;
    }
    return 2.0 * total / static_cast<double>(n_classes);
}

double jaccard(const IndexSet& a, const IndexSet& b) {
    auto x = normalized(a), y = normalized(b);
    if (x.empty() && y.empty()) return 1.0;
    IndexSet inter;
    std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(inter));
    std::size_t uni = x.size() + y.size() - inter.size();
    return static_cast<double>(inter.size()) / static_cast<double>(uni);
}

double attention_alignment(const std::vector<IndexSet>& highlights, const std::vector<IndexSet>& rationales) {
    if (highlights.size() != rationales.size()) throw std::invalid_argument("alignment: set count mismatch");
    if (highlights.empty()) throw std::invalid_argument("alignment over zero pairs");
    double total = 0.0;
    for (std::size_t j = 0; j < highlights.size(); ++j) total += jaccard(highlights[j], rationales[j]);
    return total / static_cast<double>(highlights.size());
}

GroupAccuracy group_accuracy_gap(const Labels& preds, const Labels& refs, const std::vector<int>& groups) {
    check_lengths(preds, refs);
    if (groups.size() != preds.size()) throw std::invalid_argument("group label length mismatch");
    std::size_t hit[2] = {0, 0}, n[2] = {0, 0};
    for (std::size_t i = 0; i < preds.size(); ++i) {
        int g = groups[i];
        if (g != 0 && g != 1) throw std::invalid_argument("group label must be 0 or 1");
        ++n[g];
        hit[g] += preds[i] == refs[i];
    }
    for (int g = 0; g < 2; ++g)
        if (n[g] == 0) throw std::invalid_argument("group " + std::to_string(g) + " has no instances");
    GroupAccuracy r;
    r.n0 = n[0];
    r.n1 = n[1];
    r.acc0 = static_cast<double>(hit[0]) / static_cast<double>(n[0]);
    r.acc1 = static_cast<double>(hit[1]) / static_cast<double>(n[1]);
    r.gap = std::abs(r.acc0 - r.acc1);
    return r;
}

BaselineStats permutation_baseline(const std::vector<std::size_t>& passage_lengths,
                                   const std::vector<IndexSet>& rationales, std::size_t trials, std::uint64_t seed,
                                   const std::vector<std::size_t>* ks) {
    if (trials < 100) throw std::invalid_argument("permutation_baseline needs at least 100 trials");
    if (passage_lengths.size() != rationales.size()) throw std::invalid_argument("baseline: size mismatch");
    if (passage_lengths.empty()) throw std::invalid_argument("baseline over zero instances");
    if (ks && ks->size() != rationales.size()) throw std::invalid_argument("baseline: k count mismatch");

    std::vector<double> values(trials);
    for (std::size_t t = 0; t < trials; ++t) {
        RandomStream rng(seed, t);
        std::vector<IndexSet> picks(rationales.size());
        for (std::size_t j = 0; j < rationales.size(); ++j) {
            std::size_t n = passage_lengths[j];
            std::size_t k = std::min(ks ? (*ks)[j] : rationales[j].size(), n);
            // partial Fisher-Yates for a uniform k-subset
            std::vector<std::size_t> pool(n);
            std::iota(pool.begin(), pool.end(), 0);
            for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
            picks[j].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
        }
        values[t] = attention_alignment(picks, rationales);
    }
    BaselineStats s;
    s.trials = trials;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(trials);
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(trials));
    return s;
}

double expected_random_jaccard(std::size_t n, const IndexSet& rationale, std::size_t k) {
    auto r_set = normalized(rationale);
    std::size_t r = r_set.size();
    if (r > n || k > n) throw std::invalid_argument("expected_random_jaccard: set larger than passage");
    if (r == 0 && k == 0) return 1.0;
    double total = 0.0;
    double log_all = log_choose(n, k);
    for (std::size_t m = (k + r > n ? k + r - n : 0); m <= std::min(r, k); ++m) {
        double p = std::exp(log_choose(r, m) + log_choose(n - r, k - m) - log_all);
        total += p * static_cast<double>(m) / static_cast<double>(r + k - m);
    }
    return total;
}

double expected_random_overlap(std::size_t n, std::size_t target_size, std::size_t k) {
    if (n == 0) throw std::invalid_argument("expected_random_overlap: empty passage");
    return static_cast<double>(k) * static_cast<double>(target_size) / static_cast<double>(n);
}

}  // namespace xrc
