#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace xrc {

using Labels = std::vector<std::size_t>;
using IndexSet = std::vector<std::size_t>;

double accuracy(const Labels& preds, const Labels& refs);

/// (2/C)·Σ_c P_c·R_c / (P_c + R_c + ζ); P_c = 0 when class c is never predicted.
double macro_f1(const Labels& preds, const Labels& refs, std::size_t n_classes, double zeta = 1e-8);

/// |A ∩ B| / |A ∪ B|, with 1 for two empty sets.
double jaccard(const IndexSet& a, const IndexSet& b);

/// Mean Jaccard over paired highlight / rationale sets.
double attention_alignment(const std::vector<IndexSet>& highlights, const std::vector<IndexSet>& rationales);

struct GroupAccuracy {
    double acc0 = 0.0;
    double acc1 = 0.0;
    double gap = 0.0;
    std::size_t n0 = 0;
    std::size_t n1 = 0;
};

GroupAccuracy group_accuracy_gap(const Labels& preds, const Labels& refs, const std::vector<int>& groups);

struct BaselineStats {
    double mean = 0.0;
    double std = 0.0;
    std::size_t trials = 0;
};

/// S_AA when each instance's highlights are a uniformly random k-subset of its
/// passage, k = |R_j| unless ks is given.
BaselineStats permutation_baseline(const std::vector<std::size_t>& passage_lengths,
                                   const std::vector<IndexSet>& rationales, std::size_t trials, std::uint64_t seed,
                                   const std::vector<std::size_t>* ks = nullptr);

/// Exact expected Jaccard between a uniformly random k-subset of {0..n-1} and R.
double expected_random_jaccard(std::size_t n, const IndexSet& rationale, std::size_t k);

/// Exact expected |S ∩ T| for a uniformly random k-subset S of {0..n-1}: k·|T|/n.
double expected_random_overlap(std::size_t n, std::size_t target_size, std::size_t k);

}  // namespace xrc
