#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xrc/debias.hpp"
#include "xrc/model.hpp"
#include "xrc/tensor.hpp"

namespace xrc {

struct GradcheckConfig {
    std::uint64_t seed = 7;
    DebiasConfig debias;
    GradCheckOptions options;
};

struct SuiteReport {
    std::string name;
    GradReport report;
};

/// The small architecture used for finite-difference checks: 2 layers, 2 heads,
/// d_model 16, sequence length 12.
ModelConfig tiny_model_config(std::uint64_t seed = 7);

/// Random instances that fit the tiny architecture, alternating groups.
std::vector<Instance> tiny_instances(std::size_t n, std::uint64_t seed);

/// Runs the tensor, model and debias suites.
std::vector<SuiteReport> run_gradcheck_suites(const GradcheckConfig& cfg);

bool all_passed(const std::vector<SuiteReport>& suites);
std::string gradcheck_json(const std::vector<SuiteReport>& suites, double tolerance);

}  // namespace xrc
