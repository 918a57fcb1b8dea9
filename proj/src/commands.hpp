#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "xrc/config.hpp"

namespace xrc::cmd {

// A gradient check that ran but did not meet tolerance.
class GradcheckFailed : public std::runtime_error {
public:
    GradcheckFailed(const std::string& msg, std::string report) : std::runtime_error(msg), report_(std::move(report)) {}
    const std::string& report() const { return report_; }

private:
    std::string report_;
};

struct Settings {
    std::map<std::string, std::string> file;
    std::map<std::string, std::string> overrides;

    RunConfig resolve() const { return resolve_config(file, overrides); }
};

std::string gen_data(const Settings& s, const std::filesystem::path& out_dir, bool force);
std::string train(const Settings& s, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir);
std::string eval(const Settings& s, const std::filesystem::path& model_path, const std::filesystem::path& data_dir,
                 const std::string& split, const std::filesystem::path& out_dir);
std::string explain(const Settings& s, const std::filesystem::path& model_path, const std::filesystem::path& data_dir,
                    const std::string& instance_id, const std::filesystem::path& out_dir);
std::string fairness_report(const Settings& s, const std::filesystem::path& before, const std::filesystem::path& after,
                            const std::filesystem::path& data_dir, const std::string& split,
                            const std::filesystem::path& out_dir);

struct GradcheckHook {
    std::string param;
    double offset = 0.0;
};

/// Returns the report JSON; throws GradcheckFailed when any suite exceeds tolerance.
std::string gradcheck(const Settings& s, const std::filesystem::path& out_dir, const GradcheckHook& hook = {});

}  // namespace xrc::cmd
