#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace xrc {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Writes to a sibling temp file and renames it over path.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

std::string sha256_hex(std::string_view data);

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double v);

}  // namespace xrc
