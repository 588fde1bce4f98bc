#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace spade {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);
double parse_double(const std::string& s);

std::vector<std::string> split_csv(const std::string& line);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace spade
