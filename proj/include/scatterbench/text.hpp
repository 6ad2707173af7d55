#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

// Small text helpers shared by the CSV readers and writers.
namespace scatterbench::text {

/// Splits on commas. Fields are not quoted anywhere in this project's
/// formats, so a comma is always a separator.
std::vector<std::string> split_csv(std::string_view line);

/// Reads a whole file into lines, stripping a trailing CR on each line.
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Shortest decimal form that parses back to the identical double.
std::string format_double(double v);
/// Fixed-point with `digits` decimals ("%.3f").
std::string format_fixed(double v, int digits);

/// Strict parsers; throw FormatError with `what` in the message.
double parse_double(std::string_view s, std::string_view what);
long long parse_int(std::string_view s, std::string_view what);

/// Writes `content` to `path`, creating parent directories.
void write_file(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

}  // namespace scatterbench::text
