#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace spanforge {

// Flat "key = value" text. '#' starts a comment; blank lines ignored.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);
// "KEY=VALUE" strings, as passed to --config.
void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides);

double parse_double(const std::string& key, const std::string& value);
long long parse_int(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
std::vector<double> parse_double_list(const std::string& text);
std::vector<int> parse_int_list(const std::string& text);
std::vector<std::string> split(const std::string& text, char sep);
std::string trim(const std::string& text);
// Shortest representation that round-trips.
std::string format_double(double v);

}  // namespace spanforge
