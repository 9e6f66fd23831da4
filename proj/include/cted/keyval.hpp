#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cted/common.hpp"

namespace cted {

// Flat "key = value" text: UTF-8, one entry per line, '#' starts a comment,
// surrounding whitespace trimmed, order preserved, duplicate keys rejected.
class KeyValueFile {
public:
    static KeyValueFile parse_string(const std::string& text);
    static KeyValueFile parse_file(const std::filesystem::path& path);

    std::string serialize() const;
    void write_file(const std::filesystem::path& path) const;

    bool has(const std::string& key) const;
    std::optional<std::string> get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    std::string require(const std::string& key) const;

    int64_t require_int(const std::string& key) const;
    double require_double(const std::string& key) const;
    int64_t get_int_or(const std::string& key, int64_t fallback) const;
    double get_double_or(const std::string& key, double fallback) const;
    bool get_bool_or(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, int64_t value);
    void set_double(const std::string& key, double value);
    void set_bool(const std::string& key, bool value);

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
    std::vector<std::string> keys() const;

    bool operator==(const KeyValueFile& other) const { return entries_ == other.entries_; }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

std::string trim(const std::string& s);
std::vector<std::string> split_on(const std::string& s, char sep);
std::vector<std::string> split_whitespace(const std::string& s);
std::string format_double(double v);

}  // namespace cted
