#include "cted/keyval.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace cted {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    while (!out.empty() && out.back().empty()) out.pop_back();
    return out;
}

std::vector<std::string> split_whitespace(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream iss(s);
    std::string w;
    while (iss >> w) out.push_back(w);
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

KeyValueFile KeyValueFile::parse_string(const std::string& text) {
    KeyValueFile kv;
    std::istringstream iss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(iss, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (kv.has(key)) throw ConfigError("duplicate key: " + key);
        kv.entries_.emplace_back(std::move(key), std::move(value));
    }
    return kv;
}

KeyValueFile KeyValueFile::parse_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str());
}

std::string KeyValueFile::serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

void KeyValueFile::write_file(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for write: " + path.string());
    f << serialize();
    if (!f) throw IoError("write failed: " + path.string());
}

bool KeyValueFile::has(const std::string& key) const {
    for (const auto& [k, v] : entries_) {
        if (k == key) return true;
    }
    return false;
}

std::optional<std::string> KeyValueFile::get(const std::string& key) const {
    for (const auto& [k, v] : entries_) {
        if (k == key) return v;
    }
    return std::nullopt;
}

std::string KeyValueFile::get_or(const std::string& key, const std::string& fallback) const {
    auto v = get(key);
    return v ? *v : fallback;
}

std::string KeyValueFile::require(const std::string& key) const {
    auto v = get(key);
    if (!v) throw ConfigError("missing key: " + key);
    return *v;
}

int64_t KeyValueFile::require_int(const std::string& key) const {
    const std::string v = require(key);
    try {
        size_t pos = 0;
        int64_t n = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': not an integer: " + v);
    }
}

double KeyValueFile::require_double(const std::string& key) const {
    const std::string v = require(key);
    try {
        size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': not a number: " + v);
    }
}

int64_t KeyValueFile::get_int_or(const std::string& key, int64_t fallback) const {
    return has(key) ? require_int(key) : fallback;
}

double KeyValueFile::get_double_or(const std::string& key, double fallback) const {
    return has(key) ? require_double(key) : fallback;
}

bool KeyValueFile::get_bool_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = require(key);
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': not a boolean: " + v);
}

void KeyValueFile::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    entries_.emplace_back(key, value);
}

void KeyValueFile::set_int(const std::string& key, int64_t value) { set(key, std::to_string(value)); }
void KeyValueFile::set_double(const std::string& key, double value) { set(key, format_double(value)); }
void KeyValueFile::set_bool(const std::string& key, bool value) { set(key, value ? "on" : "off"); }

std::vector<std::string> KeyValueFile::keys() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

}  // namespace cted
