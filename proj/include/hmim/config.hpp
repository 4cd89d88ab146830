#pragma once

// Flat key=value configuration with dotted paths ("optim.lr = 1e-4"). Lines
// starting with '#' are comments. Overrides are plain key=value strings that
// replace entries after the file is parsed; every key is checked against the
// schema of the command using it.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hmim/common.hpp"

namespace hmim {

class Config {
public:
    Config() = default;

    static Config from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw config_error("cannot open config file " + path);
        Config cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const std::string trimmed = trim(line);
            if (trimmed.empty() || trimmed[0] == '#') continue;
            const size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw config_error(path + ":" + std::to_string(lineno) + ": expected key = value");
            cfg.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (key.empty()) throw config_error("config: empty key");
        kv_[key] = value;
    }

    void apply_override(const std::string& spec) {
        const size_t eq = spec.find('=');
        if (eq == std::string::npos)
            throw config_error("override '" + spec + "' must look like key=value");
        set(trim(spec.substr(0, eq)), trim(spec.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    int64_t get_int(const std::string& key, int64_t fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            size_t pos = 0;
            const int64_t v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw config_error("config key " + key + ": '" + it->second + "' is not an integer");
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw config_error("config key " + key + ": '" + it->second + "' is not a number");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw config_error("config key " + key + ": '" + it->second + "' is not a boolean");
    }

    // rejects unknown keys so typos fail loudly, naming the offender
    void check_keys(const std::set<std::string>& known) const {
        for (const auto& [k, v] : kv_)
            if (!known.count(k)) throw config_error("unknown config key: " + k);
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? "" : s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> kv_;
};

}  // namespace hmim
