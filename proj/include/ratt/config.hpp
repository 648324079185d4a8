#pragma once

#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ratt/common.hpp"

namespace ratt {

// Flat key=value file: one assignment per line, `#` comments, optional
// double quotes around values. Unknown keys are kept so callers can reject
// or ignore them.
class KvConfig {
  public:
    KvConfig() = default;

    static KvConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open config file " + path);
        KvConfig cfg;
        cfg.source_ = path;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            cfg.parse_line(line, lineno);
        }
        return cfg;
    }

    static KvConfig parse_string(const std::string& text) {
        KvConfig cfg;
        cfg.source_ = "<string>";
        std::string line;
        int lineno = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            std::size_t nl = text.find('\n', pos);
            if (nl == std::string::npos) nl = text.size();
            ++lineno;
            cfg.parse_line(text.substr(pos, nl - pos), lineno);
            pos = nl + 1;
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    const std::vector<std::string>& keys() const { return order_; }

    std::string get_string(const std::string& key) const { return raw(key); }

    std::string get_string(const std::string& key, const std::string& dflt) const {
        return has(key) ? raw(key) : dflt;
    }

    long long get_int(const std::string& key) const { return to_int(key, raw(key)); }

    long long get_int(const std::string& key, long long dflt) const {
        return has(key) ? to_int(key, raw(key)) : dflt;
    }

    double get_double(const std::string& key) const { return to_double(key, raw(key)); }

    double get_double(const std::string& key, double dflt) const {
        return has(key) ? to_double(key, raw(key)) : dflt;
    }

    bool get_bool(const std::string& key, bool dflt) const {
        if (!has(key)) return dflt;
        const std::string& v = raw(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw DataError(source_ + ": field `" + key + "` is not a boolean: " + v);
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) order_.push_back(key);
        values_[key] = value;
    }

  private:
    void parse_line(const std::string& line, int lineno) {
        std::string s = strip(line);
        if (s.empty() || s[0] == '#') return;
        std::size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw DataError(source_ + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = strip(s.substr(0, eq));
        std::string val = strip(s.substr(eq + 1));
        if (key.empty())
            throw DataError(source_ + ":" + std::to_string(lineno) + ": empty key");
        std::size_t hash = find_comment(val);
        if (hash != std::string::npos) val = strip(val.substr(0, hash));
        if (val.size() >= 2 && val.front() == '"' && val.back() == '"')
            val = val.substr(1, val.size() - 2);
        set(key, val);
    }

    // a # inside quotes is part of the value
    static std::size_t find_comment(const std::string& v) {
        bool quoted = false;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (v[i] == '"') quoted = !quoted;
            if (v[i] == '#' && !quoted) return i;
        }
        return std::string::npos;
    }

    static std::string strip(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    const std::string& raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end())
            throw DataError(source_ + ": missing required field `" + key + "`");
        return it->second;
    }

    long long to_int(const std::string& key, const std::string& v) const {
        try {
            std::size_t used = 0;
            long long x = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw DataError(source_ + ": field `" + key + "` is not an integer: " + v);
        }
    }

    double to_double(const std::string& key, const std::string& v) const {
        try {
            std::size_t used = 0;
            double x = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw DataError(source_ + ": field `" + key + "` is not a number: " + v);
        }
    }

    std::string source_ = "<unset>";
    std::unordered_map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

} // namespace ratt
