#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "../core.hpp"

namespace dmr::cli {

/// Column-major table with a fixed header order.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> columns;

    void add(std::string name, std::vector<double> values) {
        header.push_back(std::move(name));
        columns.push_back(std::move(values));
    }
    std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }

    const std::vector<double>& column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return columns[i];
        throw ConfigError("table has no column '" + name + "'");
    }
};

/// 17 significant digits: round-trips every double.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void ensure_directory(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir))
        throw ConfigError("cannot create output directory '" + dir + "'");
}

inline void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << content;
    if (!out) throw ConfigError("write failed for '" + path + "'");
}

inline std::string render_csv(const Table& t) {
    for (const auto& c : t.columns)
        if (c.size() != t.rows()) throw ConfigError("table columns have different lengths");
    std::string s;
    for (std::size_t i = 0; i < t.header.size(); ++i) s += (i ? "," : "") + t.header[i];
    s += '\n';
    for (std::size_t r = 0; r < t.rows(); ++r) {
        for (std::size_t i = 0; i < t.columns.size(); ++i) s += (i ? "," : "") + format_double(t.columns[i][r]);
        s += '\n';
    }
    return s;
}

inline void write_csv(const std::string& path, const Table& t) { write_text(path, render_csv(t)); }

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline Table read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("'" + path + "' is empty");
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) t.header.push_back(cell);
    }
    t.columns.assign(t.header.size(), {});
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t i = 0;
        while (std::getline(ss, cell, ',')) {
            if (i >= t.header.size()) throw ConfigError(path + ": too many fields on line " + std::to_string(row));
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (end == cell.c_str() || *end != '\0')
                throw ConfigError(path + ": bad number '" + cell + "' on line " + std::to_string(row));
            t.columns[i++].push_back(v);
        }
        if (i != t.header.size()) throw ConfigError(path + ": too few fields on line " + std::to_string(row));
    }
    return t;
}

/// NaN and infinities become null.
inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json num_array(const std::vector<double>& v) {
    auto a = nlohmann::json::array();
    for (double x : v) a.push_back(num(x));
    return a;
}

}  // namespace dmr::cli
