#pragma once
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voidkit/core/tensor.hpp"
#include "voidkit/eval/metrics.hpp"
#include "voidkit/opt/protect.hpp"

// CSV / JSON-lines report writers and the matching readers. Numbers are
// printed with %.17g so a reloaded double is bit-identical to the one
// written; everything else about the formats is fixed so rerunning a
// seeded batch reproduces the report files byte for byte.

namespace voidkit::io {

inline std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// quote only when the field would break the grammar; ids and transform
// labels never do, so reports stay minimal and diffable
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline double parse_real(const std::string& s, const char* what) {
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw ConfigError(std::string(what) + ": malformed number '" + s + "'");
    return v;
}

inline constexpr const char* kRunLogHeader = "iteration,l_loc,l_id,l_attn,l_feat,l_total";
inline constexpr const char* kMetricsHeader = "pair_id,transform,l2,psnr,ism";

template <typename Real>
void write_run_log(std::ostream& out, const std::vector<opt::IterationRow<Real>>& rows) {
    out << kRunLogHeader << '\n';
    for (const auto& r : rows) {
        out << r.iteration << ',' << format_real(static_cast<double>(r.losses.l_loc)) << ','
            << format_real(static_cast<double>(r.losses.l_id)) << ','
            << format_real(static_cast<double>(r.losses.l_attn)) << ','
            << format_real(static_cast<double>(r.losses.l_feat)) << ','
            << format_real(static_cast<double>(r.losses.l_total)) << '\n';
    }
}

template <typename Real>
void write_run_log_file(const std::string& path, const std::vector<opt::IterationRow<Real>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open run log for writing: " + path);
    write_run_log(out, rows);
    if (!out) throw NumericError("short write on run log: " + path);
}

template <typename Real>
std::vector<opt::IterationRow<Real>> read_run_log_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open run log: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kRunLogHeader)
        throw ConfigError("run log header mismatch in " + path);
    std::vector<opt::IterationRow<Real>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 6) throw ConfigError("run log row arity mismatch in " + path);
        opt::IterationRow<Real> r;
        r.iteration = static_cast<int>(parse_real(f[0], "iteration"));
        r.losses.l_loc = Real(parse_real(f[1], "l_loc"));
        r.losses.l_id = Real(parse_real(f[2], "l_id"));
        r.losses.l_attn = Real(parse_real(f[3], "l_attn"));
        r.losses.l_feat = Real(parse_real(f[4], "l_feat"));
        r.losses.l_total = Real(parse_real(f[5], "l_total"));
        rows.push_back(r);
    }
    return rows;
}

template <typename Real>
void write_metrics_csv(std::ostream& out, const std::vector<eval::MetricRow<Real>>& rows) {
    out << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        out << csv_field(r.pair_id) << ',' << csv_field(r.transform) << ','
            << format_real(static_cast<double>(r.l2)) << ','
            << format_real(static_cast<double>(r.psnr)) << ','
            << format_real(static_cast<double>(r.ism)) << '\n';
    }
}

template <typename Real>
void write_metrics_csv_file(const std::string& path, const std::vector<eval::MetricRow<Real>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open metrics csv for writing: " + path);
    write_metrics_csv(out, rows);
    if (!out) throw NumericError("short write on metrics csv: " + path);
}

template <typename Real>
std::vector<eval::MetricRow<Real>> read_metrics_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open metrics csv: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader)
        throw ConfigError("metrics csv header mismatch in " + path);
    std::vector<eval::MetricRow<Real>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 5) throw ConfigError("metrics csv row arity mismatch in " + path);
        eval::MetricRow<Real> r;
        r.pair_id = f[0];
        r.transform = f[1];
        r.l2 = Real(parse_real(f[2], "l2"));
        r.psnr = Real(parse_real(f[3], "psnr"));
        r.ism = Real(parse_real(f[4], "ism"));
        rows.push_back(r);
    }
    return rows;
}

// one object per line, keys in csv column order; nlohmann prints doubles
// with shortest-round-trip precision, so reload is exact here too
template <typename Real>
void write_metrics_jsonl(std::ostream& out, const std::vector<eval::MetricRow<Real>>& rows) {
    for (const auto& r : rows) {
        nlohmann::ordered_json j;
        j["pair_id"] = r.pair_id;
        j["transform"] = r.transform;
        j["l2"] = static_cast<double>(r.l2);
        j["psnr"] = static_cast<double>(r.psnr);
        j["ism"] = static_cast<double>(r.ism);
        out << j.dump() << '\n';
    }
}

template <typename Real>
void write_metrics_jsonl_file(const std::string& path,
                              const std::vector<eval::MetricRow<Real>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open metrics jsonl for writing: " + path);
    write_metrics_jsonl(out, rows);
    if (!out) throw NumericError("short write on metrics jsonl: " + path);
}

template <typename Real>
std::vector<eval::MetricRow<Real>> read_metrics_jsonl_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open metrics jsonl: " + path);
    std::vector<eval::MetricRow<Real>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ConfigError("malformed jsonl row in " + path);
        eval::MetricRow<Real> r;
        r.pair_id = j.at("pair_id").get<std::string>();
        r.transform = j.at("transform").get<std::string>();
        r.l2 = Real(j.at("l2").get<double>());
        r.psnr = Real(j.at("psnr").get<double>());
        r.ism = Real(j.at("ism").get<double>());
        rows.push_back(r);
    }
    return rows;
}

}  // namespace voidkit::io
