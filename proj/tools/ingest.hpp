#pragma once

// Long-format CSV panels and the JSON blocks spec that describes them.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fclr/design.hpp"
#include "fclr/error.hpp"

namespace fclr::io {

inline constexpr int blocks_spec_version = 1;

enum class ValueKind { shares, counts };
enum class GridPolicy { intersect, error };

struct BlockDecl {
    std::string name;
    std::vector<std::string> parts; // series names in the data file
};

struct BlocksSpec {
    int version = blocks_spec_version;
    std::string response;
    ValueKind values = ValueKind::shares;
    double zero_replacement = 0.5;
    std::vector<BlockDecl> blocks;
    std::vector<std::string> controls;
};

inline Error input_error(const std::string& what) { return Error(ErrorKind::input, what); }

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double x)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) {
        s.remove_suffix(1);
    }
    if (!s.empty() && s.front() == '+') {
        s.remove_prefix(1);
    }
    double x = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(x)) {
        return std::nullopt;
    }
    return x;
}

inline BlocksSpec parse_blocks_spec(const nlohmann::json& j)
{
    if (!j.is_object()) {
        throw input_error("blocks spec must be a JSON object");
    }
    auto str_list = [](const nlohmann::json& a, const std::string& key) {
        if (!a.is_array()) {
            throw input_error("blocks spec: '" + key + "' must be an array of strings");
        }
        std::vector<std::string> out;
        for (const auto& e : a) {
            if (!e.is_string()) {
                throw input_error("blocks spec: '" + key + "' must be an array of strings");
            }
            out.push_back(e.get<std::string>());
        }
        return out;
    };
    BlocksSpec s;
    try {
        if (!j.contains("version") || !j["version"].is_number_integer()) {
            throw input_error("blocks spec: missing integer 'version'");
        }
        s.version = j["version"].get<int>();
        if (s.version != blocks_spec_version) {
            throw input_error("blocks spec: unsupported version " + std::to_string(s.version));
        }
        if (!j.contains("response") || !j["response"].is_string()) {
            throw input_error("blocks spec: missing string 'response'");
        }
        s.response = j["response"].get<std::string>();
        const std::string kind = j.value("values", std::string("shares"));
        if (kind == "shares") {
            s.values = ValueKind::shares;
        } else if (kind == "counts") {
            s.values = ValueKind::counts;
        } else {
            throw input_error("blocks spec: 'values' must be \"shares\" or \"counts\", got \"" + kind + "\"");
        }
        s.zero_replacement = j.value("zero_replacement", 0.5);
        if (!(s.zero_replacement > 0.0)) {
            throw input_error("blocks spec: 'zero_replacement' must be positive");
        }
        if (!j.contains("blocks") || !j["blocks"].is_array() || j["blocks"].empty()) {
            throw input_error("blocks spec: 'blocks' must be a non-empty array");
        }
        for (const auto& b : j["blocks"]) {
            if (!b.is_object() || !b.contains("name") || !b["name"].is_string() || !b.contains("parts")) {
                throw input_error("blocks spec: every block needs 'name' and 'parts'");
            }
            BlockDecl d{b["name"].get<std::string>(), str_list(b["parts"], "parts")};
            if (d.parts.size() < 2) {
                throw input_error("blocks spec: block '" + d.name + "' needs at least 2 parts");
            }
            s.blocks.push_back(std::move(d));
        }
        if (j.contains("controls")) {
            s.controls = str_list(j["controls"], "controls");
        }
    } catch (const nlohmann::json::exception& e) {
        throw input_error(std::string("blocks spec: ") + e.what());
    }
    std::set<std::string> seen{s.response};
    std::set<std::string> block_names;
    auto claim = [&](const std::string& name) {
        if (!seen.insert(name).second) {
            throw input_error("blocks spec: series '" + name + "' is declared more than once");
        }
    };
    for (const auto& b : s.blocks) {
        if (!block_names.insert(b.name).second) {
            throw input_error("blocks spec: duplicate block name '" + b.name + "'");
        }
        for (const auto& part : b.parts) {
            claim(part);
        }
    }
    for (const auto& c : s.controls) {
        claim(c);
    }
    return s;
}

inline nlohmann::json to_json(const BlocksSpec& s)
{
    nlohmann::json j;
    j["version"] = s.version;
    j["response"] = s.response;
    j["values"] = s.values == ValueKind::counts ? "counts" : "shares";
    if (s.values == ValueKind::counts) {
        j["zero_replacement"] = s.zero_replacement;
    }
    j["blocks"] = nlohmann::json::array();
    for (const auto& b : s.blocks) {
        j["blocks"].push_back({{"name", b.name}, {"parts", b.parts}});
    }
    j["controls"] = s.controls;
    return j;
}

inline BlocksSpec load_blocks_spec(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw input_error("cannot open blocks spec '" + path + "'");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw input_error("blocks spec '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_blocks_spec(j);
}

/// Splits one CSV record; double quotes may wrap a field and "" escapes a quote.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t row)
{
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
        } else if (c == '"' && field.empty()) {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else {
            field += c;
        }
    }
    if (quoted) {
        throw input_error("row " + std::to_string(row) + ": unterminated quoted field");
    }
    out.push_back(std::move(field));
    return out;
}

inline std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        out += c == '"' ? std::string("\"\"") : std::string(1, c);
    }
    return out + "\"";
}

/// Reads a long-format panel. Errors name the file row (the header is row 1).
inline FunctionalPanel ingest_dataset(std::istream& in, const BlocksSpec& spec, GridPolicy policy = GridPolicy::error)
{
    // Series slot: 0 response, then block parts in order, then controls.
    std::map<std::string, std::size_t> slot{{spec.response, 0}};
    std::vector<std::string> slot_name{spec.response};
    for (const auto& b : spec.blocks) {
        for (const auto& part : b.parts) {
            slot.emplace(part, slot_name.size());
            slot_name.push_back(part);
        }
    }
    for (const auto& c : spec.controls) {
        slot.emplace(c, slot_name.size());
        slot_name.push_back(c);
    }
    const std::size_t S = slot_name.size();

    struct Cell {
        double value;
        std::size_t row;
    };
    std::vector<std::string> units;
    std::map<std::string, std::size_t> unit_index;
    std::map<double, std::map<std::pair<std::size_t, std::size_t>, Cell>> cells; // time -> (unit, slot)

    std::string line;
    std::size_t row = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!header) {
            if (row == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) {
                line.erase(0, 3);
            }
            if (line != "unit,time,series,value") {
                throw input_error("row 1: expected header 'unit,time,series,value'");
            }
            header = true;
            continue;
        }
        if (line.empty()) {
            continue;
        }
        const auto f = split_csv_line(line, row);
        const std::string at = "row " + std::to_string(row) + ": ";
        if (f.size() != 4) {
            throw input_error(at + "expected 4 fields, found " + std::to_string(f.size()));
        }
        const auto t = parse_double(f[1]);
        if (!t) {
            throw input_error(at + "time '" + f[1] + "' is not a number");
        }
        const auto it = slot.find(f[2]);
        if (it == slot.end()) {
            throw input_error(at + "unknown series '" + f[2] + "'");
        }
        const auto v = parse_double(f[3]);
        if (!v) {
            throw input_error(at + "value '" + f[3] + "' is not a number");
        }
        auto [u, fresh] = unit_index.emplace(f[0], units.size());
        if (fresh) {
            units.push_back(f[0]);
        }
        auto [pos, added] = cells[*t].emplace(std::pair{u->second, it->second}, Cell{*v, row});
        if (!added) {
            throw input_error(at + "duplicate cell (unit " + f[0] + ", time " + f[1] + ", series " + f[2] +
                              ") first seen on row " + std::to_string(pos->second.row));
        }
    }
    if (!header) {
        throw input_error("data file is empty");
    }
    if (units.empty()) {
        throw input_error("data file has no records");
    }

    const std::size_t n = units.size();
    std::vector<double> grid;
    for (const auto& [t, by_cell] : cells) {
        bool complete = by_cell.size() == n * S;
        if (!complete && policy == GridPolicy::error) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t s = 0; s < S; ++s) {
                    if (!by_cell.count({i, s})) {
                        throw input_error("missing cell: unit " + units[i] + ", time " + format_double(t) +
                                          ", series " + slot_name[s]);
                    }
                }
            }
        }
        if (complete) {
            grid.push_back(t);
        }
    }
    if (grid.size() < 2) {
        throw Error(ErrorKind::insufficient_grid,
                    "only " + std::to_string(grid.size()) + " time point(s) are observed for every unit and series");
    }

    const auto V = grid.size();
    const auto ni = static_cast<Eigen::Index>(n);
    FunctionalPanel panel;
    panel.units = units;
    panel.grid = grid;
    panel.response.resize(ni, static_cast<Eigen::Index>(V));
    panel.control_names = spec.controls;
    for (std::size_t v = 0; v < V; ++v) {
        const auto& by_cell = cells.at(grid[v]);
        for (std::size_t i = 0; i < n; ++i) {
            panel.response(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v)) = by_cell.at({i, 0}).value;
        }
    }
    std::size_t next = 1;
    for (const auto& b : spec.blocks) {
        CompositionBlock block{b.name, b.parts, {}};
        const auto pj = static_cast<Eigen::Index>(b.parts.size());
        for (std::size_t v = 0; v < V; ++v) {
            const auto& by_cell = cells.at(grid[v]);
            Eigen::MatrixXd x(ni, pj);
            for (std::size_t i = 0; i < n; ++i) {
                std::string rows;
                for (Eigen::Index l = 0; l < pj; ++l) {
                    const Cell& c = by_cell.at({i, next + static_cast<std::size_t>(l)});
                    x(static_cast<Eigen::Index>(i), l) = c.value;
                    rows += (l ? "," : "") + std::to_string(c.row);
                }
                const auto xi = x.row(static_cast<Eigen::Index>(i));
                const std::string where = "block '" + b.name + "', unit " + units[i] + ", time " +
                                          format_double(grid[v]) + " (rows " + rows + "): ";
                if ((xi.array() < 0.0).any()) {
                    throw input_error(where + "negative value");
                }
                if (spec.values == ValueKind::counts) {
                    if (!(xi.sum() > 0.0)) {
                        throw input_error(where + "all counts are zero");
                    }
                } else {
                    if (std::abs(xi.sum() - 1.0) > 1e-6) {
                        throw input_error(where + "shares sum to " + format_double(xi.sum()) + ", not 1");
                    }
                    if ((xi.array() == 0.0).any()) {
                        throw input_error(where + "zero share; supply counts to apply zero replacement");
                    }
                }
            }
            if (spec.values == ValueKind::counts) {
                x = close(zero_replace(x, spec.zero_replacement));
            }
            block.shares.push_back(std::move(x));
        }
        next += b.parts.size();
        panel.blocks.push_back(std::move(block));
    }
    if (!spec.controls.empty()) {
        for (std::size_t v = 0; v < V; ++v) {
            const auto& by_cell = cells.at(grid[v]);
            Eigen::MatrixXd c(ni, static_cast<Eigen::Index>(spec.controls.size()));
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t s = 0; s < spec.controls.size(); ++s) {
                    c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) = by_cell.at({i, next + s}).value;
                }
            }
            panel.controls.push_back(std::move(c));
        }
    }
    panel.validate();
    return panel;
}

inline FunctionalPanel ingest_dataset(const std::string& data_path, const BlocksSpec& spec,
                                      GridPolicy policy = GridPolicy::error)
{
    std::ifstream in(data_path);
    if (!in) {
        throw input_error("cannot open data file '" + data_path + "'");
    }
    return ingest_dataset(in, spec, policy);
}

/// Blocks spec describing an exported panel: closed shares under the
/// panel's own part names.
inline BlocksSpec export_spec(const FunctionalPanel& panel, const std::string& response)
{
    BlocksSpec s;
    s.response = response;
    s.values = ValueKind::shares;
    for (const auto& b : panel.blocks) {
        s.blocks.push_back({b.name, b.parts});
    }
    s.controls = panel.control_names;
    return s;
}

/// Writes the panel in long format, one record per (unit, time, series).
inline void export_panel(const FunctionalPanel& panel, const std::string& response, std::ostream& out)
{
    out << "unit,time,series,value\n";
    for (Eigen::Index i = 0; i < panel.n(); ++i) {
        const std::string unit = csv_field(panel.units.empty() ? std::to_string(i)
                                                                : panel.units[static_cast<std::size_t>(i)]);
        for (std::size_t v = 0; v < panel.n_times(); ++v) {
            const auto vi = static_cast<Eigen::Index>(v);
            const std::string prefix = unit + "," + format_double(panel.grid[v]) + ",";
            out << prefix << csv_field(response) << "," << format_double(panel.response(i, vi)) << "\n";
            for (const auto& b : panel.blocks) {
                for (std::size_t l = 0; l < b.parts.size(); ++l) {
                    out << prefix << csv_field(b.parts[l]) << ","
                        << format_double(b.shares[v](i, static_cast<Eigen::Index>(l))) << "\n";
                }
            }
            for (std::size_t c = 0; c < panel.control_names.size(); ++c) {
                out << prefix << csv_field(panel.control_names[c]) << ","
                    << format_double(panel.controls[v](i, static_cast<Eigen::Index>(c))) << "\n";
            }
        }
    }
}

} // namespace fclr::io
