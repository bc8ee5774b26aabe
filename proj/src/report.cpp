#include "soft/report.hpp"

#include "soft/error.hpp"
#include "soft/probes.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

namespace soft {

namespace {

json read_artifact(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ArtifactError(path.string(), "missing");
    try {
        return read_json(path);
    } catch (const std::exception& e) {
        throw ArtifactError(path.string(), e.what());
    }
}

// Fixed-format number rendering so output bytes never depend on the locale or
// on the JSON library's shortest-repr choice.
std::string fmt(std::optional<double> v) {
    if (!v) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", *v);
    return buf;
}

json opt_json(std::optional<double> v) { return v ? json(*v) : json(nullptr); }

}  // namespace

RunSummary RunSummary::load(const std::filesystem::path& run_dir) {
    const auto history_path = run_dir / "history.json";
    const auto history = read_artifact(history_path);
    RunSummary summary;
    try {
        summary.stop_reason = history.at("stop_reason").get<std::string>();
    } catch (const json::exception& e) {
        throw ArtifactError(history_path.string(), e.what());
    }
    const auto rounds = history.value("rounds", json::array());
    for (std::size_t i = 0; i < rounds.size(); ++i) {
        SummaryRow row;
        std::size_t t = 0;
        try {
            t = rounds[i].at("round_index").get<std::size_t>();
            row.prompts_consumed = rounds[i].at("prompts_consumed").get<std::size_t>();
        } catch (const json::exception& e) {
            throw ArtifactError(history_path.string(), e.what());
        }
        if (t != i) throw ArtifactError(history_path.string(), "round indices are not 0..n-1");
        row.round = t;
        const auto probes_path = run_dir / "rounds" / std::to_string(t) / "probes.json";
        ProbeReport report;
        try {
            report = ProbeReport::from_json(read_artifact(probes_path));
        } catch (const ArtifactError&) {
            throw;
        } catch (const std::exception& e) {
            throw ArtifactError(probes_path.string(), e.what());
        }
        row.refusal_rate = report.refusal_rate;
        row.avg_output_length = report.avg_output_length;
        row.tail_mass = report.tail_mass;
        if (report.eos_choice) row.eos_choice_prob = report.eos_choice->mean_eos_prob();
        if (report.eos_gen) row.eos_gen_avg = report.eos_gen->avg_eos_prob;
        row.verdict = report.verdict;
        summary.rows.push_back(std::move(row));
    }
    return summary;
}

std::vector<std::size_t> RunSummary::tail_ks() const {
    std::set<std::size_t> ks;
    for (const auto& r : rows) {
        for (const auto& [k, _] : r.tail_mass) ks.insert(k);
    }
    return {ks.begin(), ks.end()};
}

json RunSummary::to_json() const {
    json out_rows = json::array();
    for (const auto& r : rows) {
        json tail = json::object();
        for (const auto& [k, v] : r.tail_mass) tail[std::to_string(k)] = v;
        out_rows.push_back({{"round", r.round},
                            {"prompts_consumed", r.prompts_consumed},
                            {"refusal_rate", opt_json(r.refusal_rate)},
                            {"avg_output_length", opt_json(r.avg_output_length)},
                            {"tail_mass", std::move(tail)},
                            {"eos_choice_prob", opt_json(r.eos_choice_prob)},
                            {"eos_gen_avg", opt_json(r.eos_gen_avg)},
                            {"verdict", r.verdict}});
    }
    return {{"schema_version", kSchemaVersion}, {"stop_reason", stop_reason}, {"rounds", std::move(out_rows)}};
}

namespace {

std::vector<std::string> header_cells(const std::vector<std::size_t>& ks) {
    std::vector<std::string> h{"round", "prompts_consumed", "refusal_rate", "avg_output_length"};
    for (auto k : ks) h.push_back("tail_mass_k" + std::to_string(k));
    h.insert(h.end(), {"eos_choice_prob", "eos_gen_avg", "verdict"});
    return h;
}

std::vector<std::string> row_cells(const SummaryRow& r, const std::vector<std::size_t>& ks) {
    std::vector<std::string> c{std::to_string(r.round), std::to_string(r.prompts_consumed), fmt(r.refusal_rate),
                               fmt(r.avg_output_length)};
    for (auto k : ks) {
        auto it = r.tail_mass.find(k);
        c.push_back(it == r.tail_mass.end() ? "" : fmt(it->second));
    }
    c.insert(c.end(), {fmt(r.eos_choice_prob), fmt(r.eos_gen_avg), r.verdict ? "pass" : "fail"});
    return c;
}

}  // namespace

std::string RunSummary::to_csv() const {
    const auto ks = tail_ks();
    std::vector<std::vector<std::string>> lines{header_cells(ks)};
    for (const auto& r : rows) lines.push_back(row_cells(r, ks));
    std::string out;
    for (const auto& cells : lines) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += ',';
            out += cells[i];
        }
        out += '\n';
    }
    return out;
}

std::string RunSummary::to_table() const {
    const auto ks = tail_ks();
    std::vector<std::vector<std::string>> lines{header_cells(ks)};
    for (const auto& r : rows) lines.push_back(row_cells(r, ks));
    std::vector<std::size_t> width(lines[0].size(), 0);
    for (const auto& cells : lines) {
        for (std::size_t i = 0; i < cells.size(); ++i) width[i] = std::max(width[i], cells[i].empty() ? 1 : cells[i].size());
    }
    std::ostringstream out;
    for (std::size_t li = 0; li < lines.size(); ++li) {
        for (std::size_t i = 0; i < lines[li].size(); ++i) {
            const auto& cell = lines[li][i].empty() ? std::string("-") : lines[li][i];
            if (i) out << "  ";
            out << cell << std::string(width[i] - cell.size(), ' ');
        }
        out << '\n';
        if (li == 0) {
            for (std::size_t i = 0; i < width.size(); ++i) out << (i ? "  " : "") << std::string(width[i], '-');
            out << '\n';
        }
    }
    out << "stop_reason: " << stop_reason << '\n';
    return out.str();
}

ReportFormat report_format_from_string(const std::string& text) {
    if (text == "table") return ReportFormat::table;
    if (text == "json") return ReportFormat::json;
    if (text == "csv") return ReportFormat::csv;
    throw ConfigError("unknown report format '" + text + "' (expected table, json or csv)");
}

std::string render_report(const RunSummary& summary, ReportFormat format) {
    switch (format) {
        case ReportFormat::table: return summary.to_table();
        case ReportFormat::csv: return summary.to_csv();
        case ReportFormat::json: return summary.to_json().dump(2) + "\n";
    }
    return {};
}

}  // namespace soft
