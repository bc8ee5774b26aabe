#pragma once

// Per-round diagnostic trends read back from a run directory.

#include "soft/io.hpp"

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace soft {

struct SummaryRow {
    std::size_t round = 0;
    std::size_t prompts_consumed = 0;
    std::optional<double> refusal_rate;
    std::optional<double> avg_output_length;
    std::map<std::size_t, double> tail_mass;
    std::optional<double> eos_choice_prob;
    std::optional<double> eos_gen_avg;
    bool verdict = true;
};

struct RunSummary {
    std::vector<SummaryRow> rows;
    std::string stop_reason;

    /// Reads history.json and rounds/<t>/probes.json for each recorded round.
    /// Missing or corrupt files raise ArtifactError naming the file.
    static RunSummary load(const std::filesystem::path& run_dir);

    /// Every K that appears in any row, ascending.
    std::vector<std::size_t> tail_ks() const;

    json to_json() const;
    std::string to_csv() const;
    std::string to_table() const;
};

enum class ReportFormat { table, json, csv };
ReportFormat report_format_from_string(const std::string& text);
std::string render_report(const RunSummary& summary, ReportFormat format);

}  // namespace soft
