#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace bfm::report {

// Reads a JSON-lines metrics log. Blank lines are ignored.
std::vector<nlohmann::json> read_metrics(const std::filesystem::path& path);

// Polyline plot of `keys` against step; non-numeric entries are skipped.
std::string loss_curve_svg(const std::vector<nlohmann::json>& rows,
                           const std::vector<std::string>& keys, const std::string& title);

// Markdown table: per key, first / last / min / mean over the log.
std::string summary_table(const std::vector<nlohmann::json>& rows,
                          const std::vector<std::string>& keys);

// Writes losses.svg, regularizers.svg, lr.svg and summary.md into `out`.
std::vector<std::filesystem::path> write_report(const std::filesystem::path& metrics,
                                                const std::filesystem::path& out);

}  // namespace bfm::report
