#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "spade/distill.hpp"
#include "spade/importance.hpp"
#include "spade/metrics.hpp"

namespace spade {

enum class ReportInputKind { eval_report, profile, train_log };

/// Classifies a report input from its contents: profiles start with a
/// '#' header, evaluation records carry "tokens_per_second", training logs "step".
ReportInputKind detect_input_kind(const std::string& text);

struct ReportInputs {
    std::vector<EvalReport> reports;
    std::vector<std::pair<std::string, ImportanceProfile>> profiles;
    std::vector<std::pair<std::string, std::vector<TrainLogRecord>>> logs;
};

/// Loads and classifies each file. Evaluation files may hold one record per
/// line. Malformed input raises an error naming the file and line.
ReportInputs load_report_inputs(const std::vector<std::filesystem::path>& paths);

/// "+12.5%", "-50.0%", "0.0%".
std::string signed_percent(double percent);
/// Signed absolute difference in percentage points, e.g. "+0.68".
std::string signed_points(double points);

/// Change from a base model to a variant. Percentages are relative to the base.
struct DeltaRow {
    std::string base;
    std::string variant;
    double depth_change = 0.0;       // percent
    double param_change = 0.0;       // percent
    double bytes_change = 0.0;       // percent
    double throughput_change = 0.0;  // percent
    double speedup = 0.0;            // variant tokens/s over base tokens/s
    double ter_delta = 0.0;          // percentage points
};

DeltaRow compute_delta(const EvalReport& base, const EvalReport& variant);

/// Fixed-width table with one row per model variant.
std::string absolute_table(const std::vector<EvalReport>& reports);
/// One row per variant against the first report as base.
std::string delta_table(const std::vector<EvalReport>& reports);
/// layer_index, raw wli and cli, and both columns min-max normalized to [0, 1].
std::string importance_plot_csv(const ImportanceProfile& profile);
/// step, tokens_seen, loss columns and eval TER (empty when not sampled).
std::string training_curve_csv(const std::vector<TrainLogRecord>& log);

struct ReportFiles {
    std::vector<std::pair<std::string, std::string>> files;  // file name, contents
    std::string summary;                                      // human-readable tables
};

/// Assembles every table and plot-data file for the given inputs.
ReportFiles build_report(const ReportInputs& inputs);
void write_report(const ReportFiles& report, const std::filesystem::path& dir);

}  // namespace spade
