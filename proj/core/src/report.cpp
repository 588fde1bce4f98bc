#include "spade/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "spade/text_format.hpp"

namespace spade {

namespace {

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// Derived plot columns carry ten significant digits.
std::string plot_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

double percent_change(double base, double variant) {
    if (base == 0.0) throw std::invalid_argument("report: base value is zero, percent change undefined");
    return 100.0 * (variant - base) / base;
}

std::string first_content_line(const std::string& text) {
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        auto line = text.substr(start, end - start);
        if (line.find_first_not_of(" \t\r") != std::string::npos) return line;
        start = end + 1;
    }
    return {};
}

std::vector<EvalReport> reports_from_text(const std::string& text) {
    std::vector<EvalReport> out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(EvalReport::from_json(line));
        } catch (const std::exception& e) {
            throw std::runtime_error("report line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::string pad(const std::string& s, std::size_t width) {
    return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

std::string render(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(rows.front().size(), 0);
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    std::string out;
    for (const auto& r : rows) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            if (c) out += "  ";
            out += c == 0 ? r[c] + std::string(width[c] - r[c].size(), ' ') : pad(r[c], width[c]);
        }
        out += '\n';
    }
    return out;
}

std::string to_csv(const std::vector<std::vector<std::string>>& rows) {
    std::string out;
    for (const auto& r : rows) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            if (c) out += ',';
            out += r[c];
        }
        out += '\n';
    }
    return out;
}

std::vector<std::vector<std::string>> absolute_rows(const std::vector<EvalReport>& reports) {
    std::vector<std::vector<std::string>> rows{
        {"model", "depth", "params", "bytes", "ter_percent", "tokens_per_second", "eval_samples"}};
    for (const auto& r : reports) {
        rows.push_back({r.name, std::to_string(r.depth), std::to_string(r.param_count), std::to_string(r.param_bytes),
                        fixed(100.0 * r.error_rate, 2), fixed(r.tokens_per_second, 1), std::to_string(r.n_samples)});
    }
    return rows;
}

std::vector<std::vector<std::string>> delta_rows(const std::vector<EvalReport>& reports) {
    std::vector<std::vector<std::string>> rows{
        {"base", "variant", "depth", "params", "bytes", "throughput", "speedup", "ter_delta_points"}};
    for (std::size_t i = 1; i < reports.size(); ++i) {
        const auto d = compute_delta(reports.front(), reports[i]);
        rows.push_back({d.base, d.variant, signed_percent(d.depth_change), signed_percent(d.param_change),
                        signed_percent(d.bytes_change), signed_percent(d.throughput_change), fixed(d.speedup, 2) + "x",
                        signed_points(d.ter_delta)});
    }
    return rows;
}

std::vector<double> min_max(const std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    std::vector<double> out(v.size(), 0.0);
    if (*hi > *lo)
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / (*hi - *lo);
    return out;
}

std::string stem_of(const std::filesystem::path& p) { return p.stem().string(); }

}  // namespace

ReportInputKind detect_input_kind(const std::string& text) {
    const auto line = first_content_line(text);
    if (line.empty()) throw std::runtime_error("empty input");
    if (line.front() == '#') return ReportInputKind::profile;
    if (line.find("\"tokens_per_second\"") != std::string::npos) return ReportInputKind::eval_report;
    if (line.find("\"step\"") != std::string::npos) return ReportInputKind::train_log;
    throw std::runtime_error("line 1: unrecognized input format");
}

ReportInputs load_report_inputs(const std::vector<std::filesystem::path>& paths) {
    if (paths.empty()) throw std::invalid_argument("report: at least one input is required");
    ReportInputs in;
    for (const auto& p : paths) {
        const auto text = read_text_file(p);
        try {
            switch (detect_input_kind(text)) {
                case ReportInputKind::eval_report:
                    for (auto& r : reports_from_text(text)) {
                        if (r.name.empty()) r.name = stem_of(p);
                        in.reports.push_back(std::move(r));
                    }
                    break;
                case ReportInputKind::profile:
                    in.profiles.emplace_back(stem_of(p), profile_from_text(text));
                    break;
                case ReportInputKind::train_log:
                    in.logs.emplace_back(stem_of(p), log_from_text(text));
                    break;
            }
        } catch (const std::exception& e) {
            throw std::runtime_error(p.string() + ": " + e.what());
        }
    }
    return in;
}

std::string signed_percent(double percent) {
    auto s = fixed(percent, 1);
    if (s == "-0.0" || s == "0.0") return "0.0%";
    return (s.front() == '-' ? s : "+" + s) + "%";
}

std::string signed_points(double points) {
    auto s = fixed(points, 2);
    if (s == "-0.00" || s == "0.00") return "0.00";
    return s.front() == '-' ? s : "+" + s;
}

DeltaRow compute_delta(const EvalReport& base, const EvalReport& variant) {
    DeltaRow d;
    d.base = base.name;
    d.variant = variant.name;
    d.depth_change = percent_change(static_cast<double>(base.depth), static_cast<double>(variant.depth));
    d.param_change = percent_change(static_cast<double>(base.param_count), static_cast<double>(variant.param_count));
    d.bytes_change = percent_change(static_cast<double>(base.param_bytes), static_cast<double>(variant.param_bytes));
    d.throughput_change = percent_change(base.tokens_per_second, variant.tokens_per_second);
    d.speedup = variant.tokens_per_second / base.tokens_per_second;
    d.ter_delta = 100.0 * (variant.error_rate - base.error_rate);
    return d;
}

std::string absolute_table(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("report: no evaluation records");
    return render(absolute_rows(reports));
}

std::string delta_table(const std::vector<EvalReport>& reports) {
    if (reports.size() < 2) throw std::invalid_argument("report: delta table needs a base and a variant");
    return render(delta_rows(reports));
}

std::string importance_plot_csv(const ImportanceProfile& profile) {
    const auto wn = min_max(profile.wli);
    const auto cn = min_max(profile.cli);
    std::vector<std::vector<std::string>> rows{{"layer_index", "wli", "cli", "wli_minmax", "cli_minmax"}};
    for (std::size_t l = 0; l < profile.n_layers(); ++l) {
        rows.push_back({std::to_string(l), format_double(profile.wli[l]), format_double(profile.cli[l]),
                        plot_number(wn[l]), plot_number(cn[l])});
    }
    return to_csv(rows);
}

std::string training_curve_csv(const std::vector<TrainLogRecord>& log) {
    std::vector<std::vector<std::string>> rows{
        {"step", "tokens_seen", "learning_rate", "total", "ce", "logit", "latent", "attention", "embedding", "eval_ter"}};
    for (const auto& r : log) {
        rows.push_back({std::to_string(r.step), std::to_string(r.tokens_seen), format_double(r.learning_rate),
                        format_double(r.loss.total), format_double(r.loss.ce), format_double(r.loss.logit),
                        format_double(r.loss.latent), format_double(r.loss.attention), format_double(r.loss.embedding),
                        r.eval_error_rate ? format_double(*r.eval_error_rate) : std::string{}});
    }
    return to_csv(rows);
}

ReportFiles build_report(const ReportInputs& inputs) {
    ReportFiles out;
    if (!inputs.reports.empty()) {
        out.files.emplace_back("absolute.csv", to_csv(absolute_rows(inputs.reports)));
        out.summary += "Models\n" + absolute_table(inputs.reports);
        if (inputs.reports.size() >= 2) {
            out.files.emplace_back("delta.csv", to_csv(delta_rows(inputs.reports)));
            out.summary += "\nRelative to " + inputs.reports.front().name + "\n" + delta_table(inputs.reports);
        }
    }
    for (const auto& [name, profile] : inputs.profiles) {
        out.files.emplace_back("importance_" + name + ".csv", importance_plot_csv(profile));
        out.summary += "\nLayer importance (" + name + ", base TER " + fixed(100.0 * profile.base_error_rate, 2) +
                       "%, spearman " + fixed(spearman(profile.wli, profile.cli), 3) + ")\n";
        std::vector<std::vector<std::string>> rows{{"layer", "wli", "cli"}};
        for (std::size_t l = 0; l < profile.n_layers(); ++l)
            rows.push_back({std::to_string(l), fixed(profile.wli[l], 4), fixed(profile.cli[l], 4)});
        out.summary += render(rows);
    }
    for (const auto& [name, log] : inputs.logs) {
        out.files.emplace_back("curve_" + name + ".csv", training_curve_csv(log));
        if (!log.empty()) {
            const auto& last = log.back();
            out.summary += "\nTraining log " + name + ": " + std::to_string(last.step) + " steps, loss " +
                           fixed(last.loss.total, 4) +
                           (last.eval_error_rate ? ", eval TER " + fixed(100.0 * *last.eval_error_rate, 2) + "%" : "") +
                           "\n";
        }
    }
    return out;
}

void write_report(const ReportFiles& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& [name, contents] : report.files) write_text_file(dir / name, contents);
    write_text_file(dir / "summary.txt", report.summary);
}

}  // namespace spade
