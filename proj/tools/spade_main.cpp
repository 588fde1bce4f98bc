// spade: layer pruning and distillation pipeline for small decoder-only models.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "spade/experiment.hpp"
#include "spade/report.hpp"
#include "spade/text_format.hpp"

namespace {

using nlohmann::json;

// "a.b.c=value": value is parsed as JSON when possible, otherwise taken as a string.
void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + assignment + "' is not key=value");
    std::string pointer = "/" + assignment.substr(0, eq);
    for (auto& c : pointer)
        if (c == '.') c = '/';
    const auto raw = assignment.substr(eq + 1);
    const json::json_pointer ptr(pointer);
    if (!j.contains(ptr)) throw std::invalid_argument("unknown config key '" + assignment.substr(0, eq) + "'");
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    j[ptr] = value;
}

struct Globals {
    std::string config_path;
    std::string dir;
    std::vector<std::string> overrides;
    long long seed = -1;
    long long workers = -1;
};

spade::ExperimentConfig resolve(const Globals& g) {
    auto config = g.config_path.empty() ? spade::ExperimentConfig{} : spade::ExperimentConfig::load(g.config_path);
    json j = json::parse(config.to_json());
    if (g.seed >= 0) j["seed"] = g.seed;
    if (g.workers >= 0) j["workers"] = g.workers;
    for (const auto& o : g.overrides) apply_override(j, o);
    config = spade::ExperimentConfig::from_json(j.dump());
    std::filesystem::path base = g.dir;
    if (base.empty()) base = g.config_path.empty() ? std::filesystem::current_path()
                                                   : std::filesystem::absolute(g.config_path).parent_path();
    config.resolve_paths(base);
    if (!g.dir.empty()) std::filesystem::create_directories(base);
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layer pruning with distillation-based healing for decoder-only transformers"};
    app.require_subcommand(1);

    Globals g;
    app.add_option("-c,--config", g.config_path, "Experiment config file (JSON)")->check(CLI::ExistingFile);
    app.add_option("-d,--dir", g.dir, "Directory that relative artifact paths resolve against");
    app.add_option("-s,--set", g.overrides, "Config override, e.g. teacher_train.steps=200")->take_all();
    app.add_option("--seed", g.seed, "Global seed");
    app.add_option("-j,--workers", g.workers, "Worker threads for evaluation");

    auto* show = app.add_subcommand("show-config", "Print the effective configuration");
    auto* gen = app.add_subcommand("gen-corpus", "Generate train and eval corpora");
    auto* train = app.add_subcommand("train-teacher", "Train the teacher from scratch");
    auto* importance = app.add_subcommand("importance", "Score layer importance (WLI and CLI)");

    auto* prune = app.add_subcommand("prune", "Prune the teacher to a shallower student");
    std::size_t keep = 0;
    std::string criterion;
    prune->add_option("--keep", keep, "Layers to retain");
    prune->add_option("--criterion", criterion, "Importance criterion")->check(CLI::IsMember({"wli", "cli"}));

    auto* heal = app.add_subcommand("heal", "Distill the pruned student from the teacher");
    std::string target_mode;
    long long heal_steps = -1;
    std::vector<std::string> disable_terms;
    heal->add_option("--target-mode", target_mode, "Latent target mapping")
        ->check(CLI::IsMember({"dynamic", "same_index"}));
    heal->add_option("--steps", heal_steps, "Healing steps");
    heal->add_option("--disable", disable_terms, "Loss terms to disable")
        ->check(CLI::IsMember({"ce", "logit", "latent", "attention", "embedding"}));

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string checkpoint, report_out, name;
    eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    eval->add_option("-o,--out", report_out, "Write the evaluation record here");
    eval->add_option("-n,--name", name, "Model name in the record");

    auto* report = app.add_subcommand("report", "Build comparison tables and plot data");
    std::vector<std::string> inputs;
    std::string out_dir;
    report->add_option("inputs", inputs, "Evaluation records, profiles and training logs")->required();
    report->add_option("-o,--out-dir", out_dir, "Directory for CSV outputs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*report) {
            std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
            const auto files = spade::build_report(spade::load_report_inputs(paths));
            std::cout << files.summary;
            if (!out_dir.empty()) spade::write_report(files, out_dir);
            return EXIT_SUCCESS;
        }

        if (*prune) {
            if (keep) g.overrides.push_back("prune.keep=" + std::to_string(keep));
            if (!criterion.empty()) g.overrides.push_back("prune.criterion=\"" + criterion + "\"");
        }
        if (*heal) {
            if (!target_mode.empty()) g.overrides.push_back("distill.target_mode=\"" + target_mode + "\"");
            if (heal_steps >= 0) g.overrides.push_back("distill.train.steps=" + std::to_string(heal_steps));
            for (const auto& t : disable_terms) g.overrides.push_back("distill.terms." + t + "=false");
        }
        const auto config = resolve(g);

        if (*show) {
            std::cout << config.to_json() << "\n";
        } else if (*gen) {
            spade::cmd_gen_corpus(config, std::cout);
        } else if (*train) {
            spade::cmd_train_teacher(config, std::cout);
        } else if (*importance) {
            spade::cmd_importance(config, std::cout);
        } else if (*prune) {
            spade::cmd_prune(config, std::cout);
        } else if (*heal) {
            spade::cmd_heal(config, std::cout);
        } else if (*eval) {
            if (name.empty()) name = std::filesystem::path(checkpoint).stem().string();
            spade::cmd_eval(config, checkpoint, report_out, name, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return EXIT_FAILURE;
    }
    return EXIT_SUCCESS;
}
