#include "spade/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <ostream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "spade/checkpoint.hpp"
#include "spade/random.hpp"
#include "spade/text_format.hpp"

namespace spade {

namespace {

using nlohmann::json;

json train_json(const TrainConfig& t) {
    return {{"steps", t.steps},
            {"batch_size", t.batch_size},
            {"learning_rate", t.learning_rate},
            {"warmup_steps", t.warmup_steps},
            {"min_lr_ratio", t.min_lr_ratio},
            {"grad_clip", t.grad_clip},
            {"log_every", t.log_every},
            {"eval_every", t.eval_every}};
}

TrainConfig train_from(const json& j, TrainConfig t) {
    t.steps = j.value("steps", t.steps);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
    t.min_lr_ratio = j.value("min_lr_ratio", t.min_lr_ratio);
    t.grad_clip = j.value("grad_clip", t.grad_clip);
    t.log_every = j.value("log_every", t.log_every);
    t.eval_every = j.value("eval_every", t.eval_every);
    return t;
}

void require_file(const std::filesystem::path& p, const char* what) {
    if (!std::filesystem::exists(p)) throw std::runtime_error(std::string(what) + " not found: " + p.string());
}

Corpus eval_subset(const ExperimentConfig& config) {
    auto corpus = load_corpus(config.task_config(), config.paths.eval_corpus);
    if (corpus.size() > config.eval_samples) corpus.resize(config.eval_samples);
    if (corpus.empty()) throw std::runtime_error("evaluation corpus is empty");
    return corpus;
}

void check_model_task(const ModelParams& params, const ExperimentConfig& config) {
    if (params.config.vocab_size != config.task_config().vocabulary().size()) {
        throw std::runtime_error("checkpoint vocabulary " + std::to_string(params.config.vocab_size) +
                                 " does not match task vocabulary " +
                                 std::to_string(config.task_config().vocabulary().size()));
    }
}

EvalFn make_evaluator(const Corpus& eval, const Vocabulary& vocab, std::size_t workers) {
    return [&eval, vocab, workers](const ModelParams& p) { return corpus_error_rate(p, eval, vocab, {}, workers); };
}

LogFn progress_printer(std::ostream& log) {
    return [&log](const TrainLogRecord& r) {
        log << "step " << r.step << " loss " << r.loss.total;
        if (r.eval_error_rate) log << " TER " << *r.eval_error_rate;
        log << std::endl;
    };
}

}  // namespace

ModelConfig ExperimentConfig::model_config() const {
    ModelConfig m = model;
    m.vocab_size = task.vocabulary().size();
    m.seed = derive_seed(seed, "model.init");
    return m;
}

TaskConfig ExperimentConfig::task_config() const {
    TaskConfig t = task;
    t.train_seed = derive_seed(seed, "data.train");
    t.eval_seed = derive_seed(seed, "data.eval");
    t.max_seq_len = model.max_seq_len;
    return t;
}

TrainConfig ExperimentConfig::teacher_train_config() const {
    TrainConfig t = teacher_train;
    t.order_seed = derive_seed(seed, "order.teacher");
    return t;
}

DistillConfig ExperimentConfig::distill_config() const {
    DistillConfig d = distill;
    d.train.order_seed = derive_seed(seed, "order.heal");
    return d;
}

void ExperimentConfig::validate() const {
    model_config().validate();
    task_config().validate();
    distill_config().validate();
    if (train_samples == 0 || eval_samples == 0) throw std::invalid_argument("config: sample counts must be >= 1");
    if (teacher_train.batch_size == 0) throw std::invalid_argument("config: teacher batch_size must be >= 1");
    if (workers == 0) throw std::invalid_argument("config: workers must be >= 1");
    if (keep == 0) throw std::invalid_argument("config: keep must be >= 1");
}

void ExperimentConfig::resolve_paths(const std::filesystem::path& dir) {
    for (auto* p : {&paths.train_corpus, &paths.eval_corpus, &paths.teacher, &paths.teacher_log, &paths.profile,
                    &paths.student, &paths.plan, &paths.healed, &paths.heal_log}) {
        if (p->is_relative()) *p = dir / *p;
    }
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["workers"] = workers;
    j["model"] = {{"d_model", model.d_model},
                  {"n_heads", model.n_heads},
                  {"n_layers", model.n_layers},
                  {"d_ff", model.d_ff},
                  {"max_seq_len", model.max_seq_len}};
    j["task"] = {{"content_vocab", task.content_vocab},
                 {"min_len", task.min_len},
                 {"max_len", task.max_len},
                 {"n_speakers", task.n_speakers},
                 {"include_y1_in_loss", task.include_y1_in_loss}};
    j["corpus"] = {{"train_samples", train_samples}, {"eval_samples", eval_samples}};
    j["teacher_train"] = train_json(teacher_train);
    j["prune"] = {{"keep", keep}, {"criterion", to_string(criterion)}};
    j["distill"] = {{"alpha", distill.alpha},
                    {"skew_lambda", distill.skew_lambda},
                    {"target_mode", to_string(distill.target_mode)},
                    {"terms",
                     {{"ce", distill.terms.ce},
                      {"logit", distill.terms.logit},
                      {"latent", distill.terms.latent},
                      {"attention", distill.terms.attention},
                      {"embedding", distill.terms.embedding}}},
                    {"train", train_json(distill.train)}};
    j["eval"] = {{"throughput_prompts", throughput_prompts}, {"throughput_new_tokens", throughput_new_tokens}};
    j["paths"] = {{"train_corpus", paths.train_corpus.string()}, {"eval_corpus", paths.eval_corpus.string()},
                  {"teacher", paths.teacher.string()},           {"teacher_log", paths.teacher_log.string()},
                  {"profile", paths.profile.string()},           {"student", paths.student.string()},
                  {"plan", paths.plan.string()},                 {"healed", paths.healed.string()},
                  {"heal_log", paths.heal_log.string()}};
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    ExperimentConfig c;
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    if (j.contains("model")) {
        const auto& m = j["model"];
        c.model.d_model = m.value("d_model", c.model.d_model);
        c.model.n_heads = m.value("n_heads", c.model.n_heads);
        c.model.n_layers = m.value("n_layers", c.model.n_layers);
        c.model.d_ff = m.value("d_ff", c.model.d_ff);
        c.model.max_seq_len = m.value("max_seq_len", c.model.max_seq_len);
    }
    if (j.contains("task")) {
        const auto& t = j["task"];
        c.task.content_vocab = t.value("content_vocab", c.task.content_vocab);
        c.task.min_len = t.value("min_len", c.task.min_len);
        c.task.max_len = t.value("max_len", c.task.max_len);
        c.task.n_speakers = t.value("n_speakers", c.task.n_speakers);
        c.task.include_y1_in_loss = t.value("include_y1_in_loss", c.task.include_y1_in_loss);
    }
    if (j.contains("corpus")) {
        c.train_samples = j["corpus"].value("train_samples", c.train_samples);
        c.eval_samples = j["corpus"].value("eval_samples", c.eval_samples);
    }
    if (j.contains("teacher_train")) c.teacher_train = train_from(j["teacher_train"], c.teacher_train);
    if (j.contains("prune")) {
        c.keep = j["prune"].value("keep", c.keep);
        c.criterion = criterion_from_string(j["prune"].value("criterion", to_string(c.criterion)));
    }
    if (j.contains("distill")) {
        const auto& d = j["distill"];
        c.distill.alpha = d.value("alpha", c.distill.alpha);
        c.distill.skew_lambda = d.value("skew_lambda", c.distill.skew_lambda);
        c.distill.target_mode = target_mode_from_string(d.value("target_mode", to_string(c.distill.target_mode)));
        if (d.contains("terms")) {
            const auto& t = d["terms"];
            c.distill.terms.ce = t.value("ce", c.distill.terms.ce);
            c.distill.terms.logit = t.value("logit", c.distill.terms.logit);
            c.distill.terms.latent = t.value("latent", c.distill.terms.latent);
            c.distill.terms.attention = t.value("attention", c.distill.terms.attention);
            c.distill.terms.embedding = t.value("embedding", c.distill.terms.embedding);
        }
        if (d.contains("train")) c.distill.train = train_from(d["train"], c.distill.train);
    }
    if (j.contains("eval")) {
        c.throughput_prompts = j["eval"].value("throughput_prompts", c.throughput_prompts);
        c.throughput_new_tokens = j["eval"].value("throughput_new_tokens", c.throughput_new_tokens);
    }
    if (j.contains("paths")) {
        const auto& p = j["paths"];
        auto path = [&](const char* key, std::filesystem::path& out) {
            if (p.contains(key)) out = p[key].get<std::string>();
        };
        path("train_corpus", c.paths.train_corpus);
        path("eval_corpus", c.paths.eval_corpus);
        path("teacher", c.paths.teacher);
        path("teacher_log", c.paths.teacher_log);
        path("profile", c.paths.profile);
        path("student", c.paths.student);
        path("plan", c.paths.plan);
        path("healed", c.paths.healed);
        path("heal_log", c.paths.heal_log);
    }
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    try {
        return from_json(read_text_file(path));
    } catch (const json::exception& e) {
        throw std::runtime_error("config '" + path.string() + "': " + e.what());
    }
}

void cmd_gen_corpus(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    const auto task = config.task_config();
    save_corpus(config.paths.train_corpus, make_corpus(task, config.train_samples, Split::train));
    save_corpus(config.paths.eval_corpus, make_corpus(task, config.eval_samples, Split::eval));
    log << "wrote " << config.train_samples << " train samples to " << config.paths.train_corpus.string() << "\n"
        << "wrote " << config.eval_samples << " eval samples to " << config.paths.eval_corpus.string() << "\n";
}

double cmd_train_teacher(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    require_file(config.paths.train_corpus, "train corpus");
    require_file(config.paths.eval_corpus, "eval corpus");
    const auto task = config.task_config();
    const auto train = load_corpus(task, config.paths.train_corpus);
    const auto eval = eval_subset(config);
    const auto init = init_params(config.model_config());
    log << "training teacher: " << config.model.n_layers << " layers, " << param_count(init) << " parameters, "
        << config.teacher_train.steps << " steps\n";
    const auto result = train_supervised(init, train, config.teacher_train_config(),
                                         make_evaluator(eval, task.vocabulary(), config.workers), progress_printer(log));
    save_checkpoint(config.paths.teacher, result.params);
    write_text_file(config.paths.teacher_log, log_to_text(result.log));
    const double ter = result.log.back().eval_error_rate.value_or(std::nan(""));
    log << "teacher eval TER " << ter << " after " << result.tokens_seen << " training tokens\n";
    return ter;
}

ImportanceProfile cmd_importance(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    require_file(config.paths.teacher, "teacher checkpoint");
    const auto teacher = load_checkpoint(config.paths.teacher);
    check_model_task(teacher, config);
    const auto eval = eval_subset(config);
    auto profile = build_profile(teacher, eval, {config.workers, config.task_config().eval_seed});
    save_profile(config.paths.profile, profile);
    log << "base TER " << profile.base_error_rate << "\n";
    for (std::size_t l = 0; l < profile.n_layers(); ++l) {
        log << "layer " << l << ": wli " << profile.wli[l] << " cli " << profile.cli[l] << "\n";
    }
    return profile;
}

PruneOutcome cmd_prune(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    require_file(config.paths.teacher, "teacher checkpoint");
    require_file(config.paths.profile, "importance profile");
    const auto teacher = load_checkpoint(config.paths.teacher);
    check_model_task(teacher, config);
    const auto profile = load_profile(config.paths.profile);
    const std::size_t depth = teacher.config.n_layers;
    if (profile.n_layers() != depth) throw std::runtime_error("profile depth does not match teacher depth");
    PruneOutcome out;
    if (config.keep == depth) {
        log << "warning: keep equals teacher depth; nothing was pruned\n";
        std::vector<std::size_t> all(depth);
        for (std::size_t l = 0; l < depth; ++l) all[l] = l;
        out.plan = make_plan(depth, std::move(all));
    } else {
        out.plan = select_prune_set(profile, config.keep, config.criterion);
    }
    const auto student = copy_retained(teacher, out.plan);

    // Self-check: the student must reproduce the teacher with the dropped layers skipped.
    const auto eval = eval_subset(config);
    const LayerSet dropped(out.plan.dropped.begin(), out.plan.dropped.end());
    {
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < std::min<std::size_t>(4, eval.size()); ++i) {
            const auto a = forward(student, eval[i].packed).logits;
            const auto b = forward(teacher, eval[i].packed, dropped).logits;
            for (std::size_t k = 0; k < a.numel(); ++k) out.max_logit_gap = std::max(out.max_logit_gap, std::abs(a.at(k) - b.at(k)));
        }
    }
    if (out.max_logit_gap > 1e-9) {
        throw std::runtime_error("prune self-check failed: logit gap " + std::to_string(out.max_logit_gap));
    }
    save_checkpoint(config.paths.student, student);
    save_plan(config.paths.plan, out.plan);
    out.teacher_params = param_count(teacher);
    out.student_params = param_count(student);
    const double depth_cut = 100.0 * (1.0 - static_cast<double>(student.config.n_layers) / static_cast<double>(depth));
    const double param_cut = 100.0 * (1.0 - static_cast<double>(out.student_params) / static_cast<double>(out.teacher_params));
    log << "criterion " << to_string(config.criterion) << ", retained layers:";
    for (auto r : out.plan.retained) log << ' ' << r;
    log << "\ndepth " << depth << " -> " << student.config.n_layers << " (-" << depth_cut << "%), params "
        << out.teacher_params << " -> " << out.student_params << " (-" << param_cut << "%), bytes "
        << param_bytes(teacher) << " -> " << param_bytes(student) << "\n"
        << "self-check max logit gap " << out.max_logit_gap << "\n";
    return out;
}

TrainResult cmd_heal(const ExperimentConfig& config, std::ostream& log) {
    config.validate();
    require_file(config.paths.student, "student checkpoint");
    require_file(config.paths.teacher, "teacher checkpoint");
    require_file(config.paths.plan, "prune plan");
    require_file(config.paths.train_corpus, "train corpus");
    const auto student = load_checkpoint(config.paths.student);
    const auto teacher = load_checkpoint(config.paths.teacher);
    const auto plan = load_plan(config.paths.plan);
    const auto train = load_corpus(config.task_config(), config.paths.train_corpus);
    const auto eval = eval_subset(config);
    const auto dc = config.distill_config();
    log << "healing " << plan.student_depth() << "-layer student for " << dc.train.steps << " steps (alpha "
        << dc.alpha << ", targets " << to_string(dc.target_mode) << ")\n";
    auto result = heal(student, teacher, plan, train, dc, make_evaluator(eval, config.task_config().vocabulary(), config.workers),
                       progress_printer(log));
    save_checkpoint(config.paths.healed, result.params);
    write_text_file(config.paths.heal_log, log_to_text(result.log));
    if (!result.log.empty() && result.log.back().eval_error_rate) {
        log << "healed eval TER " << *result.log.back().eval_error_rate << " after " << result.tokens_seen
            << " tokens\n";
    }
    return result;
}

EvalReport cmd_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& report_path, const std::string& name, std::ostream& log) {
    config.validate();
    require_file(checkpoint, "checkpoint");
    const auto params = load_checkpoint(checkpoint);
    check_model_task(params, config);
    const auto eval = eval_subset(config);
    const auto vocab = config.task_config().vocabulary();
    EvalReport r;
    r.name = name;
    r.error_rate = corpus_error_rate(params, eval, vocab, {}, config.workers);
    r.n_samples = eval.size();
    std::vector<TokenSeq> prompts;
    for (std::size_t i = 0; i < std::min(config.throughput_prompts, eval.size()); ++i) {
        prompts.push_back(query_prompt(eval[i], vocab));
    }
    r.tokens_per_second = measure_throughput(params, prompts, config.throughput_new_tokens);
    r.param_count = param_count(params);
    r.param_bytes = param_bytes(params);
    r.depth = params.config.n_layers;
    if (!report_path.empty()) write_text_file(report_path, r.to_json() + "\n");
    log << name << ": TER " << r.error_rate << ", " << r.tokens_per_second << " tokens/s, depth " << r.depth
        << ", params " << r.param_count << "\n";
    return r;
}

}  // namespace spade
