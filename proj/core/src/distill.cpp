#include "spade/distill.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "spade/ops.hpp"
#include "spade/optim.hpp"

namespace spade {

namespace {

void check_distribution(std::span<const double> p, const char* name) {
    double s = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw NumericError(std::string("skew_kl: ") + name + " has a negative or non-finite entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-8) throw NumericError(std::string("skew_kl: ") + name + " does not sum to 1");
}

std::vector<std::uint8_t> causal_mask(const SeqLayout& layout) {
    std::vector<std::uint8_t> mask;
    mask.reserve(layout.total_square());
    for (auto t : layout.lengths) {
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = 0; j < t; ++j) mask.push_back(j <= i ? 1 : 0);
        }
    }
    return mask;
}

void check_pair(const ForwardTrace& student, const ForwardTrace& teacher) {
    if (student.tokens != teacher.tokens || student.layout.lengths != teacher.layout.lengths) {
        throw std::invalid_argument("distillation: student and teacher traces come from different inputs");
    }
}

const LayerTrace& teacher_layer(const ForwardTrace& teacher, std::size_t index) {
    const auto* lt = teacher.find_layer(index);
    if (lt == nullptr) {
        throw std::invalid_argument("distillation: teacher trace has no entry for layer " + std::to_string(index));
    }
    return *lt;
}

void check_plan(const ForwardTrace& student, const PrunePlan& plan) {
    if (student.layers.size() != plan.retained.size()) {
        throw std::invalid_argument("distillation: student trace has " + std::to_string(student.layers.size()) +
                                    " layers, plan retains " + std::to_string(plan.retained.size()));
    }
}

Tensor mean_of(std::vector<Tensor> terms) {
    std::vector<double> w(terms.size(), 1.0 / static_cast<double>(terms.size()));
    return weighted_sum(terms, w);
}

std::vector<double> softmax_rows(std::span<const double> logits, std::size_t rows, std::size_t cols) {
    std::vector<double> out(logits.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = logits.data() + r * cols;
        double mx = z[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, z[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += (out[r * cols + j] = std::exp(z[j] - mx));
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] /= s;
    }
    return out;
}

nlohmann::json breakdown_json(const LossBreakdown& b) {
    return {{"total", b.total}, {"ce", b.ce}, {"logit", b.logit}, {"latent", b.latent}, {"attention", b.attention},
            {"embedding", b.embedding}};
}

void check_finite(const LossBreakdown& b, std::size_t step) {
    const std::pair<const char*, double> terms[] = {{"ce", b.ce},         {"logit", b.logit},
                                                    {"latent", b.latent}, {"attention", b.attention},
                                                    {"embedding", b.embedding}, {"total", b.total}};
    for (const auto& [name, v] : terms) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite " + std::string(name) + " loss at step " + std::to_string(step));
        }
    }
}

}  // namespace

std::string to_string(TargetMode m) { return m == TargetMode::dynamic ? "dynamic" : "same_index"; }

TargetMode target_mode_from_string(const std::string& s) {
    if (s == "dynamic") return TargetMode::dynamic;
    if (s == "same_index") return TargetMode::same_index;
    throw std::invalid_argument("unknown target mode '" + s + "' (expected dynamic or same_index)");
}

void DistillConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("distill config: alpha must lie in [0, 1]");
    if (!(skew_lambda > 0.0 && skew_lambda <= 1.0)) {
        throw std::invalid_argument("distill config: skew_lambda must lie in (0, 1]");
    }
    if (train.batch_size == 0) throw std::invalid_argument("distill config: batch_size must be >= 1");
}

double skew_kl(std::span<const double> p, std::span<const double> q, double lambda) {
    if (p.size() != q.size() || p.empty()) throw ShapeError("skew_kl: distributions differ in length");
    if (!(lambda > 0.0 && lambda <= 1.0)) throw std::invalid_argument("skew_kl: lambda must lie in (0, 1]");
    check_distribution(p, "p");
    check_distribution(q, "q");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        kl += p[i] * std::log(p[i] / (lambda * p[i] + (1.0 - lambda) * q[i]));
    }
    return std::max(kl, 0.0);
}

std::size_t target_layer(const PrunePlan& plan, std::size_t student_layer, TargetMode mode) {
    if (student_layer >= plan.retained.size()) throw std::out_of_range("student layer outside plan");
    return mode == TargetMode::dynamic ? plan.distill_target[student_layer] : plan.retained[student_layer];
}

Tensor latent_loss(const ForwardTrace& student, const ForwardTrace& teacher, const PrunePlan& plan, TargetMode mode) {
    check_pair(student, teacher);
    check_plan(student, plan);
    std::vector<Tensor> terms;
    for (std::size_t j = 0; j < student.layers.size(); ++j) {
        const auto& target = teacher_layer(teacher, target_layer(plan, j, mode));
        terms.push_back(mse_to_target(student.layers[j].output, target.output.values()));
    }
    return mean_of(std::move(terms));
}

Tensor attention_loss(const ForwardTrace& student, const ForwardTrace& teacher, const PrunePlan& plan,
                      TargetMode mode) {
    check_pair(student, teacher);
    check_plan(student, plan);
    const auto mask = causal_mask(student.layout);
    std::vector<Tensor> terms;
    for (std::size_t j = 0; j < student.layers.size(); ++j) {
        const auto& target = teacher_layer(teacher, target_layer(plan, j, mode));
        Tensor target_avg;
        {
            NoGradGuard no_grad;
            target_avg = head_average(target.attention, teacher.layout, teacher.n_heads);
        }
        Tensor student_avg = head_average(student.layers[j].attention, student.layout, student.n_heads);
        terms.push_back(mse_to_target(student_avg, target_avg.values(), mask));
    }
    return mean_of(std::move(terms));
}

Tensor embedding_loss(const ForwardTrace& student, const ForwardTrace& teacher) {
    check_pair(student, teacher);
    if (student.embedded.shape() != teacher.embedded.shape()) {
        throw ShapeError("embedding_loss: " + shape_str(student.embedded.shape()) + " vs " +
                         shape_str(teacher.embedded.shape()));
    }
    return mse_to_target(student.embedded, teacher.embedded.values());
}

CompositeLoss composite_loss(const ModelParams& student, const ModelParams& teacher, const PackedBatch& batch,
                             const PrunePlan& plan, const DistillConfig& config) {
    config.validate();
    if (plan.teacher_depth != teacher.config.n_layers || plan.student_depth() != student.config.n_layers) {
        throw std::invalid_argument("composite_loss: plan depths do not match the models");
    }
    const bool need_teacher = config.terms.logit || config.terms.latent || config.terms.attention || config.terms.embedding;
    ForwardTrace teacher_trace;
    if (need_teacher) {
        NoGradGuard no_grad;
        teacher_trace = forward(teacher, batch.inputs, batch.layout);
    }
    const ForwardTrace s = forward(student, batch.inputs, batch.layout);

    std::vector<Tensor> terms;
    std::vector<double> weights;
    CompositeLoss out;
    const double w = config.distill_weight();
    if (config.terms.ce) {
        Tensor ce = cross_entropy(s.logits, batch.targets, batch.target_mask);
        out.breakdown.ce = ce.item();
        terms.push_back(ce);
        weights.push_back(config.alpha);
    }
    if (config.terms.logit) {
        const auto probs = softmax_rows(teacher_trace.logits.values(), teacher_trace.logits.dim(0), teacher_trace.logits.dim(1));
        Tensor logit = skew_kl_logits(s.logits, probs, batch.target_mask, config.skew_lambda);
        out.breakdown.logit = logit.item();
        terms.push_back(logit);
        weights.push_back(w);
    }
    if (config.terms.latent) {
        Tensor latent = latent_loss(s, teacher_trace, plan, config.target_mode);
        out.breakdown.latent = latent.item();
        terms.push_back(latent);
        weights.push_back(w);
    }
    if (config.terms.attention) {
        Tensor attn = attention_loss(s, teacher_trace, plan, config.target_mode);
        out.breakdown.attention = attn.item();
        terms.push_back(attn);
        weights.push_back(w);
    }
    if (config.terms.embedding) {
        Tensor emb = embedding_loss(s, teacher_trace);
        out.breakdown.embedding = emb.item();
        terms.push_back(emb);
        weights.push_back(w);
    }
    if (terms.empty()) throw std::invalid_argument("composite_loss: every loss term is disabled");
    out.total = weighted_sum(terms, weights);
    out.breakdown.total = out.total.item();
    return out;
}

std::string TrainLogRecord::to_json() const {
    nlohmann::json j;
    j["step"] = step;
    j["tokens_seen"] = tokens_seen;
    j["learning_rate"] = learning_rate;
    j["loss"] = breakdown_json(loss);
    j["eval_error_rate"] = eval_error_rate ? nlohmann::json(*eval_error_rate) : nlohmann::json(nullptr);
    return j.dump();
}

TrainLogRecord TrainLogRecord::from_json(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    TrainLogRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.tokens_seen = j.at("tokens_seen").get<std::size_t>();
    r.learning_rate = j.at("learning_rate").get<double>();
    const auto& l = j.at("loss");
    r.loss = {l.at("total").get<double>(),  l.at("ce").get<double>(),        l.at("logit").get<double>(),
              l.at("latent").get<double>(), l.at("attention").get<double>(), l.at("embedding").get<double>()};
    if (j.contains("eval_error_rate") && !j["eval_error_rate"].is_null()) r.eval_error_rate = j["eval_error_rate"].get<double>();
    return r;
}

std::string log_to_text(std::span<const TrainLogRecord> log) {
    std::string out;
    for (const auto& r : log) out += r.to_json() + "\n";
    return out;
}

std::vector<TrainLogRecord> log_from_text(const std::string& text) {
    std::vector<TrainLogRecord> out;
    std::size_t start = 0, line_no = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        ++line_no;
        const auto line = text.substr(start, end - start);
        if (!line.empty()) {
            try {
                out.push_back(TrainLogRecord::from_json(line));
            } catch (const std::exception& e) {
                throw std::runtime_error("training log line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        start = end + 1;
    }
    return out;
}

namespace {

using StepLoss = std::function<CompositeLoss(const ModelParams&, const PackedBatch&)>;

TrainResult run_training(const ModelParams& initial, const Corpus& corpus, const TrainConfig& config,
                         const StepLoss& step_loss, const EvalFn& evaluate, const LogFn& on_log) {
    TrainResult result{initial.deep_copy(), {}, 0};
    if (config.steps == 0) return result;
    if (corpus.empty()) throw std::invalid_argument("training: empty corpus");
    auto params = result.params.parameters();
    Adam optimizer(params, AdamConfig{config.learning_rate});
    BatchStream stream(corpus.size(), config.batch_size, config.order_seed);
    for (std::size_t step = 0; step < config.steps; ++step) {
        const auto indices = stream.next();
        const auto batch = pack_batch(corpus, indices);
        const double lr = config.lr_at(step);
        optimizer.set_learning_rate(lr);
        CompositeLoss loss;
        try {
            loss = step_loss(result.params, batch);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at step " + std::to_string(step));
        }
        check_finite(loss.breakdown, step);
        backward(loss.total);
        loss.total = Tensor();
        clip_grad_norm(params, config.grad_clip);
        optimizer.step();
        result.tokens_seen += batch.tokens();

        const bool last = step + 1 == config.steps;
        const bool do_eval = evaluate && (last || (config.eval_every > 0 && (step + 1) % config.eval_every == 0));
        const bool do_log = last || do_eval || (config.log_every > 0 && step % config.log_every == 0);
        if (do_log) {
            TrainLogRecord rec{step, result.tokens_seen, lr, loss.breakdown, std::nullopt};
            if (do_eval) rec.eval_error_rate = evaluate(result.params);
            result.log.push_back(rec);
            if (on_log) on_log(rec);
        }
    }
    return result;
}

}  // namespace

TrainResult train_supervised(const ModelParams& initial, const Corpus& corpus, const TrainConfig& config,
                             const EvalFn& evaluate, const LogFn& on_log) {
    return run_training(
        initial, corpus, config,
        [](const ModelParams& p, const PackedBatch& batch) {
            const auto trace = forward(p, batch.inputs, batch.layout);
            CompositeLoss out;
            out.total = cross_entropy(trace.logits, batch.targets, batch.target_mask);
            out.breakdown.ce = out.breakdown.total = out.total.item();
            return out;
        },
        evaluate, on_log);
}

TrainResult heal(const ModelParams& student, const ModelParams& teacher, const PrunePlan& plan, const Corpus& corpus,
                 const DistillConfig& config, const EvalFn& evaluate, const LogFn& on_log) {
    config.validate();
    validate_plan(plan);
    return run_training(
        student, corpus, config.train,
        [&](const ModelParams& p, const PackedBatch& batch) { return composite_loss(p, teacher, batch, plan, config); },
        evaluate, on_log);
}

}  // namespace spade
