#include "spade/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "spade/random.hpp"

namespace spade {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstRowVec = Eigen::Map<const Eigen::RowVectorXd>;

ConstMatMap as_mat(const Tensor& t) {
    return ConstMatMap(t.values().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

ConstRowVec as_row(const Tensor& t) { return ConstRowVec(t.values().data(), static_cast<Eigen::Index>(t.numel())); }

Tensor normal_tensor(Rng& rng, Shape shape, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = stddev * rng.normal();
    return Tensor::from(std::move(shape), std::move(v), true);
}

void layer_norm_rows(RowMat& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    const auto g = as_row(gain);
    const auto b = as_row(bias);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        const double mu = row.mean();
        const double var = (row.array() - mu).square().mean();
        const double rstd = 1.0 / std::sqrt(var + eps);
        row = ((row.array() - mu) * rstd * g.array() + b.array()).matrix();
    }
}

void gelu_inplace(RowMat& x) {
    constexpr double kC = 0.7978845608028654;
    constexpr double kA = 0.044715;
    x = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); });
}

}  // namespace

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v < 1) throw std::invalid_argument(std::string("model config: ") + name + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(n_layers, "n_layers");
    positive(d_ff, "d_ff");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                    std::to_string(n_heads));
    }
}

std::vector<std::pair<std::string, Tensor>> LayerParams::named() const {
    return {{"ln1.gain", ln1_gain}, {"ln1.bias", ln1_bias}, {"attn.wq", wq}, {"attn.bq", bq},
            {"attn.wk", wk},        {"attn.bk", bk},        {"attn.wv", wv}, {"attn.bv", bv},
            {"attn.wo", wo},        {"attn.bo", bo},        {"ln2.gain", ln2_gain}, {"ln2.bias", ln2_bias},
            {"ffn.w1", w1},         {"ffn.b1", b1},         {"ffn.w2", w2}, {"ffn.b2", b2}};
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("token_embedding", token_embedding);
    out.emplace_back("position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        for (auto& [name, t] : layers[l].named()) out.emplace_back("layers." + std::to_string(l) + "." + name, t);
    }
    out.emplace_back("final_norm.gain", final_gain);
    out.emplace_back("final_norm.bias", final_bias);
    out.emplace_back("output_projection", output_projection);
    return out;
}

std::vector<Tensor> ModelParams::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
}

ModelParams ModelParams::deep_copy() const {
    std::vector<std::pair<std::string, Tensor>> copies;
    for (auto& [name, t] : named_tensors()) copies.emplace_back(name, t.clone(true));
    return params_from_named(config, std::move(copies));
}

ModelParams init_params(const ModelConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, "init"));
    const std::size_t d = config.d_model, v = config.vocab_size, ff = config.d_ff;
    const double std_w = 0.02;
    const double std_res = 0.02 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    ModelParams p;
    p.config = config;
    p.token_embedding = normal_tensor(rng, {v, d}, std_w);
    p.position_embedding = normal_tensor(rng, {config.max_seq_len, d}, std_w);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerParams lp;
        lp.ln1_gain = Tensor::full({d}, 1.0, true);
        lp.ln1_bias = Tensor::zeros({d}, true);
        lp.wq = normal_tensor(rng, {d, d}, std_w);
        lp.bq = Tensor::zeros({d}, true);
        lp.wk = normal_tensor(rng, {d, d}, std_w);
        lp.bk = Tensor::zeros({d}, true);
        lp.wv = normal_tensor(rng, {d, d}, std_w);
        lp.bv = Tensor::zeros({d}, true);
        lp.wo = normal_tensor(rng, {d, d}, std_res);
        lp.bo = Tensor::zeros({d}, true);
        lp.ln2_gain = Tensor::full({d}, 1.0, true);
        lp.ln2_bias = Tensor::zeros({d}, true);
        lp.w1 = normal_tensor(rng, {d, ff}, std_w);
        lp.b1 = Tensor::zeros({ff}, true);
        lp.w2 = normal_tensor(rng, {ff, d}, std_res);
        lp.b2 = Tensor::zeros({d}, true);
        p.layers.push_back(std::move(lp));
    }
    p.final_gain = Tensor::full({d}, 1.0, true);
    p.final_bias = Tensor::zeros({d}, true);
    p.output_projection = normal_tensor(rng, {d, v}, std_w);
    return p;
}

ModelParams params_from_named(const ModelConfig& config, std::vector<std::pair<std::string, Tensor>> named) {
    config.validate();
    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : named) {
        if (!by_name.emplace(name, t).second) throw std::invalid_argument("duplicate tensor '" + name + "'");
    }
    auto take = [&](const std::string& name, Shape shape) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::invalid_argument("missing tensor '" + name + "'");
        if (it->second.shape() != shape) {
            throw ShapeError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                             shape_str(shape));
        }
        Tensor t = it->second;
        by_name.erase(it);
        return t;
    };
    const std::size_t d = config.d_model, v = config.vocab_size, ff = config.d_ff;
    ModelParams p;
    p.config = config;
    p.token_embedding = take("token_embedding", {v, d});
    p.position_embedding = take("position_embedding", {config.max_seq_len, d});
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        LayerParams lp;
        lp.ln1_gain = take(pre + "ln1.gain", {d});
        lp.ln1_bias = take(pre + "ln1.bias", {d});
        lp.wq = take(pre + "attn.wq", {d, d});
        lp.bq = take(pre + "attn.bq", {d});
        lp.wk = take(pre + "attn.wk", {d, d});
        lp.bk = take(pre + "attn.bk", {d});
        lp.wv = take(pre + "attn.wv", {d, d});
        lp.bv = take(pre + "attn.bv", {d});
        lp.wo = take(pre + "attn.wo", {d, d});
        lp.bo = take(pre + "attn.bo", {d});
        lp.ln2_gain = take(pre + "ln2.gain", {d});
        lp.ln2_bias = take(pre + "ln2.bias", {d});
        lp.w1 = take(pre + "ffn.w1", {d, ff});
        lp.b1 = take(pre + "ffn.b1", {ff});
        lp.w2 = take(pre + "ffn.w2", {ff, d});
        lp.b2 = take(pre + "ffn.b2", {d});
        p.layers.push_back(std::move(lp));
    }
    p.final_gain = take("final_norm.gain", {d});
    p.final_bias = take("final_norm.bias", {d});
    p.output_projection = take("output_projection", {d, v});
    if (!by_name.empty()) throw std::invalid_argument("unexpected tensor '" + by_name.begin()->first + "'");
    return p;
}

std::size_t param_count(const ModelParams& params) {
    std::size_t n = 0;
    for (auto& [name, t] : params.named_tensors()) n += t.numel();
    return n;
}

std::size_t param_bytes(const ModelParams& params) { return param_count(params) * sizeof(double); }

std::vector<std::size_t> ForwardTrace::executed_layers() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers) out.push_back(l.layer_index);
    return out;
}

const LayerTrace* ForwardTrace::find_layer(std::size_t layer_index) const {
    for (const auto& l : layers) {
        if (l.layer_index == layer_index) return &l;
    }
    return nullptr;
}

ForwardTrace forward(const ModelParams& params, std::span<const std::int32_t> tokens, const SeqLayout& layout,
                     const LayerSet& skip) {
    const auto& cfg = params.config;
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    if (layout.total_rows() != tokens.size()) throw ShapeError("forward: layout does not match token count");
    for (auto s : skip) {
        if (s >= cfg.n_layers) throw std::invalid_argument("forward: skip index " + std::to_string(s) + " out of range");
    }
    ForwardTrace trace;
    trace.tokens.assign(tokens.begin(), tokens.end());
    trace.layout = layout;
    trace.n_heads = cfg.n_heads;
    trace.embedded = add(embed(params.token_embedding, tokens), embed_positions(params.position_embedding, layout));
    Tensor x = trace.embedded;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        if (skip.contains(l)) continue;
        const auto& lp = params.layers[l];
        LayerTrace lt;
        lt.layer_index = l;
        lt.input = x;
        Tensor h = layer_norm(x, lp.ln1_gain, lp.ln1_bias);
        Tensor q = linear(h, lp.wq, lp.bq);
        Tensor k = linear(h, lp.wk, lp.bk);
        Tensor v = linear(h, lp.wv, lp.bv);
        lt.attention = causal_attention_probs(q, k, layout, cfg.n_heads);
        Tensor ctx = attention_apply(lt.attention, v, layout, cfg.n_heads);
        x = add(x, linear(ctx, lp.wo, lp.bo));
        Tensor h2 = layer_norm(x, lp.ln2_gain, lp.ln2_bias);
        x = add(x, linear(gelu(linear(h2, lp.w1, lp.b1)), lp.w2, lp.b2));
        lt.output = x;
        trace.layers.push_back(std::move(lt));
    }
    trace.logits = matmul(layer_norm(x, params.final_gain, params.final_bias), params.output_projection);
    return trace;
}

ForwardTrace forward(const ModelParams& params, std::span<const std::int32_t> tokens, const LayerSet& skip) {
    return forward(params, tokens, SeqLayout::single(tokens.size()), skip);
}

DecodeSession::DecodeSession(const ModelParams& params, LayerSet skip) : params_(params) {
    for (std::size_t l = 0; l < params.config.n_layers; ++l) {
        if (!skip.contains(l)) active_.push_back(l);
    }
    for (auto s : skip) {
        if (s >= params.config.n_layers) throw std::invalid_argument("decode: skip index out of range");
    }
    const std::size_t cap = params.config.max_seq_len * params.config.d_model;
    keys_.assign(active_.size(), Buffer(cap, 0.0));
    values_.assign(active_.size(), Buffer(cap, 0.0));
}

std::vector<double> DecodeSession::extend(std::span<const std::int32_t> tokens) {
    const auto& cfg = params_.config;
    const auto n = static_cast<Eigen::Index>(tokens.size());
    if (n == 0) throw std::invalid_argument("decode: no tokens to append");
    if (length_ + tokens.size() > cfg.max_seq_len) {
        throw std::invalid_argument("decode: sequence would exceed max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
    const auto p0 = static_cast<Eigen::Index>(length_);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto tok = as_mat(params_.token_embedding);
    const auto pos = as_mat(params_.position_embedding);

    RowMat x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto id = tokens[static_cast<std::size_t>(i)];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw std::invalid_argument("decode: token id " + std::to_string(id) + " outside vocabulary");
        }
        x.row(i) = tok.row(id) + pos.row(p0 + i);
    }
    RowMat h, q, ctx(n, d), scores, hidden;
    for (std::size_t a = 0; a < active_.size(); ++a) {
        const auto& lp = params_.layers[active_[a]];
        Eigen::Map<RowMat> kcache(keys_[a].data(), static_cast<Eigen::Index>(cfg.max_seq_len), d);
        Eigen::Map<RowMat> vcache(values_[a].data(), static_cast<Eigen::Index>(cfg.max_seq_len), d);
        h = x;
        layer_norm_rows(h, lp.ln1_gain, lp.ln1_bias);
        q.noalias() = h * as_mat(lp.wq);
        q.rowwise() += as_row(lp.bq);
        kcache.middleRows(p0, n).noalias() = h * as_mat(lp.wk);
        kcache.middleRows(p0, n).rowwise() += as_row(lp.bk);
        vcache.middleRows(p0, n).noalias() = h * as_mat(lp.wv);
        vcache.middleRows(p0, n).rowwise() += as_row(lp.bv);
        const Eigen::Index total = p0 + n;
        for (Eigen::Index hd = 0; hd < static_cast<Eigen::Index>(cfg.n_heads); ++hd) {
            scores.noalias() = q.middleCols(hd * dh, dh) * kcache.topRows(total).middleCols(hd * dh, dh).transpose();
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::Index visible = p0 + i + 1;
                auto row = scores.row(i);
                double mx = row(0) * inv_sqrt;
                for (Eigen::Index j = 1; j < visible; ++j) mx = std::max(mx, row(j) * inv_sqrt);
                double z = 0.0;
                for (Eigen::Index j = 0; j < visible; ++j) {
                    row(j) = std::exp(row(j) * inv_sqrt - mx);
                    z += row(j);
                }
                for (Eigen::Index j = 0; j < visible; ++j) row(j) /= z;
                for (Eigen::Index j = visible; j < total; ++j) row(j) = 0.0;
            }
            ctx.middleCols(hd * dh, dh).noalias() = scores * vcache.topRows(total).middleCols(hd * dh, dh);
        }
        x.noalias() += ctx * as_mat(lp.wo);
        x.rowwise() += as_row(lp.bo);
        h = x;
        layer_norm_rows(h, lp.ln2_gain, lp.ln2_bias);
        hidden.noalias() = h * as_mat(lp.w1);
        hidden.rowwise() += as_row(lp.b1);
        gelu_inplace(hidden);
        x.noalias() += hidden * as_mat(lp.w2);
        x.rowwise() += as_row(lp.b2);
    }
    length_ += tokens.size();
    RowMat last = x.bottomRows(1);
    layer_norm_rows(last, params_.final_gain, params_.final_bias);
    Eigen::RowVectorXd logits = last.row(0) * as_mat(params_.output_projection);
    return {logits.data(), logits.data() + logits.size()};
}

TokenSeq generate_greedy(const ModelParams& params, std::span<const std::int32_t> prompt, std::int32_t stop_token,
                         std::size_t max_new, const LayerSet& skip) {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (prompt.size() + max_new > params.config.max_seq_len) {
        throw std::invalid_argument("generate: prompt length " + std::to_string(prompt.size()) + " + max_new " +
                                    std::to_string(max_new) + " exceeds max_seq_len " +
                                    std::to_string(params.config.max_seq_len));
    }
    DecodeSession session(params, skip);
    TokenSeq out;
    if (max_new == 0) return out;
    auto logits = session.extend(prompt);
    while (true) {
        const auto best = static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        if (best == stop_token) break;
        out.push_back(best);
        if (out.size() >= max_new) break;
        const std::int32_t next[1] = {best};
        logits = session.extend(next);
    }
    return out;
}

}  // namespace spade
