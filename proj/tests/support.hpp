#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "spade/model.hpp"
#include "spade/ops.hpp"
#include "spade/random.hpp"
#include "spade/tensor.hpp"

namespace spade::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = scale * rng.normal();
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t rand_dim(Rng& rng, std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng.uniform_range(lo, hi));
}

/// Projects a tensor to a scalar with fixed random weights, so every output
/// element contributes to the checked gradient.
inline Tensor project(const Tensor& out, std::uint64_t seed) {
    Rng rng(seed);
    auto w = random_tensor(rng, out.shape(), false);
    return sum(mul(out, w));
}

struct GradCheck {
    double max_rel_error = 0.0;  // worst input
    double joint_rel_error = 0.0;  // all inputs as one vector
    std::size_t checked = 0;
};

/// Central finite differences against reverse-mode gradients for every input
/// flagged requires_grad. The error per input is ||analytic - numeric|| /
/// max(||analytic||, ||numeric||, floor).
inline GradCheck grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                            double h = 1e-6, double floor = 1e-8) {
    for (auto& t : inputs) t.clear_grad();
    backward(f(inputs));
    GradCheck out;
    double all_diff = 0.0, all_na = 0.0, all_nn = 0.0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        std::vector<double> numeric(t.numel());
        auto vals = t.mutable_values();
        NoGradGuard guard;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double up = f(inputs).item();
            vals[i] = orig - h;
            const double down = f(inputs).item();
            vals[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
            na += analytic[i] * analytic[i];
            nn += numeric[i] * numeric[i];
        }
        const double denom = std::max({std::sqrt(na), std::sqrt(nn), floor});
        out.max_rel_error = std::max(out.max_rel_error, std::sqrt(diff) / denom);
        all_diff += diff;
        all_na += na;
        all_nn += nn;
        ++out.checked;
    }
    out.joint_rel_error = std::sqrt(all_diff) / std::max({std::sqrt(all_na), std::sqrt(all_nn), floor});
    return out;
}

inline ModelConfig tiny_config(std::uint64_t seed = 7, std::size_t layers = 2) {
    ModelConfig c;
    c.vocab_size = 11;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = layers;
    c.d_ff = 16;
    c.max_seq_len = 24;
    c.seed = seed;
    return c;
}

/// Random tokens in [0, vocab).
inline std::vector<std::int32_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<std::int32_t> t(n);
    for (auto& x : t) x = static_cast<std::int32_t>(rng.uniform_int(vocab));
    return t;
}

/// Perturbs every parameter so tests do not depend on the special structure
/// of the initial weights (unit gains, zero biases).
inline void jitter(ModelParams& params, std::uint64_t seed, double scale = 0.1) {
    Rng rng(seed);
    for (auto& t : params.parameters())
        for (auto& v : t.mutable_values()) v += scale * rng.normal();
}

}  // namespace spade::testing
