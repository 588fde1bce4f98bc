#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spade/model.hpp"
#include "spade/taskgen.hpp"

namespace spade {

struct ProfileFingerprint {
    std::string model_hash;
    std::uint64_t eval_seed = 0;
    std::size_t n_samples = 0;
    bool operator==(const ProfileFingerprint&) const = default;
};

/// Per-layer importance under two criteria: error rate with the layer
/// ablated (WLI) and mean cosine distance between the layer's input and
/// output latents (CLI).
struct ImportanceProfile {
    std::vector<double> wli;
    std::vector<double> cli;
    double base_error_rate = 0.0;
    ProfileFingerprint fingerprint;

    std::size_t n_layers() const { return wli.size(); }
    bool operator==(const ImportanceProfile&) const = default;
};

/// Pooled token error rate with layer_index skipped during generation.
double wli_score(const ModelParams& params, const Corpus& eval_corpus, std::size_t layer_index,
                 std::size_t workers = 1);

/// 1 - cos(x_in, x_out) averaged over every row pair; zero-norm rows are
/// skipped. Both inputs are [N x d] row-major.
struct CosineAccumulator {
    double sum = 0.0;
    std::size_t count = 0;
    void add(std::span<const double> inputs, std::span<const double> outputs, std::size_t d);
    double mean() const;
};

/// Teacher-forced cosine distance of one layer over all packed positions.
double cli_score(const ModelParams& params, const Corpus& eval_corpus, std::size_t layer_index);
/// CLI for every layer from a single set of forward passes.
std::vector<double> cli_scores(const ModelParams& params, const Corpus& eval_corpus);

struct ProfileOptions {
    std::size_t workers = 1;
    std::uint64_t eval_seed = 0;
};

ImportanceProfile build_profile(const ModelParams& params, const Corpus& eval_corpus, const ProfileOptions& options = {});

/// Table format:
///   # base_error_rate=<r> model_hash=<h> eval_seed=<s> n_samples=<n>
///   layer_index,wli,cli
///   0,<wli>,<cli>
///   ...
std::string profile_to_text(const ImportanceProfile& profile);
ImportanceProfile profile_from_text(const std::string& text);
void save_profile(const std::filesystem::path& path, const ImportanceProfile& profile);
ImportanceProfile load_profile(const std::filesystem::path& path);

/// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace spade
