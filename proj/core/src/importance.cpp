#include "spade/importance.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "spade/checkpoint.hpp"
#include "spade/metrics.hpp"
#include "spade/text_format.hpp"

namespace spade {

namespace {

constexpr std::size_t kCliBatch = 16;

void require_layer(const ModelParams& params, std::size_t layer_index) {
    if (layer_index >= params.config.n_layers) {
        throw std::invalid_argument("layer index " + std::to_string(layer_index) + " out of range for depth " +
                                    std::to_string(params.config.n_layers));
    }
}

void require_corpus(const Corpus& corpus) {
    if (corpus.empty()) throw std::invalid_argument("importance: empty evaluation corpus");
}

std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j);
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double wli_score(const ModelParams& params, const Corpus& eval_corpus, std::size_t layer_index, std::size_t workers) {
    require_layer(params, layer_index);
    require_corpus(eval_corpus);
    const Vocabulary vocab{params.config.vocab_size - 3};
    return corpus_error_rate(params, eval_corpus, vocab, {layer_index}, workers);
}

void CosineAccumulator::add(std::span<const double> inputs, std::span<const double> outputs, std::size_t d) {
    if (inputs.size() != outputs.size() || d == 0 || inputs.size() % d != 0) {
        throw ShapeError("cosine distance: mismatched latent buffers");
    }
    for (std::size_t r = 0; r < inputs.size() / d; ++r) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double a = inputs[r * d + j], b = outputs[r * d + j];
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if (na == 0.0 || nb == 0.0) continue;
        const double cos = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
        sum += 1.0 - cos;
        ++count;
    }
}

double CosineAccumulator::mean() const {
    if (count == 0) throw std::runtime_error("cosine distance: every position had a zero-norm latent");
    return sum / static_cast<double>(count);
}

std::vector<double> cli_scores(const ModelParams& params, const Corpus& eval_corpus) {
    require_corpus(eval_corpus);
    NoGradGuard no_grad;
    std::vector<CosineAccumulator> acc(params.config.n_layers);
    for (std::size_t start = 0; start < eval_corpus.size(); start += kCliBatch) {
        const std::size_t end = std::min(eval_corpus.size(), start + kCliBatch);
        std::vector<std::int32_t> tokens;
        std::vector<std::size_t> lengths;
        for (std::size_t i = start; i < end; ++i) {
            tokens.insert(tokens.end(), eval_corpus[i].packed.begin(), eval_corpus[i].packed.end());
            lengths.push_back(eval_corpus[i].packed.size());
        }
        const auto trace = forward(params, tokens, SeqLayout::from_lengths(lengths));
        for (const auto& lt : trace.layers) {
            acc[lt.layer_index].add(lt.input.values(), lt.output.values(), params.config.d_model);
        }
    }
    std::vector<double> out;
    for (const auto& a : acc) out.push_back(a.mean());
    return out;
}

double cli_score(const ModelParams& params, const Corpus& eval_corpus, std::size_t layer_index) {
    require_layer(params, layer_index);
    return cli_scores(params, eval_corpus)[layer_index];
}

ImportanceProfile build_profile(const ModelParams& params, const Corpus& eval_corpus, const ProfileOptions& options) {
    require_corpus(eval_corpus);
    const std::size_t depth = params.config.n_layers;
    const Vocabulary vocab{params.config.vocab_size - 3};
    ImportanceProfile profile;
    profile.wli.assign(depth, 0.0);
    profile.cli = cli_scores(params, eval_corpus);
    profile.fingerprint = {model_fingerprint(params), options.eval_seed, eval_corpus.size()};

    // Jobs: index 0 is the unablated baseline, index l+1 ablates layer l.
    // Results land in fixed slots, so assembly does not depend on scheduling.
    std::vector<double> results(depth + 1, 0.0);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&] {
        try {
            for (std::size_t job = next++; job <= depth; job = next++) {
                LayerSet skip;
                if (job > 0) skip.insert(job - 1);
                results[job] = corpus_error_rate(params, eval_corpus, vocab, skip, 1);
            }
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = depth + 1;
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, depth + 1));
    if (workers == 1) {
        run();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
    }
    if (failure) std::rethrow_exception(failure);
    profile.base_error_rate = results[0];
    for (std::size_t l = 0; l < depth; ++l) profile.wli[l] = results[l + 1];
    return profile;
}

std::string profile_to_text(const ImportanceProfile& p) {
    std::ostringstream os;
    os << "# base_error_rate=" << format_double(p.base_error_rate) << " model_hash=" << p.fingerprint.model_hash
       << " eval_seed=" << p.fingerprint.eval_seed << " n_samples=" << p.fingerprint.n_samples << '\n';
    os << "layer_index,wli,cli\n";
    for (std::size_t l = 0; l < p.wli.size(); ++l) {
        os << l << ',' << format_double(p.wli[l]) << ',' << format_double(p.cli[l]) << '\n';
    }
    return os.str();
}

ImportanceProfile profile_from_text(const std::string& text) {
    ImportanceProfile p;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& why) {
        throw std::runtime_error("profile line " + std::to_string(line_no) + ": " + why);
    };
    bool header = false, columns = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (!header) {
            if (line.rfind("# ", 0) != 0) fail("expected '# base_error_rate=...' header");
            std::istringstream fields(line.substr(2));
            std::string kv;
            while (fields >> kv) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) fail("malformed header field '" + kv + "'");
                const auto key = kv.substr(0, eq), value = kv.substr(eq + 1);
                try {
                    if (key == "base_error_rate") p.base_error_rate = parse_double(value);
                    else if (key == "model_hash") p.fingerprint.model_hash = value;
                    else if (key == "eval_seed") p.fingerprint.eval_seed = std::stoull(value);
                    else if (key == "n_samples") p.fingerprint.n_samples = std::stoull(value);
                } catch (const std::exception&) {
                    fail("bad value for " + key);
                }
            }
            header = true;
            continue;
        }
        if (!columns) {
            if (line != "layer_index,wli,cli") fail("expected column header 'layer_index,wli,cli'");
            columns = true;
            continue;
        }
        const auto cells = split_csv(line);
        if (cells.size() != 3) fail("expected 3 columns, got " + std::to_string(cells.size()));
        try {
            if (std::stoull(cells[0]) != p.wli.size()) fail("layer rows out of order");
            p.wli.push_back(parse_double(cells[1]));
            p.cli.push_back(parse_double(cells[2]));
        } catch (const std::runtime_error&) {
            throw;
        } catch (const std::exception&) {
            fail("non-numeric cell");
        }
    }
    if (!columns) throw std::runtime_error("profile: missing header rows");
    if (p.wli.empty()) throw std::runtime_error("profile: no layer rows");
    return p;
}

void save_profile(const std::filesystem::path& path, const ImportanceProfile& profile) {
    write_text_file(path, profile_to_text(profile));
}

ImportanceProfile load_profile(const std::filesystem::path& path) { return profile_from_text(read_text_file(path)); }

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace spade
