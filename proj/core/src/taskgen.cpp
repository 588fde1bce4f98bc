#include "spade/taskgen.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "spade/random.hpp"

namespace spade {

void TaskConfig::validate() const {
    if (content_vocab < 2) throw std::invalid_argument("task config: content_vocab must be >= 2");
    if (n_speakers < 2) throw std::invalid_argument("task config: n_speakers must be >= 2");
    if (n_speakers > content_vocab) throw std::invalid_argument("task config: n_speakers exceeds content_vocab");
    if (min_len < 1 || min_len > max_len) throw std::invalid_argument("task config: invalid length range");
    if (train_seed == eval_seed) throw std::invalid_argument("task config: train and eval seeds must differ");
    if (max_packed_len() > max_seq_len) {
        throw std::invalid_argument("task config: packed length up to " + std::to_string(max_packed_len()) +
                                    " exceeds max_seq_len " + std::to_string(max_seq_len));
    }
}

Sample assemble_sample(const TaskConfig& task, TokenSeq x1, TokenSeq y1, TokenSeq x2, TokenSeq y2,
                       std::size_t speaker_id) {
    const auto vocab = task.vocabulary();
    Sample s;
    s.speaker_id = speaker_id;
    s.packed.push_back(vocab.bos());
    s.packed.insert(s.packed.end(), x1.begin(), x1.end());
    s.packed.push_back(vocab.sep());
    const std::size_t y1_start = s.packed.size();
    s.packed.insert(s.packed.end(), y1.begin(), y1.end());
    s.packed.push_back(vocab.sep());
    s.packed.insert(s.packed.end(), x2.begin(), x2.end());
    s.packed.push_back(vocab.sep());
    const std::size_t y2_start = s.packed.size();
    s.packed.insert(s.packed.end(), y2.begin(), y2.end());
    s.packed.push_back(vocab.eos());
    s.loss_mask.assign(s.packed.size(), 0);
    for (std::size_t i = 0; i < y2.size(); ++i) s.loss_mask[y2_start + i] = 1;
    if (task.include_y1_in_loss) {
        for (std::size_t i = 0; i < y1.size(); ++i) s.loss_mask[y1_start + i] = 1;
    }
    s.x1 = std::move(x1);
    s.y1 = std::move(y1);
    s.x2 = std::move(x2);
    s.y2 = std::move(y2);
    return s;
}

Sample make_sample(const TaskConfig& task, std::uint64_t seed) {
    task.validate();
    Rng rng(seed);
    const auto shift = static_cast<std::size_t>(rng.uniform_int(task.n_speakers));
    auto draw = [&] {
        TokenSeq x(rng.uniform_range(task.min_len, task.max_len));
        for (auto& t : x) t = static_cast<std::int32_t>(rng.uniform_int(task.content_vocab));
        return x;
    };
    auto apply = [&](const TokenSeq& x) {
        TokenSeq y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            y[i] = static_cast<std::int32_t>((static_cast<std::size_t>(x[i]) + shift) % task.content_vocab);
        }
        return y;
    };
    TokenSeq x1 = draw();
    TokenSeq x2 = draw();
    TokenSeq y1 = apply(x1);
    TokenSeq y2 = apply(x2);
    return assemble_sample(task, std::move(x1), std::move(y1), std::move(x2), std::move(y2), shift);
}

Corpus make_corpus(const TaskConfig& task, std::size_t n, Split split) {
    if (n == 0) throw std::invalid_argument("make_corpus: n must be >= 1");
    task.validate();
    const std::uint64_t base = split == Split::train ? derive_seed(task.train_seed, "train")
                                                      : derive_seed(task.eval_seed, "eval");
    Corpus out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_sample(task, derive_seed(base, static_cast<std::uint64_t>(i))));
    return out;
}

TokenSeq query_prompt(const Sample& sample, const Vocabulary& vocab) {
    TokenSeq p{vocab.bos()};
    p.insert(p.end(), sample.x1.begin(), sample.x1.end());
    p.push_back(vocab.sep());
    p.insert(p.end(), sample.y1.begin(), sample.y1.end());
    p.push_back(vocab.sep());
    p.insert(p.end(), sample.x2.begin(), sample.x2.end());
    p.push_back(vocab.sep());
    return p;
}

std::string corpus_to_text(const Corpus& corpus) {
    std::string out;
    for (const auto& s : corpus) {
        nlohmann::json j;
        j["speaker"] = s.speaker_id;
        j["x1"] = s.x1;
        j["y1"] = s.y1;
        j["x2"] = s.x2;
        j["y2"] = s.y2;
        out += j.dump();
        out += '\n';
    }
    return out;
}

Corpus corpus_from_text(const TaskConfig& task, const std::string& text) {
    Corpus out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            auto seg = [&](const char* key) {
                auto v = j.at(key).get<TokenSeq>();
                for (auto t : v) {
                    if (t < 0 || static_cast<std::size_t>(t) >= task.content_vocab) {
                        throw std::invalid_argument(std::string("token out of content range in ") + key);
                    }
                }
                return v;
            };
            const auto speaker = j.at("speaker").get<std::size_t>();
            auto x1 = seg("x1"), y1 = seg("y1"), x2 = seg("x2"), y2 = seg("y2");
            auto check = [&](const TokenSeq& x, const TokenSeq& y, const char* what) {
                if (x.size() != y.size()) throw std::invalid_argument(std::string(what) + " length mismatch");
                for (std::size_t i = 0; i < x.size(); ++i) {
                    if (static_cast<std::size_t>(y[i]) != (static_cast<std::size_t>(x[i]) + speaker) % task.content_vocab) {
                        throw std::invalid_argument(std::string(what) + " is not the speaker shift of its input");
                    }
                }
            };
            check(x1, y1, "y1");
            check(x2, y2, "y2");
            out.push_back(assemble_sample(task, std::move(x1), std::move(y1), std::move(x2), std::move(y2), speaker));
        } catch (const std::exception& e) {
            throw std::runtime_error("corpus line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out << corpus_to_text(corpus);
}

Corpus load_corpus(const TaskConfig& task, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return corpus_from_text(task, ss.str());
}

}  // namespace spade
