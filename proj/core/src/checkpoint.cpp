#include "spade/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace spade {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'A', 'D', 'E', 'C', 'K', 'P'};

template <typename T>
T to_little(T value) {
    if constexpr (std::endian::native == std::endian::big) {
        if constexpr (sizeof(T) == 4) return static_cast<T>(__builtin_bswap32(value));
        if constexpr (sizeof(T) == 8) return static_cast<T>(__builtin_bswap64(value));
    }
    return value;
}

template <typename T>
void put(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    value = to_little(value);
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_double(std::string& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
  public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        value = to_little(value);
        return value;
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

  private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelParams& params) {
    const auto named = params.named_tensors();
    const auto& c = params.config;
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    for (std::uint64_t v : {std::uint64_t{c.vocab_size}, std::uint64_t{c.d_model}, std::uint64_t{c.n_heads},
                            std::uint64_t{c.n_layers}, std::uint64_t{c.d_ff}, std::uint64_t{c.max_seq_len}, c.seed}) {
        put<std::uint64_t>(out, v);
    }
    put<std::uint64_t>(out, named.size());
    std::uint64_t offset = 0;
    for (const auto& [name, t] : named) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put<std::uint64_t>(out, d);
        put<std::uint64_t>(out, offset);
        offset += t.numel() * sizeof(double);
    }
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : named) {
        for (double v : t.values()) put_double(out, v);
    }
    return out;
}

ModelParams deserialize_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.get_string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
        throw std::runtime_error("checkpoint: bad magic");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    ModelConfig c;
    c.vocab_size = r.get<std::uint64_t>();
    c.d_model = r.get<std::uint64_t>();
    c.n_heads = r.get<std::uint64_t>();
    c.n_layers = r.get<std::uint64_t>();
    c.d_ff = r.get<std::uint64_t>();
    c.max_seq_len = r.get<std::uint64_t>();
    c.seed = r.get<std::uint64_t>();
    const auto count = r.get<std::uint64_t>();
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> index;
    for (std::uint64_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.get_string(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint64_t>());
        e.offset = r.get<std::uint64_t>();
        index.push_back(std::move(e));
    }
    const std::size_t payload = r.pos();
    std::vector<std::pair<std::string, Tensor>> named;
    for (const auto& e : index) {
        const std::size_t n = shape_numel(e.shape);
        if (payload + e.offset + n * sizeof(double) > bytes.size()) {
            throw std::runtime_error("checkpoint: tensor '" + e.name + "' extends past end of file");
        }
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t raw;
            std::memcpy(&raw, bytes.data() + payload + e.offset + i * sizeof(double), sizeof(raw));
            raw = to_little(raw);
            values[i] = std::bit_cast<double>(raw);
        }
        named.emplace_back(e.name, Tensor::from(e.shape, std::move(values), true));
    }
    return params_from_named(c, std::move(named));
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    const auto bytes = serialize_checkpoint(params);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

std::string hash_bytes(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

std::string model_fingerprint(const ModelParams& params) { return hash_bytes(serialize_checkpoint(params)); }

}  // namespace spade
