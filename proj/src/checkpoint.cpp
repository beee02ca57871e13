#include "rematch/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rematch {
namespace {

constexpr char kMagic[8] = {'R', 'E', '2', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;
constexpr std::string_view kEmbeddingEntry = "embedding.table";

template <class U>
void put(std::string& buf, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

void put_string(std::string& buf, std::string_view s) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
    buf.append(s);
}

class Reader {
public:
    Reader(const std::string& data, const std::filesystem::path& path) : data_(data), path_(path) {}

    template <class U>
    U get() {
        need(sizeof(U));
        U value = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            value |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return value;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::string get_string() { return bytes(get<std::uint32_t>()); }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) throw CheckpointError("checkpoint " + path_.string() + " is truncated");
    }

    const std::string& data_;
    const std::filesystem::path& path_;
    std::size_t pos_ = 0;
};

struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
};

std::string pairs_text(const ConfigPairs& pairs) {
    std::string out;
    for (const auto& [k, v] : pairs) out += k + "=" + v + "\n";
    return out;
}

ConfigPairs parse_pairs(const std::string& text, const std::string& where) {
    ConfigPairs out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw CheckpointError(where + ": malformed line '" + line + "'");
        out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path sidecar(const std::filesystem::path& path, const char* ext) {
    return std::filesystem::path(path.string() + ext);
}

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace

ModelConfig model_config_from_pairs(const ConfigPairs& config) {
    ModelConfig model;
    for (const auto& [k, v] : config) model.set(k, v);
    model.validate();
    return model;
}

void save_checkpoint(const std::filesystem::path& path, const Re2Model<float>& model, const ConfigPairs& config,
                     const CheckpointMeta& meta, const Vocabulary* vocab) {
    ConfigPairs all = config;
    for (const auto& kv : model.config().to_pairs()) {
        bool present = false;
        for (auto& existing : all) {
            if (existing.first == kv.first) {
                existing.second = kv.second;
                present = true;
            }
        }
        if (!present) all.push_back(kv);
    }

    std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
    for (const auto& p : model.parameters()) tensors.emplace_back(p.name, &p.value);
    tensors.emplace_back(std::string(kEmbeddingEntry), &model.embeddings().matrix);

    std::string header(kMagic, sizeof kMagic);
    put<std::uint32_t>(header, kVersion);
    const std::string text = pairs_text(all);
    put<std::uint64_t>(header, text.size());
    header += text;
    put<std::uint32_t>(header, static_cast<std::uint32_t>(tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        put_string(header, name);
        put<std::uint32_t>(header, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) put<std::uint64_t>(header, d);
        put<std::uint64_t>(header, offset);
        offset += t->size() * sizeof(float);
    }

    std::string payload;
    payload.reserve(offset);
    for (const auto& [name, t] : tensors) {
        for (std::size_t i = 0; i < t->size(); ++i) put<std::uint32_t>(payload, std::bit_cast<std::uint32_t>((*t)[i]));
    }

    const auto tmp = sidecar(path, ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!out) throw CheckpointError("write failed for checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);

    std::ofstream meta_out(sidecar(path, ".meta"));
    meta_out << "seed=" << meta.seed << "\n"
             << "step=" << meta.step << "\n"
             << "epoch=" << meta.epoch << "\n"
             << "dev_metric=" << format_double(meta.dev_metric) << "\n"
             << "dataset=" << meta.dataset << "\n"
             << "classes=";
    for (std::size_t i = 0; i < meta.class_names.size(); ++i) meta_out << (i ? "," : "") << meta.class_names[i];
    meta_out << "\n";
    if (vocab) vocab->save(sidecar(path, ".vocab"));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string data = read_file(path);
    Reader r(data, path);
    if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) {
        throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw CheckpointError(path.string() + ": unsupported version " + std::to_string(version));
    const auto text_len = r.get<std::uint64_t>();
    if (text_len > data.size()) throw CheckpointError("checkpoint " + path.string() + " is truncated");

    LoadedCheckpoint out;
    out.config = parse_pairs(r.bytes(text_len), path.string());
    const ModelConfig model_config = model_config_from_pairs(out.config);

    const auto count = r.get<std::uint32_t>();
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        e.name = r.get_string();
        const auto rank = r.get<std::uint32_t>();
        if (rank == 0 || rank > 8) throw CheckpointError(path.string() + ": bad rank for " + e.name);
        for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>());
        e.offset = r.get<std::uint64_t>();
    }
    const std::size_t base = r.pos();

    auto read_tensor = [&](const Entry& e) {
        const std::size_t n = shape_numel(e.shape);
        if (n == 0 || base + e.offset + n * sizeof(float) > data.size() || e.offset > data.size()) {
            throw CheckpointError("checkpoint " + path.string() + " is truncated at " + e.name);
        }
        Tensor<float> t(e.shape);
        const auto* src = reinterpret_cast<const unsigned char*>(data.data() + base + e.offset);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(src[i * 4 + b]) << (8 * b);
            t[i] = std::bit_cast<float>(bits);
        }
        return t;
    };

    const Entry* emb = nullptr;
    for (const auto& e : entries) {
        if (e.name == kEmbeddingEntry) emb = &e;
    }
    if (!emb) throw CheckpointError(path.string() + ": missing " + std::string(kEmbeddingEntry));
    auto table = std::make_shared<const EmbeddingTable>(EmbeddingTable{read_tensor(*emb)});
    out.model = std::make_unique<Re2Model<float>>(model_config, table, 0);

    std::size_t matched = 0;
    for (const auto& e : entries) {
        if (&e == emb) continue;
        Parameter<float>* p = out.model->parameters().find(e.name);
        if (!p) throw CheckpointError(path.string() + ": unexpected tensor " + e.name);
        if (p->value.shape() != e.shape) {
            throw CheckpointError(path.string() + ": " + e.name + " has shape " + shape_string(e.shape) +
                                  ", model expects " + shape_string(p->value.shape()));
        }
        p->value = read_tensor(e);
        ++matched;
    }
    if (matched != out.model->parameters().size()) {
        throw CheckpointError(path.string() + ": " + std::to_string(out.model->parameters().size() - matched) +
                              " parameters missing");
    }

    const auto meta_path = sidecar(path, ".meta");
    if (std::filesystem::exists(meta_path)) {
        for (const auto& [k, v] : parse_pairs(read_file(meta_path), meta_path.string())) {
            if (k == "seed") out.meta.seed = std::stoull(v);
            else if (k == "step") out.meta.step = std::stoll(v);
            else if (k == "epoch") out.meta.epoch = std::stoi(v);
            else if (k == "dev_metric") out.meta.dev_metric = std::stod(v);
            else if (k == "dataset") out.meta.dataset = v;
            else if (k == "classes") {
                std::istringstream ss(v);
                std::string name;
                while (std::getline(ss, name, ',')) out.meta.class_names.push_back(name);
            }
        }
    }
    const auto vocab_path = sidecar(path, ".vocab");
    if (std::filesystem::exists(vocab_path)) out.vocab = Vocabulary::load(vocab_path);
    return out;
}

}  // namespace rematch
