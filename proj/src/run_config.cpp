#include "rematch/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace rematch {
namespace {

const std::vector<std::string>& own_keys() {
    static const std::vector<std::string> keys = {
        "dataset",       "data_root",        "train_path",    "dev_path",      "test_path",
        "embeddings",    "labels",           "label_dir",     "out_dir",       "eval_batch_size",
        "bench_batch_size", "bench_seq_len", "bench_batches", "bench_warmup",  "sweep_seeds",
    };
    return keys;
}

int parse_int(std::string_view key, std::string_view value) {
    int out = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw std::invalid_argument(std::string(key) + ": expected an integer, got '" + std::string(value) + "'");
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::string env_name(const std::string& key) {
    std::string out = "RE2_";
    for (char c : key) out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    return out;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
    if (model.set(key, value) || train.set(key, value)) return;
    if (key == "dataset") dataset = parse_dataset_kind(value);
    else if (key == "data_root") data_root = value;
    else if (key == "train_path") train_path = value;
    else if (key == "dev_path") dev_path = value;
    else if (key == "test_path") test_path = value;
    else if (key == "embeddings") embeddings = value;
    else if (key == "labels") labels = value;
    else if (key == "label_dir") label_dir = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "eval_batch_size") eval_batch_size = parse_int(key, value);
    else if (key == "bench_batch_size") bench_batch_size = parse_int(key, value);
    else if (key == "bench_seq_len") bench_seq_len = parse_int(key, value);
    else if (key == "bench_batches") bench_batches = parse_int(key, value);
    else if (key == "bench_warmup") bench_warmup = parse_int(key, value);
    else if (key == "sweep_seeds") sweep_seeds = parse_int(key, value);
    else throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string_view text = trim(line);
        if (text.empty()) continue;
        const auto eq = text.find('=');
        if (eq == std::string_view::npos) {
            throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
        }
        try {
            set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
        } catch (const std::exception& e) {
            throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void RunConfig::apply_env(const EnvLookup& lookup) {
    for (const auto& key : keys()) {
        const std::string name = env_name(key);
        if (const char* value = lookup(name.c_str())) {
            try {
                set(key, value);
            } catch (const std::exception& e) {
                throw std::invalid_argument(name + ": " + e.what());
            }
        }
    }
}

void RunConfig::apply_env() {
    apply_env([](const char* name) { return std::getenv(name); });
}

ConfigPairs RunConfig::to_pairs() const {
    ConfigPairs out = model.to_pairs();
    for (auto& kv : train.to_pairs()) out.push_back(std::move(kv));
    out.emplace_back("dataset", std::string(dataset_name(dataset)));
    out.emplace_back("data_root", data_root);
    out.emplace_back("train_path", train_path);
    out.emplace_back("dev_path", dev_path);
    out.emplace_back("test_path", test_path);
    out.emplace_back("embeddings", embeddings);
    out.emplace_back("labels", labels);
    out.emplace_back("label_dir", label_dir);
    out.emplace_back("out_dir", out_dir);
    out.emplace_back("eval_batch_size", std::to_string(eval_batch_size));
    out.emplace_back("bench_batch_size", std::to_string(bench_batch_size));
    out.emplace_back("bench_seq_len", std::to_string(bench_seq_len));
    out.emplace_back("bench_batches", std::to_string(bench_batches));
    out.emplace_back("bench_warmup", std::to_string(bench_warmup));
    out.emplace_back("sweep_seeds", std::to_string(sweep_seeds));
    return out;
}

std::vector<std::string> RunConfig::keys() {
    std::vector<std::string> out;
    for (const auto& [k, v] : ModelConfig{}.to_pairs()) out.push_back(k);
    for (const auto& [k, v] : TrainConfig{}.to_pairs()) out.push_back(k);
    for (const auto& k : own_keys()) out.push_back(k);
    return out;
}

std::filesystem::path RunConfig::resolve(const std::string& path) const {
    std::filesystem::path p(path);
    if (p.is_relative() && !data_root.empty()) return std::filesystem::path(data_root) / p;
    return p;
}

DatasetSpec RunConfig::dataset_spec(bool need_train) const {
    auto require = [](const std::string& value, const char* key) {
        if (value.empty()) throw std::invalid_argument(std::string("missing required config key '") + key + "'");
    };
    if (need_train) require(train_path, "train_path");
    require(dev_path, "dev_path");
    DatasetSpec spec;
    spec.kind = dataset;
    if (!train_path.empty()) spec.train = resolve(train_path);
    spec.dev = resolve(dev_path);
    if (!test_path.empty()) spec.test = resolve(test_path);
    spec.labels = label_map();
    for (const auto* p : {&spec.train, &spec.dev, &spec.test}) {
        if (!p->empty() && !std::filesystem::exists(*p)) {
            const char* key = p == &spec.train ? "train_path" : p == &spec.dev ? "dev_path" : "test_path";
            throw std::invalid_argument(std::string(key) + ": file not found: " + p->string());
        }
    }
    return spec;
}

LabelMap RunConfig::label_map() const {
    if (!labels.empty()) return LabelMap::load(labels);
    return LabelMap::load(std::filesystem::path(label_dir) / (std::string(dataset_name(dataset)) + ".labels"));
}

std::uint64_t RunConfig::init_seed() const {
    return Rng(train.seed).split("init").next_u64();
}

std::filesystem::path default_label_dir() {
#ifdef REMATCH_LABEL_DIR
    return REMATCH_LABEL_DIR;
#else
    return "configs/labels";
#endif
}

PreparedData prepare_data(const RunConfig& config) {
    const DatasetSpec spec = config.dataset_spec();
    const DatasetSplits splits = load_dataset(spec);
    if (splits.train.empty()) throw std::invalid_argument("train_path: no usable examples in " + spec.train.string());
    if (splits.dev.empty()) throw std::invalid_argument("dev_path: no usable examples in " + spec.dev.string());

    PreparedData out;
    out.labels = spec.labels;
    std::vector<const std::vector<Example>*> others = {&splits.dev};
    if (!splits.test.empty()) others.push_back(&splits.test);
    const auto dim = static_cast<std::size_t>(config.model.embed_dim);
    if (config.embeddings.empty()) {
        out.vocab = Vocabulary::build(splits.train, others, nullptr);
        out.embeddings = std::make_shared<const EmbeddingTable>(random_embeddings(out.vocab, dim, config.init_seed()));
    } else {
        const auto path = config.resolve(config.embeddings);
        std::unordered_set<std::string> wanted;
        for (const auto* split : {&splits.train, &splits.dev, &splits.test}) {
            for (const auto& ex : *split) {
                wanted.insert(ex.seq_a.begin(), ex.seq_a.end());
                wanted.insert(ex.seq_b.begin(), ex.seq_b.end());
            }
        }
        const auto pretrained = scan_embedding_tokens(path, wanted);
        out.vocab = Vocabulary::build(splits.train, others, &pretrained);
        out.embeddings = std::make_shared<const EmbeddingTable>(load_embeddings(path, out.vocab, dim));
    }
    out.train = encode(splits.train, out.vocab);
    out.dev = encode(splits.dev, out.vocab);
    out.test = encode(splits.test, out.vocab);
    return out;
}

std::vector<EncodedExample> load_split(const RunConfig& config, const std::string& split, const Vocabulary& vocab,
                                       const LabelMap& labels) {
    const std::string* path = split == "train" ? &config.train_path
                              : split == "dev" ? &config.dev_path
                              : split == "test" ? &config.test_path
                                                : nullptr;
    if (!path) throw std::invalid_argument("unknown split '" + split + "' (expected train, dev or test)");
    if (path->empty()) throw std::invalid_argument("missing required config key '" + split + "_path'");
    const auto file = config.resolve(*path);
    if (!std::filesystem::exists(file)) throw std::invalid_argument(split + "_path: file not found: " + file.string());
    auto examples = load_examples(file, config.dataset, labels);
    if (examples.empty()) throw std::invalid_argument(split + "_path: no usable examples in " + file.string());
    return encode(examples, vocab);
}

}  // namespace rematch
