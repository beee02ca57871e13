#include "rematch/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "rematch/rng.hpp"

namespace rematch {
namespace {

bool is_ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }
bool is_ascii_space(unsigned char c) { return c < 0x80 && std::isspace(c) != 0; }

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
        if (tab == std::string_view::npos) break;
        start = tab + 1;
    }
    return fields;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && is_ascii_space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && is_ascii_space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::string location(const std::filesystem::path& path, std::size_t line) {
    return path.string() + ":" + std::to_string(line);
}

struct RawRecord {
    std::string label;
    std::string a;
    std::string b;
    std::optional<std::string> group;
};

// Column layout of a tab-separated NLI file, discovered from its header.
struct NliColumns {
    std::size_t label = 0, a = 1, b = 2;
    bool from_header = false;
};

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) tokens.push_back(std::move(current));
        current.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (is_ascii_space(c)) {
            flush();
        } else if (is_ascii_punct(c)) {
            continue;
        } else {
            current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
        }
    }
    flush();
    return tokens;
}

std::string_view dataset_name(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::snli: return "snli";
        case DatasetKind::scitail: return "scitail";
        case DatasetKind::quora: return "quora";
        case DatasetKind::wikiqa: return "wikiqa";
    }
    return "unknown";
}

DatasetKind parse_dataset_kind(std::string_view name) {
    for (auto kind : {DatasetKind::snli, DatasetKind::scitail, DatasetKind::quora, DatasetKind::wikiqa}) {
        if (dataset_name(kind) == name) return kind;
    }
    throw std::invalid_argument("unknown dataset '" + std::string(name) + "' (expected snli, scitail, quora or wikiqa)");
}

bool is_ranking(DatasetKind kind) { return kind == DatasetKind::wikiqa; }

void LabelMap::add(std::string label, std::optional<int> index) {
    if (index) {
        if (*index < 0) throw ParseError("label index must be non-negative: " + label);
        const auto i = static_cast<std::size_t>(*index);
        if (names_.size() <= i) names_.resize(i + 1);
        if (names_[i].empty()) names_[i] = label;
    }
    map_[std::move(label)] = index;
}

LabelMap LabelMap::parse(std::istream& in) {
    LabelMap map;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream fields(line);
        std::string label, target, extra;
        if (!(fields >> label)) continue;
        if (!(fields >> target) || (fields >> extra)) {
            throw ParseError("label map line " + std::to_string(lineno) + ": expected '<label> <index|skip>'");
        }
        if (target == "skip") {
            map.add(label, std::nullopt);
            continue;
        }
        int index = 0;
        auto [ptr, ec] = std::from_chars(target.data(), target.data() + target.size(), index);
        if (ec != std::errc() || ptr != target.data() + target.size()) {
            throw ParseError("label map line " + std::to_string(lineno) + ": bad index '" + target + "'");
        }
        map.add(label, index);
    }
    for (std::size_t i = 0; i < map.names_.size(); ++i) {
        if (map.names_[i].empty()) throw ParseError("label map leaves class " + std::to_string(i) + " unnamed");
    }
    return map;
}

LabelMap LabelMap::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open label map " + path.string());
    return parse(in);
}

std::optional<int> LabelMap::lookup(std::string_view label) const {
    auto it = map_.find(label);
    if (it == map_.end()) throw ParseError("unknown label '" + std::string(label) + "'");
    return it->second;
}

std::vector<Example> load_examples(const std::filesystem::path& path, DatasetKind kind, const LabelMap& labels,
                                   LoadStats* stats) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open dataset file " + path.string());

    LoadStats local;
    std::vector<Example> out;
    std::string line;
    std::size_t lineno = 0;
    const bool nli = kind == DatasetKind::snli || kind == DatasetKind::scitail;
    NliColumns columns;

    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;

        RawRecord rec;
        if (nli && trim(line).front() == '{') {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
                rec.label = j.at("gold_label").get<std::string>();
                rec.a = j.at("sentence1").get<std::string>();
                rec.b = j.at("sentence2").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(location(path, lineno) + ": " + e.what());
            }
        } else {
            const auto fields = split_tabs(line);
            if (nli && lineno == 1) {
                auto find = [&](std::string_view name) -> std::optional<std::size_t> {
                    for (std::size_t i = 0; i < fields.size(); ++i)
                        if (trim(fields[i]) == name) return i;
                    return std::nullopt;
                };
                auto l = find("gold_label"), a = find("sentence1"), b = find("sentence2");
                if (l && a && b) {
                    columns = NliColumns{*l, *a, *b, true};
                    continue;
                }
            }
            if (nli) {
                const std::size_t need = std::max({columns.label, columns.a, columns.b}) + 1;
                if (fields.size() < need) {
                    throw ParseError(location(path, lineno) + ": expected at least " + std::to_string(need) + " tab-separated fields");
                }
                rec.label = std::string(trim(fields[columns.label]));
                rec.a = std::string(fields[columns.a]);
                rec.b = std::string(fields[columns.b]);
            } else {
                if (fields.size() < 3 || fields.size() > 4) {
                    throw ParseError(location(path, lineno) + ": expected 'label\\ta\\tb[\\tgroup]'");
                }
                rec.label = std::string(trim(fields[0]));
                rec.a = std::string(fields[1]);
                rec.b = std::string(fields[2]);
                if (kind == DatasetKind::wikiqa) {
                    rec.group = fields.size() == 4 ? std::string(trim(fields[3])) : rec.a;
                }
            }
        }
        ++local.records;

        std::optional<int> label;
        try {
            label = labels.lookup(rec.label);
        } catch (const ParseError& e) {
            throw ParseError(location(path, lineno) + ": " + e.what());
        }
        if (!label) {
            ++local.skipped_label;
            continue;
        }
        Example ex{tokenize(rec.a), tokenize(rec.b), *label, std::move(rec.group)};
        if (ex.seq_a.empty() || ex.seq_b.empty()) {
            ++local.skipped_empty;
            std::cerr << "warning: " << location(path, lineno) << ": sequence empty after tokenization, skipped\n";
            continue;
        }
        out.push_back(std::move(ex));
    }
    if (stats) *stats = local;
    return out;
}

DatasetSplits load_dataset(const DatasetSpec& spec) {
    DatasetSplits splits;
    splits.train = load_examples(spec.train, spec.kind, spec.labels);
    splits.dev = load_examples(spec.dev, spec.kind, spec.labels);
    if (!spec.test.empty()) splits.test = load_examples(spec.test, spec.kind, spec.labels);
    return splits;
}

Vocabulary::Vocabulary() {
    tokens_.push_back("<unk>");
}

std::int32_t Vocabulary::add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
}

std::int32_t Vocabulary::index(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnknown : it->second;
}

Vocabulary Vocabulary::build(const std::vector<Example>& train, const std::vector<const std::vector<Example>*>& others,
                             const std::unordered_set<std::string>* pretrained) {
    Vocabulary vocab;
    for (const auto& ex : train) {
        for (const auto& t : ex.seq_a) vocab.add(t);
        for (const auto& t : ex.seq_b) vocab.add(t);
    }
    if (pretrained != nullptr) {
        for (const auto* split : others) {
            for (const auto& ex : *split) {
                for (const auto* seq : {&ex.seq_a, &ex.seq_b})
                    for (const auto& t : *seq)
                        if (pretrained->contains(t)) vocab.add(t);
            }
        }
    }
    return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open vocabulary " + path.string());
    Vocabulary vocab;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        if (lineno++ == 0) continue;  // reserved entry
        if (line.empty()) throw ParseError("vocabulary line " + std::to_string(lineno) + " is empty");
        vocab.add(line);
    }
    return vocab;
}

std::unordered_set<std::string> scan_embedding_tokens(const std::filesystem::path& path,
                                                      const std::unordered_set<std::string>& wanted) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open embedding file " + path.string());
    std::unordered_set<std::string> found;
    std::string line;
    while (std::getline(in, line)) {
        const std::string token = line.substr(0, line.find(' '));
        if (wanted.contains(token)) found.insert(token);
    }
    return found;
}

EmbeddingTable load_embeddings(std::istream& in, const Vocabulary& vocab, std::size_t dim) {
    EmbeddingTable table{Tensor<float>(Shape{vocab.size(), dim}, 0.0f)};
    std::string line;
    std::size_t lineno = 0;
    std::vector<float> values(dim);
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::size_t space = line.find(' ');
        if (space == std::string::npos || space == 0) {
            throw ParseError("embedding line " + std::to_string(lineno) + ": expected '<token> <" + std::to_string(dim) + " floats>'");
        }
        const std::size_t fields = static_cast<std::size_t>(std::count(line.begin() + static_cast<long>(space), line.end(), ' '));
        if (fields != dim) {
            throw ParseError("embedding line " + std::to_string(lineno) + ": expected " + std::to_string(dim) +
                             " values, found " + std::to_string(fields));
        }
        const std::int32_t row = vocab.index(std::string_view(line).substr(0, space));
        // Values of tokens outside the vocabulary are never read.
        if (row == Vocabulary::kUnknown) continue;
        const char* p = line.data() + space + 1;
        const char* end = line.data() + line.size();
        for (std::size_t k = 0; k < dim; ++k) {
            auto [next, ec] = std::from_chars(p, end, values[k]);
            if (ec != std::errc() || (next != end && *next != ' ')) {
                throw ParseError("embedding line " + std::to_string(lineno) + ": value " + std::to_string(k + 1) + " is not a number");
            }
            p = next + (next != end ? 1 : 0);
        }
        std::copy(values.begin(), values.end(), table.matrix.ptr() + static_cast<std::size_t>(row) * dim);
    }
    return table;
}

EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, std::size_t dim) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open embedding file " + path.string());
    return load_embeddings(in, vocab, dim);
}

EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed) {
    EmbeddingTable table{Tensor<float>(Shape{vocab.size(), dim}, 0.0f)};
    Rng rng = Rng(seed).split("embeddings");
    for (std::size_t i = dim; i < table.matrix.size(); ++i) table.matrix[i] = static_cast<float>(0.5 * rng.normal());
    return table;
}

std::vector<EncodedExample> encode(const std::vector<Example>& examples, const Vocabulary& vocab) {
    std::vector<EncodedExample> out;
    out.reserve(examples.size());
    std::unordered_map<std::string, int> groups;
    for (const auto& ex : examples) {
        EncodedExample enc;
        for (const auto& t : ex.seq_a) enc.seq_a.push_back(vocab.index(t));
        for (const auto& t : ex.seq_b) enc.seq_b.push_back(vocab.index(t));
        enc.label = ex.label;
        if (ex.group_id) {
            auto [it, inserted] = groups.emplace(*ex.group_id, static_cast<int>(groups.size()));
            enc.group = it->second;
        }
        out.push_back(std::move(enc));
    }
    return out;
}

Batch make_batch(const std::vector<const EncodedExample*>& items) {
    if (items.empty()) throw std::invalid_argument("make_batch: no examples");
    Batch batch;
    batch.size = items.size();
    for (const auto* ex : items) {
        if (ex->seq_a.empty() || ex->seq_b.empty()) throw std::invalid_argument("make_batch: empty sequence");
        batch.len_a = std::max(batch.len_a, ex->seq_a.size());
        batch.len_b = std::max(batch.len_b, ex->seq_b.size());
    }
    batch.tokens_a.assign(batch.size * batch.len_a, Vocabulary::kUnknown);
    batch.tokens_b.assign(batch.size * batch.len_b, Vocabulary::kUnknown);
    batch.mask_a = Mask(Shape{batch.size, batch.len_a}, 0);
    batch.mask_b = Mask(Shape{batch.size, batch.len_b}, 0);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& ex = *items[i];
        std::copy(ex.seq_a.begin(), ex.seq_a.end(), batch.tokens_a.begin() + static_cast<long>(i * batch.len_a));
        std::copy(ex.seq_b.begin(), ex.seq_b.end(), batch.tokens_b.begin() + static_cast<long>(i * batch.len_b));
        std::fill_n(batch.mask_a.ptr() + i * batch.len_a, ex.seq_a.size(), 1);
        std::fill_n(batch.mask_b.ptr() + i * batch.len_b, ex.seq_b.size(), 1);
        batch.labels.push_back(ex.label);
        batch.groups.push_back(ex.group);
    }
    return batch;
}

Batch make_batch(const std::vector<EncodedExample>& items) {
    std::vector<const EncodedExample*> ptrs;
    for (const auto& ex : items) ptrs.push_back(&ex);
    return make_batch(ptrs);
}

std::vector<Batch> make_batches(const std::vector<EncodedExample>& examples, std::size_t batch_size, bool shuffle,
                                std::uint64_t seed) {
    if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be >= 1");
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle) {
        Rng rng(seed);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    }
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<const EncodedExample*> items;
        for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) items.push_back(&examples[order[i]]);
        batches.push_back(make_batch(items));
    }
    return batches;
}

}  // namespace rematch
