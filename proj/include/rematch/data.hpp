#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rematch/tensor.hpp"

namespace rematch {

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Whitespace word split, ASCII lower-casing, punctuation removed. ASCII
// punctuation inside a word is dropped without splitting ("don't" -> "dont",
// "u.s." -> "us"); a token made only of punctuation disappears. Bytes >= 0x80
// are kept verbatim so UTF-8 words survive.
std::vector<std::string> tokenize(std::string_view text);

enum class DatasetKind { snli, scitail, quora, wikiqa };

std::string_view dataset_name(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view name);
bool is_ranking(DatasetKind kind);

struct Example {
    std::vector<std::string> seq_a;
    std::vector<std::string> seq_b;
    int label = 0;
    std::optional<std::string> group_id;
};

// Label string -> class index. Lines "<label> <index>" or "<label> skip";
// '#' starts a comment. Records whose label maps to skip are dropped.
class LabelMap {
public:
    static LabelMap parse(std::istream& in);
    static LabelMap load(const std::filesystem::path& path);

    // nullopt for a skipped label; throws ParseError for an unknown one.
    std::optional<int> lookup(std::string_view label) const;
    std::size_t num_classes() const { return names_.size(); }
    // Class names ordered by index.
    const std::vector<std::string>& class_names() const { return names_; }

    void add(std::string label, std::optional<int> index);

private:
    std::map<std::string, std::optional<int>, std::less<>> map_;
    std::vector<std::string> names_;
};

struct LoadStats {
    std::size_t records = 0;
    std::size_t skipped_label = 0;
    std::size_t skipped_empty = 0;
};

// SNLI/SciTail: JSON lines with sentence1/sentence2/gold_label, or TSV with a
// header naming those columns, or headerless "label \t a \t b".
// Quora/WikiQA: "label \t a \t b [\t group]"; the group column is kept only
// for WikiQA.
std::vector<Example> load_examples(const std::filesystem::path& path, DatasetKind kind, const LabelMap& labels,
                                   LoadStats* stats = nullptr);

struct DatasetSplits {
    std::vector<Example> train;
    std::vector<Example> dev;
    std::vector<Example> test;
};

struct DatasetSpec {
    DatasetKind kind = DatasetKind::snli;
    std::filesystem::path train;
    std::filesystem::path dev;
    std::filesystem::path test;  // optional
    LabelMap labels;
};

DatasetSplits load_dataset(const DatasetSpec& spec);

// Index 0 is shared by padding and out-of-vocabulary tokens.
class Vocabulary {
public:
    static constexpr std::int32_t kUnknown = 0;

    Vocabulary();

    // Every training token, then dev/test tokens that have a pretrained vector,
    // in order of first appearance.
    static Vocabulary build(const std::vector<Example>& train, const std::vector<const std::vector<Example>*>& others,
                            const std::unordered_set<std::string>* pretrained);

    std::int32_t add(const std::string& token);
    std::int32_t index(std::string_view token) const;
    const std::string& token(std::int32_t index) const { return tokens_.at(static_cast<std::size_t>(index)); }
    std::size_t size() const { return tokens_.size(); }

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
};

// Frozen [V, dim] matrix; row 0 is always zero.
struct EmbeddingTable {
    Tensor<float> matrix;

    std::size_t rows() const { return matrix.dim(0); }
    std::size_t dim() const { return matrix.dim(1); }
};

// Tokens in the file that are also in `wanted` (streaming; the file is large).
std::unordered_set<std::string> scan_embedding_tokens(const std::filesystem::path& path,
                                                      const std::unordered_set<std::string>& wanted);

// Lines "token v1 ... v_dim". Rows of tokens absent from the file stay zero.
// Throws ParseError naming the line on a malformed or wrong-width line.
EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, std::size_t dim = 300);
EmbeddingTable load_embeddings(std::istream& in, const Vocabulary& vocab, std::size_t dim = 300);

// Seeded N(0, 0.5^2) rows for runs without a pretrained file; row 0 zero.
EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed);

struct EncodedExample {
    std::vector<std::int32_t> seq_a;
    std::vector<std::int32_t> seq_b;
    int label = 0;
    int group = -1;
};

// Group ids are numbered in order of first appearance.
std::vector<EncodedExample> encode(const std::vector<Example>& examples, const Vocabulary& vocab);

// Padded to the batch-wise maximum; masks are 1 on real tokens.
struct Batch {
    std::size_t size = 0;
    std::size_t len_a = 0;
    std::size_t len_b = 0;
    std::vector<std::int32_t> tokens_a;  // [size, len_a]
    std::vector<std::int32_t> tokens_b;  // [size, len_b]
    Mask mask_a;
    Mask mask_b;
    std::vector<int> labels;
    std::vector<int> groups;
};

Batch make_batch(const std::vector<const EncodedExample*>& items);
Batch make_batch(const std::vector<EncodedExample>& items);

// Shuffles with `seed` when shuffle is set; otherwise keeps input order.
std::vector<Batch> make_batches(const std::vector<EncodedExample>& examples, std::size_t batch_size, bool shuffle,
                                std::uint64_t seed);

}  // namespace rematch
