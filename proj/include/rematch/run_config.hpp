#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "rematch/checkpoint.hpp"
#include "rematch/data.hpp"
#include "rematch/model.hpp"
#include "rematch/training.hpp"

namespace rematch {

// Directory of the shipped label maps.
std::filesystem::path default_label_dir();

// Every setting of a command, as flat key=value pairs. Layers are applied in
// order file < environment (RE2_<KEY>) < flags; an unknown key is an error.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DatasetKind dataset = DatasetKind::snli;
    std::string data_root;
    std::string train_path;
    std::string dev_path;
    std::string test_path;
    std::string embeddings;  // empty: seeded random vectors
    std::string labels;      // empty: <label_dir>/<dataset>.labels
    std::string label_dir = default_label_dir().string();
    std::string out_dir = "runs";
    int eval_batch_size = 128;
    int bench_batch_size = 8;
    int bench_seq_len = 20;
    int bench_batches = 100;
    int bench_warmup = 10;
    int sweep_seeds = 3;

    // Throws std::invalid_argument naming the key.
    void set(std::string_view key, std::string_view value);
    // '#' comments and blank lines allowed. Errors carry the line number.
    void load_file(const std::filesystem::path& path);
    using EnvLookup = std::function<const char*(const char*)>;
    void apply_env(const EnvLookup& lookup);
    void apply_env();

    ConfigPairs to_pairs() const;
    static std::vector<std::string> keys();

    // Relative paths resolve against data_root.
    std::filesystem::path resolve(const std::string& path) const;
    // Throws std::invalid_argument naming a missing required path key.
    DatasetSpec dataset_spec(bool need_train = true) const;
    LabelMap label_map() const;
    std::uint64_t init_seed() const;
};

struct PreparedData {
    LabelMap labels;
    Vocabulary vocab;
    std::shared_ptr<const EmbeddingTable> embeddings;
    std::vector<EncodedExample> train;
    std::vector<EncodedExample> dev;
    std::vector<EncodedExample> test;
};

// Loads the splits, builds the vocabulary and the embedding table.
PreparedData prepare_data(const RunConfig& config);

// Loads one split against an existing vocabulary.
std::vector<EncodedExample> load_split(const RunConfig& config, const std::string& split, const Vocabulary& vocab,
                                       const LabelMap& labels);

}  // namespace rematch
