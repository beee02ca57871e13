#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rematch/data.hpp"
#include "rematch/model.hpp"

namespace rematch {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using ConfigPairs = std::vector<std::pair<std::string, std::string>>;

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::int64_t step = 0;
    int epoch = 0;
    double dev_metric = 0.0;
    std::string dataset;
    std::vector<std::string> class_names;
};

// Layout of <path>:
//   "RE2CKPT\0", u32 version, u64 config length, config text (key=value lines),
//   u32 tensor count, then per tensor: u32 name length, name, u32 rank,
//   u64 dims[rank], u64 payload offset; then the float32 little-endian payloads.
// The frozen embedding table is stored as "embedding.table". Sidecars:
// <path>.meta (key=value) and <path>.vocab (one token per line).
void save_checkpoint(const std::filesystem::path& path, const Re2Model<float>& model, const ConfigPairs& config,
                     const CheckpointMeta& meta, const Vocabulary* vocab);

struct LoadedCheckpoint {
    ConfigPairs config;
    CheckpointMeta meta;
    std::optional<Vocabulary> vocab;
    std::unique_ptr<Re2Model<float>> model;
};

// Throws CheckpointError on a missing file, bad magic, truncated data, or a
// tensor table that does not match the configured architecture.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Model keys of a config listing; other keys are ignored.
ModelConfig model_config_from_pairs(const ConfigPairs& config);

}  // namespace rematch
