#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "rematch/data.hpp"
#include "rematch/model.hpp"
#include "rematch/training.hpp"

namespace rematch {

struct OcclusionResult {
    std::vector<OcclusionSpec> specs;
    bool applicable = true;
    std::string reason;  // set when not applicable
    std::vector<double> baseline;  // per-class accuracy
    std::vector<double> masked;
    std::vector<double> delta;     // masked - baseline
};

// Zeroes the given feature slices at the alignment/fusion input and reports the
// per-class accuracy change against the unmasked model. A spec that does not
// exist in the model (the residual of block 1, say) gives applicable = false
// and zero deltas.
OcclusionResult occlusion_run(const Re2Model<float>& model, const std::vector<EncodedExample>& data,
                              const std::vector<OcclusionSpec>& specs, std::size_t batch_size = 128);

// One run per (block, feature), sharing a single baseline.
std::vector<OcclusionResult> occlusion_grid(const Re2Model<float>& model, const std::vector<EncodedExample>& data,
                                            std::size_t batch_size = 128);

void write_occlusion_csv(std::ostream& out, const std::vector<OcclusionResult>& results,
                         const std::vector<std::string>& class_names);

struct AttentionMatrix {
    int block = 0;
    std::vector<std::string> tokens_a;
    std::vector<std::string> tokens_b;
    // [len_a, len_b] row-major; each row is a softmax over b positions.
    std::vector<double> weights;
};

AttentionMatrix attention_matrix_from_trace(int block, const BlockTrace<float>& trace,
                                            const std::vector<std::string>& tokens_a,
                                            const std::vector<std::string>& tokens_b);

// One matrix per block for a single pair of tokenized sequences.
std::vector<AttentionMatrix> export_attention(const Re2Model<float>& model, const Vocabulary& vocab,
                                              const std::vector<std::string>& tokens_a,
                                              const std::vector<std::string>& tokens_b);

// Long format: block,row,col,token_a,token_b,weight
void write_attention_csv(std::ostream& out, const std::vector<AttentionMatrix>& matrices);
// Per block: a "# block n" line, a header row of b tokens, then one row per a
// token with tab-separated weights.
void write_attention_grid(std::ostream& out, const std::vector<AttentionMatrix>& matrices);

struct BenchmarkOptions {
    std::size_t batch_size = 8;
    std::size_t seq_len = 20;
    std::size_t num_batches = 100;
    std::size_t warmup_batches = 10;
    std::uint64_t seed = 1;
};

struct BenchmarkReport {
    double mean_seconds = 0.0;
    double std_seconds = 0.0;
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::size_t num_batches = 0;
    std::size_t warmup_batches = 0;
    int blocks = 0;
};

// Times inference on synthetic batches of vocabulary tokens. Batches are built
// before the clock starts; warmup batches are not timed.
BenchmarkReport benchmark_inference(const Re2Model<float>& model, const BenchmarkOptions& options = {});

void write_benchmark_csv(std::ostream& out, const std::vector<BenchmarkReport>& reports);

struct AblationVariant {
    std::string name;
    std::function<void(ModelConfig&)> apply;
};

// The original model followed by the six single-switch ablations.
std::vector<AblationVariant> ablation_variants();

// Shared inputs of a sweep: data is ingested once and reused by every cell.
struct SweepData {
    std::shared_ptr<const EmbeddingTable> embeddings;
    std::vector<EncodedExample> train;
    std::vector<EncodedExample> dev;
    bool ranking = false;
};

struct AblationRow {
    std::string name;
    std::size_t parameters = 0;
    double dev_metric = 0.0;
};

// Trains and evaluates each variant with the same seed.
std::vector<AblationRow> ablation_matrix(const ModelConfig& base, const TrainConfig& train, const SweepData& data,
                                         const std::vector<AblationVariant>& variants = ablation_variants());

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

struct RobustnessCell {
    int blocks = 0;
    int enc_layers = 0;
    std::vector<double> metrics;
    double mean = 0.0;
    double std = 0.0;
};

// Blocks 1..5 at `fixed_layers`, then encoder layers 1..5 at `fixed_blocks`;
// each cell trained with seeds seed, seed + 1, ...
std::vector<RobustnessCell> robustness_sweep(const ModelConfig& base, const TrainConfig& train, const SweepData& data,
                                             int seeds, int fixed_blocks = 3, int fixed_layers = 2);

void write_robustness_csv(std::ostream& out, const std::vector<RobustnessCell>& cells);

// Sample mean and standard deviation (n - 1); std is 0 for a single value.
std::pair<double, double> mean_std(const std::vector<double>& values);

}  // namespace rematch
