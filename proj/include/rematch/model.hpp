#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rematch/data.hpp"
#include "rematch/layers.hpp"

namespace rematch {

// F in the alignment scores: identity, or a single GeLU feed-forward layer.
enum class AlignmentProjection { identity, feedforward };
// Prediction input: [v1; v2; v1-v2; v1*v2], [v1; v2; |v1-v2|; v1*v2] or [v1; v2].
enum class PredictionVariant { standard, symmetric, simplified };
// Fusion: three comparison branches plus a merge layer, or one [a; a'] layer.
enum class FusionVariant { full, simple };
// How block n >= 2 receives its input, and whether the encoder input joins
// the alignment features:
//   augmented        x(n) = [x(1); o(n-1) + o(n-2)], alignment sees [x(n); enc]
//   vanilla_residual x(n) = o(n-1) + o(n-2),         alignment sees [x(n); enc]
//   none             x(n) as augmented,              alignment sees enc only
enum class ConnectionVariant { augmented, vanilla_residual, none };
// stacked: blocks in sequence; parallel: every block reads the embeddings and
// block outputs are summed before pooling.
enum class BlockTopology { stacked, parallel };

std::string_view to_string(AlignmentProjection v);
std::string_view to_string(PredictionVariant v);
std::string_view to_string(FusionVariant v);
std::string_view to_string(ConnectionVariant v);
std::string_view to_string(BlockTopology v);

struct ModelConfig {
    int num_blocks = 2;
    int enc_layers = 2;
    int hidden_size = 150;
    int kernel_size = 3;
    int embed_dim = 300;
    double keep_prob = 0.8;
    int num_classes = 3;
    AlignmentProjection alignment = AlignmentProjection::feedforward;
    PredictionVariant prediction = PredictionVariant::standard;
    FusionVariant fusion = FusionVariant::full;
    ConnectionVariant connection = ConnectionVariant::augmented;
    BlockTopology topology = BlockTopology::stacked;

    // Throws std::invalid_argument naming the offending field.
    void validate() const;

    // Key/value form used by run configs and checkpoints. set() returns false
    // for keys that are not model keys and throws on a bad value.
    bool set(std::string_view key, std::string_view value);
    std::vector<std::pair<std::string, std::string>> to_pairs() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class OcclusionFeature { embedding, residual, encoder_output };

std::string_view to_string(OcclusionFeature f);
OcclusionFeature parse_occlusion_feature(std::string_view name);

struct OcclusionSpec {
    int block = 1;  // 1-based
    OcclusionFeature feature = OcclusionFeature::embedding;
};

// Column ranges [offset, offset + width) of each part of a block's
// alignment/fusion input. Absent parts are nullopt.
struct FeatureLayout {
    using Range = std::pair<std::size_t, std::size_t>;
    std::optional<Range> embedding;
    std::optional<Range> residual;
    std::optional<Range> encoder_output;
    std::size_t width = 0;

    std::optional<Range> range(OcclusionFeature f) const;
};

FeatureLayout feature_layout(const ModelConfig& config, int block);
// Width of x(n).
std::size_t block_input_width(const ModelConfig& config, int block);

// Values recorded for one block during a forward pass. `scores` is e [B, La, Lb];
// `attention_a` is its softmax over b positions, `attention_b` the softmax of
// e^T over a positions.
template <class T>
struct BlockTrace {
    Var<T> input_a, input_b;
    Var<T> encoded_a, encoded_b;
    Var<T> features_a, features_b;
    Var<T> scores;
    Var<T> attention_a, attention_b;
    Var<T> aligned_a, aligned_b;
    Var<T> output_a, output_b;
};

template <class T>
struct ForwardResult {
    Var<T> logits;  // [B, C], unnormalised
    Var<T> pooled_a, pooled_b;
    std::vector<BlockTrace<T>> blocks;
};

template <class T>
struct ForwardOptions {
    std::vector<OcclusionSpec> occlusions;
    // Replaces the fusion layer of every block: (block, fusion input) -> block output.
    std::function<Var<T>(int, Var<T>)> fusion_probe;
};

template <class T>
struct AlignOutput {
    Var<T> aligned_a;  // [B, La, D]
    Var<T> aligned_b;  // [B, Lb, D]
    Var<T> scores;
    Var<T> attention_a;
    Var<T> attention_b;
};

template <class T>
class Re2Model {
public:
    Re2Model(ModelConfig config, std::shared_ptr<const EmbeddingTable> embeddings, std::uint64_t seed);
    Re2Model(const Re2Model&) = delete;
    Re2Model& operator=(const Re2Model&) = delete;

    const ModelConfig& config() const { return config_; }
    ParameterStore<T>& parameters() { return params_; }
    const ParameterStore<T>& parameters() const { return params_; }
    const EmbeddingTable& embeddings() const { return *embeddings_; }
    std::shared_ptr<const EmbeddingTable> shared_embeddings() const { return embeddings_; }

    ForwardResult<T> forward(Tape<T>& tape, const Batch& batch, bool training, Rng* dropout_rng,
                             const ForwardOptions<T>& options = {}) const;

    // Class probabilities [B, C] in inference mode.
    Tensor<T> probabilities(const Batch& batch, const ForwardOptions<T>& options = {}) const;

    // Building blocks, exposed for tests and analysis. Blocks are 1-based.
    Var<T> embed(Tape<T>& tape, const std::vector<std::int32_t>& tokens, std::size_t batch, std::size_t len) const;
    Var<T> encode(const ForwardContext<T>& ctx, int block, Var<T> x, const Mask& mask) const;
    AlignOutput<T> align(const ForwardContext<T>& ctx, int block, Var<T> a, Var<T> b, const Mask& mask_a,
                         const Mask& mask_b) const;
    Var<T> fuse(const ForwardContext<T>& ctx, int block, Var<T> a, Var<T> aligned) const;
    // `outputs` holds o(1) .. o(n-1).
    Var<T> connect(int block, Var<T> embedded, const std::vector<Var<T>>& outputs) const;
    Var<T> pool(Var<T> x, const Mask& mask) const;
    // Input of the prediction network for the configured variant.
    Var<T> prediction_features(Var<T> v1, Var<T> v2) const;
    Var<T> predict(const ForwardContext<T>& ctx, Var<T> v1, Var<T> v2) const;

private:
    struct Block {
        std::vector<WeightNormConv1d<T>> encoder;
        std::optional<WeightNormDense<T>> projection;
        WeightNormDense<T> g1, g2, g3, merge;
    };

    ModelConfig config_;
    std::shared_ptr<const EmbeddingTable> embeddings_;
    ParameterStore<T> params_;
    std::vector<Block> blocks_;
    WeightNormDense<T> pred_hidden_;
    WeightNormDense<T> pred_out_;
};

extern template class Re2Model<float>;
extern template class Re2Model<double>;

// Trainable scalars (the frozen embedding table excluded).
std::size_t count_params(const ModelConfig& config);
// (name, element count) in construction order.
std::vector<std::pair<std::string, std::size_t>> parameter_inventory(const ModelConfig& config);

}  // namespace rematch
