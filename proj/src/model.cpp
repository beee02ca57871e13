#include "rematch/model.hpp"

#include <charconv>
#include <cmath>
#include <stdexcept>

#include "rematch/ops.hpp"

namespace rematch {
namespace {

int parse_int(std::string_view key, std::string_view value) {
    int out = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw std::invalid_argument(std::string(key) + ": expected an integer, got '" + std::string(value) + "'");
    }
    return out;
}

double parse_double(std::string_view key, std::string_view value) {
    double out = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw std::invalid_argument(std::string(key) + ": expected a number, got '" + std::string(value) + "'");
    }
    return out;
}

template <class E, std::size_t N>
E parse_enum(std::string_view key, std::string_view value, const E (&options)[N]) {
    std::string allowed;
    for (E e : options) {
        if (to_string(e) == value) return e;
        allowed += (allowed.empty() ? "" : ", ") + std::string(to_string(e));
    }
    throw std::invalid_argument(std::string(key) + ": unknown value '" + std::string(value) + "' (expected " + allowed + ")");
}

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace

std::string_view to_string(AlignmentProjection v) { return v == AlignmentProjection::identity ? "identity" : "feedforward"; }
std::string_view to_string(PredictionVariant v) {
    switch (v) {
        case PredictionVariant::standard: return "standard";
        case PredictionVariant::symmetric: return "symmetric";
        case PredictionVariant::simplified: return "simplified";
    }
    return "?";
}
std::string_view to_string(FusionVariant v) { return v == FusionVariant::full ? "full" : "simple"; }
std::string_view to_string(ConnectionVariant v) {
    switch (v) {
        case ConnectionVariant::augmented: return "augmented";
        case ConnectionVariant::vanilla_residual: return "vanilla_residual";
        case ConnectionVariant::none: return "none";
    }
    return "?";
}
std::string_view to_string(BlockTopology v) { return v == BlockTopology::stacked ? "stacked" : "parallel"; }

std::string_view to_string(OcclusionFeature f) {
    switch (f) {
        case OcclusionFeature::embedding: return "embedding";
        case OcclusionFeature::residual: return "residual";
        case OcclusionFeature::encoder_output: return "encoder_output";
    }
    return "?";
}

OcclusionFeature parse_occlusion_feature(std::string_view name) {
    static constexpr OcclusionFeature kAll[] = {OcclusionFeature::embedding, OcclusionFeature::residual,
                                                OcclusionFeature::encoder_output};
    return parse_enum("feature", name, kAll);
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
    if (num_blocks < 1) fail("blocks must be >= 1");
    if (enc_layers < 1) fail("enc_layers must be >= 1");
    if (hidden_size < 1) fail("hidden_size must be >= 1");
    if (embed_dim < 1) fail("embed_dim must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) fail("kernel_size must be a positive odd number");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0)) fail("keep_prob must be in (0, 1]");
    if (num_classes < 2) fail("num_classes must be >= 2");
}

bool ModelConfig::set(std::string_view key, std::string_view value) {
    static constexpr AlignmentProjection kAlign[] = {AlignmentProjection::identity, AlignmentProjection::feedforward};
    static constexpr PredictionVariant kPred[] = {PredictionVariant::standard, PredictionVariant::symmetric,
                                                  PredictionVariant::simplified};
    static constexpr FusionVariant kFusion[] = {FusionVariant::full, FusionVariant::simple};
    static constexpr ConnectionVariant kConn[] = {ConnectionVariant::augmented, ConnectionVariant::vanilla_residual,
                                                  ConnectionVariant::none};
    static constexpr BlockTopology kTopo[] = {BlockTopology::stacked, BlockTopology::parallel};

    if (key == "blocks") num_blocks = parse_int(key, value);
    else if (key == "enc_layers") enc_layers = parse_int(key, value);
    else if (key == "hidden_size") hidden_size = parse_int(key, value);
    else if (key == "kernel_size") kernel_size = parse_int(key, value);
    else if (key == "embed_dim") embed_dim = parse_int(key, value);
    else if (key == "keep_prob") keep_prob = parse_double(key, value);
    else if (key == "num_classes") num_classes = parse_int(key, value);
    else if (key == "alignment") alignment = parse_enum(key, value, kAlign);
    else if (key == "prediction") prediction = parse_enum(key, value, kPred);
    else if (key == "fusion") fusion = parse_enum(key, value, kFusion);
    else if (key == "connection") connection = parse_enum(key, value, kConn);
    else if (key == "topology") topology = parse_enum(key, value, kTopo);
    else return false;
    return true;
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_pairs() const {
    return {
        {"blocks", std::to_string(num_blocks)},
        {"enc_layers", std::to_string(enc_layers)},
        {"hidden_size", std::to_string(hidden_size)},
        {"kernel_size", std::to_string(kernel_size)},
        {"embed_dim", std::to_string(embed_dim)},
        {"keep_prob", format_double(keep_prob)},
        {"num_classes", std::to_string(num_classes)},
        {"alignment", std::string(to_string(alignment))},
        {"prediction", std::string(to_string(prediction))},
        {"fusion", std::string(to_string(fusion))},
        {"connection", std::string(to_string(connection))},
        {"topology", std::string(to_string(topology))},
    };
}

std::optional<FeatureLayout::Range> FeatureLayout::range(OcclusionFeature f) const {
    switch (f) {
        case OcclusionFeature::embedding: return embedding;
        case OcclusionFeature::residual: return residual;
        case OcclusionFeature::encoder_output: return encoder_output;
    }
    return std::nullopt;
}

std::size_t block_input_width(const ModelConfig& config, int block) {
    const auto e = static_cast<std::size_t>(config.embed_dim);
    const auto h = static_cast<std::size_t>(config.hidden_size);
    if (block == 1 || config.topology == BlockTopology::parallel) return e;
    return config.connection == ConnectionVariant::vanilla_residual ? h : e + h;
}

FeatureLayout feature_layout(const ModelConfig& config, int block) {
    const auto e = static_cast<std::size_t>(config.embed_dim);
    const auto h = static_cast<std::size_t>(config.hidden_size);
    FeatureLayout layout;
    if (config.connection == ConnectionVariant::none) {
        layout.encoder_output = FeatureLayout::Range{0, h};
        layout.width = h;
        return layout;
    }
    const bool first_input = block == 1 || config.topology == BlockTopology::parallel;
    std::size_t offset = 0;
    if (first_input) {
        layout.embedding = FeatureLayout::Range{0, e};
        offset = e;
    } else if (config.connection == ConnectionVariant::augmented) {
        layout.embedding = FeatureLayout::Range{0, e};
        layout.residual = FeatureLayout::Range{e, h};
        offset = e + h;
    } else {
        layout.residual = FeatureLayout::Range{0, h};
        offset = h;
    }
    layout.encoder_output = FeatureLayout::Range{offset, h};
    layout.width = offset + h;
    return layout;
}

template <class T>
Re2Model<T>::Re2Model(ModelConfig config, std::shared_ptr<const EmbeddingTable> embeddings, std::uint64_t seed)
    : config_(std::move(config)), embeddings_(std::move(embeddings)) {
    config_.validate();
    if (!embeddings_) throw std::invalid_argument("model needs an embedding table");
    if (embeddings_->dim() != static_cast<std::size_t>(config_.embed_dim)) {
        throw DimensionError("embedding table width " + std::to_string(embeddings_->dim()) + " != embed_dim " +
                             std::to_string(config_.embed_dim));
    }
    Rng rng(seed);
    const auto h = static_cast<std::size_t>(config_.hidden_size);
    const auto k = static_cast<std::size_t>(config_.kernel_size);
    for (int n = 1; n <= config_.num_blocks; ++n) {
        const std::string prefix = "block" + std::to_string(n) + ".";
        Block block;
        std::size_t in = block_input_width(config_, n);
        for (int l = 1; l <= config_.enc_layers; ++l) {
            block.encoder.emplace_back(params_, prefix + "encoder.conv" + std::to_string(l), k, in, h, kGeluGain, rng);
            in = h;
        }
        const std::size_t d = feature_layout(config_, n).width;
        if (config_.alignment == AlignmentProjection::feedforward) {
            block.projection.emplace(params_, prefix + "align.projection", d, h, kGeluGain, rng);
        }
        block.g1 = WeightNormDense<T>(params_, prefix + "fusion.g1", 2 * d, h, kGeluGain, rng);
        if (config_.fusion == FusionVariant::full) {
            block.g2 = WeightNormDense<T>(params_, prefix + "fusion.g2", 2 * d, h, kGeluGain, rng);
            block.g3 = WeightNormDense<T>(params_, prefix + "fusion.g3", 2 * d, h, kGeluGain, rng);
            block.merge = WeightNormDense<T>(params_, prefix + "fusion.g", 3 * h, h, kGeluGain, rng);
        }
        blocks_.push_back(std::move(block));
    }
    const std::size_t pred_in = config_.prediction == PredictionVariant::simplified ? 2 * h : 4 * h;
    pred_hidden_ = WeightNormDense<T>(params_, "prediction.dense1", pred_in, h, kGeluGain, rng);
    pred_out_ = WeightNormDense<T>(params_, "prediction.dense2", h, static_cast<std::size_t>(config_.num_classes), 1.0, rng);
}

template <class T>
Var<T> Re2Model<T>::embed(Tape<T>& tape, const std::vector<std::int32_t>& tokens, std::size_t batch,
                          std::size_t len) const {
    if (tokens.size() != batch * len) throw DimensionError("embed: token count does not match [batch, len]");
    const std::size_t dim = embeddings_->dim();
    const std::size_t rows = embeddings_->rows();
    Tensor<T> out(Shape{batch, len, dim});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto id = tokens[i];
        if (id < 0 || static_cast<std::size_t>(id) >= rows) {
            throw std::out_of_range("embed: token index " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(rows));
        }
        const float* src = embeddings_->matrix.ptr() + static_cast<std::size_t>(id) * dim;
        for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] = static_cast<T>(src[j]);
    }
    return tape.constant(std::move(out));
}

template <class T>
Var<T> Re2Model<T>::encode(const ForwardContext<T>& ctx, int block, Var<T> x, const Mask& mask) const {
    Var<T> h = x;
    for (const auto& conv : blocks_.at(static_cast<std::size_t>(block - 1)).encoder) {
        h = ops::mask_positions(h, mask);
        h = ops::gelu(conv(ctx.tape, ctx.dropout(h)));
    }
    return ops::mask_positions(h, mask);
}

template <class T>
AlignOutput<T> Re2Model<T>::align(const ForwardContext<T>& ctx, int block, Var<T> a, Var<T> b, const Mask& mask_a,
                                  const Mask& mask_b) const {
    const auto& blk = blocks_.at(static_cast<std::size_t>(block - 1));
    Var<T> pa = a, pb = b;
    if (blk.projection) {
        pa = feed_forward(ctx, *blk.projection, a);
        pb = feed_forward(ctx, *blk.projection, b);
    }
    AlignOutput<T> out;
    out.scores = ops::matmul(pa, ops::transpose(pb));
    const std::size_t la = a.dim(1), lb = b.dim(1);
    out.attention_a = ops::softmax_masked(out.scores, ops::broadcast_rows(mask_b, la));
    out.attention_b = ops::softmax_masked(ops::transpose(out.scores), ops::broadcast_rows(mask_a, lb));
    out.aligned_a = ops::matmul(out.attention_a, b);
    out.aligned_b = ops::matmul(out.attention_b, a);
    return out;
}

template <class T>
Var<T> Re2Model<T>::fuse(const ForwardContext<T>& ctx, int block, Var<T> a, Var<T> aligned) const {
    if (a.shape() != aligned.shape()) {
        throw DimensionError("fuse: " + shape_string(a.shape()) + " vs " + shape_string(aligned.shape()));
    }
    const auto& blk = blocks_.at(static_cast<std::size_t>(block - 1));
    Var<T> f1 = feed_forward(ctx, blk.g1, ops::concat<T>({a, aligned}));
    if (config_.fusion == FusionVariant::simple) return f1;
    Var<T> f2 = feed_forward(ctx, blk.g2, ops::concat<T>({a, ops::sub(a, aligned)}));
    Var<T> f3 = feed_forward(ctx, blk.g3, ops::concat<T>({a, ops::mul(a, aligned)}));
    return feed_forward(ctx, blk.merge, ops::concat<T>({f1, f2, f3}));
}

template <class T>
Var<T> Re2Model<T>::connect(int block, Var<T> embedded, const std::vector<Var<T>>& outputs) const {
    if (block == 1 || config_.topology == BlockTopology::parallel) return embedded;
    if (outputs.size() < static_cast<std::size_t>(block - 1)) {
        throw std::invalid_argument("connect: block " + std::to_string(block) + " needs the previous block outputs");
    }
    // o(0) is zero, so block 2 sees o(1) alone and nothing is scaled.
    Var<T> residual = outputs[static_cast<std::size_t>(block - 2)];
    if (block >= 3) {
        residual = ops::scale(ops::add(residual, outputs[static_cast<std::size_t>(block - 3)]), T(1) / std::sqrt(T(2)));
    }
    if (config_.connection == ConnectionVariant::vanilla_residual) return residual;
    return ops::concat<T>({embedded, residual});
}

template <class T>
Var<T> Re2Model<T>::pool(Var<T> x, const Mask& mask) const {
    return ops::max_pool(x, mask);
}

template <class T>
Var<T> Re2Model<T>::prediction_features(Var<T> v1, Var<T> v2) const {
    switch (config_.prediction) {
        case PredictionVariant::standard:
            return ops::concat<T>({v1, v2, ops::sub(v1, v2), ops::mul(v1, v2)});
        case PredictionVariant::symmetric:
            return ops::concat<T>({v1, v2, ops::abs(ops::sub(v1, v2)), ops::mul(v1, v2)});
        case PredictionVariant::simplified:
            return ops::concat<T>({v1, v2});
    }
    throw std::logic_error("unknown prediction variant");
}

template <class T>
Var<T> Re2Model<T>::predict(const ForwardContext<T>& ctx, Var<T> v1, Var<T> v2) const {
    Var<T> hidden = feed_forward(ctx, pred_hidden_, prediction_features(v1, v2));
    return pred_out_(ctx.tape, ctx.dropout(hidden));
}

template <class T>
ForwardResult<T> Re2Model<T>::forward(Tape<T>& tape, const Batch& batch, bool training, Rng* dropout_rng,
                                      const ForwardOptions<T>& options) const {
    const ForwardContext<T> ctx{tape, training, config_.keep_prob, dropout_rng};
    const Var<T> emb_a = embed(tape, batch.tokens_a, batch.size, batch.len_a);
    const Var<T> emb_b = embed(tape, batch.tokens_b, batch.size, batch.len_b);

    for (const auto& occ : options.occlusions) {
        if (occ.block < 1 || occ.block > config_.num_blocks) {
            throw std::invalid_argument("occlusion block " + std::to_string(occ.block) + " outside 1.." +
                                        std::to_string(config_.num_blocks));
        }
        if (!feature_layout(config_, occ.block).range(occ.feature)) {
            throw std::invalid_argument("occlusion of " + std::string(to_string(occ.feature)) + " is not applicable in block " +
                                        std::to_string(occ.block));
        }
    }

    ForwardResult<T> result;
    std::vector<Var<T>> outs_a, outs_b;
    for (int n = 1; n <= config_.num_blocks; ++n) {
        BlockTrace<T> trace;
        trace.input_a = connect(n, emb_a, outs_a);
        trace.input_b = connect(n, emb_b, outs_b);
        trace.encoded_a = encode(ctx, n, trace.input_a, batch.mask_a);
        trace.encoded_b = encode(ctx, n, trace.input_b, batch.mask_b);
        if (config_.connection == ConnectionVariant::none) {
            trace.features_a = trace.encoded_a;
            trace.features_b = trace.encoded_b;
        } else {
            trace.features_a = ops::concat<T>({trace.input_a, trace.encoded_a});
            trace.features_b = ops::concat<T>({trace.input_b, trace.encoded_b});
        }
        const FeatureLayout layout = feature_layout(config_, n);
        for (const auto& occ : options.occlusions) {
            if (occ.block != n) continue;
            const auto [offset, width] = *layout.range(occ.feature);
            trace.features_a = ops::zero_slice(trace.features_a, offset, width);
            trace.features_b = ops::zero_slice(trace.features_b, offset, width);
        }

        AlignOutput<T> al = align(ctx, n, trace.features_a, trace.features_b, batch.mask_a, batch.mask_b);
        trace.scores = al.scores;
        trace.attention_a = al.attention_a;
        trace.attention_b = al.attention_b;
        trace.aligned_a = al.aligned_a;
        trace.aligned_b = al.aligned_b;
        if (options.fusion_probe) {
            trace.output_a = options.fusion_probe(n, trace.features_a);
            trace.output_b = options.fusion_probe(n, trace.features_b);
        } else {
            trace.output_a = fuse(ctx, n, trace.features_a, al.aligned_a);
            trace.output_b = fuse(ctx, n, trace.features_b, al.aligned_b);
        }
        outs_a.push_back(trace.output_a);
        outs_b.push_back(trace.output_b);
        result.blocks.push_back(trace);
    }

    Var<T> final_a = outs_a.back(), final_b = outs_b.back();
    if (config_.topology == BlockTopology::parallel) {
        for (std::size_t i = 0; i + 1 < outs_a.size(); ++i) {
            final_a = ops::add(final_a, outs_a[i]);
            final_b = ops::add(final_b, outs_b[i]);
        }
    }
    result.pooled_a = pool(final_a, batch.mask_a);
    result.pooled_b = pool(final_b, batch.mask_b);
    result.logits = predict(ctx, result.pooled_a, result.pooled_b);
    return result;
}

template <class T>
Tensor<T> Re2Model<T>::probabilities(const Batch& batch, const ForwardOptions<T>& options) const {
    Tape<T> tape(false);
    const auto result = forward(tape, batch, false, nullptr, options);
    return ops::softmax_rows(result.logits.value());
}

template class Re2Model<float>;
template class Re2Model<double>;

namespace {

std::shared_ptr<const EmbeddingTable> placeholder_table(const ModelConfig& config) {
    return std::make_shared<const EmbeddingTable>(
        EmbeddingTable{Tensor<float>(Shape{1, static_cast<std::size_t>(config.embed_dim)}, 0.0f)});
}

}  // namespace

std::size_t count_params(const ModelConfig& config) {
    return Re2Model<float>(config, placeholder_table(config), 0).parameters().scalar_count();
}

std::vector<std::pair<std::string, std::size_t>> parameter_inventory(const ModelConfig& config) {
    Re2Model<float> model(config, placeholder_table(config), 0);
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& p : model.parameters()) out.emplace_back(p.name, p.value.size());
    return out;
}

}  // namespace rematch
