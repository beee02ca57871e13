#include "rematch/analysis.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace rematch {
namespace {

std::uint64_t model_seed(std::uint64_t seed) { return Rng(seed).split("init").next_u64(); }

std::string spec_label(const std::vector<OcclusionSpec>& specs) {
    if (specs.empty()) return "none";
    std::string out;
    for (const auto& s : specs) {
        if (!out.empty()) out += '+';
        out += "block" + std::to_string(s.block) + ":" + std::string(to_string(s.feature));
    }
    return out;
}

std::vector<double> class_accuracy(const EvalResult& r, std::size_t classes) {
    return per_class_accuracy(r.predictions, r.labels, classes);
}

OcclusionResult occlusion_against(const Re2Model<float>& model, const std::vector<EncodedExample>& data,
                                  const std::vector<OcclusionSpec>& specs, const std::vector<double>& baseline,
                                  std::size_t batch_size) {
    const ModelConfig& config = model.config();
    const auto classes = static_cast<std::size_t>(config.num_classes);
    OcclusionResult out;
    out.specs = specs;
    out.baseline = baseline;
    for (const auto& s : specs) {
        if (s.block < 1 || s.block > config.num_blocks) {
            throw std::invalid_argument("occlusion block " + std::to_string(s.block) + " outside 1.." +
                                        std::to_string(config.num_blocks));
        }
        if (!feature_layout(config, s.block).range(s.feature)) {
            out.applicable = false;
            out.reason = std::string(to_string(s.feature)) + " is absent in block " + std::to_string(s.block);
        }
    }
    if (!out.applicable) {
        out.masked = baseline;
        out.delta.assign(classes, 0.0);
        return out;
    }
    ForwardOptions<float> options;
    options.occlusions = specs;
    out.masked = class_accuracy(evaluate(model, data, false, batch_size, options), classes);
    out.delta.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) out.delta[c] = out.masked[c] - baseline[c];
    return out;
}

}  // namespace

std::pair<double, double> mean_std(const std::vector<double>& values) {
    if (values.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    if (values.size() == 1) return {mean, 0.0};
    double sq = 0.0;
    for (double v : values) sq += (v - mean) * (v - mean);
    return {mean, std::sqrt(sq / static_cast<double>(values.size() - 1))};
}

OcclusionResult occlusion_run(const Re2Model<float>& model, const std::vector<EncodedExample>& data,
                              const std::vector<OcclusionSpec>& specs, std::size_t batch_size) {
    const auto classes = static_cast<std::size_t>(model.config().num_classes);
    const auto baseline = class_accuracy(evaluate(model, data, false, batch_size), classes);
    return occlusion_against(model, data, specs, baseline, batch_size);
}

std::vector<OcclusionResult> occlusion_grid(const Re2Model<float>& model, const std::vector<EncodedExample>& data,
                                            std::size_t batch_size) {
    const auto classes = static_cast<std::size_t>(model.config().num_classes);
    const auto baseline = class_accuracy(evaluate(model, data, false, batch_size), classes);
    std::vector<OcclusionResult> out;
    for (int n = 1; n <= model.config().num_blocks; ++n) {
        for (auto f : {OcclusionFeature::embedding, OcclusionFeature::residual, OcclusionFeature::encoder_output}) {
            out.push_back(occlusion_against(model, data, {OcclusionSpec{n, f}}, baseline, batch_size));
        }
    }
    return out;
}

void write_occlusion_csv(std::ostream& out, const std::vector<OcclusionResult>& results,
                         const std::vector<std::string>& class_names) {
    out << "mask,applicable";
    for (const auto& c : class_names) out << ",baseline_" << c << ",masked_" << c << ",delta_" << c;
    out << '\n' << std::setprecision(6) << std::fixed;
    for (const auto& r : results) {
        out << spec_label(r.specs) << ',' << (r.applicable ? "yes" : "no");
        for (std::size_t c = 0; c < class_names.size() && c < r.delta.size(); ++c) {
            out << ',' << r.baseline[c] << ',' << r.masked[c] << ',' << r.delta[c];
        }
        out << '\n';
    }
    out << std::defaultfloat;
}

AttentionMatrix attention_matrix_from_trace(int block, const BlockTrace<float>& trace,
                                            const std::vector<std::string>& tokens_a,
                                            const std::vector<std::string>& tokens_b) {
    const Tensor<float>& att = trace.attention_a.value();
    if (att.dim(0) != 1 || att.dim(1) != tokens_a.size() || att.dim(2) != tokens_b.size()) {
        throw DimensionError("attention " + shape_string(att.shape()) + " does not match a single " +
                             std::to_string(tokens_a.size()) + "x" + std::to_string(tokens_b.size()) + " pair");
    }
    AttentionMatrix m;
    m.block = block;
    m.tokens_a = tokens_a;
    m.tokens_b = tokens_b;
    m.weights.assign(att.data().begin(), att.data().end());
    return m;
}

std::vector<AttentionMatrix> export_attention(const Re2Model<float>& model, const Vocabulary& vocab,
                                              const std::vector<std::string>& tokens_a,
                                              const std::vector<std::string>& tokens_b) {
    if (tokens_a.empty() || tokens_b.empty()) throw std::invalid_argument("export_attention: empty sequence");
    EncodedExample ex;
    for (const auto& t : tokens_a) ex.seq_a.push_back(vocab.index(t));
    for (const auto& t : tokens_b) ex.seq_b.push_back(vocab.index(t));
    const Batch batch = make_batch(std::vector<EncodedExample>{ex});
    Tape<float> tape(false);
    const auto result = model.forward(tape, batch, false, nullptr);
    std::vector<AttentionMatrix> out;
    for (std::size_t n = 0; n < result.blocks.size(); ++n) {
        out.push_back(attention_matrix_from_trace(static_cast<int>(n + 1), result.blocks[n], tokens_a, tokens_b));
    }
    return out;
}

void write_attention_csv(std::ostream& out, const std::vector<AttentionMatrix>& matrices) {
    out << "block,row,col,token_a,token_b,weight\n" << std::setprecision(9);
    for (const auto& m : matrices) {
        for (std::size_t i = 0; i < m.tokens_a.size(); ++i) {
            for (std::size_t j = 0; j < m.tokens_b.size(); ++j) {
                out << m.block << ',' << i << ',' << j << ',' << m.tokens_a[i] << ',' << m.tokens_b[j] << ','
                    << m.weights[i * m.tokens_b.size() + j] << '\n';
            }
        }
    }
}

void write_attention_grid(std::ostream& out, const std::vector<AttentionMatrix>& matrices) {
    out << std::setprecision(6) << std::fixed;
    for (const auto& m : matrices) {
        out << "# block " << m.block << '\n';
        for (const auto& t : m.tokens_b) out << '\t' << t;
        out << '\n';
        for (std::size_t i = 0; i < m.tokens_a.size(); ++i) {
            out << m.tokens_a[i];
            for (std::size_t j = 0; j < m.tokens_b.size(); ++j) out << '\t' << m.weights[i * m.tokens_b.size() + j];
            out << '\n';
        }
    }
    out << std::defaultfloat;
}

BenchmarkReport benchmark_inference(const Re2Model<float>& model, const BenchmarkOptions& options) {
    if (options.batch_size == 0 || options.seq_len == 0 || options.num_batches == 0) {
        throw std::invalid_argument("benchmark: batch size, length and batch count must be >= 1");
    }
    const std::size_t rows = model.embeddings().rows();
    Rng rng(options.seed);
    auto synthetic = [&]() {
        std::vector<EncodedExample> items(options.batch_size);
        for (auto& ex : items) {
            for (std::size_t i = 0; i < options.seq_len; ++i) {
                ex.seq_a.push_back(rows > 1 ? static_cast<std::int32_t>(1 + rng.below(rows - 1)) : 0);
                ex.seq_b.push_back(rows > 1 ? static_cast<std::int32_t>(1 + rng.below(rows - 1)) : 0);
            }
        }
        return make_batch(items);
    };
    std::vector<Batch> warmup, timed;
    for (std::size_t i = 0; i < options.warmup_batches; ++i) warmup.push_back(synthetic());
    for (std::size_t i = 0; i < options.num_batches; ++i) timed.push_back(synthetic());

    for (const auto& b : warmup) (void)model.probabilities(b);
    std::vector<double> seconds;
    seconds.reserve(timed.size());
    for (const auto& b : timed) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto probs = model.probabilities(b);
        const auto t1 = std::chrono::steady_clock::now();
        if (probs.dim(0) != b.size) throw std::logic_error("benchmark: unexpected output size");
        seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    BenchmarkReport report;
    std::tie(report.mean_seconds, report.std_seconds) = mean_std(seconds);
    report.batch_size = options.batch_size;
    report.seq_len = options.seq_len;
    report.num_batches = seconds.size();
    report.warmup_batches = options.warmup_batches;
    report.blocks = model.config().num_blocks;
    return report;
}

void write_benchmark_csv(std::ostream& out, const std::vector<BenchmarkReport>& reports) {
    out << "blocks,batch_size,seq_len,num_batches,warmup_batches,mean_seconds,std_seconds\n" << std::setprecision(9);
    for (const auto& r : reports) {
        out << r.blocks << ',' << r.batch_size << ',' << r.seq_len << ',' << r.num_batches << ',' << r.warmup_batches
            << ',' << r.mean_seconds << ',' << r.std_seconds << '\n';
    }
}

std::vector<AblationVariant> ablation_variants() {
    return {
        {"original", [](ModelConfig&) {}},
        {"w/o enc-in", [](ModelConfig& c) { c.connection = ConnectionVariant::none; }},
        {"residual conn.", [](ModelConfig& c) { c.connection = ConnectionVariant::vanilla_residual; }},
        {"simple fusion", [](ModelConfig& c) { c.fusion = FusionVariant::simple; }},
        {"alignment alt.",
         [](ModelConfig& c) {
             c.alignment = c.alignment == AlignmentProjection::identity ? AlignmentProjection::feedforward
                                                                        : AlignmentProjection::identity;
         }},
        {"prediction alt.",
         [](ModelConfig& c) {
             c.prediction = c.prediction == PredictionVariant::simplified ? PredictionVariant::standard
                                                                          : PredictionVariant::simplified;
         }},
        {"parallel blocks", [](ModelConfig& c) { c.topology = BlockTopology::parallel; }},
    };
}

std::vector<AblationRow> ablation_matrix(const ModelConfig& base, const TrainConfig& train_config,
                                         const SweepData& data, const std::vector<AblationVariant>& variants) {
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        ModelConfig config = base;
        v.apply(config);
        Re2Model<float> model(config, data.embeddings, model_seed(train_config.seed));
        const auto result = train(model, data.train, data.dev, train_config, data.ranking);
        rows.push_back({v.name, model.parameters().scalar_count(), result.best_metric});
    }
    return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
    out << "model,parameters,dev_metric\n" << std::setprecision(4) << std::fixed;
    for (const auto& r : rows) out << r.name << ',' << r.parameters << ',' << r.dev_metric << '\n';
    out << std::defaultfloat;
}

std::vector<RobustnessCell> robustness_sweep(const ModelConfig& base, const TrainConfig& train_config,
                                             const SweepData& data, int seeds, int fixed_blocks, int fixed_layers) {
    if (seeds < 1) throw std::invalid_argument("robustness_sweep: seeds must be >= 1");
    std::vector<std::pair<int, int>> settings;
    for (int n = 1; n <= 5; ++n) settings.emplace_back(n, fixed_layers);
    for (int l = 1; l <= 5; ++l) settings.emplace_back(fixed_blocks, l);

    std::vector<RobustnessCell> cells;
    for (const auto& [blocks, layers] : settings) {
        RobustnessCell cell;
        cell.blocks = blocks;
        cell.enc_layers = layers;
        ModelConfig config = base;
        config.num_blocks = blocks;
        config.enc_layers = layers;
        for (int s = 0; s < seeds; ++s) {
            TrainConfig tc = train_config;
            tc.seed = train_config.seed + static_cast<std::uint64_t>(s);
            Re2Model<float> model(config, data.embeddings, model_seed(tc.seed));
            cell.metrics.push_back(train(model, data.train, data.dev, tc, data.ranking).best_metric);
        }
        std::tie(cell.mean, cell.std) = mean_std(cell.metrics);
        cells.push_back(std::move(cell));
    }
    return cells;
}

void write_robustness_csv(std::ostream& out, const std::vector<RobustnessCell>& cells) {
    out << "blocks,enc_layers,runs,mean,std\n" << std::setprecision(6) << std::fixed;
    for (const auto& c : cells) {
        out << c.blocks << ',' << c.enc_layers << ',' << c.metrics.size() << ',' << c.mean << ',' << c.std << '\n';
    }
    out << std::defaultfloat;
}

}  // namespace rematch
