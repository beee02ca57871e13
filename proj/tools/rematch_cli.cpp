// rematch: train, evaluate and analyse RE2 text-matching models.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rematch/analysis.hpp"
#include "rematch/checkpoint.hpp"
#include "rematch/kernels.hpp"
#include "rematch/run_config.hpp"

namespace fs = std::filesystem;
using namespace rematch;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string dataset;
    std::optional<int> blocks;
    std::optional<int> enc_layers;
    std::vector<std::string> variants;
    std::vector<std::string> sets;
    std::string checkpoint;
    std::string run_dir;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "key=value config file");
    cmd->add_option("--seed", f.seed, "master seed");
    cmd->add_option("--dataset", f.dataset, "snli, scitail, quora or wikiqa");
    cmd->add_option("--blocks", f.blocks, "number of blocks");
    cmd->add_option("--enc-layers", f.enc_layers, "encoder layers per block");
    cmd->add_option("--variant", f.variants, "model switch KEY=VALUE (repeatable)");
    cmd->add_option("--set", f.sets, "any config key KEY=VALUE (repeatable)");
    cmd->add_option("--checkpoint", f.checkpoint, "checkpoint path");
    cmd->add_option("--run-dir", f.run_dir, "write artifacts here instead of <out_dir>/<time>-seed<seed>");
}

std::pair<std::string, std::string> split_kv(const std::string& s, const char* flag) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError(std::string(flag) + " expects KEY=VALUE, got '" + s + "'");
    return {s.substr(0, eq), s.substr(eq + 1)};
}

// file < environment < flags. A checkpoint's stored config, when given, sits
// below the file layer.
RunConfig resolve_config(const CommonFlags& f, const ConfigPairs* base = nullptr) {
    try {
        RunConfig cfg;
        if (base) {
            for (const auto& [k, v] : *base) cfg.set(k, v);
        }
        if (!f.config.empty()) cfg.load_file(f.config);
        cfg.apply_env();
        if (!f.dataset.empty()) cfg.set("dataset", f.dataset);
        if (f.seed) cfg.set("seed", std::to_string(*f.seed));
        if (f.blocks) cfg.set("blocks", std::to_string(*f.blocks));
        if (f.enc_layers) cfg.set("enc_layers", std::to_string(*f.enc_layers));
        for (const auto& v : f.variants) {
            const auto [k, val] = split_kv(v, "--variant");
            ModelConfig probe;
            if (!probe.set(k, val)) throw UsageError("--variant: '" + k + "' is not a model switch");
            cfg.set(k, val);
        }
        for (const auto& s : f.sets) {
            const auto [k, val] = split_kv(s, "--set");
            cfg.set(k, val);
        }
        cfg.model.validate();
        cfg.train.validate();
        return cfg;
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y%m%d-%H%M%S");
    return ss.str();
}

fs::path make_run_dir(const RunConfig& cfg, const CommonFlags& f) {
    fs::path dir;
    if (!f.run_dir.empty()) {
        dir = f.run_dir;
    } else {
        const std::string stem = timestamp() + "-seed" + std::to_string(cfg.train.seed);
        dir = fs::path(cfg.out_dir) / stem;
        for (int i = 2; fs::exists(dir); ++i) dir = fs::path(cfg.out_dir) / (stem + "-" + std::to_string(i));
    }
    fs::create_directories(dir);
    std::ofstream snap(dir / "config.txt");
    for (const auto& [k, v] : cfg.to_pairs()) snap << k << '=' << v << '\n';
    return dir;
}

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& fn) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    fn(out);
}

LoadedCheckpoint open_checkpoint(const CommonFlags& f) {
    if (f.checkpoint.empty()) throw UsageError("--checkpoint is required");
    return load_checkpoint(f.checkpoint);
}

const Vocabulary& checkpoint_vocab(const LoadedCheckpoint& ckpt) {
    if (!ckpt.vocab) throw std::runtime_error("checkpoint has no vocabulary sidecar (.vocab)");
    return *ckpt.vocab;
}

std::vector<std::string> class_names(const LoadedCheckpoint& ckpt) {
    if (!ckpt.meta.class_names.empty()) return ckpt.meta.class_names;
    std::vector<std::string> out;
    for (int c = 0; c < ckpt.model->config().num_classes; ++c) out.push_back(std::to_string(c));
    return out;
}

int cmd_train(const CommonFlags& f) {
    RunConfig cfg = resolve_config(f);
    try {
        (void)cfg.dataset_spec();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    const PreparedData data = prepare_data(cfg);
    cfg.model.num_classes = static_cast<int>(data.labels.num_classes());
    const fs::path dir = make_run_dir(cfg, f);
    std::cout << "run directory: " << dir.string() << "\n"
              << "train " << data.train.size() << " pairs, dev " << data.dev.size() << " pairs, vocabulary "
              << data.vocab.size() << ", kernels " << kernels::isa_name(kernels::active_isa()) << "\n";

    Re2Model<float> model(cfg.model, data.embeddings, cfg.init_seed());
    std::cout << "trainable parameters: " << model.parameters().scalar_count() << "\n";
    const bool ranking = is_ranking(cfg.dataset);
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& r) {
        std::cout << "epoch " << r.epoch << "  loss " << std::fixed << std::setprecision(4) << r.train_loss << "  dev "
                  << (ranking ? "mrr " : "acc ") << r.dev_metric << "  lr " << std::scientific << std::setprecision(3)
                  << r.lr << std::defaultfloat << "\n";
    };
    const TrainResult result = train(model, data.train, data.dev, cfg.train, ranking, hooks);

    write_file(dir / "history.csv", [&](std::ostream& out) { write_history_csv(out, result.history); });
    CheckpointMeta meta;
    meta.seed = cfg.train.seed;
    meta.step = result.steps;
    meta.epoch = result.best_epoch;
    meta.dev_metric = result.best_metric;
    meta.dataset = std::string(dataset_name(cfg.dataset));
    meta.class_names = data.labels.class_names();
    save_checkpoint(dir / "model.ckpt", model, cfg.to_pairs(), meta, &data.vocab);
    std::cout << "best epoch " << result.best_epoch << " dev " << std::fixed << std::setprecision(4)
              << result.best_metric << "\ncheckpoint: " << (dir / "model.ckpt").string() << "\n";
    return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& split) {
    const LoadedCheckpoint ckpt = open_checkpoint(f);
    RunConfig cfg = resolve_config(f, &ckpt.config);
    LabelMap labels;
    std::vector<EncodedExample> data;
    try {
        labels = cfg.label_map();
        data = load_split(cfg, split, checkpoint_vocab(ckpt), labels);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (static_cast<int>(labels.num_classes()) != ckpt.model->config().num_classes) {
        throw std::runtime_error("dataset has " + std::to_string(labels.num_classes()) + " classes, checkpoint has " +
                                 std::to_string(ckpt.model->config().num_classes));
    }
    const bool ranking = is_ranking(cfg.dataset);
    const EvalResult r = evaluate(*ckpt.model, data, ranking, static_cast<std::size_t>(cfg.eval_batch_size));
    const fs::path dir = make_run_dir(cfg, f);
    std::cout << std::fixed << std::setprecision(4);
    std::cout << "pairs: " << data.size() << "\n";
    if (ranking) {
        std::cout << "MAP: " << r.ranking->map << "\nMRR: " << r.ranking->mrr << "\n";
    } else {
        std::cout << "accuracy: " << r.accuracy << "\n";
    }
    write_file(dir / ("eval_" + split + ".csv"), [&](std::ostream& out) {
        out << "split,pairs,loss,accuracy,map,mrr\n" << std::setprecision(6) << std::fixed;
        out << split << ',' << data.size() << ',' << r.loss << ',' << r.accuracy << ',';
        if (r.ranking) out << r.ranking->map << ',' << r.ranking->mrr;
        else out << ',';
        out << '\n';
    });
    return 0;
}

std::vector<std::string> require_tokens(const std::string& text, const char* which) {
    auto tokens = tokenize(text);
    if (tokens.empty()) throw UsageError(std::string(which) + " is empty after tokenization");
    return tokens;
}

int cmd_predict(const CommonFlags& f, const std::string& text_a, const std::string& text_b) {
    const LoadedCheckpoint ckpt = open_checkpoint(f);
    const auto a = require_tokens(text_a, "first sequence");
    const auto b = require_tokens(text_b, "second sequence");
    const Vocabulary& vocab = checkpoint_vocab(ckpt);
    EncodedExample ex;
    for (const auto& t : a) ex.seq_a.push_back(vocab.index(t));
    for (const auto& t : b) ex.seq_b.push_back(vocab.index(t));
    const Tensor<float> probs = ckpt.model->probabilities(make_batch(std::vector<EncodedExample>{ex}));
    const auto names = class_names(ckpt);
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.dim(1); ++c) {
        if (probs[c] > probs[best]) best = c;
    }
    std::cout << "label: " << names.at(best) << "\n" << std::fixed << std::setprecision(6);
    for (std::size_t c = 0; c < probs.dim(1); ++c) std::cout << "p(" << names.at(c) << ") = " << probs[c] << "\n";
    return 0;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("expected a comma-separated integer list, got '" + text + "'");
        }
    }
    if (out.empty()) throw UsageError("empty integer list");
    return out;
}

int cmd_benchmark(const CommonFlags& f, const std::string& compare_blocks) {
    std::optional<LoadedCheckpoint> ckpt;
    if (!f.checkpoint.empty()) ckpt = load_checkpoint(f.checkpoint);
    RunConfig cfg = resolve_config(f, ckpt ? &ckpt->config : nullptr);
    BenchmarkOptions opts;
    opts.batch_size = static_cast<std::size_t>(cfg.bench_batch_size);
    opts.seq_len = static_cast<std::size_t>(cfg.bench_seq_len);
    opts.num_batches = static_cast<std::size_t>(cfg.bench_batches);
    opts.warmup_batches = static_cast<std::size_t>(cfg.bench_warmup);
    opts.seed = cfg.train.seed;
    if (cfg.bench_batch_size < 1 || cfg.bench_seq_len < 1 || cfg.bench_batches < 1 || cfg.bench_warmup < 0) {
        throw UsageError("benchmark sizes must be positive");
    }

    std::shared_ptr<const EmbeddingTable> table;
    if (ckpt) {
        table = ckpt->model->shared_embeddings();
    } else {
        Vocabulary vocab;
        for (int i = 1; i < 5000; ++i) vocab.add("w" + std::to_string(i));
        table = std::make_shared<const EmbeddingTable>(
            random_embeddings(vocab, static_cast<std::size_t>(cfg.model.embed_dim), cfg.init_seed()));
    }
    std::vector<int> blocks = compare_blocks.empty() ? std::vector<int>{cfg.model.num_blocks}
                                                     : parse_int_list(compare_blocks);
    const fs::path dir = make_run_dir(cfg, f);
    std::cout << "kernels " << kernels::isa_name(kernels::active_isa()) << ", batch " << opts.batch_size << ", length " << opts.seq_len
              << ", " << opts.num_batches << " batches after " << opts.warmup_batches << " warmup\n";
    std::vector<BenchmarkReport> reports;
    for (int n : blocks) {
        BenchmarkReport r;
        if (ckpt && n == ckpt->model->config().num_blocks) {
            r = benchmark_inference(*ckpt->model, opts);
        } else {
            ModelConfig mc = cfg.model;
            mc.num_blocks = n;
            try {
                mc.validate();
            } catch (const std::exception& e) {
                throw UsageError(e.what());
            }
            Re2Model<float> model(mc, table, cfg.init_seed());
            r = benchmark_inference(model, opts);
        }
        std::cout << "blocks " << r.blocks << ": " << std::fixed << std::setprecision(5) << r.mean_seconds << " +- "
                  << r.std_seconds << " s/batch" << std::defaultfloat << "\n";
        reports.push_back(r);
    }
    write_file(dir / "benchmark.csv", [&](std::ostream& out) { write_benchmark_csv(out, reports); });
    return 0;
}

OcclusionSpec parse_mask(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw UsageError("--mask expects BLOCK:FEATURE, got '" + text + "'");
    try {
        OcclusionSpec s;
        std::size_t used = 0;
        s.block = std::stoi(text.substr(0, colon), &used);
        if (used != colon) throw std::invalid_argument("block");
        s.feature = parse_occlusion_feature(text.substr(colon + 1));
        return s;
    } catch (const std::exception& e) {
        throw UsageError("--mask '" + text + "': " + e.what());
    }
}

int cmd_occlusion(const CommonFlags& f, const std::string& split, const std::vector<std::string>& masks) {
    const LoadedCheckpoint ckpt = open_checkpoint(f);
    RunConfig cfg = resolve_config(f, &ckpt.config);
    std::vector<OcclusionSpec> specs;
    for (const auto& m : masks) specs.push_back(parse_mask(m));
    for (const auto& s : specs) {
        if (s.block < 1 || s.block > ckpt.model->config().num_blocks) {
            throw UsageError("--mask block " + std::to_string(s.block) + " outside 1.." +
                             std::to_string(ckpt.model->config().num_blocks));
        }
    }
    std::vector<EncodedExample> data;
    try {
        data = load_split(cfg, split, checkpoint_vocab(ckpt), cfg.label_map());
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto names = class_names(ckpt);
    const auto batch = static_cast<std::size_t>(cfg.eval_batch_size);
    std::vector<OcclusionResult> results;
    if (specs.empty()) {
        results = occlusion_grid(*ckpt.model, data, batch);
    } else {
        results.push_back(occlusion_run(*ckpt.model, data, specs, batch));
        if (!results.back().applicable) {
            std::cerr << "not applicable: " << results.back().reason << "\n";
            return 1;
        }
    }
    const fs::path dir = make_run_dir(cfg, f);
    write_file(dir / "occlusion.csv", [&](std::ostream& out) { write_occlusion_csv(out, results, names); });
    write_occlusion_csv(std::cout, results, names);
    return 0;
}

int cmd_attention(const CommonFlags& f, const std::string& text_a, const std::string& text_b) {
    const LoadedCheckpoint ckpt = open_checkpoint(f);
    RunConfig cfg = resolve_config(f, &ckpt.config);
    const auto a = require_tokens(text_a, "first sequence");
    const auto b = require_tokens(text_b, "second sequence");
    const auto matrices = export_attention(*ckpt.model, checkpoint_vocab(ckpt), a, b);
    const fs::path dir = make_run_dir(cfg, f);
    write_file(dir / "attention.csv", [&](std::ostream& out) { write_attention_csv(out, matrices); });
    write_file(dir / "attention.txt", [&](std::ostream& out) { write_attention_grid(out, matrices); });
    write_attention_grid(std::cout, matrices);
    return 0;
}

SweepData sweep_data(RunConfig& cfg) {
    try {
        (void)cfg.dataset_spec();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    PreparedData data = prepare_data(cfg);
    cfg.model.num_classes = static_cast<int>(data.labels.num_classes());
    return SweepData{data.embeddings, std::move(data.train), std::move(data.dev), is_ranking(cfg.dataset)};
}

int cmd_ablation(const CommonFlags& f) {
    RunConfig cfg = resolve_config(f);
    const SweepData data = sweep_data(cfg);
    const fs::path dir = make_run_dir(cfg, f);
    const auto rows = ablation_matrix(cfg.model, cfg.train, data);
    write_file(dir / "ablation.csv", [&](std::ostream& out) { write_ablation_csv(out, rows); });
    write_ablation_csv(std::cout, rows);
    return 0;
}

int cmd_robustness(const CommonFlags& f) {
    RunConfig cfg = resolve_config(f);
    if (cfg.sweep_seeds < 1) throw UsageError("sweep_seeds must be >= 1");
    const SweepData data = sweep_data(cfg);
    const fs::path dir = make_run_dir(cfg, f);
    const auto cells = robustness_sweep(cfg.model, cfg.train, data, cfg.sweep_seeds, cfg.model.num_blocks,
                                        cfg.model.enc_layers);
    write_file(dir / "robustness.csv", [&](std::ostream& out) { write_robustness_csv(out, cells); });
    write_robustness_csv(std::cout, cells);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RE2 text matching: training, evaluation and analysis"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string split = "dev";
    std::string text_a, text_b, compare_blocks;
    std::vector<std::string> masks;

    auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint + history");
    add_common(train_cmd, flags);
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval_cmd, flags);
    eval_cmd->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
    auto* predict_cmd = app.add_subcommand("predict", "classify one pair");
    add_common(predict_cmd, flags);
    predict_cmd->add_option("seq_a", text_a)->required();
    predict_cmd->add_option("seq_b", text_b)->required();
    auto* bench_cmd = app.add_subcommand("benchmark", "time inference on synthetic batches");
    add_common(bench_cmd, flags);
    bench_cmd->add_option("--compare-blocks", compare_blocks, "comma-separated block counts, e.g. 1,2,3");
    auto* occ_cmd = app.add_subcommand("occlusion", "per-class accuracy change when feature slices are zeroed");
    add_common(occ_cmd, flags);
    occ_cmd->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
    occ_cmd->add_option("--mask", masks, "BLOCK:FEATURE (embedding, residual, encoder_output); default: all");
    auto* att_cmd = app.add_subcommand("attention", "export per-block attention for one pair");
    add_common(att_cmd, flags);
    att_cmd->add_option("seq_a", text_a)->required();
    att_cmd->add_option("seq_b", text_b)->required();
    auto* abl_cmd = app.add_subcommand("ablation", "train the original model and six ablations");
    add_common(abl_cmd, flags);
    auto* rob_cmd = app.add_subcommand("robustness", "sweep blocks 1..5 and encoder layers 1..5");
    add_common(rob_cmd, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*train_cmd) return cmd_train(flags);
        if (*eval_cmd) return cmd_eval(flags, split);
        if (*predict_cmd) return cmd_predict(flags, text_a, text_b);
        if (*bench_cmd) return cmd_benchmark(flags, compare_blocks);
        if (*occ_cmd) return cmd_occlusion(flags, split, masks);
        if (*att_cmd) return cmd_attention(flags, text_a, text_b);
        if (*abl_cmd) return cmd_ablation(flags);
        if (*rob_cmd) return cmd_robustness(flags);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
