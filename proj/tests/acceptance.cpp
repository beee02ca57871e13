// Acceptance runner: one PASS/FAIL line per criterion. Exit status is nonzero
// when a gating criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include "rematch/analysis.hpp"
#include "rematch/metrics.hpp"
#include "rematch/ops.hpp"
#include "rematch/training.hpp"
#include "support.hpp"

using namespace rematch;
using namespace rematch::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

Batch random_batch(Rng& rng, std::size_t b, std::size_t max_len, std::size_t vocab, int classes) {
    std::vector<EncodedExample> items(b);
    for (auto& ex : items) {
        ex.seq_a = random_tokens(rng, 1 + rng.below(max_len), vocab);
        ex.seq_b = random_tokens(rng, 1 + rng.below(max_len), vocab);
        ex.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    }
    return make_batch(items);
}

ModelConfig random_config(Rng& rng) {
    ModelConfig c;
    c.num_blocks = 1 + static_cast<int>(rng.below(3));
    c.enc_layers = 1 + static_cast<int>(rng.below(3));
    c.hidden_size = 4 + static_cast<int>(rng.below(9));
    c.embed_dim = 4 + static_cast<int>(rng.below(9));
    c.kernel_size = rng.uniform() < 0.5 ? 3 : 1;
    c.num_classes = 2 + static_cast<int>(rng.below(3));
    c.alignment = rng.uniform() < 0.5 ? AlignmentProjection::identity : AlignmentProjection::feedforward;
    c.prediction = static_cast<PredictionVariant>(rng.below(3));
    c.fusion = rng.uniform() < 0.5 ? FusionVariant::full : FusionVariant::simple;
    c.connection = static_cast<ConnectionVariant>(rng.below(3));
    c.topology = rng.uniform() < 0.7 ? BlockTopology::stacked : BlockTopology::parallel;
    return c;
}

Outcome gradient_check() {
    const auto t0 = Clock::now();
    auto table = random_table(20, 12, 1);
    Re2Model<double> model(tiny_config(), table, 17);
    Rng data_rng(3);
    const Batch batch = random_batch(data_rng, 2, 4, 20, 3);
    // Training mode: the dropout stream restarts from the same seed on every
    // evaluation so all passes share one mask.
    auto loss = [&](Tape<double>& tape) {
        Rng dropout(99);
        return ops::cross_entropy(model.forward(tape, batch, true, &dropout).logits, batch.labels);
    };
    const GradientReport r = check_model_gradients(model.parameters(), loss, 1e-5);
    const double secs = seconds_since(t0);
    std::ostringstream d;
    d << r.checked << " scalars, max rel err " << std::scientific << std::setprecision(2) << r.max_error << " at "
      << r.worst_parameter << std::fixed << ", " << secs << " s";
    return {r.max_error < 1e-4 && secs < 60.0, d.str()};
}

Outcome normalisation() {
    Rng rng(2026);
    double worst = 0.0;
    bool pad_zero = true;
    for (int trial = 0; trial < 100; ++trial) {
        const ModelConfig cfg = random_config(rng);
        auto table = random_table(30, static_cast<std::size_t>(cfg.embed_dim), rng.next_u64());
        Re2Model<double> model(cfg, table, rng.next_u64());
        const Batch batch = random_batch(rng, 1 + rng.below(4), 7, 30, cfg.num_classes);
        Tape<double> tape(false);
        const auto r = model.forward(tape, batch, false, nullptr);
        auto check = [&](const Tensor<double>& att, const Mask& rows, const Mask& cols) {
            const std::size_t b = att.dim(0), lr = att.dim(1), lc = att.dim(2);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t p = 0; p < lr; ++p) {
                    if (!rows[i * lr + p]) continue;
                    double sum = 0.0;
                    for (std::size_t q = 0; q < lc; ++q) {
                        const double w = att[(i * lr + p) * lc + q];
                        if (cols[i * lc + q]) sum += w;
                        else pad_zero &= w == 0.0;
                    }
                    worst = std::max(worst, std::abs(sum - 1.0));
                }
            }
        };
        for (const auto& blk : r.blocks) {
            check(blk.attention_a.value(), batch.mask_a, batch.mask_b);
            check(blk.attention_b.value(), batch.mask_b, batch.mask_a);
        }
        const Tensor<double> probs = ops::softmax_rows(r.logits.value());
        const std::size_t c = probs.dim(1);
        for (std::size_t i = 0; i < batch.size; ++i) {
            double sum = 0.0;
            for (std::size_t k = 0; k < c; ++k) sum += probs[i * c + k];
            worst = std::max(worst, std::abs(sum - 1.0));
        }
    }
    std::ostringstream d;
    d << "100 configs, max |sum-1| " << std::scientific << std::setprecision(2) << worst << ", padded weight "
      << (pad_zero ? "exactly 0" : "NONZERO");
    return {worst <= 1e-6 && pad_zero, d.str()};
}

Outcome padding_invariance() {
    Rng rng(77);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        ModelConfig cfg = random_config(rng);
        cfg.embed_dim = 16;
        cfg.hidden_size = 12;
        auto table = random_table(50, 16, rng.next_u64());
        Re2Model<float> model(cfg, table, rng.next_u64());
        EncodedExample pair{random_tokens(rng, 1 + rng.below(6), 50), random_tokens(rng, 1 + rng.below(6), 50), 0, -1};
        EncodedExample longer{random_tokens(rng, 8 + rng.below(8), 50), random_tokens(rng, 8 + rng.below(8), 50), 0, -1};
        Tape<float> t1(false), t2(false);
        const auto& alone = model.forward(t1, make_batch(std::vector<EncodedExample>{pair}), false, nullptr).logits.value();
        const auto& mixed =
            model.forward(t2, make_batch(std::vector<EncodedExample>{longer, pair}), false, nullptr).logits.value();
        const std::size_t c = alone.size();
        for (std::size_t k = 0; k < c; ++k) worst = std::max(worst, std::abs(double(alone[k]) - double(mixed[c + k])));
    }
    std::ostringstream d;
    d << "100 cases, max |dlogit| " << std::scientific << std::setprecision(2) << worst;
    return {worst <= 1e-5, d.str()};
}

// Hand-built block inputs: x(1) = embeddings, x(n) = [x(1); o(n-1) + o(n-2)]
// with the sum scaled by 1/sqrt(2) for n >= 3 and o(0) = 0. The probe fusion
// returns the encoder-output columns of its input scaled by the block index,
// so o(n) is fully known.
Outcome block_recurrence() {
    Rng rng(5);
    int cases = 0;
    bool exact = true;
    for (auto conn : {ConnectionVariant::augmented, ConnectionVariant::vanilla_residual, ConnectionVariant::none}) {
        for (int n_blocks = 1; n_blocks <= 5; ++n_blocks) {
            ModelConfig cfg = tiny_config();
            cfg.num_blocks = n_blocks;
            cfg.connection = conn;
            const std::size_t e = 12, h = 8;
            auto table = random_table(25, e, rng.next_u64());
            Re2Model<double> model(cfg, table, rng.next_u64());
            const Batch batch = random_batch(rng, 2, 5, 25, 3);
            ForwardOptions<double> opts;
            opts.fusion_probe = [&](int n, Var<double> f) {
                return ops::scale(ops::slice_last(f, f.dim(2) - h, h), 0.5 + n);
            };
            Tape<double> tape(false);
            const auto r = model.forward(tape, batch, false, nullptr, opts);

            const std::size_t b = batch.size, len = batch.len_a;
            std::vector<double> x1(b * len * e);
            for (std::size_t i = 0; i < b * len; ++i) {
                for (std::size_t j = 0; j < e; ++j) {
                    x1[i * e + j] = table->matrix[static_cast<std::size_t>(batch.tokens_a[i]) * e + j];
                }
            }
            std::vector<std::vector<double>> o;  // o[k] = o(k+1), [b*len, h]
            for (int n = 1; n <= n_blocks; ++n) {
                std::vector<double> x;
                std::size_t width = e;
                if (n == 1) {
                    x = x1;
                } else {
                    std::vector<double> u = o[static_cast<std::size_t>(n - 2)];
                    if (n >= 3) {
                        const auto& prev = o[static_cast<std::size_t>(n - 3)];
                        const double s = 1.0 / std::sqrt(2.0);
                        for (std::size_t i = 0; i < u.size(); ++i) u[i] = (u[i] + prev[i]) * s;
                    }
                    if (conn == ConnectionVariant::vanilla_residual) {
                        x = u;
                        width = h;
                    } else {
                        width = e + h;
                        x.resize(b * len * width);
                        for (std::size_t i = 0; i < b * len; ++i) {
                            for (std::size_t j = 0; j < e; ++j) x[i * width + j] = x1[i * e + j];
                            for (std::size_t j = 0; j < h; ++j) x[i * width + e + j] = u[i * h + j];
                        }
                    }
                }
                const auto& blk = r.blocks[static_cast<std::size_t>(n - 1)];
                exact &= blk.input_a.value().storage() == x;
                // The probe reads the alignment features; recompute its output from them.
                const auto& feats = blk.features_a.value();
                const std::size_t fw = feats.dim(2);
                std::vector<double> out(b * len * h);
                for (std::size_t i = 0; i < b * len; ++i) {
                    for (std::size_t j = 0; j < h; ++j) out[i * h + j] = feats[i * fw + fw - h + j] * (0.5 + n);
                }
                exact &= blk.output_a.value().storage() == out;
                if (conn != ConnectionVariant::none) {
                    for (std::size_t i = 0; i < b * len; ++i) {
                        for (std::size_t j = 0; j < width; ++j) exact &= feats[i * fw + j] == x[i * width + j];
                    }
                }
                o.push_back(std::move(out));
            }
            ++cases;
        }
    }
    std::ostringstream d;
    d << cases << " models (3 connection variants x 1..5 blocks), " << (exact ? "bit-exact" : "MISMATCH");
    return {exact, d.str()};
}

Outcome metric_oracles() {
    Rng rng(31);
    int bad = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(25);
        std::vector<int> pred(n), gold(n), rel(n), groups(n);
        std::vector<double> scores(n);
        for (std::size_t i = 0; i < n; ++i) {
            pred[i] = static_cast<int>(rng.below(3));
            gold[i] = static_cast<int>(rng.below(3));
            groups[i] = static_cast<int>(rng.below(5));
            rel[i] = rng.uniform() < 0.35 ? 1 : 0;
            scores[i] = static_cast<double>(rng.below(8)) / 7.0;
        }
        if (accuracy(pred, gold) != brute_accuracy(pred, gold)) ++bad;
        const BruteRanking want = brute_map_mrr(scores, rel, groups);
        if (want.groups == 0) continue;
        const RankingScores got = map_mrr(scores, rel, groups);
        if (std::abs(got.map - want.map) > 1e-9 || std::abs(got.mrr - want.mrr) > 1e-9) ++bad;
    }
    return {bad == 0, "1000 instances, " + std::to_string(bad) + " disagreements"};
}

Outcome optimizer_oracle() {
    Rng rng(8);
    ParameterStore<double> store;
    auto& a = store.add("a", random_tensor<double>({5, 3}, rng));
    auto& b = store.add("b", random_tensor<double>({7}, rng));
    auto state = AdamState<double>::init(store);
    std::vector<ScalarAdam> ref(22);
    std::vector<double> want(a.value.storage());
    want.insert(want.end(), b.value.storage().begin(), b.value.storage().end());
    double worst = 0.0;
    for (int step = 0; step < 100; ++step) {
        const double lr = lr_at(step, TrainConfig{}) * 50.0;
        for (std::size_t i = 0; i < 15; ++i) a.grad[i] = rng.normal();
        for (std::size_t i = 0; i < 7; ++i) b.grad[i] = rng.normal() * 3.0;
        for (std::size_t i = 0; i < 22; ++i) {
            const double g = i < 15 ? a.grad[i] : b.grad[i - 15];
            want[i] = ref[i].step(want[i], g, lr);
        }
        adam_step(store, state, lr);
        for (std::size_t i = 0; i < 22; ++i) {
            const double got = i < 15 ? a.value[i] : b.value[i - 15];
            worst = std::max(worst, std::abs(got - want[i]));
        }
    }

    int violations = 0, clipped = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        for (auto& p : store) {
            const double spread = 10.0 * rng.uniform();
            for (auto& g : p.grad.data()) g = spread * rng.normal();
        }
        const double before = clip_gradients(store, 5.0);
        if (before > 5.0) {
            ++clipped;
            if (global_grad_norm(store) > 5.0 + 1e-6) ++violations;
        }
    }
    std::ostringstream d;
    d << "100 Adam steps max |diff| " << std::scientific << std::setprecision(2) << worst << "; " << clipped
      << " clipped draws, " << violations << " above 5";
    return {worst <= 1e-10 && violations == 0 && clipped > 0, d.str()};
}

Outcome overfit() {
    const auto t0 = Clock::now();
    ModelConfig cfg;
    cfg.num_blocks = 2;
    const std::size_t vocab = 400;
    auto table = random_table(vocab, static_cast<std::size_t>(cfg.embed_dim), 11);
    Re2Model<float> model(cfg, table, 12);
    const auto data = synthetic_nli(200, vocab, 13);
    TrainConfig train;
    train.max_epochs = 200;
    train.patience = 0;
    train.stop_at_metric = 1.0;
    train.seed = 14;
    const TrainResult r = rematch::train(model, data, data, train, false);
    const double acc = evaluate(model, data, false).accuracy;
    const double secs = seconds_since(t0);
    std::ostringstream d;
    d << "train accuracy " << std::fixed << std::setprecision(4) << acc << " after " << r.history.size()
      << " epochs, " << std::setprecision(1) << secs << " s";
    return {acc == 1.0 && r.history.size() <= 200 && secs < 600.0, d.str()};
}

Outcome parameter_count() {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.embed_dim = 300;
    cfg.hidden_size = 150;
    cfg.num_blocks = 3;
    cfg.enc_layers = 3;
    const std::size_t n = count_params(cfg);
    auto table = random_table(2, 300, 1);
    const Re2Model<float> model(cfg, table, 1);
    const bool consistent = model.parameters().scalar_count() == n;
    return {n >= 2'000'000 && n <= 4'000'000 && consistent,
            std::to_string(n) + " trainable parameters" + (consistent ? "" : " (model disagrees)")};
}

Outcome benchmark() {
    TempDir dir("accept");
    const auto run = dir.path() / "bench";
    const std::string cmd = "'" REMATCH_CLI_PATH "' benchmark --compare-blocks 1,2,3 --run-dir '" + run.string() +
                            "' > '" + (dir.path() / "log").string() + "' 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "benchmark command failed: " + read_file(dir.path() / "log")};
    std::istringstream csv(read_file(run / "benchmark.csv"));
    std::string line;
    std::getline(csv, line);
    std::vector<double> means;
    std::ostringstream d;
    bool protocol = true;
    while (std::getline(csv, line)) {
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 7) return {false, "unexpected benchmark.csv row: " + line};
        protocol &= f[1] == "8" && f[2] == "20" && f[3] == "100";
        means.push_back(std::stod(f[5]));
        d << f[0] << " block(s) " << std::fixed << std::setprecision(4) << std::stod(f[5]) << " +- " << std::stod(f[6])
          << " s; ";
    }
    const bool ok = means.size() == 3 && protocol && means[0] <= means[1] && means[1] <= means[2] && means[2] <= 0.5;
    return {ok, d.str() + (protocol ? "batch 8, length 20, 100 batches" : "protocol mismatch")};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const Criterion criteria[] = {
        {1, "gradient correctness", gradient_check},
        {2, "normalization invariants", normalisation},
        {3, "padding/batch invariance", padding_invariance},
        {4, "block input recurrence", block_recurrence},
        {5, "metric oracles", metric_oracles},
        {6, "optimizer oracle", optimizer_oracle},
        {7, "overfit sanity", overfit},
        {8, "parameter count", parameter_count},
        {9, "benchmark protocol", benchmark},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": " << o.detail << std::endl;
    }
    std::cout << "SKIP  10. long WikiQA run (optional; needs GloVe and WikiQA, see README)" << std::endl;
    return failed == 0 ? 0 : 1;
}
