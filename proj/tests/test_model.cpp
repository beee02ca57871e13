#include <cmath>
#include <numbers>

#include "doctest.h"
#include "rematch/model.hpp"
#include "rematch/ops.hpp"
#include "support.hpp"

using namespace rematch;
using namespace rematch::testing;

namespace {

Batch random_batch(Rng& rng, std::size_t b, std::size_t max_len, std::size_t vocab) {
    std::vector<EncodedExample> items(b);
    for (auto& ex : items) {
        ex.seq_a = random_tokens(rng, 1 + rng.below(max_len), vocab);
        ex.seq_b = random_tokens(rng, 1 + rng.below(max_len), vocab);
        ex.label = static_cast<int>(rng.below(3));
    }
    return make_batch(items);
}

Tensor<double> td(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

std::shared_ptr<const EmbeddingTable> table_from(std::vector<float> rows, std::size_t dim) {
    const std::size_t n = rows.size() / dim;
    return std::make_shared<const EmbeddingTable>(EmbeddingTable{Tensor<float>(Shape{n, dim}, std::move(rows))});
}

}  // namespace

TEST_SUITE("model") {
    TEST_CASE("config defaults, validation and key round trip") {
        ModelConfig c;
        CHECK(c.hidden_size == 150);
        CHECK(c.kernel_size == 3);
        CHECK(c.embed_dim == 300);
        CHECK(c.keep_prob == 0.8);
        c.validate();

        ModelConfig bad = c;
        bad.kernel_size = 4;
        CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("kernel_size"), std::invalid_argument);
        bad = c;
        bad.num_blocks = 0;
        CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("blocks"), std::invalid_argument);
        bad = c;
        bad.num_classes = 1;
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

        ModelConfig changed;
        CHECK(changed.set("connection", "vanilla_residual"));
        CHECK(changed.set("topology", "parallel"));
        CHECK(changed.set("keep_prob", "0.9"));
        CHECK_FALSE(changed.set("base_lr", "0.1"));
        CHECK_THROWS_AS(changed.set("fusion", "fancy"), std::invalid_argument);
        CHECK_THROWS_AS(changed.set("blocks", "two"), std::invalid_argument);
        ModelConfig restored;
        for (const auto& [k, v] : changed.to_pairs()) CHECK(restored.set(k, v));
        CHECK(restored == changed);
    }

    TEST_CASE("embedding lookup returns rows, zero for the unknown index, and never takes gradients") {
        auto table = table_from({0, 0, 1, 2, 3, 4}, 2);
        ModelConfig cfg = tiny_config();
        cfg.embed_dim = 2;
        Re2Model<double> model(cfg, table, 1);
        Tape<double> tape;
        auto e = model.embed(tape, {2, 0, 1}, 1, 3);
        CHECK(e.value() == td({1, 3, 2}, {3, 4, 0, 0, 1, 2}));
        CHECK_FALSE(tape.needs_grad(e));
        CHECK_THROWS_AS(model.embed(tape, {3}, 1, 1), std::out_of_range);
        for (const auto& p : model.parameters()) CHECK(p.name.find("embed") == std::string::npos);
    }

    TEST_CASE("embedding width must match the table") {
        auto table = random_table(5, 7, 1);
        CHECK_THROWS_AS(Re2Model<float>(tiny_config(), table, 1), DimensionError);
    }

    TEST_CASE("encoder keeps the sequence length") {
        Rng rng(2);
        auto table = random_table(20, 12, 2);
        Re2Model<double> model(tiny_config(), table, 3);
        Tape<double> tape(false);
        const Batch batch = random_batch(rng, 3, 6, 20);
        ForwardContext<double> ctx{tape, false, 1.0, nullptr};
        auto x = model.embed(tape, batch.tokens_a, batch.size, batch.len_a);
        auto enc = model.encode(ctx, 1, x, batch.mask_a);
        CHECK(enc.shape() == Shape{3, batch.len_a, 8});
    }

    TEST_CASE("alignment worked examples with an identity projection") {
        ModelConfig cfg = tiny_config();
        cfg.alignment = AlignmentProjection::identity;
        auto table = random_table(4, 12, 1);
        Re2Model<double> model(cfg, table, 1);
        Tape<double> tape(false);
        ForwardContext<double> ctx{tape, false, 1.0, nullptr};
        const Mask one(Shape{1, 1}, 1);
        const Mask two(Shape{1, 2}, 1);

        auto orth = model.align(ctx, 1, tape.constant(td({1, 1, 2}, {1, 0})), tape.constant(td({1, 1, 2}, {0, 1})), one, one);
        CHECK(orth.scores.value()[0] == 0.0);

        auto same = model.align(ctx, 1, tape.constant(td({1, 1, 2}, {0.3, -2})), tape.constant(td({1, 1, 2}, {0.3, -2})),
                                one, one);
        CHECK(same.aligned_a.value() == td({1, 1, 2}, {0.3, -2}));

        auto weighted = model.align(ctx, 1, tape.constant(td({1, 1, 2}, {std::log(3.0), 0})),
                                    tape.constant(td({1, 2, 2}, {1, 0, 0, 1})), one, two);
        CHECK(weighted.attention_a.value()[0] == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(weighted.aligned_a.value()[0] == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(weighted.aligned_a.value()[1] == doctest::Approx(0.25).epsilon(1e-12));
    }

    TEST_CASE("fusion variants differ exactly by the comparison branches and merge layer") {
        ModelConfig full = tiny_config();
        ModelConfig simple = full;
        simple.fusion = FusionVariant::simple;
        std::size_t extra = 0;
        for (const auto& [name, n] : parameter_inventory(full)) {
            if (name.find("fusion.g2") != std::string::npos || name.find("fusion.g3") != std::string::npos ||
                name.find("fusion.g.") != std::string::npos) {
                extra += n;
            }
        }
        CHECK(extra > 0);
        CHECK(count_params(full) - count_params(simple) == extra);
    }

    TEST_CASE("fusion on self-aligned input sees a zero difference and a square") {
        // With a' = a the g2 input is [a; 0] and the g3 input is [a; a*a], so
        // the full output equals a run where those inputs are built by hand.
        ModelConfig cfg = tiny_config();
        auto table = random_table(4, 12, 1);
        Re2Model<double> model(cfg, table, 5);
        Rng rng(9);
        Tape<double> tape(false);
        ForwardContext<double> ctx{tape, false, 1.0, nullptr};
        const std::size_t d = feature_layout(cfg, 1).width;
        auto a = tape.constant(random_tensor<double>({1, 3, d}, rng));
        auto out = model.fuse(ctx, 1, a, a);
        auto diff = ops::sub(a, a);
        for (double v : diff.value().data()) CHECK(v == 0.0);
        CHECK(out.shape() == Shape{1, 3, 8});
        CHECK_THROWS_AS(model.fuse(ctx, 1, a, tape.constant(random_tensor<double>({1, 2, d}, rng))), DimensionError);
    }

    TEST_CASE("block input recurrence for the first three blocks") {
        ModelConfig cfg = tiny_config();
        cfg.num_blocks = 3;
        auto table = random_table(4, 12, 1);
        Re2Model<double> model(cfg, table, 1);
        Rng rng(3);
        Tape<double> tape(false);
        auto x1 = tape.constant(random_tensor<double>({1, 2, 12}, rng));
        const auto uv = random_tensor<double>({1, 2, 8}, rng);
        auto u = tape.constant(uv);

        CHECK(model.connect(1, x1, {}).value() == x1.value());
        const auto& x2 = model.connect(2, x1, {u}).value();
        CHECK(x2.shape() == Shape{1, 2, 20});
        for (std::size_t p = 0; p < 2; ++p) {
            for (std::size_t j = 0; j < 12; ++j) CHECK(x2[p * 20 + j] == x1.value()[p * 12 + j]);
            for (std::size_t j = 0; j < 8; ++j) CHECK(x2[p * 20 + 12 + j] == uv[p * 8 + j]);
        }
        const auto& x3 = model.connect(3, x1, {u, u}).value();
        for (std::size_t p = 0; p < 2; ++p) {
            for (std::size_t j = 0; j < 8; ++j) {
                CHECK(x3[p * 20 + 12 + j] == doctest::Approx(std::numbers::sqrt2 * uv[p * 8 + j]).epsilon(1e-14));
            }
        }
    }

    TEST_CASE("vanilla residual connections drop the embeddings from later block inputs") {
        ModelConfig cfg = tiny_config();
        cfg.num_blocks = 3;
        cfg.connection = ConnectionVariant::vanilla_residual;
        auto table = random_table(4, 12, 1);
        Re2Model<double> model(cfg, table, 1);
        Rng rng(3);
        Tape<double> tape(false);
        auto x1 = tape.constant(random_tensor<double>({1, 2, 12}, rng));
        auto u = tape.constant(random_tensor<double>({1, 2, 8}, rng));
        CHECK(model.connect(2, x1, {u}).value() == u.value());
        CHECK(model.connect(3, x1, {u, u}).shape() == Shape{1, 2, 8});
    }

    TEST_CASE("feature layout per block and variant") {
        ModelConfig cfg = tiny_config();
        auto l1 = feature_layout(cfg, 1);
        CHECK_FALSE(l1.residual.has_value());
        CHECK(l1.width == 12 + 8);
        auto l2 = feature_layout(cfg, 2);
        CHECK(l2.width == 12 + 8 + 8);
        CHECK(l2.residual == FeatureLayout::Range{12, 8});
        CHECK(l2.encoder_output == FeatureLayout::Range{20, 8});
        CHECK(block_input_width(cfg, 2) == 20);

        cfg.connection = ConnectionVariant::none;
        auto ln = feature_layout(cfg, 2);
        CHECK(ln.width == 8);
        CHECK_FALSE(ln.embedding.has_value());
        CHECK(block_input_width(cfg, 2) == 20);

        cfg.connection = ConnectionVariant::augmented;
        cfg.topology = BlockTopology::parallel;
        CHECK_FALSE(feature_layout(cfg, 3).residual.has_value());
    }

    TEST_CASE("prediction features for each variant") {
        Rng rng(4);
        auto table = random_table(4, 12, 1);
        const auto v1v = random_tensor<double>({2, 8}, rng);
        const auto v2v = random_tensor<double>({2, 8}, rng);
        for (auto variant : {PredictionVariant::standard, PredictionVariant::symmetric, PredictionVariant::simplified}) {
            ModelConfig cfg = tiny_config();
            cfg.prediction = variant;
            Re2Model<double> model(cfg, table, 1);
            Tape<double> tape(false);
            auto f = model.prediction_features(tape.constant(v1v), tape.constant(v2v));
            CHECK(f.dim(1) == (variant == PredictionVariant::simplified ? 16u : 32u));
        }

        ModelConfig cfg = tiny_config();
        cfg.prediction = PredictionVariant::symmetric;
        Re2Model<double> model(cfg, table, 1);
        Tape<double> tape(false);
        auto v = tape.constant(v1v);
        const auto& same = model.prediction_features(v, v).value();
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t j = 0; j < 8; ++j) {
                const double x = v1v[b * 8 + j];
                CHECK(same[b * 32 + j] == x);
                CHECK(same[b * 32 + 8 + j] == x);
                CHECK(same[b * 32 + 16 + j] == 0.0);
                CHECK(same[b * 32 + 24 + j] == x * x);
            }
        }
        const auto& ab = model.prediction_features(tape.constant(v1v), tape.constant(v2v)).value();
        const auto& ba = model.prediction_features(tape.constant(v2v), tape.constant(v1v)).value();
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t j = 16; j < 32; ++j) CHECK(ab[b * 32 + j] == ba[b * 32 + j]);
        }
    }

    TEST_CASE("forward output shape and single block has no residual features") {
        Rng rng(5);
        auto table = random_table(30, 12, 1);
        for (int n : {1, 2, 3}) {
            ModelConfig cfg = tiny_config();
            cfg.num_blocks = n;
            Re2Model<float> model(cfg, table, 2);
            const Batch batch = random_batch(rng, 4, 7, 30);
            Tape<float> tape(false);
            auto r = model.forward(tape, batch, false, nullptr);
            CHECK(r.logits.shape() == Shape{4, 3});
            CHECK(r.blocks.size() == static_cast<std::size_t>(n));
            CHECK(r.blocks[0].features_a.dim(2) == 20u);
        }
    }

    TEST_CASE("parallel topology sums block outputs before pooling") {
        ModelConfig cfg = tiny_config();
        cfg.num_blocks = 3;
        cfg.topology = BlockTopology::parallel;
        auto table = random_table(30, 12, 1);
        Re2Model<double> model(cfg, table, 2);
        Rng rng(6);
        const Batch batch = random_batch(rng, 2, 5, 30);
        Tape<double> tape(false);
        auto r = model.forward(tape, batch, false, nullptr);
        auto summed = ops::add(ops::add(r.blocks[2].output_a, r.blocks[0].output_a), r.blocks[1].output_a);
        CHECK(model.pool(summed, batch.mask_a).value() == r.pooled_a.value());
        for (const auto& b : r.blocks) CHECK(b.input_a.value() == r.blocks[0].input_a.value());
    }

    TEST_CASE("both sequence paths drive every shared parameter") {
        auto table = random_table(30, 12, 1);
        Re2Model<double> model(tiny_config(), table, 7);
        Rng rng(8);
        const Batch batch = random_batch(rng, 2, 5, 30);
        for (bool side_a : {true, false}) {
            model.parameters().zero_grad();
            Tape<double> tape;
            auto r = model.forward(tape, batch, false, nullptr);
            tape.backward(ops::sum(side_a ? r.pooled_a : r.pooled_b));
            for (const auto& p : model.parameters()) {
                if (p.name.rfind("prediction", 0) == 0) continue;
                double mag = 0.0;
                for (double g : p.grad.data()) mag += std::abs(g);
                CAPTURE(p.name);
                CHECK(mag > 0.0);
            }
        }
    }

    TEST_CASE("parameter counts: monotone in width, band for the reference configuration") {
        ModelConfig cfg;
        cfg.num_blocks = 3;
        cfg.enc_layers = 3;
        const std::size_t n = count_params(cfg);
        MESSAGE("reference configuration parameters: " << n);
        CHECK(n >= 2'000'000);
        CHECK(n <= 4'000'000);
        ModelConfig wide = cfg;
        wide.hidden_size *= 2;
        CHECK(count_params(wide) > n);
        ModelConfig parallel = cfg;
        parallel.topology = BlockTopology::parallel;
        const double ratio = static_cast<double>(count_params(parallel)) / static_cast<double>(n);
        CHECK(ratio > 0.5);
        CHECK(ratio < 2.0);
    }

    TEST_CASE("same seed builds identical parameters") {
        auto table = random_table(4, 12, 1);
        Re2Model<float> a(tiny_config(), table, 42), b(tiny_config(), table, 42), c(tiny_config(), table, 43);
        auto ia = a.parameters().begin();
        auto ib = b.parameters().begin();
        bool differs = false;
        for (auto ic = c.parameters().begin(); ia != a.parameters().end(); ++ia, ++ib, ++ic) {
            CHECK(ia->value == ib->value);
            differs |= !(ia->value == ic->value);
        }
        CHECK(differs);
    }

    TEST_CASE("occlusion options are validated by forward") {
        auto table = random_table(30, 12, 1);
        Re2Model<float> model(tiny_config(), table, 2);
        Rng rng(1);
        const Batch batch = random_batch(rng, 2, 4, 30);
        ForwardOptions<float> opts;
        opts.occlusions = {{1, OcclusionFeature::residual}};
        Tape<float> tape(false);
        CHECK_THROWS_AS(model.forward(tape, batch, false, nullptr, opts), std::invalid_argument);
        opts.occlusions = {{3, OcclusionFeature::embedding}};
        CHECK_THROWS_AS(model.forward(tape, batch, false, nullptr, opts), std::invalid_argument);
        opts.occlusions = {{2, OcclusionFeature::embedding}};
        auto r = model.forward(tape, batch, false, nullptr, opts);
        for (std::size_t i = 0; i < r.blocks[1].features_a.value().size(); i += 28) {
            CHECK(r.blocks[1].features_a.value()[i] == 0.0f);
        }
    }

    TEST_CASE("training forward needs a dropout generator") {
        auto table = random_table(30, 12, 1);
        Re2Model<float> model(tiny_config(), table, 2);
        Rng rng(1);
        const Batch batch = random_batch(rng, 2, 4, 30);
        Tape<float> tape;
        CHECK_THROWS_AS(model.forward(tape, batch, true, nullptr), std::logic_error);
    }
}
