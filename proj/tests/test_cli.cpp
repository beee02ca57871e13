#include <cstdlib>
#include <map>
#include <sstream>

#include "doctest.h"
#include "rematch/run_config.hpp"
#include "support.hpp"

using namespace rematch;
using namespace rematch::testing;

namespace {

struct CommandResult {
    int code = -1;
    std::string out;
};

// Runs the CLI with stdout and stderr captured together.
CommandResult run_cli(const std::string& args, const std::filesystem::path& scratch, const std::string& env = "") {
    const auto log = scratch / "cli.log";
    const std::string cmd = env + " '" REMATCH_CLI_PATH "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    CommandResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_file(log);
    return r;
}

// Entailment-style pairs over words w2..w29.
std::string snli_jsonl(std::size_t n, std::uint64_t seed) {
    static const char* names[] = {"entailment", "neutral", "contradiction"};
    std::ostringstream out;
    for (const auto& ex : synthetic_nli(n, 30, seed)) {
        auto words = [](const std::vector<std::int32_t>& ids) {
            std::string s;
            for (auto id : ids) s += (s.empty() ? "" : " ") + (id == 1 ? std::string("not") : "w" + std::to_string(id));
            return s;
        };
        out << R"({"gold_label":")" << names[ex.label] << R"(","sentence1":")" << words(ex.seq_a)
            << R"(","sentence2":")" << words(ex.seq_b) << "\"}\n";
    }
    return out.str();
}

std::string strip_wall_time(const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
}

const std::string kSmall =
    "--set embed_dim=16 --set hidden_size=8 --set max_epochs=2 --set batch_size=16 --set warmup_steps=5";

}  // namespace

TEST_SUITE("config") {
    TEST_CASE("layers apply in order file, environment, flags") {
        TempDir dir("cfg");
        const auto file = dir.write("run.cfg", "# comment\nblocks = 3\nbase_lr=0.002\nseed=4\n\nhidden_size=100\n");
        RunConfig cfg;
        cfg.load_file(file);
        CHECK(cfg.model.num_blocks == 3);
        CHECK(cfg.train.base_lr == 0.002);
        const std::map<std::string, std::string> env{{"RE2_SEED", "9"}, {"RE2_DATA_ROOT", "/data"}, {"RE2_BLOCKS", "4"}};
        cfg.apply_env([&](const char* name) -> const char* {
            auto it = env.find(name);
            return it == env.end() ? nullptr : it->second.c_str();
        });
        CHECK(cfg.train.seed == 9u);
        CHECK(cfg.data_root == "/data");
        CHECK(cfg.model.num_blocks == 4);
        CHECK(cfg.model.hidden_size == 100);
        cfg.set("blocks", "5");
        CHECK(cfg.model.num_blocks == 5);
        CHECK(cfg.resolve("train.jsonl") == std::filesystem::path("/data/train.jsonl"));
        CHECK(cfg.resolve("/abs/x") == std::filesystem::path("/abs/x"));
    }

    TEST_CASE("unknown keys and bad lines are rejected with a location") {
        TempDir dir("cfg");
        RunConfig cfg;
        CHECK_THROWS_WITH_AS(cfg.set("blcoks", "2"), doctest::Contains("blcoks"), std::invalid_argument);
        CHECK_THROWS_WITH_AS(cfg.load_file(dir.write("a.cfg", "seed=1\nnonsense\n")), doctest::Contains("a.cfg:2"),
                             std::invalid_argument);
        CHECK_THROWS_WITH_AS(cfg.load_file(dir.write("b.cfg", "learning_rate=1\n")), doctest::Contains("learning_rate"),
                             std::invalid_argument);
        CHECK_THROWS_AS(cfg.apply_env([](const char* n) -> const char* {
            return std::string(n) == "RE2_BLOCKS" ? "many" : nullptr;
        }),
                        std::invalid_argument);
    }

    TEST_CASE("every key survives a round trip") {
        RunConfig a;
        a.set("dataset", "wikiqa");
        a.set("fusion", "simple");
        a.set("stop_at_metric", "0.9");
        a.set("bench_batches", "12");
        RunConfig b;
        for (const auto& [k, v] : a.to_pairs()) b.set(k, v);
        CHECK(b.to_pairs() == a.to_pairs());
        CHECK(RunConfig::keys().size() == a.to_pairs().size());
    }

    TEST_CASE("missing dataset paths name the key") {
        RunConfig cfg;
        CHECK_THROWS_WITH_AS(cfg.dataset_spec(), doctest::Contains("train_path"), std::invalid_argument);
        TempDir dir("cfg");
        cfg.set("train_path", dir.write("t.jsonl", "").string());
        CHECK_THROWS_WITH_AS(cfg.dataset_spec(), doctest::Contains("dev_path"), std::invalid_argument);
        cfg.set("dev_path", (dir.path() / "absent.jsonl").string());
        CHECK_THROWS_WITH_AS(cfg.dataset_spec(), doctest::Contains("dev_path"), std::invalid_argument);
    }

    TEST_CASE("label maps come from the label directory") {
        RunConfig cfg;
        cfg.set("dataset", "scitail");
        CHECK(cfg.label_map().num_classes() == 2);
        TempDir dir("cfg");
        dir.write("quora.labels", "no 0\nyes 1\n");
        cfg.set("dataset", "quora");
        cfg.set("label_dir", dir.path().string());
        CHECK(cfg.label_map().lookup("yes") == 1);
    }
}

TEST_SUITE("cli") {
    TEST_CASE("train twice with the same seed, then eval and predict") {
        TempDir dir("cli");
        dir.write("train.jsonl", snli_jsonl(48, 1));
        dir.write("dev.jsonl", snli_jsonl(24, 2));
        const std::string data = "--set data_root=" + dir.path().string() +
                                 " --set train_path=train.jsonl --set dev_path=dev.jsonl " + kSmall;
        const auto run1 = dir.path() / "run1";
        const auto run2 = dir.path() / "run2";
        auto r = run_cli("train --seed 7 " + data + " --run-dir " + run1.string(), dir.path());
        INFO(r.out);
        REQUIRE(r.code == 0);
        r = run_cli("train --seed 7 " + data + " --run-dir " + run2.string(), dir.path());
        REQUIRE(r.code == 0);
        for (const char* f : {"model.ckpt", "model.ckpt.meta", "model.ckpt.vocab", "config.txt", "history.csv"}) {
            CHECK(std::filesystem::exists(run1 / f));
        }
        const std::string h1 = read_file(run1 / "history.csv");
        CHECK(std::count(h1.begin(), h1.end(), '\n') == 3);
        CHECK(strip_wall_time(h1) == strip_wall_time(read_file(run2 / "history.csv")));

        const std::string ckpt = "--checkpoint " + (run1 / "model.ckpt").string();
        r = run_cli("eval " + ckpt + " --split dev --run-dir " + (dir.path() / "ev").string(), dir.path());
        CHECK(r.code == 0);
        CHECK(r.out.find("accuracy: ") != std::string::npos);

        const auto p1 = run_cli("predict " + ckpt + " 'w3 w4 w5' 'w4 w5'", dir.path());
        const auto p2 = run_cli("predict " + ckpt + " 'w3 w4 w5' 'w4 w5'", dir.path());
        CHECK(p1.code == 0);
        CHECK(p1.out == p2.out);
        CHECK(p1.out.find("label: ") != std::string::npos);
        double sum = 0.0;
        std::istringstream lines(p1.out);
        std::string line;
        while (std::getline(lines, line)) {
            if (line.rfind("p(", 0) == 0) sum += std::stod(line.substr(line.find('=') + 1));
        }
        CHECK(std::abs(sum - 1.0) <= 1e-5);
        CHECK(run_cli("predict " + ckpt + " '...' 'w4'", dir.path()).code == 1);

        r = run_cli("attention " + ckpt + " 'w3 w4' 'w4' --run-dir " + (dir.path() / "att").string(), dir.path());
        CHECK(r.code == 0);
        CHECK(r.out.find("# block 2") != std::string::npos);
        CHECK(r.out.find("# block 3") == std::string::npos);

        r = run_cli("occlusion " + ckpt + " --split dev --mask 1:residual --run-dir " + (dir.path() / "occ").string(),
                    dir.path());
        CHECK(r.code == 1);
        CHECK(r.out.find("not applicable") != std::string::npos);
    }

    TEST_CASE("error exits") {
        TempDir dir("cli");
        auto r = run_cli("train", dir.path(), "RE2_TRAIN_PATH=");
        CHECK(r.code == 1);
        CHECK(r.out.find("train_path") != std::string::npos);
        r = run_cli("train --set nonsense_key=1", dir.path());
        CHECK(r.code == 1);
        CHECK(r.out.find("nonsense_key") != std::string::npos);
        r = run_cli("train --variant base_lr=0.1", dir.path());
        CHECK(r.code == 1);
        r = run_cli("eval --checkpoint " + (dir.path() / "none.ckpt").string(), dir.path());
        CHECK(r.code == 2);
        CHECK(run_cli("--no-such-flag", dir.path()).code == 1);
        r = run_cli("train --blocks 2", dir.path(), "RE2_BLOCKS=zero");
        CHECK(r.code == 1);
        CHECK(r.out.find("RE2_BLOCKS") != std::string::npos);
    }

    TEST_CASE("benchmark defaults to the paper protocol") {
        TempDir dir("cli");
        const auto r = run_cli("benchmark --set bench_batches=3 --set bench_warmup=1 --set embed_dim=16 --set "
                               "hidden_size=8 --run-dir " + (dir.path() / "b").string(),
                               dir.path());
        INFO(r.out);
        CHECK(r.code == 0);
        CHECK(r.out.find("batch 8, length 20") != std::string::npos);
        CHECK(std::filesystem::exists(dir.path() / "b" / "benchmark.csv"));
    }
}
