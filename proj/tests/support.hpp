#pragma once

// Independent reference implementations and fixtures shared by the unit tests
// and the acceptance runner. Nothing here calls the code it is used to check.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "rematch/data.hpp"
#include "rematch/model.hpp"
#include "rematch/rng.hpp"
#include "rematch/tape.hpp"

namespace rematch::testing {

template <class T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return t;
}

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central differences of a scalar function of `inputs` against the gradient
// reverse mode puts on each input. `build` records the loss on the tape from
// the input Vars. Returns the largest relative error over every element.
inline double max_gradient_error(std::vector<Tensor<double>> inputs,
                                 const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& build,
                                 double h = 1e-5) {
    auto loss_at = [&](const std::vector<Tensor<double>>& values) {
        Tape<double> tape(false);
        std::vector<Var<double>> vars;
        for (const auto& v : values) vars.push_back(tape.constant(v));
        return build(tape, vars).value()[0];
    };
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& v : inputs) vars.push_back(tape.variable(v));
    tape.backward(build(tape, vars));

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor<double>* grad = tape.grad(vars[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double saved = inputs[k][i];
            inputs[k][i] = saved + h;
            const double up = loss_at(inputs);
            inputs[k][i] = saved - h;
            const double down = loss_at(inputs);
            inputs[k][i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double analytic = grad ? (*grad)[i] : 0.0;
            worst = std::max(worst, relative_error(analytic, numeric));
        }
    }
    return worst;
}

struct GradientReport {
    double max_error = 0.0;
    std::string worst_parameter;
    std::size_t checked = 0;
};

// Finite-difference check of every scalar of every model parameter. `loss`
// must be a pure function of the parameter values.
inline GradientReport check_model_gradients(ParameterStore<double>& params,
                                            const std::function<Var<double>(Tape<double>&)>& loss, double h = 1e-5) {
    params.zero_grad();
    {
        Tape<double> tape;
        tape.backward(loss(tape));
    }
    GradientReport report;
    auto value = [&]() {
        Tape<double> tape(false);
        return loss(tape).value()[0];
    };
    for (auto& p : params) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double saved = p.value[i];
            p.value[i] = saved + h;
            const double up = value();
            p.value[i] = saved - h;
            const double down = value();
            p.value[i] = saved;
            const double err = relative_error(p.grad[i], (up - down) / (2 * h));
            if (err > report.max_error) {
                report.max_error = err;
                report.worst_parameter = p.name + "[" + std::to_string(i) + "]";
            }
            ++report.checked;
        }
    }
    return report;
}

// Accuracy by counting.
inline double brute_accuracy(const std::vector<int>& pred, const std::vector<int>& gold) {
    if (gold.empty()) return 0.0;
    int hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) hits += pred[i] == gold[i];
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

struct BruteRanking {
    double map = 0.0;
    double mrr = 0.0;
    int groups = 0;
};

// Rank of item i inside its group = 1 + #items scored strictly higher +
// #items with an equal score that come earlier in the input.
inline BruteRanking brute_map_mrr(const std::vector<double>& scores, const std::vector<int>& rel,
                                  const std::vector<int>& groups) {
    std::vector<int> ids = groups;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    BruteRanking out;
    double ap_sum = 0.0, rr_sum = 0.0;
    for (int g : ids) {
        std::vector<int> ranks;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (groups[i] != g || rel[i] <= 0) continue;
            int rank = 1;
            for (std::size_t j = 0; j < scores.size(); ++j) {
                if (groups[j] != g || j == i) continue;
                if (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)) ++rank;
            }
            ranks.push_back(rank);
        }
        if (ranks.empty()) continue;
        std::sort(ranks.begin(), ranks.end());
        double ap = 0.0;
        for (std::size_t k = 0; k < ranks.size(); ++k) ap += static_cast<double>(k + 1) / ranks[k];
        ap_sum += ap / static_cast<double>(ranks.size());
        rr_sum += 1.0 / ranks.front();
        ++out.groups;
    }
    if (out.groups > 0) {
        out.map = ap_sum / out.groups;
        out.mrr = rr_sum / out.groups;
    }
    return out;
}

// Textbook Adam on one scalar.
struct ScalarAdam {
    double m = 0.0, v = 0.0;
    int t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    double step(double param, double grad, double lr) {
        ++t;
        m = beta1 * m + (1 - beta1) * grad;
        v = beta2 * v + (1 - beta2) * grad * grad;
        const double m_hat = m / (1 - std::pow(beta1, t));
        const double v_hat = v / (1 - std::pow(beta2, t));
        return param - lr * m_hat / (std::sqrt(v_hat) + eps);
    }
};

// Random sequences of token ids in [1, vocab).
inline std::vector<std::int32_t> random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
    std::vector<std::int32_t> out(len);
    for (auto& t : out) t = static_cast<std::int32_t>(1 + rng.below(vocab - 1));
    return out;
}

inline std::shared_ptr<const EmbeddingTable> random_table(std::size_t rows, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> m(Shape{rows, dim});
    for (std::size_t i = dim; i < m.size(); ++i) m[i] = static_cast<float>(rng.normal() * 0.5);
    return std::make_shared<const EmbeddingTable>(EmbeddingTable{std::move(m)});
}

// Three-class pairs in the spirit of entailment data: b drawn from a
// (entailment), b containing the negation token 1 (contradiction), or b drawn
// from the whole vocabulary (neutral).
inline std::vector<EncodedExample> synthetic_nli(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<EncodedExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        EncodedExample ex;
        const std::size_t la = 4 + rng.below(7);
        for (std::size_t k = 0; k < la; ++k) ex.seq_a.push_back(static_cast<std::int32_t>(2 + rng.below(vocab - 2)));
        ex.label = static_cast<int>(rng.below(3));
        const std::size_t lb = 2 + rng.below(4);
        for (std::size_t k = 0; k < lb; ++k) {
            if (ex.label == 1) ex.seq_b.push_back(static_cast<std::int32_t>(2 + rng.below(vocab - 2)));
            else ex.seq_b.push_back(ex.seq_a[rng.below(la)]);
        }
        if (ex.label == 2) ex.seq_b.push_back(1);
        out.push_back(std::move(ex));
    }
    return out;
}

// Fresh directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("rematch-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path write(const std::string& name, const std::string& content) const {
        const auto p = path_ / name;
        std::ofstream(p, std::ios::binary) << content;
        return p;
    }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.embed_dim = 12;
    c.hidden_size = 8;
    c.num_blocks = 2;
    c.enc_layers = 2;
    c.num_classes = 3;
    return c;
}

}  // namespace rematch::testing
