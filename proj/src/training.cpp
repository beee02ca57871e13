#include "rematch/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "rematch/ops.hpp"

namespace rematch {
namespace {

template <class V>
V parse_number(std::string_view key, std::string_view value) {
    V out{};
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw std::invalid_argument(std::string(key) + ": invalid value '" + std::string(value) + "'");
    }
    return out;
}

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
    if (!(base_lr >= 0.0)) fail("base_lr must be >= 0");
    if (warmup_steps < 1) fail("warmup_steps must be >= 1");
    if (!(decay_rate > 0.0 && decay_rate <= 1.0)) fail("decay_rate must be in (0, 1]");
    if (decay_steps < 1) fail("decay_steps must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(clip_threshold > 0.0)) fail("clip_threshold must be > 0");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (patience < 0) fail("patience must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must be in [0, 1)");
    if (!(epsilon > 0.0)) fail("epsilon must be > 0");
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
    if (key == "base_lr") base_lr = parse_number<double>(key, value);
    else if (key == "warmup_steps") warmup_steps = parse_number<int>(key, value);
    else if (key == "decay_rate") decay_rate = parse_number<double>(key, value);
    else if (key == "decay_steps") decay_steps = parse_number<int>(key, value);
    else if (key == "batch_size") batch_size = parse_number<int>(key, value);
    else if (key == "clip_threshold") clip_threshold = parse_number<double>(key, value);
    else if (key == "max_epochs") max_epochs = parse_number<int>(key, value);
    else if (key == "patience") patience = parse_number<int>(key, value);
    else if (key == "stop_at_metric") {
        if (value.empty() || value == "none") stop_at_metric.reset();
        else stop_at_metric = parse_number<double>(key, value);
    }
    else if (key == "beta1") beta1 = parse_number<double>(key, value);
    else if (key == "beta2") beta2 = parse_number<double>(key, value);
    else if (key == "epsilon") epsilon = parse_number<double>(key, value);
    else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
    else return false;
    return true;
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_pairs() const {
    return {
        {"base_lr", format_double(base_lr)},
        {"warmup_steps", std::to_string(warmup_steps)},
        {"decay_rate", format_double(decay_rate)},
        {"decay_steps", std::to_string(decay_steps)},
        {"batch_size", std::to_string(batch_size)},
        {"clip_threshold", format_double(clip_threshold)},
        {"max_epochs", std::to_string(max_epochs)},
        {"patience", std::to_string(patience)},
        {"stop_at_metric", stop_at_metric ? format_double(*stop_at_metric) : std::string("none")},
        {"beta1", format_double(beta1)},
        {"beta2", format_double(beta2)},
        {"epsilon", format_double(epsilon)},
        {"seed", std::to_string(seed)},
    };
}

double lr_at(std::int64_t step, const TrainConfig& config) {
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (step < config.warmup_steps) {
        return config.base_lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
    }
    const double periods = static_cast<double>(step - config.warmup_steps) / static_cast<double>(config.decay_steps);
    return config.base_lr * std::pow(config.decay_rate, periods);
}

template <class T>
double global_grad_norm(const ParameterStore<T>& params) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (std::size_t i = 0; i < p.grad.size(); ++i) {
            const double g = static_cast<double>(p.grad[i]);
            sq += g * g;
        }
    }
    return std::sqrt(sq);
}

template <class T>
double clip_gradients(ParameterStore<T>& params, double threshold) {
    if (!(threshold > 0.0)) throw std::invalid_argument("clip_gradients: threshold must be > 0");
    for (const auto& p : params) {
        if (!p.grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p.name);
    }
    const double norm = global_grad_norm(params);
    if (norm > threshold) {
        const T factor = static_cast<T>(threshold / norm);
        for (auto& p : params) {
            for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] *= factor;
        }
    }
    return norm;
}

template <class T>
AdamState<T> AdamState<T>::init(const ParameterStore<T>& params, double beta1, double beta2, double epsilon) {
    AdamState state;
    state.beta1 = beta1;
    state.beta2 = beta2;
    state.epsilon = epsilon;
    for (const auto& p : params) {
        state.m.emplace_back(p.value.shape(), T(0));
        state.v.emplace_back(p.value.shape(), T(0));
    }
    return state;
}

template <class T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("adam_step: optimizer state does not match the parameter store");
    }
    state.t += 1;
    const T b1 = static_cast<T>(state.beta1);
    const T b2 = static_cast<T>(state.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(state.beta1, static_cast<double>(state.t)));
    const T c2 = static_cast<T>(1.0 - std::pow(state.beta2, static_cast<double>(state.t)));
    const T eps = static_cast<T>(state.epsilon);
    const T step = static_cast<T>(lr);
    std::size_t k = 0;
    for (auto& p : params) {
        Tensor<T>& m = state.m[k];
        Tensor<T>& v = state.v[k];
        if (m.shape() != p.value.shape()) throw DimensionError("adam_step: state shape mismatch for " + p.name);
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const T g = p.grad[i];
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            const T m_hat = m[i] / c1;
            const T v_hat = v[i] / c2;
            p.value[i] -= step * m_hat / (std::sqrt(v_hat) + eps);
        }
        ++k;
    }
}

std::vector<double> per_class_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels,
                                       std::size_t num_classes) {
    if (predictions.size() != labels.size()) throw std::invalid_argument("per_class_accuracy: length mismatch");
    std::vector<double> correct(num_classes, 0.0), total(num_classes, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto c = static_cast<std::size_t>(labels[i]);
        if (c >= num_classes) throw std::out_of_range("per_class_accuracy: label outside class range");
        total[c] += 1.0;
        if (predictions[i] == labels[i]) correct[c] += 1.0;
    }
    std::vector<double> out(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        out[c] = total[c] > 0 ? correct[c] / total[c] : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

template <class T>
EvalResult evaluate(const Re2Model<T>& model, const std::vector<EncodedExample>& data, bool ranking,
                    std::size_t batch_size, const ForwardOptions<T>& options) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const auto classes = static_cast<std::size_t>(model.config().num_classes);
    EvalResult out;
    double loss_sum = 0.0;
    for (const Batch& batch : make_batches(data, batch_size, false, 0)) {
        Tape<T> tape(false);
        const auto result = model.forward(tape, batch, false, nullptr, options);
        const Tensor<T> probs = ops::softmax_rows(result.logits.value());
        for (std::size_t b = 0; b < batch.size; ++b) {
            const T* row = probs.ptr() + b * classes;
            const auto best = std::max_element(row, row + classes) - row;
            out.predictions.push_back(static_cast<int>(best));
            out.labels.push_back(batch.labels[b]);
            for (std::size_t c = 0; c < classes; ++c) out.probabilities.push_back(static_cast<double>(row[c]));
            const double p = std::max(static_cast<double>(row[batch.labels[b]]), 1e-30);
            loss_sum -= std::log(p);
        }
    }
    out.loss = loss_sum / static_cast<double>(data.size());
    out.accuracy = accuracy(out.predictions, out.labels);
    out.metric = out.accuracy;
    if (ranking) {
        if (classes < 2) throw std::invalid_argument("evaluate: ranking needs a positive class");
        std::vector<double> scores;
        std::vector<int> groups;
        for (std::size_t i = 0; i < data.size(); ++i) {
            scores.push_back(out.probabilities[i * classes + 1]);
            groups.push_back(data[i].group);
        }
        out.ranking = map_mrr(scores, out.labels, groups);
        out.metric = out.ranking->mrr;
    }
    return out;
}

template <class T>
TrainResult train(Re2Model<T>& model, const std::vector<EncodedExample>& train_data,
                  const std::vector<EncodedExample>& dev_data, const TrainConfig& config, bool ranking,
                  const TrainHooks& hooks) {
    config.validate();
    if (train_data.empty()) throw std::invalid_argument("train: empty training set");
    if (dev_data.empty()) throw std::invalid_argument("train: empty dev set");

    const auto start = std::chrono::steady_clock::now();
    auto& params = model.parameters();
    AdamState<T> adam = AdamState<T>::init(params, config.beta1, config.beta2, config.epsilon);
    const Rng root(config.seed);
    Rng dropout_rng = root.split("dropout");
    const Rng shuffle_root = root.split("shuffle");

    TrainResult out;
    out.best_metric = -std::numeric_limits<double>::infinity();
    std::vector<Tensor<T>> best_values;
    int since_best = 0;
    double lr = 0.0;

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto batches = make_batches(train_data, static_cast<std::size_t>(config.batch_size), true,
                                          shuffle_root.split(static_cast<std::uint64_t>(epoch)).next_u64());
        double loss_sum = 0.0;
        for (const Batch& batch : batches) {
            Tape<T> tape;
            double loss_value = 0.0;
            try {
                const auto result = model.forward(tape, batch, true, &dropout_rng);
                const Var<T> loss = ops::cross_entropy(result.logits, batch.labels);
                loss_value = static_cast<double>(loss.value()[0]);
                params.zero_grad();
                tape.backward(loss);
                clip_gradients(params, config.clip_threshold);
            } catch (const NumericError& e) {
                throw NumericError("training diverged at step " + std::to_string(out.steps) + ": " + e.what());
            }
            lr = lr_at(out.steps, config);
            adam_step(params, adam, lr);
            ++out.steps;
            loss_sum += loss_value * static_cast<double>(batch.size);
            if (hooks.on_step) hooks.on_step(out.steps, loss_value);
        }

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<double>(train_data.size());
        record.dev_metric = evaluate(model, dev_data, ranking).metric;
        record.lr = lr;
        record.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out.history.push_back(record);
        if (hooks.on_epoch) hooks.on_epoch(record);

        if (record.dev_metric > out.best_metric) {
            out.best_metric = record.dev_metric;
            out.best_epoch = epoch;
            best_values.clear();
            for (const auto& p : params) best_values.push_back(p.value);
            since_best = 0;
        } else {
            ++since_best;
        }
        if (config.stop_at_metric && record.dev_metric >= *config.stop_at_metric) break;
        if (config.patience > 0 && since_best >= config.patience) break;
    }

    std::size_t k = 0;
    for (auto& p : params) p.value = best_values[k++];
    return out;
}

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
    out << "epoch,train_loss,dev_metric,lr,wall_time\n";
    out << std::setprecision(10);
    for (const auto& r : history) {
        out << r.epoch << ',' << r.train_loss << ',' << r.dev_metric << ',' << r.lr << ',' << r.wall_time << '\n';
    }
}

std::vector<int> ensemble_vote(const std::vector<std::vector<double>>& probabilities, std::size_t num_classes) {
    if (probabilities.empty()) throw std::invalid_argument("ensemble_vote: no models");
    if (num_classes == 0) throw std::invalid_argument("ensemble_vote: no classes");
    const std::size_t total = probabilities.front().size();
    if (total % num_classes != 0) throw DimensionError("ensemble_vote: size is not a multiple of num_classes");
    for (const auto& p : probabilities) {
        if (p.size() != total) throw DimensionError("ensemble_vote: models disagree on example count");
    }
    const std::size_t n = total / num_classes;
    std::vector<int> out(n);
    std::vector<int> votes(num_classes);
    std::vector<double> mean(num_classes);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(votes.begin(), votes.end(), 0);
        std::fill(mean.begin(), mean.end(), 0.0);
        for (const auto& p : probabilities) {
            const double* row = p.data() + i * num_classes;
            votes[static_cast<std::size_t>(std::max_element(row, row + num_classes) - row)] += 1;
            for (std::size_t c = 0; c < num_classes; ++c) mean[c] += row[c];
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < num_classes; ++c) {
            if (votes[c] > votes[best] || (votes[c] == votes[best] && mean[c] > mean[best])) best = c;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

#define REMATCH_INSTANTIATE_TRAINING(T)                                                                          \
    template double global_grad_norm<T>(const ParameterStore<T>&);                                               \
    template double clip_gradients<T>(ParameterStore<T>&, double);                                               \
    template struct AdamState<T>;                                                                                \
    template void adam_step<T>(ParameterStore<T>&, AdamState<T>&, double);                                       \
    template EvalResult evaluate<T>(const Re2Model<T>&, const std::vector<EncodedExample>&, bool, std::size_t,   \
                                    const ForwardOptions<T>&);                                                   \
    template TrainResult train<T>(Re2Model<T>&, const std::vector<EncodedExample>&,                              \
                                  const std::vector<EncodedExample>&, const TrainConfig&, bool, const TrainHooks&);

REMATCH_INSTANTIATE_TRAINING(float)
REMATCH_INSTANTIATE_TRAINING(double)

}  // namespace rematch
