#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rematch/data.hpp"
#include "rematch/metrics.hpp"
#include "rematch/model.hpp"

namespace rematch {

struct TrainConfig {
    double base_lr = 1e-3;
    int warmup_steps = 1000;
    double decay_rate = 0.97;
    int decay_steps = 1000;
    int batch_size = 128;
    double clip_threshold = 5.0;
    int max_epochs = 30;
    // Epochs without dev improvement before stopping; 0 disables.
    int patience = 5;
    // Stop as soon as the dev metric reaches this value.
    std::optional<double> stop_at_metric;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 1;

    void validate() const;
    bool set(std::string_view key, std::string_view value);
    std::vector<std::pair<std::string, std::string>> to_pairs() const;
};

// Linear warmup to base_lr, then exponential decay.
double lr_at(std::int64_t step, const TrainConfig& config);

template <class T>
double global_grad_norm(const ParameterStore<T>& params);

// Scales every gradient by threshold / norm when the global L2 norm exceeds
// the threshold. Returns the norm before clipping. A non-finite gradient
// throws NumericError naming the parameter.
template <class T>
double clip_gradients(ParameterStore<T>& params, double threshold);

template <class T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState init(const ParameterStore<T>& params, double beta1 = 0.9, double beta2 = 0.999,
                          double epsilon = 1e-8);
};

// Bias-corrected Adam update of every parameter from its grad.
template <class T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, double lr);

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::optional<RankingScores> ranking;
    // MRR for ranking data, accuracy otherwise.
    double metric = 0.0;
    std::vector<int> predictions;
    std::vector<int> labels;
    // [N, C] row-major class probabilities.
    std::vector<double> probabilities;
};

// Per-class accuracy over examples whose label is that class; NaN for a class
// that never occurs.
std::vector<double> per_class_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels,
                                       std::size_t num_classes);

template <class T>
EvalResult evaluate(const Re2Model<T>& model, const std::vector<EncodedExample>& data, bool ranking,
                    std::size_t batch_size = 128, const ForwardOptions<T>& options = {});

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double dev_metric = 0.0;
    double lr = 0.0;
    double wall_time = 0.0;  // seconds since training started
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_metric = 0.0;
    std::int64_t steps = 0;
};

struct TrainHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    // Called after each step with (step, loss).
    std::function<void(std::int64_t, double)> on_step;
};

// Runs epochs of shuffled mini-batches, evaluates on dev once per epoch and
// keeps the best parameters, which are restored into the model on return.
// Throws NumericError with the step number if the loss diverges.
template <class T>
TrainResult train(Re2Model<T>& model, const std::vector<EncodedExample>& train_data,
                  const std::vector<EncodedExample>& dev_data, const TrainConfig& config, bool ranking,
                  const TrainHooks& hooks = {});

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);

// probabilities[k] is model k's [N, C] row-major output. Majority vote per
// example; a tie goes to the tied label with the higher mean probability.
std::vector<int> ensemble_vote(const std::vector<std::vector<double>>& probabilities, std::size_t num_classes);

extern template double global_grad_norm<float>(const ParameterStore<float>&);
extern template double global_grad_norm<double>(const ParameterStore<double>&);
extern template double clip_gradients<float>(ParameterStore<float>&, double);
extern template double clip_gradients<double>(ParameterStore<double>&, double);
extern template struct AdamState<float>;
extern template struct AdamState<double>;
extern template void adam_step<float>(ParameterStore<float>&, AdamState<float>&, double);
extern template void adam_step<double>(ParameterStore<double>&, AdamState<double>&, double);

}  // namespace rematch
