#include "rematch/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>

namespace rematch {

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
    if (labels.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

RankingScores map_mrr(std::span<const double> scores, std::span<const int> relevance, std::span<const int> groups) {
    if (scores.empty()) throw std::invalid_argument("map_mrr: empty input");
    if (scores.size() != relevance.size() || scores.size() != groups.size()) {
        throw std::invalid_argument("map_mrr: length mismatch");
    }
    std::map<int, std::vector<std::size_t>> by_group;
    for (std::size_t i = 0; i < scores.size(); ++i) by_group[groups[i]].push_back(i);

    RankingScores out;
    double ap_total = 0.0, rr_total = 0.0;
    for (auto& [group, members] : by_group) {
        std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        std::size_t hits = 0;
        double precision_sum = 0.0, reciprocal = 0.0;
        for (std::size_t rank = 0; rank < members.size(); ++rank) {
            if (relevance[members[rank]] <= 0) continue;
            ++hits;
            precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
            if (hits == 1) reciprocal = 1.0 / static_cast<double>(rank + 1);
        }
        if (hits == 0) continue;
        ap_total += precision_sum / static_cast<double>(hits);
        rr_total += reciprocal;
        ++out.groups;
    }
    if (out.groups == 0) throw std::invalid_argument("map_mrr: no group has a relevant candidate");
    out.map = ap_total / static_cast<double>(out.groups);
    out.mrr = rr_total / static_cast<double>(out.groups);
    return out;
}

}  // namespace rematch
