#pragma once

#include <span>
#include <vector>

namespace rematch {

// Fraction of exact matches. 0 for empty input.
double accuracy(std::span<const int> predictions, std::span<const int> labels);

struct RankingScores {
    double map = 0.0;
    double mrr = 0.0;
    std::size_t groups = 0;  // groups that entered the means
};

// Candidates are grouped by `groups`; inside a group they are ranked by
// descending score, ties kept in input order. Groups without a relevant
// candidate are left out of both means. Throws on empty input or when no
// group has a relevant candidate.
RankingScores map_mrr(std::span<const double> scores, std::span<const int> relevance, std::span<const int> groups);

}  // namespace rematch
