#pragma once

#include <span>
#include <vector>

namespace elm {

/// 1-based ranks with ties given their average rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman correlation: Pearson correlation of average ranks.
/// Throws std::invalid_argument for mismatched lengths or fewer than 2 points;
/// returns 0 when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace elm
