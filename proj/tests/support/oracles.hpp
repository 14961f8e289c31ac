#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

// Brute-force references used to check the library's own implementations.
namespace oracle {

// Probability a random positive outranks a random negative, ties count 1/2.
inline double pairwise_auroc(const std::vector<double>& scores, const std::vector<double>& labels) {
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  if (pairs == 0) throw std::invalid_argument("pairwise_auroc needs both classes");
  return wins / static_cast<double>(pairs);
}

}  // namespace oracle
