#pragma once

// Classification metrics. Both are deterministic: accuracy breaks argmax ties
// toward the lowest class index, and average precision ranks ties by input
// order, so repeated evaluation of one batch can never drift.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "polyvit/tensor.hpp"

namespace polyvit {

// Fraction of rows whose argmax matches the label; ties go to the lowest
// class index. logits is [N x C], labels holds N class indices.
template <typename T>
double accuracy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("logits must be [examples x classes]");
  const std::size_t n = logits.extent(0), c = logits.extent(1);
  if (n == 0) throw std::invalid_argument("accuracy needs at least one example");
  if (labels.size() != n)
    throw std::invalid_argument("got " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(n) + " rows");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c)
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " outside " +
                                  std::to_string(c) + " classes");
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (best == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// Extracts the class index from a strictly one-hot target row; anything else
// (multi-hot, soft) is rejected so single-label metrics cannot silently run
// on multilabel data.
template <typename T>
std::size_t one_hot_label(const Tensor<T>& target) {
  std::size_t ones = 0, idx = 0;
  for (std::size_t j = 0; j < target.numel(); ++j) {
    if (target[j] == T{1}) {
      ++ones;
      idx = j;
    } else if (target[j] != T{0}) {
      throw std::invalid_argument("target is not one-hot (entry " + std::to_string(j) + ")");
    }
  }
  if (ones != 1)
    throw std::invalid_argument("target is not one-hot (" + std::to_string(ones) +
                                " entries set); single-label metrics reject multilabel data");
  return idx;
}

// Accuracy against dense targets; every row must be exactly one-hot.
template <typename T>
double accuracy(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (targets.rank() != 2 || logits.rank() != 2 ||
      targets.extent(0) != logits.extent(0) || targets.extent(1) != logits.extent(1))
    throw std::invalid_argument("logits and targets must both be [examples x classes]");
  const std::size_t n = targets.extent(0), c = targets.extent(1);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<T> row(c);
    for (std::size_t j = 0; j < c; ++j) row[j] = targets.at(i, j);
    labels[i] = one_hot_label(Tensor<T>({c}, std::move(row)));
  }
  return accuracy(logits, labels);
}

// Average precision for one class: examples sorted by descending score (ties
// keep input order), precision read off at each positive's rank, averaged
// over the positives. Returns the unweighted mean over classes that have at
// least one positive; a batch with no positives at all is an error.
template <typename T>
double mean_average_precision(const Tensor<T>& scores, const Tensor<T>& labels) {
  if (scores.rank() != 2 || labels.rank() != 2 || scores.shape() != labels.shape())
    throw std::invalid_argument("scores and labels must both be [examples x classes]");
  const std::size_t n = scores.extent(0), c = scores.extent(1);
  double sum_ap = 0;
  std::size_t eligible = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < c; ++j) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T v = labels.at(i, j);
      if (v != T{0} && v != T{1})
        throw std::invalid_argument("labels must be 0/1 multi-hot (example " +
                                    std::to_string(i) + ", class " + std::to_string(j) + ")");
      if (v == T{1}) ++positives;
    }
    if (positives == 0) continue;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores.at(a, j) > scores.at(b, j);
    });
    double ap = 0;
    std::size_t seen = 0;
    for (std::size_t rank = 0; rank < n; ++rank)
      if (labels.at(order[rank], j) == T{1}) {
        ++seen;
        ap += static_cast<double>(seen) / static_cast<double>(rank + 1);
      }
    sum_ap += ap / static_cast<double>(positives);
    ++eligible;
  }
  if (eligible == 0)
    throw std::invalid_argument("mean average precision needs at least one positive label");
  return sum_ap / static_cast<double>(eligible);
}

}  // namespace polyvit
