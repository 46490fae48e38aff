#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "qseg/tensor.hpp"

namespace qseg {

struct ConfusionCounts {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::int64_t total() const { return tp + tn + fp + fn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

struct MetricReport {
  double dice = 0, accuracy = 0, auc = 0;
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  double threshold = 0.5;
  int n_images = 0;

  std::string to_json() const {
    nlohmann::json j;
    j["dice"] = dice;
    j["accuracy"] = accuracy;
    j["auc"] = auc;
    j["tp"] = tp;
    j["tn"] = tn;
    j["fp"] = fp;
    j["fn"] = fn;
    j["threshold"] = threshold;
    j["n_images"] = n_images;
    return j.dump(2);
  }
};

template <typename T>
ConfusionCounts confusion(const Tensor<T>& probs, const Tensor<T>& gt, double threshold) {
  if (!probs.same_shape(gt))
    throw std::invalid_argument("confusion: shapes differ, " + probs.shape_str() + " vs " +
                                gt.shape_str());
  ConfusionCounts c;
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    const bool pred = static_cast<double>(probs.data()[i]) >= threshold;
    const bool pos = gt.data()[i] != T(0);
    if (pred) {
      pos ? ++c.tp : ++c.fp;
    } else {
      pos ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

// dice = 2tp / (2tp + fp + fn); both masks empty counts as perfect agreement.
inline double dice_from_counts(const ConfusionCounts& c) {
  const std::int64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

inline double accuracy_from_counts(const ConfusionCounts& c) {
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

// ROC area by descending-score sweep with tied scores grouped; exactly the
// pairwise statistic (wins + ties/2) / (P*N), computed with integer
// numerators so ties cost nothing in precision.
inline double auc(std::vector<double> scores, std::vector<std::uint8_t> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auc: scores and labels length differ");
  std::int64_t pos = 0;
  for (auto l : labels) pos += l ? 1 : 0;
  const std::int64_t neg = static_cast<std::int64_t>(labels.size()) - pos;
  if (pos == 0 || neg == 0)
    throw std::invalid_argument("auc: needs at least one positive and one negative label");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // sum over tie groups: fp_g * (2 * tp_before + tp_g)  ==  2 * (wins + ties/2)
  std::int64_t numerator2 = 0;
  std::int64_t tp_before = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::int64_t tp_g = 0, fp_g = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      labels[order[j]] ? ++tp_g : ++fp_g;
      ++j;
    }
    numerator2 += fp_g * (2 * tp_before + tp_g);
    tp_before += tp_g;
    i = j;
  }
  return static_cast<double>(numerator2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

template <typename T>
MetricReport evaluate(const std::vector<Tensor<T>>& probs, const std::vector<Tensor<T>>& gts,
                      double threshold = 0.5) {
  if (probs.size() != gts.size() || probs.empty())
    throw std::invalid_argument("evaluate: need equal nonzero prob/gt counts");
  ConfusionCounts total;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    total += confusion(probs[k], gts[k], threshold);
    for (std::size_t i = 0; i < probs[k].numel(); ++i) {
      scores.push_back(static_cast<double>(probs[k].data()[i]));
      labels.push_back(gts[k].data()[i] != T(0) ? 1 : 0);
    }
  }
  MetricReport r;
  r.tp = total.tp;
  r.tn = total.tn;
  r.fp = total.fp;
  r.fn = total.fn;
  r.dice = dice_from_counts(total);
  r.accuracy = accuracy_from_counts(total);
  r.auc = auc(std::move(scores), std::move(labels));
  r.threshold = threshold;
  r.n_images = static_cast<int>(probs.size());
  return r;
}

}  // namespace qseg
