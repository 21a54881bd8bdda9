#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "triad/volume.hpp"

namespace triad {

/// 2|P ∩ G| / (|P| + |G|) for class k; 1.0 when both sets are empty.
double dice(const LabelVolume& pred, const LabelVolume& gt, int k);
double dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int k);

/// Fraction of matching ids; in the binary case (TP + TN) / (TP + TN + FP + FN).
double accuracy(std::span<const int> preds, std::span<const int> labels);

/// counts[true][pred], row-major K x K.
struct ConfusionMatrix {
  int k = 0;
  std::vector<std::int64_t> counts;

  std::int64_t at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth * k + pred)]; }
  std::int64_t total() const;
  std::int64_t trace() const;
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, int k);

/// Area under the ROC curve, ties counted half (Mann-Whitney statistic).
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

/// ROC operating points, one per distinct score, from (0,0) to (1,1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

}  // namespace triad
