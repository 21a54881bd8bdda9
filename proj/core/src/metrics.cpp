#include "triad/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "triad/error.hpp"

namespace triad {

double dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int k) {
  if (pred.size() != gt.size()) fail(ErrorKind::shape, "dice inputs differ in size");
  std::int64_t p = 0;
  std::int64_t g = 0;
  std::int64_t both = 0;
  for (std::size_t n = 0; n < pred.size(); ++n) {
    const bool in_p = pred[n] == k;
    const bool in_g = gt[n] == k;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double dice(const LabelVolume& pred, const LabelVolume& gt, int k) {
  if (pred.shape != gt.shape) fail(ErrorKind::shape, "dice inputs differ in shape");
  return dice(std::span<const std::int32_t>(pred.data), std::span<const std::int32_t>(gt.data), k);
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.empty()) fail(ErrorKind::input, "accuracy of an empty set");
  if (preds.size() != labels.size()) fail(ErrorKind::shape, "accuracy inputs differ in length");
  std::size_t correct = 0;
  for (std::size_t n = 0; n < preds.size(); ++n) correct += preds[n] == labels[n];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t t = 0;
  for (int c = 0; c < k; ++c) t += at(c, c);
  return t;
}

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, int k) {
  if (preds.size() != labels.size()) fail(ErrorKind::shape, "confusion inputs differ in length");
  if (k < 1) fail(ErrorKind::config, "confusion matrix needs k >= 1");
  ConfusionMatrix m{k, std::vector<std::int64_t>(static_cast<std::size_t>(k * k), 0)};
  for (std::size_t n = 0; n < preds.size(); ++n) {
    if (preds[n] < 0 || preds[n] >= k || labels[n] < 0 || labels[n] >= k) {
      fail(ErrorKind::label, "class id outside [0, " + std::to_string(k) + ")");
    }
    ++m.counts[static_cast<std::size_t>(labels[n] * k + preds[n])];
  }
  return m;
}

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::shape, "roc inputs differ in length");
  bool pos = false;
  bool neg = false;
  for (int l : labels) {
    if (l != 0 && l != 1) fail(ErrorKind::label, "roc labels must be 0 or 1");
    (l == 1 ? pos : neg) = true;
  }
  if (!pos || !neg) fail(ErrorKind::degenerate, "roc needs both classes present");
}

}  // namespace

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  std::vector<RocPoint> pts{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  double tp = 0.0;
  double fp = 0.0;
  for (std::size_t n = 0; n < order.size();) {
    const double s = scores[order[n]];
    // Consume every sample tied at this score before emitting a point.
    while (n < order.size() && scores[order[n]] == s) {
      (labels[order[n]] == 1 ? tp : fp) += 1.0;
      ++n;
    }
    pts.push_back({s, fp / n_neg, tp / n_pos});
  }
  return pts;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  const auto pts = roc_curve(scores, labels);
  double area = 0.0;
  for (std::size_t n = 1; n < pts.size(); ++n) area += (pts[n].fpr - pts[n - 1].fpr) * 0.5 * (pts[n].tpr + pts[n - 1].tpr);
  return area;
}

}  // namespace triad
