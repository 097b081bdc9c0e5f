#pragma once

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace isslab {

/// counts(gt, pred); rows are ground truth, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  int num_classes() const { return n_; }
  std::int64_t at(int gt, int pred) const { return counts_[index(gt, pred)]; }
  std::int64_t total() const;

  /// Adds one image.  kUnlabeled ground-truth pixels are skipped; any other
  /// id outside [0, num_classes) throws std::out_of_range.
  void accumulate(std::span<const int> ground_truth, std::span<const int> predicted);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

 private:
  std::size_t index(int gt, int pred) const {
    return static_cast<std::size_t>(gt) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(pred);
  }
  int n_;
  std::vector<std::int64_t> counts_;
};

struct IouScores {
  std::vector<std::optional<double>> per_class;  // nullopt when the class is absent
  std::optional<double> miou_base;               // fractions in [0, 1]
  std::optional<double> miou_new;
  std::optional<double> miou;
};

/// Summary of one evaluation, all scores in percent.
struct MetricsReport {
  int stage = 0;
  int num_classes = 0;
  int num_base = 0;
  std::vector<std::optional<double>> per_class_iou;
  std::optional<double> miou_base;
  std::optional<double> miou_new;
  std::optional<double> miou;
  std::optional<double> hiou;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

namespace metrics {

/// IoU_c = TP / (TP + FP + FN).  Categories [0, num_base) are "base", the
/// rest "new"; classes with TP + FP + FN = 0 are left out of every mean.
IouScores iou_scores(const ConfusionMatrix& conf, int num_base);

/// Harmonic mean 2ab / (a + b), 0 when a + b = 0.
double hiou(double miou_base, double miou_new);

MetricsReport make_report(const ConfusionMatrix& conf, int num_base, int stage);

}  // namespace metrics
}  // namespace isslab
