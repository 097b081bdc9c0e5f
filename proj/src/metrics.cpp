#include "isslab/metrics.hpp"

#include "isslab/losses.hpp"

#include <stdexcept>
#include <string>

namespace isslab {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : n_(num_classes), counts_(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0) {
  if (num_classes < 0) throw std::invalid_argument("negative class count");
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

void ConfusionMatrix::accumulate(std::span<const int> ground_truth, std::span<const int> predicted) {
  if (ground_truth.size() != predicted.size()) throw std::invalid_argument("mask size mismatch");
  for (std::size_t i = 0; i < ground_truth.size(); ++i) {
    const int gt = ground_truth[i];
    if (gt == kUnlabeled) continue;
    const int pred = predicted[i];
    if (gt < 0 || gt >= n_) throw std::out_of_range("ground-truth label " + std::to_string(gt) + " out of range");
    if (pred < 0 || pred >= n_) throw std::out_of_range("predicted label " + std::to_string(pred) + " out of range");
    ++counts_[index(gt, pred)];
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw std::invalid_argument("confusion size mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

namespace metrics {

namespace {

std::optional<double> mean_of(const std::vector<std::optional<double>>& v, int lo, int hi) {
  double sum = 0.0;
  int n = 0;
  for (int c = lo; c < hi; ++c)
    if (v[static_cast<std::size_t>(c)]) {
      sum += *v[static_cast<std::size_t>(c)];
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::optional<double> percent(std::optional<double> v) {
  if (!v) return std::nullopt;
  return *v * 100.0;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

IouScores iou_scores(const ConfusionMatrix& conf, int num_base) {
  const int n = conf.num_classes();
  if (num_base < 0 || num_base > n) throw std::invalid_argument("base category count out of range");
  IouScores s;
  s.per_class.resize(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    const std::int64_t tp = conf.at(c, c);
    std::int64_t fp = 0, fn = 0;
    for (int k = 0; k < n; ++k) {
      if (k == c) continue;
      fp += conf.at(k, c);
      fn += conf.at(c, k);
    }
    const std::int64_t denom = tp + fp + fn;
    if (denom > 0) s.per_class[static_cast<std::size_t>(c)] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  s.miou_base = mean_of(s.per_class, 0, num_base);
  s.miou_new = mean_of(s.per_class, num_base, n);
  s.miou = mean_of(s.per_class, 0, n);
  return s;
}

double hiou(double miou_base, double miou_new) {
  if (miou_base < 0 || miou_new < 0) throw std::invalid_argument("hIoU arguments must be nonnegative");
  const double sum = miou_base + miou_new;
  if (sum == 0.0) return 0.0;
  return 2.0 * miou_base * miou_new / sum;
}

MetricsReport make_report(const ConfusionMatrix& conf, int num_base, int stage) {
  const IouScores s = iou_scores(conf, num_base);
  MetricsReport r;
  r.stage = stage;
  r.num_classes = conf.num_classes();
  r.num_base = num_base;
  for (const auto& v : s.per_class) r.per_class_iou.push_back(percent(v));
  r.miou_base = percent(s.miou_base);
  r.miou_new = percent(s.miou_new);
  r.miou = percent(s.miou);
  if (r.miou_base && r.miou_new) r.hiou = hiou(*r.miou_base, *r.miou_new);
  return r;
}

}  // namespace metrics

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : per_class_iou) per.push_back(metrics::opt_json(v));
  return {{"stage", stage},       {"num_classes", num_classes},
          {"num_base", num_base}, {"per_class_iou", per},
          {"miou_base", metrics::opt_json(miou_base)}, {"miou_new", metrics::opt_json(miou_new)},
          {"miou", metrics::opt_json(miou)},           {"hiou", metrics::opt_json(hiou)}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.stage = j.at("stage").get<int>();
  r.num_classes = j.at("num_classes").get<int>();
  r.num_base = j.at("num_base").get<int>();
  for (const auto& v : j.at("per_class_iou")) r.per_class_iou.push_back(metrics::opt_from(v));
  r.miou_base = metrics::opt_from(j.at("miou_base"));
  r.miou_new = metrics::opt_from(j.at("miou_new"));
  r.miou = metrics::opt_from(j.at("miou"));
  r.hiou = metrics::opt_from(j.at("hiou"));
  return r;
}

}  // namespace isslab
