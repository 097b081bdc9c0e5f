#include "isslab/replay.hpp"

#include "isslab/binary_io.hpp"
#include "isslab/optim.hpp"
#include "isslab/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

namespace isslab {

namespace {

constexpr char kMemoryMagic[] = "ISSMEMRY";
constexpr std::uint32_t kMemoryVersion = 1;
constexpr double kNormFloor = 1e-12;

}  // namespace

FeatureMemory::FeatureMemory(int capacity, int dim, int stage_tag)
    : capacity_(capacity), dim_(dim), stage_tag_(stage_tag) {
  if (capacity < 0 || dim < 1) throw std::invalid_argument("feature memory needs capacity >= 0 and dim >= 1");
}

bool FeatureMemory::append(int category, const Vector& feature) {
  if (feature.size() != dim_) throw std::invalid_argument("feature dimension mismatch");
  if (capacity_ == 0) return false;
  auto [it, inserted] = slots_.try_emplace(category);
  Slot& slot = it->second;
  if (inserted) slot.buffer = Matrix::Zero(capacity_, dim_);
  if (slot.count >= capacity_) return false;
  slot.buffer.row(slot.count++) = feature.transpose();
  return true;
}

int FeatureMemory::count(int category) const {
  const auto it = slots_.find(category);
  return it == slots_.end() ? 0 : it->second.count;
}

Matrix FeatureMemory::rows(int category) const {
  const auto it = slots_.find(category);
  if (it == slots_.end()) return Matrix(0, dim_);
  return it->second.buffer.topRows(it->second.count);
}

void FeatureMemory::set_rows(int category, const Matrix& rows) {
  if (rows.cols() != dim_ || rows.rows() > capacity_) throw std::invalid_argument("memory rows do not fit");
  Slot& slot = slots_[category];
  slot.buffer = Matrix::Zero(capacity_, dim_);
  slot.buffer.topRows(rows.rows()) = rows;
  slot.count = static_cast<int>(rows.rows());
}

std::vector<int> FeatureMemory::categories() const {
  std::vector<int> out;
  for (const auto& [c, slot] : slots_) out.push_back(c);
  return out;
}

std::int64_t FeatureMemory::storage_bytes() const {
  return static_cast<std::int64_t>(slots_.size()) * capacity_ * dim_ * static_cast<std::int64_t>(sizeof(double));
}

std::pair<Matrix, std::vector<int>> FeatureMemory::stacked() const {
  Eigen::Index total = 0;
  for (const auto& [c, slot] : slots_) total += slot.count;
  Matrix m(total, dim_);
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(total));
  Eigen::Index r = 0;
  for (const auto& [c, slot] : slots_) {
    m.middleRows(r, slot.count) = slot.buffer.topRows(slot.count);
    r += slot.count;
    ids.insert(ids.end(), static_cast<std::size_t>(slot.count), c);
  }
  return {std::move(m), std::move(ids)};
}

void FeatureMemory::merge(const FeatureMemory& other) {
  if (other.empty()) return;
  if (empty() && capacity_ == 0) {
    *this = other;
    return;
  }
  if (other.capacity_ != capacity_ || other.dim_ != dim_ || other.stage_tag_ != stage_tag_)
    throw std::invalid_argument("cannot merge memories with different capacity, dim or stage tag");
  for (const auto& [c, slot] : other.slots_) {
    if (slots_.count(c)) throw std::invalid_argument("category " + std::to_string(c) + " already in memory");
    slots_[c] = slot;
  }
}

bool FeatureMemory::operator==(const FeatureMemory& other) const {
  if (capacity_ != other.capacity_ || dim_ != other.dim_ || stage_tag_ != other.stage_tag_) return false;
  if (slots_.size() != other.slots_.size()) return false;
  for (const auto& [c, slot] : slots_) {
    const auto it = other.slots_.find(c);
    if (it == other.slots_.end() || it->second.count != slot.count) return false;
    if (slot.buffer.topRows(slot.count) != it->second.buffer.topRows(slot.count)) return false;
  }
  return true;
}

namespace replay {

FeatureMemory memorize_features(const StageDataset& data, const ModelParams& model,
                                const CategoryPartition& part, int capacity, const Rng& rng) {
  FeatureMemory memory(capacity, model.feature_dim, part.stage);
  if (capacity == 0) return memory;

  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffler = rng;
  shuffler.shuffle(std::span<std::size_t>(order));

  std::vector<int> seen_pixels(part.novel.size(), 0);
  for (std::size_t idx : order) {
    const Sample& s = data.samples[idx];
    bool wanted = false;
    for (std::size_t k = 0; k < part.novel.size(); ++k) {
      const int c = part.novel[k];
      if (memory.full(c)) continue;
      if (std::find(s.mask.begin(), s.mask.end(), c) != s.mask.end()) wanted = true;
    }
    if (!wanted) continue;

    const FeatureField f = segmodel::extract_features(s.image, model);
    for (std::size_t k = 0; k < part.novel.size(); ++k) {
      const int c = part.novel[k];
      if (memory.full(c)) continue;
      Vector sum = Vector::Zero(model.feature_dim);
      int n = 0;
      for (std::size_t p = 0; p < s.mask.size(); ++p)
        if (s.mask[p] == c) {
          sum += f.data.col(static_cast<Eigen::Index>(p));
          ++n;
        }
      if (n == 0) continue;
      seen_pixels[k] += n;
      memory.append(c, sum / n);
    }
    if (std::all_of(part.novel.begin(), part.novel.end(), [&](int c) { return memory.full(c); })) break;
  }

  std::string missing;
  for (std::size_t k = 0; k < part.novel.size(); ++k)
    if (seen_pixels[k] == 0) missing += (missing.empty() ? "" : ", ") + std::to_string(part.novel[k]);
  if (!missing.empty()) throw std::runtime_error("no labeled pixels for categories: " + missing);
  return memory;
}

Vector correlation_scores(const FeatureField& f_prev, const Matrix& memory_rows, bool normalize_by_s) {
  const Eigen::Index n = f_prev.data.cols();
  if (memory_rows.rows() == 0) return Vector::Zero(n);
  if (memory_rows.cols() != f_prev.data.rows()) throw std::invalid_argument("memory and feature dims differ");

  Matrix mem_unit = memory_rows;
  for (Eigen::Index s = 0; s < mem_unit.rows(); ++s) {
    const double norm = mem_unit.row(s).norm();
    if (norm < kNormFloor)
      mem_unit.row(s).setZero();
    else
      mem_unit.row(s) /= norm;
  }
  Matrix feat_unit = f_prev.data;
  for (Eigen::Index p = 0; p < n; ++p) {
    const double norm = feat_unit.col(p).norm();
    if (norm < kNormFloor)
      feat_unit.col(p).setZero();
    else
      feat_unit.col(p) /= norm;
  }
  const Matrix cos = mem_unit * feat_unit;  // S x HW
  Vector v = cos.cwiseMax(0.0).colwise().sum().transpose();
  if (normalize_by_s) v /= static_cast<double>(memory_rows.rows());
  return v;
}

Vector spatial_softmax(const Vector& scores, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("spatial softmax temperature must be positive");
  const Vector scaled = tau * scores;
  const double lse = numerics::log_sum_exp(scaled);
  return (scaled.array() - lse).exp().matrix();
}

PrototypePair prototypes(const Vector& weights, const FeatureField& f_prev, const FeatureField& f_curr) {
  if (weights.size() != f_prev.data.cols() || weights.size() != f_curr.data.cols())
    throw std::invalid_argument("weight field size mismatch");
  PrototypePair pair;
  pair.r_prev = f_prev.data * weights;
  pair.r_curr = f_curr.data * weights;
  pair.r_hat = pair.r_prev;
  return pair;
}

PrototypePair average(std::span<const PrototypePair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("cannot average zero prototype pairs");
  PrototypePair out{Vector::Zero(pairs[0].r_prev.size()), Vector::Zero(pairs[0].r_curr.size()),
                    Vector::Zero(pairs[0].r_hat.size())};
  for (const auto& p : pairs) {
    out.r_prev += p.r_prev;
    out.r_curr += p.r_curr;
    out.r_hat += p.r_hat;
  }
  const double inv = 1.0 / static_cast<double>(pairs.size());
  out.r_prev *= inv;
  out.r_curr *= inv;
  out.r_hat *= inv;
  return out;
}

bool fidelity_term(const Vector& r_hat, const Vector& r_curr, double& value, Vector& grad) {
  const double na = r_hat.norm();
  const double nb = r_curr.norm();
  if (na < kNormFloor || nb < kNormFloor) return false;
  const double dot = r_hat.dot(r_curr);
  const double cos = dot / (na * nb);
  value = 1.0 - cos;
  grad = -(r_curr / (na * nb) - cos * r_hat / (na * na));
  return true;
}

double regularization_term(const Vector& r_hat, const Matrix& classifier, const Vector* bias, int category,
                           Vector& grad) {
  if (category < 0 || category >= classifier.rows()) throw std::out_of_range("category outside classifier");
  Vector logits = classifier * r_hat;
  if (bias && bias->size() > 0) logits += *bias;
  const double lse = numerics::log_sum_exp(logits);
  Vector probs = (logits.array() - lse).exp().matrix();
  probs(category) -= 1.0;
  grad = classifier.transpose() * probs;
  return lse - logits(category);
}

namespace {

template <typename Term>
RotationLoss rotation_loss(const std::map<int, PrototypePair>& pairs, const RotationSet& skews, Term term) {
  RotationLoss out;
  for (const auto& [c, pair] : pairs) {
    const auto it = skews.find(c);
    if (it == skews.end()) throw std::invalid_argument("no rotation for category " + std::to_string(c));
    const Matrix r = cayley(it->second);
    const Vector r_hat = r * pair.r_prev;
    double value = 0.0;
    Vector g;
    if (!term(c, r_hat, pair, value, g)) {
      ++out.skipped;
      out.grads[c] = Vector::Zero(it->second.values.size());
      continue;
    }
    out.value += value;
    const Matrix upstream = g * pair.r_prev.transpose();
    out.grads[c] = cayley_backward<double>(upstream, it->second);
  }
  return out;
}

}  // namespace

RotationLoss fid_loss(const std::map<int, PrototypePair>& pairs, const RotationSet& skews) {
  return rotation_loss(pairs, skews,
                       [](int, const Vector& r_hat, const PrototypePair& p, double& v, Vector& g) {
                         return fidelity_term(r_hat, p.r_curr, v, g);
                       });
}

RotationLoss reg_loss(const std::map<int, PrototypePair>& pairs, const RotationSet& skews,
                      const Matrix& classifier, const Vector* bias) {
  return rotation_loss(pairs, skews,
                       [&](int c, const Vector& r_hat, const PrototypePair&, double& v, Vector& g) {
                         v = regularization_term(r_hat, classifier, bias, c, g);
                         return true;
                       });
}

SkewParams fit_rotation(int category, std::span<const PrototypePair> image_pairs, const Matrix& classifier,
                        const Vector* bias, const RotationTrainConfig& cfg, const Rng& rng) {
  if (cfg.lambda_rot < 0.0 || cfg.lambda_rot > 1.0) throw std::invalid_argument("lambda_rot must lie in [0, 1]");
  if (cfg.batch_size < 1) throw std::invalid_argument("rotation batch size must be positive");
  const Eigen::Index dim = classifier.cols();
  SkewParams skew = SkewParams::zeros(dim);
  if (cfg.epochs <= 0 || image_pairs.empty()) return skew;

  const std::size_t n = image_pairs.size();
  const std::size_t batches = (n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t total = static_cast<std::int64_t>(batches) * cfg.epochs;
  optim::AdamState adam = optim::AdamState::zeros(skew.values.size());
  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  std::vector<PrototypePair> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler = rng.fork(static_cast<std::uint64_t>(epoch));
    shuffler.shuffle(std::span<std::size_t>(order));
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      batch.clear();
      const std::size_t lo = b * static_cast<std::size_t>(cfg.batch_size);
      const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(image_pairs[order[i]]);
      const std::map<int, PrototypePair> pairs{{category, average(batch)}};
      const RotationSet skews{{category, skew}};

      Vector grad = Vector::Zero(skew.values.size());
      if (cfg.lambda_rot > 0.0) grad += cfg.lambda_rot * fid_loss(pairs, skews).grads.at(category);
      if (cfg.lambda_rot < 1.0)
        grad += (1.0 - cfg.lambda_rot) * reg_loss(pairs, skews, classifier, bias).grads.at(category);
      optim::adam_step(adam, skew.values, grad, optim::poly_lr(cfg.lr, step, total, cfg.poly_power));
    }
  }
  return skew;
}

RotationSet train_rotations(const StageDataset& data, const ModelParams& prev_model, const ModelParams& curr_model,
                            const FeatureMemory& memory, const CategoryPartition& part,
                            const RotationTrainConfig& cfg, const Rng& rng) {
  if (memory.stage_tag() != part.stage - 1)
    throw std::invalid_argument("memory must hold features of stage " + std::to_string(part.stage - 1));
  if (prev_model.feature_dim != curr_model.feature_dim || memory.dim() != curr_model.feature_dim)
    throw std::invalid_argument("feature dimensions of models and memory differ");

  const std::vector<int> cats = memory.categories();
  std::vector<Matrix> rows;
  for (int c : cats) rows.push_back(memory.rows(c));

  // per_image[i][k]: prototype pair of category cats[k] on image i
  const std::size_t n = data.samples.size();
  std::vector<std::vector<PrototypePair>> per_image(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const Image& img = data.samples[i].image;
    const FeatureField f_prev = segmodel::extract_features(img, prev_model);
    const FeatureField f_curr = segmodel::extract_features(img, curr_model);
    per_image[i].reserve(cats.size());
    for (std::size_t k = 0; k < cats.size(); ++k) {
      const Vector v = correlation_scores(f_prev, rows[k], cfg.normalize_by_s);
      per_image[i].push_back(prototypes(spatial_softmax(v, cfg.tau), f_prev, f_curr));
    }
  });

  const Vector* bias = curr_model.has_bias() ? &curr_model.classifier_bias : nullptr;
  std::vector<SkewParams> fitted(cats.size());
  parallel_for(cats.size(), cfg.threads, [&](std::size_t k) {
    std::vector<PrototypePair> pairs;
    pairs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) pairs.push_back(per_image[i][k]);
    fitted[k] = fit_rotation(cats[k], pairs, curr_model.classifier, bias, cfg,
                             rng.fork(static_cast<std::uint64_t>(cats[k])));
  });

  RotationSet out;
  for (std::size_t k = 0; k < cats.size(); ++k) out[cats[k]] = std::move(fitted[k]);
  return out;
}

FeatureMemory rotate_memory(const FeatureMemory& memory, const RotationSet& rotations) {
  FeatureMemory out(memory.capacity(), memory.dim(), memory.stage_tag() + 1);
  for (int c : memory.categories()) {
    const auto it = rotations.find(c);
    if (it == rotations.end()) throw std::invalid_argument("no rotation for stored category " + std::to_string(c));
    if (it->second.dim != memory.dim()) throw std::invalid_argument("rotation dimension mismatch");
    const Matrix r = cayley(it->second);
    out.set_rows(c, memory.rows(c) * r.transpose());
  }
  return out;
}

std::int64_t rotation_bytes(int dim, int num_rotations) {
  return static_cast<std::int64_t>(num_rotations) * skew_param_count(dim) * static_cast<std::int64_t>(sizeof(double));
}

void save(const FeatureMemory& memory, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  BinaryWriter w(f);
  w.magic(std::string_view(kMemoryMagic, 8));
  w.u32(kMemoryVersion);
  w.i32(memory.stage_tag());
  w.i32(memory.dim());
  w.i32(memory.capacity());
  const auto cats = memory.categories();
  w.i32(static_cast<std::int32_t>(cats.size()));
  for (int c : cats) {
    const Matrix rows = memory.rows(c);
    w.i32(c);
    w.i32(static_cast<std::int32_t>(rows.rows()));
    for (Eigen::Index r = 0; r < rows.rows(); ++r)
      for (Eigen::Index d = 0; d < rows.cols(); ++d) w.f64(rows(r, d));
  }
  w.check();
}

FeatureMemory load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  BinaryReader r(f);
  r.expect_magic(std::string_view(kMemoryMagic, 8));
  const auto version = r.u32();
  if (version != kMemoryVersion) throw FormatError("unsupported memory version " + std::to_string(version));
  const int tag = r.i32();
  const int dim = r.i32();
  const int capacity = r.i32();
  const int count = r.i32();
  if (dim < 1 || dim > 4096 || capacity < 0 || capacity > 1'000'000 || count < 0 || count > 4096)
    throw FormatError("implausible memory header");
  FeatureMemory memory(capacity, dim, tag);
  for (int k = 0; k < count; ++k) {
    const int c = r.i32();
    const int rows = r.i32();
    if (rows < 0 || rows > capacity) throw FormatError("row count exceeds capacity");
    Matrix m(rows, dim);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index d = 0; d < dim; ++d) m(i, d) = r.f64();
    memory.set_rows(c, m);
  }
  r.expect_end();
  return memory;
}

}  // namespace replay
}  // namespace isslab
