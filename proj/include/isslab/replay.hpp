#pragma once

#include "isslab/cayley.hpp"
#include "isslab/dataset.hpp"
#include "isslab/losses.hpp"
#include "isslab/segmodel.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

namespace isslab {

/// Fixed-capacity store of S mean features per category, all expressed in
/// the feature space of stage `stage_tag`.  Each category owns a full
/// S x D buffer, so the footprint is S * D * 8 bytes per category whether
/// or not every row is filled.
class FeatureMemory {
 public:
  FeatureMemory() = default;
  FeatureMemory(int capacity, int dim, int stage_tag);

  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int stage_tag() const { return stage_tag_; }
  void set_stage_tag(int tag) { stage_tag_ = tag; }

  /// Appends one row; returns false once the category holds `capacity` rows.
  bool append(int category, const Vector& feature);
  int count(int category) const;
  bool full(int category) const { return count(category) >= capacity_; }
  /// Filled rows of `category` (count x D).
  Matrix rows(int category) const;
  void set_rows(int category, const Matrix& rows);
  std::vector<int> categories() const;
  bool empty() const { return slots_.empty(); }

  std::int64_t storage_bytes() const;
  /// Concatenated rows of every category with their category ids.
  std::pair<Matrix, std::vector<int>> stacked() const;
  /// Adds the categories of `other`; both must share capacity, dim and tag.
  void merge(const FeatureMemory& other);

  bool operator==(const FeatureMemory& other) const;

 private:
  struct Slot {
    Matrix buffer;  // capacity x D
    int count = 0;
  };
  int capacity_ = 0;
  int dim_ = 0;
  int stage_tag_ = 0;
  std::map<int, Slot> slots_;
};

/// r^{t-1}_c, r^t_c and the rotated r_hat = R_c r^{t-1}_c.
struct PrototypePair {
  Vector r_prev;
  Vector r_curr;
  Vector r_hat;
};

using RotationSet = std::map<int, SkewParams>;

struct RotationLoss {
  double value = 0.0;
  std::map<int, Vector> grads;  // d value / d skew parameters, per category
  int skipped = 0;              // categories dropped for zero-norm prototypes
};

struct RotationTrainConfig {
  double lambda_rot = 0.5;
  int epochs = 10;
  double lr = 1e-3;
  double poly_power = 0.9;
  int batch_size = 4;
  double tau = 10.0;
  bool normalize_by_s = false;
  int threads = 1;
};

namespace replay {

/// Mean stage-t feature of each new category per image (ground-truth mask),
/// visiting images in a seeded shuffled order until every category holds S
/// rows.  Throws std::runtime_error listing categories that never occur.
FeatureMemory memorize_features(const StageDataset& data, const ModelParams& model,
                                const CategoryPartition& part, int capacity, const Rng& rng);

/// v_c(p) = sum_s ReLU(cos(f(p), m_c(s))), optionally divided by S.
Vector correlation_scores(const FeatureField& f_prev, const Matrix& memory_rows, bool normalize_by_s = false);

/// sigma_c(p) = softmax over positions of tau * v_c(p).
Vector spatial_softmax(const Vector& scores, double tau);

/// sigma-weighted means of both feature fields; r_hat starts as r_prev.
PrototypePair prototypes(const Vector& weights, const FeatureField& f_prev, const FeatureField& f_curr);

/// Equal-weight mean of per-image prototype pairs.
PrototypePair average(std::span<const PrototypePair> pairs);

/// Fidelity 1 - cos(r_hat, r_curr) and its gradient w.r.t. r_hat.
/// Returns false (term skipped) when either vector has zero norm.
bool fidelity_term(const Vector& r_hat, const Vector& r_curr, double& value, Vector& grad);

/// -log softmax(W r_hat + b)_c and its gradient w.r.t. r_hat.
double regularization_term(const Vector& r_hat, const Matrix& classifier, const Vector* bias, int category,
                           Vector& grad);

/// Sum over categories of the fidelity terms, r_hat = cayley(S_c) r_prev.
RotationLoss fid_loss(const std::map<int, PrototypePair>& pairs, const RotationSet& skews);
/// Sum over categories of the classifier cross-entropy of r_hat.
RotationLoss reg_loss(const std::map<int, PrototypePair>& pairs, const RotationSet& skews,
                      const Matrix& classifier, const Vector* bias = nullptr);

/// Fits one category's rotation on per-image prototype pairs with Adam:
/// each mini-batch averages its images' prototypes and takes one step on
/// lambda_rot FID + (1 - lambda_rot) REG.  Starts from the identity.
SkewParams fit_rotation(int category, std::span<const PrototypePair> image_pairs, const Matrix& classifier,
                        const Vector* bias, const RotationTrainConfig& cfg, const Rng& rng);

/// Per-category rotations aligning the previous feature space to the
/// current one, estimated on `data` with both models frozen.
RotationSet train_rotations(const StageDataset& data, const ModelParams& prev_model, const ModelParams& curr_model,
                            const FeatureMemory& memory, const CategoryPartition& part,
                            const RotationTrainConfig& cfg, const Rng& rng);

/// Rotates every stored row by its category's matrix and advances the
/// stage tag.  Throws std::invalid_argument for a category without rotation.
FeatureMemory rotate_memory(const FeatureMemory& memory, const RotationSet& rotations);

/// Rotation storage: D(D-1)/2 float64 parameters per category.
std::int64_t rotation_bytes(int dim, int num_rotations);

void save(const FeatureMemory& memory, const std::filesystem::path& path);
FeatureMemory load(const std::filesystem::path& path);

}  // namespace replay
}  // namespace isslab
