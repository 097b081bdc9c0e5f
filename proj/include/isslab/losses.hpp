#pragma once

#include "isslab/numerics.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace isslab {

/// Sentinel for pixels that carry no ground-truth label at a stage.
inline constexpr int kUnlabeled = -1;

/// Category ids known at one stage, split into those learned before
/// (`prev`) and those introduced now (`novel`).  Ids are dense in
/// [0, size()) and the background is always id 0.
struct CategoryPartition {
  int stage = 1;
  std::vector<int> prev;
  std::vector<int> novel;

  /// Stage t partition with ids 0..num_prev-1 previous, the rest new.
  static CategoryPartition dense(int stage, int num_prev, int num_novel);

  int size() const { return static_cast<int>(prev.size() + novel.size()); }
  std::vector<int> all() const;
  bool is_prev(int c) const;
  bool is_novel(int c) const;
  /// Position of `c` inside `prev`, or -1.
  int prev_position(int c) const;
  static constexpr int background() { return 0; }

  /// Throws std::invalid_argument when disjointness or density fails.
  void validate() const;
};

/// Everything the per-pixel losses need at one location.
struct PixelContext {
  Vector logits;      // current-model logits, indexed by category id
  Vector prev_probs;  // previous-model probabilities, ordered like part.prev
  int label = kUnlabeled;
  bool in_labeled_region = false;

  void validate(const CategoryPartition& part) const;
};

struct LossResult {
  double value = 0.0;
  Vector grad;  // dL/dlogits, indexed by category id
};

struct DualProbs {
  Vector p;  // softmax over all categories (by id)
  Vector q;  // softmax over prev categories (by position in part.prev)
};

namespace losses {

/// Floor applied to probabilities before taking logs.
inline constexpr double kProbFloor = 1e-300;

/// Number of times a probability was clamped at kProbFloor since the last
/// reset.  Process-wide; surfaced in run reports.
std::uint64_t clamp_warnings();
void reset_clamp_warnings();

DualProbs dual_probs(const PixelContext& ctx, const CategoryPartition& part);

LossResult ce_loss(const PixelContext& ctx, const CategoryPartition& part);
LossResult kd_loss(const PixelContext& ctx, const CategoryPartition& part);
LossResult cce_loss(const PixelContext& ctx, const CategoryPartition& part);
LossResult ckd_loss(const PixelContext& ctx, const CategoryPartition& part);
LossResult ali_loss(const PixelContext& ctx, const CategoryPartition& part);

/// -(1 - p_target)^alpha log p_target.
///
/// dL/dz_c = [alpha p (1-p)^(alpha-1) log p - (1-p)^alpha] (1[c = target] - p_c)
/// with p = p_target.
LossResult focal_loss(const PixelContext& ctx, const CategoryPartition& part, double alpha,
                      int pseudo_label);

/// Focal target: the label on R_new, otherwise the previous model's argmax
/// over prev categories (ties go to the lowest id).
int focal_target(const PixelContext& ctx, const CategoryPartition& part);

struct MemLossResult {
  double value = 0.0;
  Matrix grad_weights;  // same shape as the classifier
  Vector grad_bias;     // empty when no bias is used
};

/// Mean softmax cross-entropy of replayed features against the classifier.
/// Row i of `features` is classified against every classifier row; its
/// target is `targets[i]`.  Gradients are w.r.t. the classifier only.
MemLossResult mem_loss(const Matrix& features, std::span<const int> targets,
                       const Matrix& weights, const Vector* bias = nullptr);

/// Per-pixel Step-1 objective: CE + lambda_kd KD on labeled pixels,
/// lambda_ali ALI elsewhere.
LossResult step1_objective(const PixelContext& ctx, const CategoryPartition& part,
                           double lambda_ali, double lambda_kd);

/// Which pixels a term is evaluated on.
enum class Region { kLabeled, kUnlabeled, kAll };

/// Weights of each per-pixel term, plus the region it covers.  Terms with
/// zero weight are skipped.  This is the superset behind every Step-1 and
/// Step-3 ablation; `step1_objective` is the default instance.
struct TermWeights {
  double ce = 0.0;
  Region ce_region = Region::kLabeled;  // kAll uses the focal_target rule
  double cce = 0.0;                     // every pixel
  double kd = 0.0;
  Region kd_region = Region::kLabeled;
  double ckd = 0.0;  // every pixel
  double ali = 0.0;  // unlabeled pixels only
  double focal = 0.0;
  Region focal_region = Region::kAll;
  double focal_alpha = 2.0;

  bool needs_prev_model() const { return cce > 0 || kd > 0 || ckd > 0 || ali > 0 ||
                                         (ce > 0 && ce_region != Region::kLabeled) ||
                                         (focal > 0 && focal_region != Region::kLabeled); }
};

/// Reciprocal pixel counts for mean-over-domain reduction.
struct RegionNorms {
  double labeled = 1.0;
  double unlabeled = 1.0;
  double all = 1.0;

  static RegionNorms from_counts(std::int64_t labeled, std::int64_t unlabeled);
  double of(Region r) const;
};

/// Sum of the weighted terms at one pixel, each scaled by the norm of its
/// region.  Summing this over a batch yields the mean-reduced objective.
LossResult composite_pixel_loss(const PixelContext& ctx, const CategoryPartition& part,
                                const TermWeights& w, const RegionNorms& norms);

struct Step3Result {
  double value = 0.0;
  std::vector<Vector> logit_grads;  // one per pixel
  Matrix classifier_grad;           // from the replay term
  Vector bias_grad;
};

/// Step-3 objective over a batch of pixels plus the replayed memory:
/// mean FL over all pixels + lambda_ali mean ALI over unlabeled pixels +
/// lambda_mem mean MEM over memory items.
Step3Result step3_objective(std::span<const PixelContext> pixels, const CategoryPartition& part,
                            double lambda_ali, double lambda_mem, double alpha,
                            const Matrix& memory_features, std::span<const int> memory_targets,
                            const Matrix& weights, const Vector* bias = nullptr);

}  // namespace losses
}  // namespace isslab
