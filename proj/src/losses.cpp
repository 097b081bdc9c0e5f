#include "isslab/losses.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace isslab {

namespace {

std::atomic<std::uint64_t> g_clamp_warnings{0};

double clamped_log(double p) {
  if (p < losses::kProbFloor) {
    g_clamp_warnings.fetch_add(1, std::memory_order_relaxed);
    p = losses::kProbFloor;
  }
  return std::log(p);
}

double lse_over(const Vector& z, std::span<const int> ids) {
  Vector g(static_cast<Eigen::Index>(ids.size()));
  for (std::size_t k = 0; k < ids.size(); ++k) g(static_cast<Eigen::Index>(k)) = z(ids[k]);
  return numerics::log_sum_exp(g);
}

double prev_mass(const PixelContext& ctx) { return ctx.prev_probs.sum(); }

}  // namespace

CategoryPartition CategoryPartition::dense(int stage, int num_prev, int num_novel) {
  CategoryPartition part;
  part.stage = stage;
  for (int c = 0; c < num_prev; ++c) part.prev.push_back(c);
  for (int c = 0; c < num_novel; ++c) part.novel.push_back(num_prev + c);
  part.validate();
  return part;
}

std::vector<int> CategoryPartition::all() const {
  std::vector<int> out(prev);
  out.insert(out.end(), novel.begin(), novel.end());
  return out;
}

bool CategoryPartition::is_prev(int c) const {
  return std::find(prev.begin(), prev.end(), c) != prev.end();
}

bool CategoryPartition::is_novel(int c) const {
  return std::find(novel.begin(), novel.end(), c) != novel.end();
}

int CategoryPartition::prev_position(int c) const {
  const auto it = std::find(prev.begin(), prev.end(), c);
  return it == prev.end() ? -1 : static_cast<int>(it - prev.begin());
}

void CategoryPartition::validate() const {
  const int n = size();
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  for (int c : all()) {
    if (c < 0 || c >= n)
      throw std::invalid_argument("category id " + std::to_string(c) + " not dense in [0, " +
                                  std::to_string(n) + ")");
    if (seen[static_cast<std::size_t>(c)]++)
      throw std::invalid_argument("category id " + std::to_string(c) + " appears twice");
  }
  if (stage > 1 && novel.empty()) throw std::invalid_argument("incremental stage without new categories");
  if (stage < 1) throw std::invalid_argument("stage index must be >= 1");
}

void PixelContext::validate(const CategoryPartition& part) const {
  if (logits.size() != part.size()) throw std::invalid_argument("logit length does not match |C_all|");
  if (prev_probs.size() != static_cast<Eigen::Index>(part.prev.size()))
    throw std::invalid_argument("previous-model probabilities do not match |C_prev|");
  if (in_labeled_region != (label != kUnlabeled && part.is_novel(label)))
    throw std::invalid_argument("labeled-region flag inconsistent with label");
}

namespace losses {

std::uint64_t clamp_warnings() { return g_clamp_warnings.load(); }
void reset_clamp_warnings() { g_clamp_warnings.store(0); }

DualProbs dual_probs(const PixelContext& ctx, const CategoryPartition& part) {
  DualProbs out;
  out.p = numerics::softmax(ctx.logits);
  out.q = numerics::softmax_subset(ctx.logits, part.prev);
  return out;
}

LossResult ce_loss(const PixelContext& ctx, const CategoryPartition& part) {
  if (!ctx.in_labeled_region) throw std::invalid_argument("CE defined on R_new only");
  const int target = ctx.label;
  const double lse = numerics::log_sum_exp(ctx.logits);
  LossResult r;
  r.value = lse - ctx.logits(target);
  r.grad = (ctx.logits.array() - lse).exp().matrix();
  r.grad(target) -= 1.0;
  (void)part;
  return r;
}

LossResult kd_loss(const PixelContext& ctx, const CategoryPartition& part) {
  if (part.prev.empty()) throw std::invalid_argument("KD needs at least one previous category");
  const double lse_prev = lse_over(ctx.logits, part.prev);
  const double mass = prev_mass(ctx);
  LossResult r;
  r.grad = Vector::Zero(ctx.logits.size());
  for (std::size_t k = 0; k < part.prev.size(); ++k) {
    const int c = part.prev[k];
    const double target = ctx.prev_probs(static_cast<Eigen::Index>(k));
    const double log_q = ctx.logits(c) - lse_prev;
    r.value -= target * log_q;
    r.grad(c) = std::exp(log_q) * mass - target;
  }
  return r;
}

LossResult cce_loss(const PixelContext& ctx, const CategoryPartition& part) {
  if (ctx.in_labeled_region) return ce_loss(ctx, part);
  const double lse_all = numerics::log_sum_exp(ctx.logits);
  const double lse_prev = lse_over(ctx.logits, part.prev);
  LossResult r;
  // -log sum_{prev} p_k, evaluated in the log domain
  r.value = lse_all - lse_prev;
  r.grad = (ctx.logits.array() - lse_all).exp().matrix();
  for (int c : part.prev) r.grad(c) -= std::exp(ctx.logits(c) - lse_prev);
  return r;
}

LossResult ckd_loss(const PixelContext& ctx, const CategoryPartition& part) {
  const int bg = CategoryPartition::background();
  const int bg_pos = part.prev_position(bg);
  if (bg_pos < 0) throw std::invalid_argument("CKD requires the background in C_prev");

  std::vector<int> pooled{bg};
  pooled.insert(pooled.end(), part.novel.begin(), part.novel.end());

  const double lse_all = numerics::log_sum_exp(ctx.logits);
  const double lse_pooled = lse_over(ctx.logits, pooled);
  const double mass = prev_mass(ctx);
  const double target_bg = ctx.prev_probs(bg_pos);

  LossResult r;
  r.grad = Vector::Zero(ctx.logits.size());
  r.value = -target_bg * (lse_pooled - lse_all);
  for (std::size_t k = 0; k < part.prev.size(); ++k) {
    const int c = part.prev[k];
    if (c == bg) continue;
    const double target = ctx.prev_probs(static_cast<Eigen::Index>(k));
    const double log_p = ctx.logits(c) - lse_all;
    r.value -= target * log_p;
    r.grad(c) = std::exp(log_p) * mass - target;
  }
  for (int c : pooled) {
    const double p_c = std::exp(ctx.logits(c) - lse_all);
    const double share = std::exp(ctx.logits(c) - lse_pooled);  // p_c / p_pooled
    r.grad(c) = p_c * mass - target_bg * share;
  }
  return r;
}

LossResult ali_loss(const PixelContext& ctx, const CategoryPartition& part) {
  if (ctx.in_labeled_region) throw std::invalid_argument("ALI defined off R_new only");
  const double lse_all = numerics::log_sum_exp(ctx.logits);
  LossResult r;
  r.value = lse_all;
  r.grad = (ctx.logits.array() - lse_all).exp().matrix();
  for (std::size_t k = 0; k < part.prev.size(); ++k) {
    const int c = part.prev[k];
    const double w = ctx.prev_probs(static_cast<Eigen::Index>(k));
    r.value -= w * ctx.logits(c);
    r.grad(c) -= w;
  }
  return r;
}

int focal_target(const PixelContext& ctx, const CategoryPartition& part) {
  if (ctx.in_labeled_region) return ctx.label;
  if (part.prev.empty()) return kUnlabeled;
  std::size_t best = 0;
  for (std::size_t k = 1; k < part.prev.size(); ++k) {
    const double a = ctx.prev_probs(static_cast<Eigen::Index>(k));
    const double b = ctx.prev_probs(static_cast<Eigen::Index>(best));
    if (a > b || (a == b && part.prev[k] < part.prev[best])) best = k;
  }
  return part.prev[best];
}

LossResult focal_loss(const PixelContext& ctx, const CategoryPartition& part, double alpha,
                      int pseudo_label) {
  if (pseudo_label < 0 || pseudo_label >= part.size())
    throw std::invalid_argument("focal target " + std::to_string(pseudo_label) + " out of range");
  if (alpha < 0) throw std::invalid_argument("focal alpha must be nonnegative");
  const double lse = numerics::log_sum_exp(ctx.logits);
  const Vector p = (ctx.logits.array() - lse).exp().matrix();
  const int t = pseudo_label;
  double log_p = ctx.logits(t) - lse;
  const double p_t = p(t);
  if (p_t < kProbFloor) log_p = clamped_log(p_t);
  // 1 - p_t from the complementary mass, which keeps precision near p_t = 1
  double rest = 0.0;
  for (Eigen::Index c = 0; c < p.size(); ++c)
    if (c != t) rest += p(c);

  LossResult r;
  const double modulator = (alpha == 0.0) ? 1.0 : std::pow(rest, alpha);
  r.value = -modulator * log_p;
  double coef = -modulator;
  if (alpha != 0.0 && rest > 0.0) coef += alpha * p_t * std::pow(rest, alpha - 1.0) * log_p;
  r.grad = -coef * p;
  r.grad(t) += coef;
  return r;
}

MemLossResult mem_loss(const Matrix& features, std::span<const int> targets, const Matrix& weights,
                       const Vector* bias) {
  if (features.rows() == 0) throw std::invalid_argument("empty memory");
  if (static_cast<std::size_t>(features.rows()) != targets.size())
    throw std::invalid_argument("memory targets do not match feature rows");
  if (features.cols() != weights.cols()) throw std::invalid_argument("memory feature dim mismatch");
  const Eigen::Index n = features.rows();
  const Eigen::Index k = weights.rows();

  Matrix logits = features * weights.transpose();  // n x k
  if (bias) logits.rowwise() += bias->transpose();

  MemLossResult r;
  Matrix delta(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= k) throw std::invalid_argument("memory target out of range");
    const Vector row = logits.row(i).transpose();
    const double lse = numerics::log_sum_exp(row);
    r.value += lse - row(t);
    delta.row(i) = (row.array() - lse).exp().matrix().transpose();
    delta(i, t) -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(n);
  r.value *= inv;
  r.grad_weights = inv * delta.transpose() * features;
  if (bias) r.grad_bias = inv * delta.colwise().sum().transpose();
  return r;
}

LossResult step1_objective(const PixelContext& ctx, const CategoryPartition& part, double lambda_ali,
                           double lambda_kd) {
  if (lambda_ali < 0 || lambda_kd < 0) throw std::invalid_argument("negative loss weight");
  if (ctx.in_labeled_region) {
    LossResult r = ce_loss(ctx, part);
    if (lambda_kd > 0 && !part.prev.empty()) {
      const LossResult kd = kd_loss(ctx, part);
      r.value += lambda_kd * kd.value;
      r.grad += lambda_kd * kd.grad;
    }
    return r;
  }
  LossResult r;
  r.grad = Vector::Zero(ctx.logits.size());
  if (lambda_ali > 0) {
    const LossResult ali = ali_loss(ctx, part);
    r.value = lambda_ali * ali.value;
    r.grad = lambda_ali * ali.grad;
  }
  return r;
}

RegionNorms RegionNorms::from_counts(std::int64_t labeled, std::int64_t unlabeled) {
  RegionNorms n;
  n.labeled = labeled > 0 ? 1.0 / static_cast<double>(labeled) : 0.0;
  n.unlabeled = unlabeled > 0 ? 1.0 / static_cast<double>(unlabeled) : 0.0;
  n.all = (labeled + unlabeled) > 0 ? 1.0 / static_cast<double>(labeled + unlabeled) : 0.0;
  return n;
}

double RegionNorms::of(Region r) const {
  switch (r) {
    case Region::kLabeled: return labeled;
    case Region::kUnlabeled: return unlabeled;
    case Region::kAll: return all;
  }
  return 0.0;
}

namespace {

bool covers(Region r, bool labeled) {
  return r == Region::kAll || (r == Region::kLabeled) == labeled;
}

void add_scaled(LossResult& acc, const LossResult& term, double scale) {
  acc.value += scale * term.value;
  acc.grad += scale * term.grad;
}

}  // namespace

LossResult composite_pixel_loss(const PixelContext& ctx, const CategoryPartition& part,
                                const TermWeights& w, const RegionNorms& norms) {
  LossResult acc;
  acc.grad = Vector::Zero(ctx.logits.size());
  const bool labeled = ctx.in_labeled_region;
  const bool has_prev = !part.prev.empty() && ctx.prev_probs.size() > 0;

  if (w.ce > 0 && covers(w.ce_region, labeled)) {
    if (labeled) {
      add_scaled(acc, ce_loss(ctx, part), w.ce * norms.of(w.ce_region));
    } else if (has_prev) {
      // pseudo-labelled CE is focal loss with alpha = 0
      add_scaled(acc, focal_loss(ctx, part, 0.0, focal_target(ctx, part)),
                 w.ce * norms.of(w.ce_region));
    }
  }
  if (w.focal > 0 && covers(w.focal_region, labeled) && (labeled || has_prev))
    add_scaled(acc, focal_loss(ctx, part, w.focal_alpha, focal_target(ctx, part)),
               w.focal * norms.of(w.focal_region));
  if (!has_prev) return acc;
  if (w.cce > 0) add_scaled(acc, cce_loss(ctx, part), w.cce * norms.all);
  if (w.kd > 0 && covers(w.kd_region, labeled))
    add_scaled(acc, kd_loss(ctx, part), w.kd * norms.of(w.kd_region));
  if (w.ckd > 0) add_scaled(acc, ckd_loss(ctx, part), w.ckd * norms.all);
  if (w.ali > 0 && !labeled) add_scaled(acc, ali_loss(ctx, part), w.ali * norms.unlabeled);
  return acc;
}

Step3Result step3_objective(std::span<const PixelContext> pixels, const CategoryPartition& part,
                            double lambda_ali, double lambda_mem, double alpha,
                            const Matrix& memory_features, std::span<const int> memory_targets,
                            const Matrix& weights, const Vector* bias) {
  if (lambda_ali < 0 || lambda_mem < 0) throw std::invalid_argument("negative loss weight");
  std::int64_t labeled = 0;
  for (const auto& px : pixels) labeled += px.in_labeled_region ? 1 : 0;
  const auto norms =
      RegionNorms::from_counts(labeled, static_cast<std::int64_t>(pixels.size()) - labeled);

  TermWeights w;
  w.focal = 1.0;
  w.focal_region = Region::kAll;
  w.focal_alpha = alpha;
  w.ali = lambda_ali;

  Step3Result out;
  out.logit_grads.reserve(pixels.size());
  for (const auto& px : pixels) {
    LossResult r = composite_pixel_loss(px, part, w, norms);
    out.value += r.value;
    out.logit_grads.push_back(std::move(r.grad));
  }
  out.classifier_grad = Matrix::Zero(weights.rows(), weights.cols());
  if (bias) out.bias_grad = Vector::Zero(bias->size());
  if (lambda_mem > 0 && memory_features.rows() > 0) {
    const MemLossResult mem = mem_loss(memory_features, memory_targets, weights, bias);
    out.value += lambda_mem * mem.value;
    out.classifier_grad += lambda_mem * mem.grad_weights;
    if (bias) out.bias_grad += lambda_mem * mem.grad_bias;
  }
  return out;
}

}  // namespace losses
}  // namespace isslab
