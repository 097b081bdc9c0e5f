#include "isslab/gradcheck.hpp"

#include "isslab/cayley.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace isslab::gradcheck {

namespace {

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

bool zero_sum_loss(LossId id) { return id != LossId::kKD; }

/// Plain-exponential probabilities.  Deliberately not the log-sum-exp path
/// used by the losses, so the closed-form rows form an independent route.
Vector naive_softmax(const Vector& z, std::span<const int> ids) {
  Vector e(static_cast<Eigen::Index>(ids.size()));
  double total = 0.0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    e(static_cast<Eigen::Index>(k)) = std::exp(z(ids[k]));
    total += e(static_cast<Eigen::Index>(k));
  }
  return e / total;
}

/// Per-category closed-form gradient rows of each loss, written directly
/// in terms of p, q and the previous-model targets.
Vector closed_form(LossId id, const RandomCase& rc) {
  const auto& part = rc.part;
  const auto& ctx = rc.ctx;
  const int n = part.size();
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) ids[static_cast<std::size_t>(c)] = c;
  const Vector p = naive_softmax(ctx.logits, ids);
  const Vector q = naive_softmax(ctx.logits, part.prev);
  auto prev_target = [&](int c) { return ctx.prev_probs(part.prev_position(c)); };
  auto q_of = [&](int c) { return q(part.prev_position(c)); };

  Vector g = Vector::Zero(n);
  switch (id) {
    case LossId::kCE:
      for (int c = 0; c < n; ++c) g(c) = (c == ctx.label) ? p(c) - 1.0 : p(c);
      break;
    case LossId::kKD:
      for (int c : part.prev) g(c) = q_of(c) - prev_target(c);
      break;
    case LossId::kCCE:
      if (ctx.in_labeled_region) {
        for (int c = 0; c < n; ++c) g(c) = (c == ctx.label) ? p(c) - 1.0 : p(c);
      } else {
        for (int c : part.novel) g(c) = p(c);
        for (int c : part.prev) g(c) = p(c) - q_of(c);
      }
      break;
    case LossId::kCKD: {
      const int bg = CategoryPartition::background();
      double p_ckd = p(bg);
      for (int c : part.novel) p_ckd += p(c);
      for (int c : part.prev)
        if (c != bg) g(c) = p(c) - prev_target(c);
      g(bg) = (p_ckd - prev_target(bg)) * p(bg) / p_ckd;
      for (int c : part.novel) g(c) = (p_ckd - prev_target(bg)) * p(c) / p_ckd;
      break;
    }
    case LossId::kALI:
      for (int c : part.novel) g(c) = p(c);
      for (int c : part.prev) g(c) = p(c) - prev_target(c);
      break;
    case LossId::kFL: {
      const double alpha = 2.0;
      const int t = rc.focal_target;
      const double pt = p(t);
      const double factor = alpha * pt * std::pow(1.0 - pt, alpha - 1.0) * std::log(pt) -
                            std::pow(1.0 - pt, alpha);
      for (int c = 0; c < n; ++c) g(c) = factor * ((c == t ? 1.0 : 0.0) - p(c));
      break;
    }
  }
  return g;
}

LossResult evaluate(LossId id, const RandomCase& rc, const PixelContext& ctx) {
  switch (id) {
    case LossId::kCE: return losses::ce_loss(ctx, rc.part);
    case LossId::kKD: return losses::kd_loss(ctx, rc.part);
    case LossId::kCCE: return losses::cce_loss(ctx, rc.part);
    case LossId::kCKD: return losses::ckd_loss(ctx, rc.part);
    case LossId::kALI: return losses::ali_loss(ctx, rc.part);
    case LossId::kFL: return losses::focal_loss(ctx, rc.part, 2.0, rc.focal_target);
  }
  throw std::logic_error("unknown loss id");
}

}  // namespace

std::string_view to_string(LossId id) {
  switch (id) {
    case LossId::kCE: return "CE";
    case LossId::kKD: return "KD";
    case LossId::kCCE: return "CCE";
    case LossId::kCKD: return "CKD";
    case LossId::kALI: return "ALI";
    case LossId::kFL: return "FL";
  }
  return "?";
}

std::optional<LossId> loss_from_string(std::string_view name) {
  for (LossId id : kAllLosses) {
    const auto s = to_string(id);
    if (s.size() != name.size()) continue;
    bool same = true;
    for (std::size_t i = 0; i < s.size(); ++i)
      same = same && std::toupper(static_cast<unsigned char>(name[i])) == s[i];
    if (same) return id;
  }
  return std::nullopt;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& z, double eps) {
  if (!(eps >= 1e-8 && eps <= 1e-3)) throw std::invalid_argument("fd eps outside [1e-8, 1e-3]");
  Vector g(z.size());
  Vector probe = z;
  for (Eigen::Index c = 0; c < z.size(); ++c) {
    probe(c) = z(c) + eps;
    const double up = f(probe);
    probe(c) = z(c) - eps;
    const double down = f(probe);
    probe(c) = z(c);
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::domain_error("non-finite evaluation at coordinate " + std::to_string(c));
    g(c) = (up - down) / (2.0 * eps);
  }
  return g;
}

std::uint64_t case_seed(std::uint64_t seed, std::int64_t index) {
  return Rng(seed).fork(static_cast<std::uint64_t>(index)).next_u64();
}

nlohmann::json RandomCase::to_json() const {
  return {{"case_seed", case_seed},
          {"stage", part.stage},
          {"prev", part.prev},
          {"novel", part.novel},
          {"logits", to_std(ctx.logits)},
          {"prev_probs", to_std(ctx.prev_probs)},
          {"label", ctx.label},
          {"in_labeled_region", ctx.in_labeled_region},
          {"focal_target", focal_target}};
}

RandomCase random_case(LossId id, std::uint64_t seed) {
  Rng rng(seed);
  RandomCase rc;
  rc.case_seed = seed;
  const int num_prev = rng.uniform_int(2, 8);
  const int num_novel = rng.uniform_int(1, 4);
  const int n = num_prev + num_novel;

  // shuffled ids with the background pinned inside C_prev
  std::vector<int> ids;
  for (int c = 1; c < n; ++c) ids.push_back(c);
  rng.shuffle(std::span<int>(ids));
  rc.part.stage = 2;
  rc.part.prev.push_back(0);
  for (int k = 0; k < num_prev - 1; ++k) rc.part.prev.push_back(ids[static_cast<std::size_t>(k)]);
  for (int k = num_prev - 1; k < n - 1; ++k) rc.part.novel.push_back(ids[static_cast<std::size_t>(k)]);
  rc.part.validate();

  rc.ctx.logits.resize(n);
  for (int c = 0; c < n; ++c) rc.ctx.logits(c) = rng.normal(0.0, 3.0);
  const double sharpness = rng.uniform(0.5, 3.0);
  Vector raw(num_prev);
  for (int k = 0; k < num_prev; ++k) raw(k) = std::exp(sharpness * rng.normal());
  rc.ctx.prev_probs = raw / raw.sum();

  bool labeled = false;
  switch (id) {
    case LossId::kCE: labeled = true; break;
    case LossId::kALI: labeled = false; break;
    default: labeled = rng.uniform() < 0.5; break;
  }
  if (labeled) {
    rc.ctx.label = rc.part.novel[rng.below(rc.part.novel.size())];
    rc.ctx.in_labeled_region = true;
  }
  rc.focal_target = losses::focal_target(rc.ctx, rc.part);
  return rc;
}

GradReport verify_table(LossId id, std::int64_t num_cases, std::uint64_t seed, double eps,
                        double tolerance) {
  if (num_cases < 1) throw std::invalid_argument("num_cases must be >= 1");
  GradReport rep;
  rep.loss_id = std::string(to_string(id));
  rep.num_cases = num_cases;
  rep.seed = seed;
  rep.eps = eps;
  rep.tolerance = tolerance;
  double worst = -1.0;

  for (std::int64_t i = 0; i < num_cases; ++i) {
    const RandomCase rc = random_case(id, case_seed(seed, i));
    const LossResult analytic = evaluate(id, rc, rc.ctx);
    const Vector fd = fd_gradient(
        [&](const Vector& z) {
          PixelContext probe = rc.ctx;
          probe.logits = z;
          return evaluate(id, rc, probe).value;
        },
        rc.ctx.logits, eps);
    const Vector table = closed_form(id, rc);

    double case_worst = 0.0;
    for (Eigen::Index c = 0; c < fd.size(); ++c) {
      const double e_fd = relative_error(analytic.grad(c), fd(c));
      const double e_cf = relative_error(analytic.grad(c), table(c));
      rep.max_rel_err_fd = std::max(rep.max_rel_err_fd, e_fd);
      rep.max_rel_err_closed = std::max(rep.max_rel_err_closed, e_cf);
      rep.max_abs_err = std::max({rep.max_abs_err, std::abs(analytic.grad(c) - fd(c)),
                                  std::abs(analytic.grad(c) - table(c))});
      case_worst = std::max({case_worst, e_fd, e_cf});
    }
    if (zero_sum_loss(id)) rep.max_grad_sum = std::max(rep.max_grad_sum, std::abs(analytic.grad.sum()));

    if (id == LossId::kCKD) {
      const int bg = CategoryPartition::background();
      const Vector p = numerics::softmax(rc.ctx.logits);
      double p_ckd = p(bg);
      for (int c : rc.part.novel) p_ckd += p(c);
      const double diff = p_ckd - rc.ctx.prev_probs(rc.part.prev_position(bg));
      std::vector<int> pooled{bg};
      pooled.insert(pooled.end(), rc.part.novel.begin(), rc.part.novel.end());
      for (int c : pooled) {
        if (p(c) <= 0.0 || diff == 0.0) continue;
        if ((analytic.grad(c) > 0.0) != (diff > 0.0) || analytic.grad(c) == 0.0) ++rep.sign_violations;
      }
    }
    if (case_worst > worst) {
      worst = case_worst;
      rep.worst_case = rc.to_json();
      rep.worst_case["rel_err"] = case_worst;
    }
  }
  rep.max_rel_err = std::max(rep.max_rel_err_fd, rep.max_rel_err_closed);
  rep.pass = rep.max_rel_err <= tolerance && rep.sign_violations == 0 &&
             (!zero_sum_loss(id) || rep.max_grad_sum <= 1e-10);
  return rep;
}

GradReport verify_cayley_grad(int dim, std::int64_t num_cases, std::uint64_t seed, double eps,
                              double tolerance) {
  if (dim < 2 || dim > 64) throw std::invalid_argument("Cayley gradcheck dimension must be in [2, 64]");
  if (num_cases < 1) throw std::invalid_argument("num_cases must be >= 1");
  GradReport rep;
  rep.loss_id = "CAYLEY_D" + std::to_string(dim);
  rep.num_cases = num_cases;
  rep.seed = seed;
  rep.eps = eps;
  rep.tolerance = tolerance;
  const Eigen::Index np = skew_param_count(dim);
  const bool full = np <= 496;  // every coordinate up to D = 32
  double worst = -1.0;

  for (std::int64_t i = 0; i < num_cases; ++i) {
    const std::uint64_t cs = case_seed(seed, i);
    Rng rng(cs);
    SkewParams skew = SkewParams::zeros(dim);
    for (Eigen::Index k = 0; k < np; ++k) skew.values(k) = rng.normal(0.0, 0.5);

    // alternate a linear functional <G, R> and a quadratic ||R x - y||^2
    const bool quadratic = (i % 2) == 1;
    Matrix weights(dim, dim);
    Vector x(dim), y(dim);
    for (Eigen::Index a = 0; a < dim; ++a) {
      x(a) = rng.normal();
      y(a) = rng.normal();
      for (Eigen::Index b = 0; b < dim; ++b) weights(a, b) = rng.normal();
    }
    auto functional = [&](const Vector& params) {
      const Matrix r = cayley(SkewParams{dim, params});
      if (quadratic) return (r * x - y).squaredNorm();
      return (weights.array() * r.array()).sum();
    };
    const Matrix r = cayley(skew);
    const Matrix upstream = quadratic ? Matrix(2.0 * (r * x - y) * x.transpose()) : weights;
    const Vector analytic = cayley_backward(upstream, skew);

    double case_worst = 0.0;
    auto record = [&](double a, double b) {
      const double e = relative_error(a, b);
      rep.max_rel_err_fd = std::max(rep.max_rel_err_fd, e);
      rep.max_abs_err = std::max(rep.max_abs_err, std::abs(a - b));
      case_worst = std::max(case_worst, e);
    };
    if (full) {
      const Vector fd = fd_gradient(functional, skew.values, eps);
      for (Eigen::Index k = 0; k < np; ++k) record(analytic(k), fd(k));
    } else {
      for (int probe = 0; probe < 16; ++probe) {
        Vector dir(np);
        for (Eigen::Index k = 0; k < np; ++k) dir(k) = rng.normal();
        dir /= dir.norm();
        const double fd = (functional(skew.values + eps * dir) - functional(skew.values - eps * dir)) /
                          (2.0 * eps);
        record(analytic.dot(dir), fd);
      }
    }
    if (case_worst > worst) {
      worst = case_worst;
      rep.worst_case = {{"case_seed", cs}, {"dim", dim}, {"quadratic", quadratic},
                        {"rel_err", case_worst}};
    }
  }
  rep.max_rel_err = rep.max_rel_err_fd;
  rep.pass = rep.max_rel_err <= tolerance;
  return rep;
}

nlohmann::json GradReport::to_json() const {
  return {{"loss_id", loss_id},
          {"num_cases", num_cases},
          {"seed", seed},
          {"eps", eps},
          {"tolerance", tolerance},
          {"max_rel_err", max_rel_err},
          {"max_rel_err_fd", max_rel_err_fd},
          {"max_rel_err_closed_form", max_rel_err_closed},
          {"max_abs_err", max_abs_err},
          {"max_grad_sum", max_grad_sum},
          {"sign_violations", sign_violations},
          {"worst_case", worst_case},
          {"pass", pass}};
}

std::string format_table(std::span<const GradReport> reports) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %7s %12s %12s %12s %10s %6s\n", "loss", "cases", "rel_err_fd",
                "rel_err_tab", "max|sum g|", "sign_viol", "pass");
  out << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-12s %7lld %12.3e %12.3e %12.3e %10lld %6s\n", r.loss_id.c_str(),
                  static_cast<long long>(r.num_cases), r.max_rel_err_fd, r.max_rel_err_closed,
                  r.max_grad_sum, static_cast<long long>(r.sign_violations), r.pass ? "yes" : "NO");
    out << line;
  }
  return out.str();
}

}  // namespace isslab::gradcheck
