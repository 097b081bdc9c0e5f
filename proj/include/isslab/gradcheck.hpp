#pragma once

#include "isslab/losses.hpp"
#include "isslab/rng.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace isslab::gradcheck {

enum class LossId { kCE, kKD, kCCE, kCKD, kALI, kFL };

inline constexpr LossId kAllLosses[] = {LossId::kCE,  LossId::kKD,  LossId::kCCE,
                                        LossId::kCKD, LossId::kALI, LossId::kFL};

std::string_view to_string(LossId id);
std::optional<LossId> loss_from_string(std::string_view name);

struct GradReport {
  std::string loss_id;
  std::int64_t num_cases = 0;
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double tolerance = 1e-6;
  double max_rel_err_fd = 0.0;      // analytic vs central differences
  double max_rel_err_closed = 0.0;  // analytic vs closed-form table rows
  double max_rel_err = 0.0;         // max of the two
  double max_abs_err = 0.0;
  double max_grad_sum = 0.0;        // max |sum_c g_c| for zero-sum losses
  std::int64_t sign_violations = 0;
  nlohmann::json worst_case;        // carries its own case seed
  bool pass = false;

  nlohmann::json to_json() const;
};

/// |a - b| / max(1, |a|, |b|).
double relative_error(double a, double b);

/// Central differences (f(z + eps e_c) - f(z - eps e_c)) / (2 eps).
/// Throws std::domain_error naming the coordinate if f is not finite there.
Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& z, double eps);

/// One randomly drawn loss evaluation point.
struct RandomCase {
  CategoryPartition part;
  PixelContext ctx;
  int focal_target = kUnlabeled;
  std::uint64_t case_seed = 0;

  nlohmann::json to_json() const;
};

/// Draws |C_prev| in [2,8], |C_new| in [1,4], logits ~ N(0, 3^2) and a
/// normalised-exponential previous-model distribution of random sharpness.
/// The labeled/unlabeled choice follows the domain of `id`.
RandomCase random_case(LossId id, std::uint64_t case_seed);

/// Seed of case `index` within a run seeded by `seed`.
std::uint64_t case_seed(std::uint64_t seed, std::int64_t index);

GradReport verify_table(LossId id, std::int64_t num_cases, std::uint64_t seed, double eps = 1e-5,
                        double tolerance = 1e-6);

/// Analytic Cayley backward pass vs finite differences over the skew
/// parameters, on random linear and quadratic functionals of R.  Small D
/// perturbs every coordinate; large D probes random directions.
GradReport verify_cayley_grad(int dim, std::int64_t num_cases, std::uint64_t seed, double eps = 1e-6,
                              double tolerance = 1e-5);

/// Fixed-width text table of the reports.
std::string format_table(std::span<const GradReport> reports);

}  // namespace isslab::gradcheck
