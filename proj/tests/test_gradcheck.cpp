#include "isslab/gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace isslab;

TEST_SUITE("gradcheck") {
  TEST_CASE("finite differences of simple functions") {
    Vector z(3);
    z << 0.4, -1.0, 2.0;
    const Vector g = gradcheck::fd_gradient([](const Vector& v) { return v(0); }, z, 1e-5);
    CHECK(g(0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::abs(g(1)) < 1e-12);
    CHECK(std::abs(g(2)) < 1e-12);

    const Vector lse = gradcheck::fd_gradient([](const Vector& v) { return numerics::log_sum_exp(v); },
                                              Vector::Zero(3), 1e-5);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(lse(i) - 1.0 / 3.0) < 1e-8);
  }

  TEST_CASE("finite differences agree with the hand-computed ALI gradient") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    PixelContext ctx;
    ctx.logits = Vector::Zero(3);
    ctx.prev_probs = Vector(2);
    ctx.prev_probs << 0.7, 0.3;
    const Vector g = gradcheck::fd_gradient(
        [&](const Vector& z) {
          auto c = ctx;
          c.logits = z;
          return losses::ali_loss(c, part).value;
        },
        ctx.logits, 1e-5);
    CHECK(g(0) == doctest::Approx(-0.366667).epsilon(1e-6));
    CHECK(g(1) == doctest::Approx(0.033333).epsilon(1e-5));
    CHECK(g(2) == doctest::Approx(0.333333).epsilon(1e-6));
  }

  TEST_CASE("non-finite evaluations name the coordinate") {
    Vector z = Vector::Zero(2);
    CHECK_THROWS_WITH_AS(gradcheck::fd_gradient(
                             [](const Vector& v) { return v(1) > 0 ? std::log(-1.0) : 0.0; }, z, 1e-5),
                         doctest::Contains("coordinate 1"), std::domain_error);
  }

  TEST_CASE("relative error") {
    CHECK(gradcheck::relative_error(1.0, 1.0) == 0.0);
    CHECK(gradcheck::relative_error(1e-9, 0.0) == doctest::Approx(1e-9));
    CHECK(gradcheck::relative_error(200.0, 202.0) == doctest::Approx(2.0 / 202.0));
  }

  TEST_CASE("every table passes on 100 cases") {
    for (auto id : gradcheck::kAllLosses) {
      const auto r = gradcheck::verify_table(id, 100, 17);
      CAPTURE(r.loss_id);
      CHECK(r.pass);
      CHECK(r.max_rel_err < 1e-6);
      CHECK(r.sign_violations == 0);
    }
    const auto ali = gradcheck::verify_table(gradcheck::LossId::kALI, 100, 17);
    CHECK(ali.max_grad_sum < 1e-10);
  }

  TEST_CASE("CKD sign property over 1000 cases") {
    const auto r = gradcheck::verify_table(gradcheck::LossId::kCKD, 1000, 5);
    CHECK(r.sign_violations == 0);
  }

  TEST_CASE("reports are reproducible and carry the worst case") {
    const auto a = gradcheck::verify_table(gradcheck::LossId::kCCE, 30, 99);
    const auto b = gradcheck::verify_table(gradcheck::LossId::kCCE, 30, 99);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.worst_case.contains("case_seed"));
    const auto c = gradcheck::random_case(gradcheck::LossId::kCCE, a.worst_case["case_seed"].get<std::uint64_t>());
    CHECK(c.case_seed == a.worst_case["case_seed"].get<std::uint64_t>());
  }

  TEST_CASE("loss names") {
    for (auto id : gradcheck::kAllLosses) CHECK(gradcheck::loss_from_string(gradcheck::to_string(id)) == id);
    CHECK(gradcheck::loss_from_string("ckd") == gradcheck::LossId::kCKD);
    CHECK_FALSE(gradcheck::loss_from_string("nope").has_value());
  }

  TEST_CASE("Cayley backward agrees with differences") {
    for (int d : {2, 8}) {
      const auto r = gradcheck::verify_cayley_grad(d, 20, 4);
      CAPTURE(d);
      CHECK(r.pass);
    }
  }
}
