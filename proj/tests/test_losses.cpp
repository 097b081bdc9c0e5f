#include "isslab/gradcheck.hpp"
#include "isslab/losses.hpp"

#include <doctest.h>

#include <cmath>

using namespace isslab;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

PixelContext labeled(Vector z, int label, Vector prev = {}) {
  PixelContext c;
  c.logits = std::move(z);
  c.prev_probs = std::move(prev);
  c.label = label;
  c.in_labeled_region = true;
  return c;
}

PixelContext unlabeled(Vector z, Vector prev) {
  PixelContext c;
  c.logits = std::move(z);
  c.prev_probs = std::move(prev);
  return c;
}

void check_vec(const Vector& got, const Vector& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (Eigen::Index i = 0; i < got.size(); ++i) CHECK(got(i) == doctest::Approx(want(i)).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("partition") {
    const auto part = CategoryPartition::dense(2, 3, 2);
    CHECK(part.size() == 5);
    CHECK(part.is_prev(2));
    CHECK(part.is_novel(3));
    CHECK(part.prev_position(1) == 1);
    CHECK(part.prev_position(4) == -1);
    CategoryPartition bad{2, {0, 1}, {1}};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }

  TEST_CASE("dual probabilities") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    auto d = losses::dual_probs(unlabeled(vec({0, 0, 0}), vec({0.5, 0.5})), part);
    check_vec(d.p, vec({1.0 / 3, 1.0 / 3, 1.0 / 3}), 1e-12);
    check_vec(d.q, vec({0.5, 0.5}), 1e-12);
    d = losses::dual_probs(unlabeled(vec({1, 0, 2}), vec({0.5, 0.5})), part);
    CHECK(d.q(0) == doctest::Approx(0.731059).epsilon(1e-6));
    CHECK(d.p(0) == doctest::Approx(0.244728).epsilon(1e-6));

    const auto base = CategoryPartition::dense(1, 3, 0);
    d = losses::dual_probs(unlabeled(vec({0.3, -1, 2}), vec({0.2, 0.3, 0.5})), base);
    for (int i = 0; i < 3; ++i) CHECK(d.q(i) == doctest::Approx(d.p(i)).epsilon(1e-15));
  }

  TEST_CASE("cross-entropy") {
    const auto part = CategoryPartition::dense(1, 3, 0);
    const Vector z = vec({0, 0, std::log(2.0)});  // p = [0.25, 0.25, 0.5]
    CHECK(losses::ce_loss(labeled(z, 2), part).value == doctest::Approx(0.693147).epsilon(1e-6));
    const auto zero = losses::ce_loss(labeled(vec({0, 0, 0}), 0), part);
    check_vec(zero.grad, vec({-2.0 / 3, 1.0 / 3, 1.0 / 3}), 1e-12);
    const auto sure = losses::ce_loss(labeled(vec({80, 0, 0}), 0), part);
    CHECK(sure.value == doctest::Approx(0.0).scale(1.0).epsilon(1e-30));
    CHECK(sure.grad.cwiseAbs().maxCoeff() < 1e-30);
  }

  TEST_CASE("knowledge distillation") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    const auto r = losses::kd_loss(labeled(vec({0, 0, 1.7}), 0, vec({0.6, 0.4})), part);
    CHECK(r.value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    check_vec(r.grad, vec({-0.1, 0.1, 0.0}), 1e-12);
    CHECK(r.grad(2) == 0.0);
    const auto matched = losses::kd_loss(labeled(vec({std::log(3.0), 0, -4}), 0, vec({0.75, 0.25})), part);
    CHECK(matched.grad.cwiseAbs().maxCoeff() < 1e-15);
  }

  TEST_CASE("complementary cross-entropy") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    const auto r = losses::cce_loss(unlabeled(vec({0, 0, 0}), vec({0.5, 0.5})), part);
    CHECK(r.value == doctest::Approx(-std::log(2.0 / 3.0)).epsilon(1e-12));
    check_vec(r.grad, vec({-1.0 / 6, -1.0 / 6, 1.0 / 3}), 1e-12);

    const auto lab = labeled(vec({0.4, -0.2, 1.1}), 2, vec({0.5, 0.5}));
    const auto a = losses::cce_loss(lab, part);
    const auto b = losses::ce_loss(lab, part);
    CHECK(a.value == b.value);
    CHECK((a.grad - b.grad).cwiseAbs().maxCoeff() == 0.0);

    const auto limit = losses::cce_loss(unlabeled(vec({0.3, 0.1, -30}), vec({0.5, 0.5})), part);
    CHECK(limit.value < 1e-12);
    CHECK(std::abs(limit.grad(0)) < 1e-12);
    CHECK(std::abs(limit.grad(1)) < 1e-12);
  }

  TEST_CASE("complementary distillation") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    const auto r = losses::ckd_loss(unlabeled(vec({0, 0, 0}), vec({0.6, 0.4})), part);
    CHECK(r.value == doctest::Approx(0.682724).epsilon(1e-6));
    check_vec(r.grad, vec({0.033333, -0.066667, 0.033333}), 1e-5);

    // p_ckd = p_bg + p_new = 0.6, p_a = 0.4
    const double za = std::log(0.4), zbg = std::log(0.3), zc = std::log(0.3);
    const auto fixed = losses::ckd_loss(unlabeled(vec({zbg, za, zc}), vec({0.6, 0.4})), part);
    CHECK(fixed.grad.cwiseAbs().maxCoeff() < 1e-15);
  }

  TEST_CASE("ALI") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    const auto r = losses::ali_loss(unlabeled(vec({0, 0, 0}), vec({0.7, 0.3})), part);
    CHECK(r.value == doctest::Approx(std::log(3.0)).epsilon(1e-12));
    check_vec(r.grad, vec({-0.366667, 0.033333, 0.333333}), 1e-5);

    const auto base = CategoryPartition::dense(1, 3, 0);
    const Vector z = vec({0.2, -0.5, 1.0});
    const auto fixed = losses::ali_loss(unlabeled(z, numerics::softmax(z)), base);
    CHECK(fixed.grad.cwiseAbs().maxCoeff() < 1e-15);

    const auto shifted = losses::ali_loss(unlabeled(vec({3.5, 3.5, 3.5}), vec({0.7, 0.3})), part);
    CHECK(shifted.value == doctest::Approx(r.value).epsilon(1e-12));
    CHECK((shifted.grad - r.grad).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(r.grad.sum()) < 1e-15);
  }

  TEST_CASE("focal") {
    const auto part = CategoryPartition::dense(2, 1, 1);
    const auto half = losses::focal_loss(labeled(vec({0, 0}), 1, vec({1.0})), part, 2.0, 1);
    CHECK(half.value == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-12));
    const auto sure = losses::focal_loss(labeled(vec({0, 90}), 1, vec({1.0})), part, 2.0, 1);
    CHECK(sure.value == 0.0);

    const auto p3 = CategoryPartition::dense(2, 2, 1);
    const auto ctx = labeled(vec({0.3, -1.2, 0.8}), 2, vec({0.5, 0.5}));
    const auto fl0 = losses::focal_loss(ctx, p3, 0.0, 2);
    const auto ce = losses::ce_loss(ctx, p3);
    CHECK(fl0.value == doctest::Approx(ce.value).epsilon(1e-15));
    check_vec(fl0.grad, ce.grad, 1e-14);
  }

  TEST_CASE("focal gradient matches finite differences") {
    const auto part = CategoryPartition::dense(2, 3, 2);
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
      Vector z(5);
      for (int i = 0; i < 5; ++i) z(i) = rng.normal(0, 2);
      const int target = static_cast<int>(rng.below(5));
      const auto ctx = labeled(z, target, vec({0.3, 0.3, 0.4}));
      const auto r = losses::focal_loss(ctx, part, 2.0, target);
      const Vector fd = gradcheck::fd_gradient(
          [&](const Vector& zz) {
            auto c = ctx;
            c.logits = zz;
            return losses::focal_loss(c, part, 2.0, target).value;
          },
          z, 1e-5);
      for (int i = 0; i < 5; ++i) CHECK(gradcheck::relative_error(r.grad(i), fd(i)) < 1e-7);
    }
  }

  TEST_CASE("focal target") {
    const auto part = CategoryPartition::dense(2, 3, 1);
    CHECK(losses::focal_target(labeled(vec({0, 0, 0, 0}), 3, vec({0.2, 0.5, 0.3})), part) == 3);
    CHECK(losses::focal_target(unlabeled(vec({0, 0, 0, 0}), vec({0.2, 0.5, 0.3})), part) == 1);
    CHECK(losses::focal_target(unlabeled(vec({0, 0, 0, 0}), vec({0.4, 0.2, 0.4})), part) == 0);
  }

  TEST_CASE("memory replay term") {
    Matrix f(1, 1);
    f << 1.0;
    Matrix w(3, 1);
    w << 2, 0, 0;
    const std::vector<int> t{0};
    const auto r = losses::mem_loss(f, t, w);
    CHECK(r.value == doctest::Approx(std::log(1 + 2 * std::exp(-2.0))).epsilon(1e-12));

    Matrix big = w * 200.0;
    CHECK(losses::mem_loss(f, t, big).value < 1e-100);

    Matrix f2(2, 2);
    f2 << 1, 1, 2, 2;
    Matrix sym(2, 2);
    sym << 1, 0, 0, 1;
    const std::vector<int> t2{0, 1};
    CHECK(losses::mem_loss(f2, t2, sym).value == doctest::Approx(std::log(2.0)).epsilon(1e-14));

    // classifier gradient vs differences
    Rng rng(8);
    Matrix feats(4, 3), wr(5, 3);
    for (int i = 0; i < feats.size(); ++i) feats(i) = rng.normal();
    for (int i = 0; i < wr.size(); ++i) wr(i) = rng.normal();
    Vector bias(5);
    for (int i = 0; i < 5; ++i) bias(i) = rng.normal();
    const std::vector<int> tt{0, 4, 2, 2};
    const auto res = losses::mem_loss(feats, tt, wr, &bias);
    const double eps = 1e-6;
    for (int i = 0; i < wr.size(); ++i) {
      Matrix a = wr, b = wr;
      a(i) += eps;
      b(i) -= eps;
      const double fd = (losses::mem_loss(feats, tt, a, &bias).value - losses::mem_loss(feats, tt, b, &bias).value) /
                        (2 * eps);
      CHECK(gradcheck::relative_error(res.grad_weights(i), fd) < 1e-7);
    }
    for (int i = 0; i < 5; ++i) {
      Vector a = bias, b = bias;
      a(i) += eps;
      b(i) -= eps;
      const double fd = (losses::mem_loss(feats, tt, wr, &a).value - losses::mem_loss(feats, tt, wr, &b).value) /
                        (2 * eps);
      CHECK(gradcheck::relative_error(res.grad_bias(i), fd) < 1e-7);
    }
  }

  TEST_CASE("Step-1 objective") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    const auto lab = labeled(vec({0, 0, 0}), 2, vec({0.6, 0.4}));
    const auto ce = losses::ce_loss(lab, part);
    const auto kd = losses::kd_loss(lab, part);
    const auto s0 = losses::step1_objective(lab, part, 1.0, 0.0);
    CHECK(s0.value == ce.value);
    CHECK((s0.grad - ce.grad).cwiseAbs().maxCoeff() == 0.0);
    const auto s1 = losses::step1_objective(lab, part, 1.0, 1.0);
    CHECK(s1.value == doctest::Approx(ce.value + kd.value).epsilon(1e-15));
    CHECK((s1.grad - ce.grad - kd.grad).cwiseAbs().maxCoeff() < 1e-15);

    const auto un = unlabeled(vec({0, 0, 0}), vec({0.7, 0.3}));
    const auto ali = losses::ali_loss(un, part);
    const auto s2 = losses::step1_objective(un, part, 1.0, 1.0);
    CHECK(s2.value == ali.value);
    CHECK((s2.grad - ali.grad).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("composite weights and region norms") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    const auto norms = losses::RegionNorms::from_counts(4, 2);
    CHECK(norms.labeled == 0.25);
    CHECK(norms.unlabeled == 0.5);
    CHECK(norms.all == doctest::Approx(1.0 / 6.0));
    losses::TermWeights w;
    w.ce = 1.0;
    w.ali = 2.0;
    const auto lab = labeled(vec({0.1, 0.2, 0.3}), 2, vec({0.6, 0.4}));
    const auto un = unlabeled(vec({0.1, 0.2, 0.3}), vec({0.6, 0.4}));
    CHECK(losses::composite_pixel_loss(lab, part, w, norms).value ==
          doctest::Approx(0.25 * losses::ce_loss(lab, part).value).epsilon(1e-15));
    CHECK(losses::composite_pixel_loss(un, part, w, norms).value ==
          doctest::Approx(2.0 * 0.5 * losses::ali_loss(un, part).value).epsilon(1e-15));
    const auto empty = losses::RegionNorms::from_counts(0, 0);
    CHECK(empty.labeled == 0.0);
  }

  TEST_CASE("Step-3 objective reductions") {
    const auto part = CategoryPartition::dense(2, 2, 1);
    std::vector<PixelContext> pixels{labeled(vec({0.1, 0.5, -0.3}), 2, vec({0.6, 0.4})),
                                     unlabeled(vec({1.0, -0.2, 0.4}), vec({0.2, 0.8})),
                                     unlabeled(vec({0.0, 0.3, 0.9}), vec({0.5, 0.5})),
                                     labeled(vec({-1.0, 0.5, 2.0}), 2, vec({0.9, 0.1}))};
    const Matrix w = Matrix::Identity(3, 3);
    const Matrix none(0, 3);
    const auto only_fl = losses::step3_objective(pixels, part, 0.0, 0.0, 2.0, none, {}, w);
    double fl = 0.0;
    for (const auto& p : pixels) fl += losses::focal_loss(p, part, 2.0, losses::focal_target(p, part)).value;
    CHECK(only_fl.value == doctest::Approx(fl / 4.0).epsilon(1e-14));

    std::vector<PixelContext> lab_only{pixels[0], pixels[3]};
    const auto a = losses::step3_objective(lab_only, part, 1.0, 0.0, 2.0, none, {}, w);
    const auto b = losses::step3_objective(lab_only, part, 0.0, 0.0, 2.0, none, {}, w);
    CHECK(a.value == b.value);
  }

  TEST_CASE("Step-3 objective on a 2x2 toy image matches finite differences") {
    const auto part = CategoryPartition::dense(3, 3, 1);
    Rng rng(21);
    const int d = 3;
    Matrix feats(d, 4), w(4, d);
    for (int i = 0; i < feats.size(); ++i) feats(i) = rng.normal();
    for (int i = 0; i < w.size(); ++i) w(i) = rng.normal(0, 0.5);
    Matrix mem(3, d);
    for (int i = 0; i < mem.size(); ++i) mem(i) = rng.normal();
    const std::vector<int> mem_t{0, 1, 2};
    std::vector<PixelContext> base(4);
    const int labels[4] = {3, kUnlabeled, kUnlabeled, 3};
    for (int p = 0; p < 4; ++p) {
      base[p].label = labels[p];
      base[p].in_labeled_region = labels[p] != kUnlabeled;
      Vector pp(3);
      for (int k = 0; k < 3; ++k) pp(k) = std::exp(rng.normal());
      base[p].prev_probs = pp / pp.sum();
    }
    auto objective = [&](const Matrix& ww) {
      auto px = base;
      for (int p = 0; p < 4; ++p) px[p].logits = ww * feats.col(p);
      return losses::step3_objective(px, part, 0.7, 0.4, 2.0, mem, mem_t, ww);
    };
    const auto res = objective(w);
    // chain rule: dL/dW = sum_p g_p f_p^T + replay part
    Matrix analytic = res.classifier_grad;
    for (int p = 0; p < 4; ++p) analytic += res.logit_grads[p] * feats.col(p).transpose();
    const double eps = 1e-6;
    for (int i = 0; i < w.size(); ++i) {
      Matrix a = w, b = w;
      a(i) += eps;
      b(i) -= eps;
      const double fd = (objective(a).value - objective(b).value) / (2 * eps);
      CHECK(gradcheck::relative_error(analytic(i), fd) < 1e-6);
    }
  }
}
