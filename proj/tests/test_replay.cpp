#include "isslab/cayley.hpp"
#include "isslab/gradcheck.hpp"
#include "isslab/replay.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

using namespace isslab;

namespace {

SkewParams random_skew(int d, Rng& rng, double sigma = 0.5) {
  SkewParams s = SkewParams::zeros(d);
  for (Eigen::Index i = 0; i < s.values.size(); ++i) s.values(i) = rng.normal(0, sigma);
  return s;
}

ModelConfig small_model(int hw) {
  ModelConfig c;
  c.height = hw;
  c.width = hw;
  c.hidden1 = 4;
  c.hidden2 = 4;
  c.feature_dim = 4;
  return c;
}

Sample blank_sample(int hw, Rng& rng) {
  Sample s;
  s.image.height = hw;
  s.image.width = hw;
  s.image.data.resize(3, hw * hw);
  for (Eigen::Index i = 0; i < s.image.data.size(); ++i) s.image.data(i) = rng.uniform();
  s.mask.assign(static_cast<std::size_t>(hw * hw), kUnlabeled);
  return s;
}

FeatureField field_of(const Matrix& data, int h, int w) {
  FeatureField f;
  f.height = h;
  f.width = w;
  f.data = data;
  return f;
}

}  // namespace

TEST_SUITE("cayley") {
  TEST_CASE("parameter count and expansion") {
    CHECK(skew_param_count(2) == 1);
    CHECK(skew_param_count(16) == 120);
    CHECK(skew_param_count(64) == 2016);
    Rng rng(1);
    const auto s = random_skew(6, rng);
    const Matrix m = s.expand();
    CHECK((m + m.transpose()).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("zero skew gives the identity") {
    const Matrix r = cayley(SkewParams::zeros(5));
    CHECK((r - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("two-dimensional hand case") {
    SkewParams s = SkewParams::zeros(2);
    s.values(0) = 1.0;
    const Matrix r = cayley(s);
    // S = [[0,-1],[1,0]]: (I - S)(I + S)^{-1} = [[0,1],[-1,0]]
    Matrix expect(2, 2);
    expect << 0, 1, -1, 0;
    CHECK((r - expect).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((r.transpose() * r - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(numerics::lu_det<double>(r) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("random rotations preserve norms") {
    Rng rng(2);
    const Matrix r = cayley(random_skew(16, rng));
    for (int i = 0; i < 100; ++i) {
      Vector x(16);
      for (int k = 0; k < 16; ++k) x(k) = rng.normal();
      CHECK(std::abs((r * x).norm() - x.norm()) <= 1e-10);
    }
  }

  TEST_CASE("backward pass") {
    Rng rng(3);
    const auto s = random_skew(5, rng);
    CHECK(cayley_backward<double>(Matrix::Zero(5, 5), s).cwiseAbs().maxCoeff() == 0.0);

    SkewParams one = SkewParams::zeros(2);
    one.values(0) = 0.37;
    const Matrix g = Matrix::Random(2, 2);
    const double analytic = cayley_backward<double>(g, one)(0);
    const double eps = 1e-6;
    SkewParams up = one, down = one;
    up.values(0) += eps;
    down.values(0) -= eps;
    const double fd = ((cayley(up).array() * g.array()).sum() - (cayley(down).array() * g.array()).sum()) / (2 * eps);
    CHECK(std::abs(analytic - fd) < 1e-7);

    // d ||R r||^2 / dS = 0: upstream G = 2 (R r) r^T
    const auto s8 = random_skew(8, rng);
    Vector r(8);
    for (int k = 0; k < 8; ++k) r(k) = rng.normal();
    const Matrix rot = cayley(s8);
    const Matrix upstream = 2.0 * (rot * r) * r.transpose();
    CHECK(cayley_backward<double>(upstream, s8).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_SUITE("replay") {
  TEST_CASE("feature memory bookkeeping") {
    FeatureMemory m(2, 3, 1);
    CHECK(m.empty());
    CHECK(m.append(4, Vector::Ones(3)));
    CHECK(m.append(4, Vector::Zero(3)));
    CHECK_FALSE(m.append(4, Vector::Ones(3)));
    CHECK(m.full(4));
    CHECK(m.append(5, Vector::Ones(3)));
    CHECK(m.count(5) == 1);
    CHECK(m.storage_bytes() == 2 * 2 * 3 * 8);
    const auto [rows, ids] = m.stacked();
    CHECK(rows.rows() == 3);
    CHECK(ids == std::vector<int>{4, 4, 5});

    FeatureMemory other(2, 3, 1);
    other.append(6, Vector::Ones(3));
    m.merge(other);
    CHECK(m.categories() == std::vector<int>{4, 5, 6});
    CHECK_THROWS(m.merge(other));
    FeatureMemory wrong(2, 3, 2);
    wrong.append(7, Vector::Ones(3));
    CHECK_THROWS(m.merge(wrong));
    CHECK(replay::rotation_bytes(16, 3) == 3 * 120 * 8);
  }

  TEST_CASE("memorizing a single-pixel region stores that pixel's feature") {
    Rng rng(4);
    const int hw = 6;
    const auto model = ModelParams::init(small_model(hw), 3, rng);
    StageDataset data;
    data.stage = 2;
    data.labeled_categories = {2};
    data.samples.push_back(blank_sample(hw, rng));
    data.samples[0].mask[13] = 2;
    const auto part = CategoryPartition::dense(2, 2, 1);
    const auto mem = replay::memorize_features(data, model, part, 1, Rng(0));
    const auto f = segmodel::extract_features(data.samples[0].image, model);
    REQUIRE(mem.count(2) == 1);
    CHECK((mem.rows(2).row(0).transpose() - f.data.col(13)).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("constant features are stored as the constant") {
    Rng rng(5);
    const int hw = 6;
    auto model = ModelParams::init(small_model(hw), 3, rng);
    for (auto& l : model.extractor) l.weight.setZero();
    model.extractor.back().bias << 0.5, -1.0, 2.0, 0.25;
    StageDataset data;
    data.stage = 2;
    data.samples.push_back(blank_sample(hw, rng));
    for (int p = 0; p < 10; ++p) data.samples[0].mask[static_cast<std::size_t>(p)] = 2;
    const auto mem = replay::memorize_features(data, model, CategoryPartition::dense(2, 2, 1), 1, Rng(0));
    CHECK((mem.rows(2).row(0).transpose() - model.extractor.back().bias).cwiseAbs().maxCoeff() < 1e-15);
  }

  TEST_CASE("capacity keeps the first images in shuffled order") {
    Rng rng(6);
    const int hw = 6;
    const auto model = ModelParams::init(small_model(hw), 3, rng);
    StageDataset data;
    data.stage = 2;
    for (int i = 0; i < 3; ++i) {
      data.samples.push_back(blank_sample(hw, rng));
      data.samples.back().mask[static_cast<std::size_t>(i)] = 2;
    }
    const Rng seed(77);
    const auto mem = replay::memorize_features(data, model, CategoryPartition::dense(2, 2, 1), 2, seed);
    CHECK(mem.count(2) == 2);
    std::vector<std::size_t> order{0, 1, 2};
    Rng shuf = seed;
    shuf.shuffle(std::span<std::size_t>(order));
    for (int k = 0; k < 2; ++k) {
      const std::size_t idx = order[static_cast<std::size_t>(k)];
      const auto f = segmodel::extract_features(data.samples[idx].image, model);
      CHECK((mem.rows(2).row(k).transpose() - f.data.col(static_cast<Eigen::Index>(idx))).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  TEST_CASE("missing categories are reported") {
    Rng rng(7);
    const auto model = ModelParams::init(small_model(6), 4, rng);
    StageDataset data;
    data.stage = 2;
    data.samples.push_back(blank_sample(6, rng));
    data.samples[0].mask[0] = 2;
    CHECK_THROWS_WITH_AS(replay::memorize_features(data, model, CategoryPartition::dense(2, 2, 2), 1, Rng(0)),
                         doctest::Contains("3"), std::runtime_error);
  }

  TEST_CASE("correlation scores") {
    Matrix mem(3, 2);
    mem << 1, 0, 2, 0, 0.5, 0;
    Matrix f(2, 3);
    f << 0, 3, -1, 1, 0, 0;
    const Vector v = replay::correlation_scores(field_of(f, 1, 3), mem);
    CHECK(v(0) == doctest::Approx(0.0).scale(1.0));
    CHECK(v(1) == doctest::Approx(3.0));
    CHECK(v(2) == 0.0);
    const Vector vs = replay::correlation_scores(field_of(f, 1, 3), mem, true);
    CHECK(vs(1) == doctest::Approx(1.0));
  }

  TEST_CASE("spatial softmax") {
    const Vector flat = replay::spatial_softmax(Vector::Constant(5, 2.0), 10.0);
    for (int i = 0; i < 5; ++i) CHECK(flat(i) == doctest::Approx(0.2));
    Vector v(2);
    v << 1, 0;
    const Vector s = replay::spatial_softmax(v, 10.0);
    CHECK(s(0) == doctest::Approx(0.9999546).epsilon(1e-7));
    CHECK(s(1) == doctest::Approx(4.54e-5).epsilon(1e-3));
    Vector w(3);
    w << 5, -2, 1;
    const Vector cold = replay::spatial_softmax(w, 1e-12);
    for (int i = 0; i < 3; ++i) CHECK(cold(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
    CHECK_THROWS(replay::spatial_softmax(w, 0.0));
  }

  TEST_CASE("prototypes") {
    Rng rng(8);
    Matrix a(3, 4), b(3, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal(), b(i) = rng.normal();
    const auto u = replay::prototypes(Vector::Constant(4, 0.25), field_of(a, 2, 2), field_of(b, 2, 2));
    CHECK((u.r_prev - a.rowwise().mean()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((u.r_curr - b.rowwise().mean()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(u.r_hat == u.r_prev);
    Vector one = Vector::Zero(4);
    one(2) = 1.0;
    const auto o = replay::prototypes(one, field_of(a, 2, 2), field_of(b, 2, 2));
    CHECK(o.r_prev == a.col(2));
    CHECK(o.r_curr == b.col(2));

    std::vector<PrototypePair> pairs{u, o};
    const auto avg = replay::average(pairs);
    CHECK((avg.r_prev - 0.5 * (u.r_prev + o.r_prev)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((avg.r_curr - 0.5 * (u.r_curr + o.r_curr)).cwiseAbs().maxCoeff() < 1e-15);
  }

  TEST_CASE("fidelity term") {
    Vector a(3), g;
    a << 1, 2, -1;
    double value = -1;
    CHECK(replay::fidelity_term(a, 2.0 * a, value, g));
    CHECK(value == doctest::Approx(0.0).scale(1.0));
    Vector perp(3);
    perp << 2, -1, 0;
    replay::fidelity_term(a, perp, value, g);
    CHECK(value == doctest::Approx(1.0));
    replay::fidelity_term(a, -a, value, g);
    CHECK(value == doctest::Approx(2.0));
    CHECK_FALSE(replay::fidelity_term(Vector::Zero(3), a, value, g));

    // gradient vs differences
    Vector b(3);
    b << 0.3, -0.7, 1.2;
    replay::fidelity_term(a, b, value, g);
    const double eps = 1e-6;
    for (int i = 0; i < 3; ++i) {
      Vector up = a, down = a, gu, gd;
      up(i) += eps;
      down(i) -= eps;
      double vu, vd;
      replay::fidelity_term(up, b, vu, gu);
      replay::fidelity_term(down, b, vd, gd);
      CHECK(gradcheck::relative_error(g(i), (vu - vd) / (2 * eps)) < 1e-8);
    }
  }

  TEST_CASE("regularization term") {
    Vector g;
    Vector r(2);
    r << 1, 0;
    Matrix w(3, 2);
    w << 100, 0, 0, 0, 0, 1;
    CHECK(replay::regularization_term(r, w, nullptr, 0, g) < 1e-40);

    std::map<int, PrototypePair> pairs;
    Rng rng(9);
    for (int c : {0, 1, 2}) {
      PrototypePair p;
      p.r_prev = Vector(2);
      p.r_prev << rng.normal(), rng.normal();
      p.r_curr = p.r_prev;
      p.r_hat = p.r_prev;
      pairs[c] = p;
    }
    RotationSet skews;
    for (int c : {0, 1, 2}) skews[c] = SkewParams::zeros(2);
    const auto loss = replay::reg_loss(pairs, skews, Matrix::Zero(5, 2));
    CHECK(loss.value == doctest::Approx(3.0 * std::log(5.0)).epsilon(1e-14));
  }

  TEST_CASE("rotation loss gradients match differences for D=8") {
    Rng rng(10);
    const int d = 8;
    std::map<int, PrototypePair> pairs;
    RotationSet skews;
    for (int c : {0, 1}) {
      PrototypePair p;
      p.r_prev = Vector(d);
      p.r_curr = Vector(d);
      for (int k = 0; k < d; ++k) p.r_prev(k) = rng.normal(), p.r_curr(k) = rng.normal();
      pairs[c] = p;
      skews[c] = random_skew(d, rng, 0.3);
    }
    Matrix w(4, d);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.normal();
    const auto fid = replay::fid_loss(pairs, skews);
    const auto reg = replay::reg_loss(pairs, skews, w);
    const double eps = 1e-6;
    double worst = 0.0;
    for (int c : {0, 1})
      for (Eigen::Index k = 0; k < skews[c].values.size(); ++k) {
        RotationSet up = skews, down = skews;
        up[c].values(k) += eps;
        down[c].values(k) -= eps;
        const double fd_f = (replay::fid_loss(pairs, up).value - replay::fid_loss(pairs, down).value) / (2 * eps);
        const double fd_r = (replay::reg_loss(pairs, up, w).value - replay::reg_loss(pairs, down, w).value) / (2 * eps);
        worst = std::max({worst, gradcheck::relative_error(fid.grads.at(c)(k), fd_f),
                          gradcheck::relative_error(reg.grads.at(c)(k), fd_r)});
      }
    CHECK(worst <= 1e-5);
  }

  TEST_CASE("fitting rotations") {
    Rng rng(11);
    const int d = 6;
    std::vector<PrototypePair> same;
    for (int i = 0; i < 8; ++i) {
      PrototypePair p;
      p.r_prev = Vector(d);
      for (int k = 0; k < d; ++k) p.r_prev(k) = rng.normal();
      p.r_curr = p.r_prev;
      p.r_hat = p.r_prev;
      same.push_back(p);
    }
    Matrix w(3, d);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.normal();

    RotationTrainConfig cfg;
    cfg.epochs = 0;
    const auto zero = replay::fit_rotation(1, same, w, nullptr, cfg, Rng(1));
    CHECK(zero.values.cwiseAbs().maxCoeff() == 0.0);

    cfg = RotationTrainConfig{};
    const auto near = replay::fit_rotation(1, same, w, nullptr, cfg, Rng(1));
    CHECK((cayley(near) - Matrix::Identity(d, d)).cwiseAbs().maxCoeff() <= 0.1);

    cfg.lambda_rot = 1.0;
    cfg.lr = 1e-2;
    const auto fixed = replay::fit_rotation(1, same, w, nullptr, cfg, Rng(1));
    CHECK((cayley(fixed) - Matrix::Identity(d, d)).cwiseAbs().maxCoeff() <= 0.1);

    const auto again = replay::fit_rotation(1, same, w, nullptr, cfg, Rng(1));
    CHECK(again.values == fixed.values);
  }

  TEST_CASE("rotating memory") {
    Rng rng(12);
    const int d = 16;
    FeatureMemory m(10, d, 1);
    for (int i = 0; i < 10; ++i) {
      Vector x(d);
      for (int k = 0; k < d; ++k) x(k) = rng.normal();
      m.append(3, x);
    }
    RotationSet ident{{3, SkewParams::zeros(d)}};
    const auto same = replay::rotate_memory(m, ident);
    CHECK((same.rows(3) - m.rows(3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(same.stage_tag() == 2);

    RotationSet rot{{3, random_skew(d, rng)}};
    const auto moved = replay::rotate_memory(m, rot);
    const Matrix before = m.rows(3), after = moved.rows(3);
    for (int i = 0; i < 10; ++i) CHECK(std::abs(before.row(i).norm() - after.row(i).norm()) <= 1e-10);
    CHECK((before * before.transpose() - after * after.transpose()).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK_THROWS_AS(replay::rotate_memory(m, RotationSet{}), std::invalid_argument);
  }

  TEST_CASE("memory files round trip") {
    FeatureMemory m(3, 2, 2);
    m.append(1, Vector::Ones(2));
    m.append(4, Vector::Constant(2, -0.5));
    m.append(4, Vector::Zero(2));
    const auto dir = std::filesystem::temp_directory_path() / "isslab_test_memory";
    std::filesystem::create_directories(dir);
    replay::save(m, dir / "m.bin");
    CHECK(replay::load(dir / "m.bin") == m);
    {
      std::ofstream f(dir / "bad.bin", std::ios::binary);
      f << "ISSMEMRX";
    }
    CHECK_THROWS_AS(replay::load(dir / "bad.bin"), FormatError);
    std::filesystem::remove_all(dir);
  }
}
