#include "isslab/optim.hpp"
#include "isslab/pipeline.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace isslab;

namespace {

pipeline::RunRequest tiny_request(const char* scenario, std::vector<std::string> methods) {
  pipeline::RunRequest r;
  r.scenario = ScenarioSpec::parse(scenario);
  r.generator.images_per_stage = 8;
  r.generator.eval_images = 6;
  r.generator.height = 16;
  r.generator.width = 16;
  r.model.height = 16;
  r.model.width = 16;
  r.model.hidden1 = 4;
  r.model.hidden2 = 6;
  r.model.feature_dim = 4;
  r.hp.epochs_base = 2;
  r.hp.epochs_inc = 1;
  r.hp.epochs_rot = 1;
  r.hp.memory_size = 3;
  r.methods = std::move(methods);
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_SUITE("optim") {
  TEST_CASE("poly schedule") {
    CHECK(optim::poly_lr(0.1, 0, 100, 0.9) == 0.1);
    CHECK(optim::poly_lr(0.1, 99, 100, 0.9) < 0.1 * 0.02);
    CHECK(optim::poly_lr(0.2, 50, 100, 1.0) == doctest::Approx(0.1));
    CHECK_THROWS_AS(optim::poly_lr(0.1, 100, 100, 0.9), std::out_of_range);
    CHECK_THROWS_AS(optim::poly_lr(0.1, 0, 0, 0.9), std::invalid_argument);
  }

  TEST_CASE("Adam") {
    Vector p = Vector::LinSpaced(4, -1, 1);
    const Vector keep = p;
    auto st = optim::AdamState::zeros(4);
    for (int i = 0; i < 20; ++i) optim::adam_step(st, p, Vector::Zero(4), 1e-3);
    CHECK(p == keep);

    Vector q = Vector::Zero(3);
    auto s2 = optim::AdamState::zeros(3);
    Vector g(3);
    g << 0.5, -2.0, 30.0;
    optim::adam_step(s2, q, g, 1e-3);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(q(i)) == doctest::Approx(1e-3).epsilon(1e-6));
    CHECK(q(1) > 0.0);

    Vector a = Vector::Ones(3), b = Vector::Ones(3);
    auto sa = optim::AdamState::zeros(3), sb = optim::AdamState::zeros(3);
    for (int i = 0; i < 10; ++i) {
      optim::adam_step(sa, a, a * 0.3, 1e-2);
      optim::adam_step(sb, b, b * 0.3, 1e-2);
    }
    CHECK(a == b);
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("pseudo labels") {
    Matrix probs(3, 4);
    probs << 0.2, 0.6, 0.4, 0.1,  //
        0.5, 0.2, 0.4, 0.1,       //
        0.3, 0.2, 0.2, 0.8;
    const std::vector<int> mask{kUnlabeled, 3, kUnlabeled, kUnlabeled};
    const auto out = pipeline::pseudo_label_from_probs(probs, mask);
    CHECK(out == std::vector<int>{1, 3, 0, 2});
    const std::vector<int> full{4, 3, 4, 4};
    CHECK(pipeline::pseudo_label_from_probs(probs, full) == full);

    Matrix bg = Matrix::Zero(3, 4);
    bg.row(0).setOnes();
    CHECK(pipeline::pseudo_label_from_probs(bg, std::vector<int>(4, kUnlabeled)) == std::vector<int>(4, 0));
  }

  TEST_CASE("method presets") {
    Hyperparams hp;
    hp.lambda_kd = 0.5;
    for (const auto& name : method_names()) CHECK(method_preset(name, hp).name == name);
    const auto alife = method_preset("alife", hp);
    CHECK(alife.step1.ce == 1.0);
    CHECK(alife.step1.kd == 0.5);
    CHECK(alife.step1.ali == hp.lambda_ali);
    CHECK_FALSE(alife.replay);
    const auto m = method_preset("alife_m", hp);
    CHECK(m.replay);
    CHECK(m.step3_mem);
    CHECK(method_preset("ce_only", hp).step1.ali == 0.0);
    CHECK_THROWS_AS(method_preset("nope", hp), std::invalid_argument);
  }

  TEST_CASE("hyperparameter validation") {
    Hyperparams hp;
    hp.validate();
    hp.tau = 0.0;
    CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
    hp = Hyperparams{};
    hp.lambda_rot = 1.5;
    CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
  }

  TEST_CASE("a one-stage scenario has no harmonic IoU") {
    auto req = tiny_request("4-2(1)", {"alife"});
    req.scenario = ScenarioSpec::parse("4-2(1)");
    const auto out = pipeline::run_scenario(req);
    REQUIRE(out.runs.size() == 1);
    const auto& first = out.runs[0].stages[0];
    CHECK(first.stage == 1);
    CHECK_FALSE(first.metrics.hiou.has_value());
    CHECK(first.metrics.num_classes == 4);
    CHECK(out.runs[0].stages[1].metrics.num_classes == 6);
    CHECK(out.runs[0].stages[1].metrics.hiou.has_value());
  }

  TEST_CASE("replay with S = 0 is the plain method") {
    auto req = tiny_request("4-2(2)", {"alife", "alife_m"});
    req.hp.memory_size = 0;
    const auto out = pipeline::run_scenario(req);
    REQUIRE(out.runs.size() == 2);
    nlohmann::json a = nlohmann::json::array(), b = nlohmann::json::array();
    for (const auto& s : out.runs[0].stages) a.push_back(s.metrics.to_json());
    for (const auto& s : out.runs[1].stages) b.push_back(s.metrics.to_json());
    CHECK(a == b);
    CHECK(out.runs[1].stages.back().memory_bytes == 0);
  }

  TEST_CASE("replay memory accounting") {
    const auto req = tiny_request("4-2(2)", {"alife_m"});
    const auto out = pipeline::run_scenario(req);
    const int d = req.model.feature_dim, s = req.hp.memory_size;
    const auto& st = out.runs[0].stages;
    REQUIRE(st.size() == 3);
    CHECK(st[0].memory_categories == 4);
    CHECK(st[0].rotations == 0);
    CHECK(st[0].memory_bytes == 4LL * s * d * 8);
    CHECK(st[2].memory_categories == 6);
    CHECK(st[2].rotations == 5);
    CHECK(st[2].memory_bytes == 6LL * s * d * 8 + 5LL * d * (d - 1) / 2 * 8);
    CHECK(out.summary[0].memory_bytes == st[2].memory_bytes);
  }

  TEST_CASE("Step 3 leaves the extractor alone") {
    auto req = tiny_request("4-2(1)", {"alife_m"});
    Scenario sc = dataset::generate_scenario(req.scenario, req.generator);
    StageEnv env{&sc, req.model, req.hp, method_preset("alife_m", req.hp), 0, 1};
    ScenarioState state;
    pipeline::run_stage(state, env, 1);
    const ModelParams prev = *state.model;
    const ModelParams step1 = pipeline::train_step1(env, 2, prev);
    CHECK(step1.num_classes() == 6);
    const auto memory = state.memory;
    RotationSet ident;
    for (int c : memory.categories()) ident[c] = SkewParams::zeros(req.model.feature_dim);
    const auto rotated = replay::rotate_memory(memory, ident);
    const ModelParams tuned = pipeline::finetune_classifier(env, 2, step1, prev, rotated);
    CHECK(tuned.same_extractor(step1));
    CHECK(tuned.classifier != step1.classifier);
  }

  TEST_CASE("summaries over seeds") {
    auto req = tiny_request("4-2(1)", {"ce_only", "alife"});
    req.seeds = 3;
    const auto out = pipeline::run_scenario(req);
    CHECK(out.runs.size() == 6);
    REQUIRE(out.summary.size() == 2);
    for (const auto& s : out.summary) {
      CHECK(s.runs == 3);
      REQUIRE(s.hiou_mean.has_value());
      REQUIRE(s.hiou_std.has_value());
      std::vector<double> v;
      for (const auto& r : out.runs)
        if (r.method == s.method) v.push_back(*r.stages.back().metrics.hiou);
      const double mean = (v[0] + v[1] + v[2]) / 3.0;
      CHECK(*s.hiou_mean == doctest::Approx(mean).epsilon(1e-12));
      double ss = 0;
      for (double x : v) ss += (x - mean) * (x - mean);
      CHECK(*s.hiou_std == doctest::Approx(std::sqrt(ss / 2.0)).epsilon(1e-9));
    }
    CHECK(out.runs[0].seed == 0);
    CHECK(out.runs[2].seed == 2);
  }

  TEST_CASE("outputs are deterministic across thread counts") {
    auto req = tiny_request("4-2(2)", {"alife_m"});
    const auto one = pipeline::metrics_json(req, pipeline::run_scenario(req));
    req.threads = 3;
    const auto three = pipeline::metrics_json(req, pipeline::run_scenario(req));
    CHECK(one.dump() == three.dump());
  }

  TEST_CASE("written files") {
    const auto req = tiny_request("4-2(1)", {"ce_only", "alife"});
    const auto out = pipeline::run_scenario(req);
    const auto dir = std::filesystem::temp_directory_path() / "isslab_test_outputs";
    std::filesystem::remove_all(dir);
    pipeline::write_outputs(dir, req, out);
    for (const char* f : {"metrics.json", "stages.csv", "summary.csv", "hiou_vs_memory.tsv", "per_category_iou.tsv",
                          "timing.json"})
      CHECK(std::filesystem::exists(dir / f));
    const auto stages = slurp(dir / "stages.csv");
    CHECK(stages.find("n/a") != std::string::npos);
    const auto metrics = nlohmann::json::parse(slurp(dir / "metrics.json"));
    CHECK(metrics["summary"].size() == 2);
    CHECK(slurp(dir / "metrics.json").find("time") == std::string::npos);
    std::filesystem::remove_all(dir);
  }
}
