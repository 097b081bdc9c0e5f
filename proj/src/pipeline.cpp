#include "isslab/pipeline.hpp"

#include "isslab/optim.hpp"
#include "isslab/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace isslab {

using losses::Region;
using losses::RegionNorms;
using losses::TermWeights;

namespace {

// Stream tags under each stage's generator.
enum StreamTag : std::uint64_t { kInit = 1, kStep1 = 2, kMemorize = 3, kRotation = 4, kFinetune = 5 };

Rng seed_stream(std::uint64_t seed) { return Rng(seed).fork(0x73656564); }
Rng stage_stream(std::uint64_t seed, int stage, StreamTag tag) {
  return seed_stream(seed).fork(static_cast<std::uint64_t>(stage)).fork(tag);
}

TermWeights ce_labeled() {
  TermWeights w;
  w.ce = 1.0;
  return w;
}

void check_nonneg(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(name) + " must be finite and >= 0");
}

void check_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(name) + " must be finite and > 0");
}

Matrix softmax_columns(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index p = 0; p < logits.cols(); ++p) out.col(p) = numerics::softmax(Vector(logits.col(p)));
  return out;
}

int argmax_lowest(const Eigen::Ref<const Vector>& v) {
  int best = 0;
  for (Eigen::Index k = 1; k < v.size(); ++k)
    if (v(k) > v(best)) best = static_cast<int>(k);
  return best;
}

std::vector<Matrix> previous_probs(const ModelParams& prev, const StageDataset& data, int threads) {
  std::vector<Matrix> out(data.samples.size());
  parallel_for(out.size(), threads, [&](std::size_t i) {
    out[i] = softmax_columns(segmodel::classify(segmodel::extract_features(data.samples[i].image, prev), prev).data);
  });
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, const Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng r = rng;
  r.shuffle(std::span<std::size_t>(order));
  return order;
}

RegionNorms batch_norms(const StageDataset& data, std::span<const std::size_t> idx) {
  std::int64_t labeled = 0, unlabeled = 0;
  for (std::size_t i : idx)
    for (int m : data.samples[i].mask) (m == kUnlabeled ? unlabeled : labeled) += 1;
  return RegionNorms::from_counts(labeled, unlabeled);
}

/// dL/dz for one image under the pixel terms `w`.
Matrix pixel_logit_grads(const Matrix& logits, const Matrix* prev_probs, const std::vector<int>& mask,
                         const CategoryPartition& part, const TermWeights& w, const RegionNorms& norms) {
  Matrix g(logits.rows(), logits.cols());
  PixelContext ctx;
  for (Eigen::Index p = 0; p < logits.cols(); ++p) {
    ctx.logits = logits.col(p);
    if (prev_probs) ctx.prev_probs = prev_probs->col(p);
    ctx.label = mask[static_cast<std::size_t>(p)];
    ctx.in_labeled_region = ctx.label != kUnlabeled;
    g.col(p) = losses::composite_pixel_loss(ctx, part, w, norms).grad;
  }
  return g;
}

/// SGD with optional heavy-ball momentum and a poly schedule.
class SgdTrainer {
 public:
  SgdTrainer(const ModelParams& model, double lr0, double momentum, double power, std::int64_t total)
      : velocity_(ModelGrads::zeros_like(model)), lr0_(lr0), momentum_(momentum), power_(power), total_(total) {}

  void step(ModelParams& model, const ModelGrads& grads, const FreezeMask& mask) {
    if (momentum_ > 0.0) {
      velocity_ *= momentum_;
      velocity_ += grads;
      optim::sgd_poly_step(model, velocity_, step_, total_, lr0_, power_, mask);
    } else {
      optim::sgd_poly_step(model, grads, step_, total_, lr0_, power_, mask);
    }
    ++step_;
  }

 private:
  ModelGrads velocity_;
  double lr0_;
  double momentum_;
  double power_;
  std::int64_t total_;
  std::int64_t step_ = 0;
};

/// Full-model training on `data` under the pixel terms `w`.
ModelParams train_full(ModelParams model, const StageDataset& data, const CategoryPartition& part,
                       const TermWeights& w, const std::vector<Matrix>* prev_probs, int epochs, double lr0,
                       const StageEnv& env, const Rng& rng) {
  const std::size_t n = data.samples.size();
  const std::size_t bs = static_cast<std::size_t>(env.hp.batch_size);
  const std::size_t batches = (n + bs - 1) / bs;
  if (epochs <= 0 || n == 0) return model;
  SgdTrainer trainer(model, lr0, env.hp.momentum, env.hp.poly_power, static_cast<std::int64_t>(batches) * epochs);
  std::vector<ModelGrads> slots(bs);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto order = shuffled(n, rng.fork(static_cast<std::uint64_t>(epoch)));
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * bs;
      const std::span<const std::size_t> idx(order.data() + lo, std::min(n, lo + bs) - lo);
      const RegionNorms norms = batch_norms(data, idx);
      parallel_for(idx.size(), env.threads, [&](std::size_t k) {
        const Sample& s = data.samples[idx[k]];
        const ForwardResult fr = segmodel::forward(s.image, model);
        const Matrix* pp = prev_probs ? &(*prev_probs)[idx[k]] : nullptr;
        const LogitField g{fr.logits.height, fr.logits.width,
                           pixel_logit_grads(fr.logits.data, pp, s.mask, part, w, norms)};
        slots[k] = segmodel::backward(g, fr.cache, model);
      });
      ModelGrads total = ModelGrads::zeros_like(model);
      for (std::size_t k = 0; k < idx.size(); ++k) total += slots[k];
      trainer.step(model, total, {});
    }
  }
  return model;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::optional<double> sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return std::nullopt;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

void Hyperparams::validate() const {
  check_nonneg(lambda_ali, "lambda_ali");
  check_nonneg(lambda_kd, "lambda_kd");
  check_nonneg(lambda_mem, "lambda_mem");
  check_nonneg(lambda_rot, "lambda_rot");
  if (lambda_rot > 1.0) throw std::invalid_argument("lambda_rot must be <= 1");
  check_positive(tau, "tau");
  if (memory_size < 0) throw std::invalid_argument("memory_size must be >= 0");
  check_nonneg(focal_alpha, "focal_alpha");
  check_positive(lr_base, "lr_base");
  check_positive(lr_inc, "lr_inc");
  check_positive(lr_rot, "lr_rot");
  check_positive(lr_ft, "lr_ft");
  check_nonneg(momentum, "momentum");
  if (momentum >= 1.0) throw std::invalid_argument("momentum must be < 1");
  if (epochs_base < 0 || epochs_inc < 0 || epochs_rot < 0 || epochs_ft < 0)
    throw std::invalid_argument("epoch counts must be >= 0");
  check_nonneg(poly_power, "poly_power");
  if (batch_size < 1 || rot_batch_size < 1) throw std::invalid_argument("batch sizes must be >= 1");
}

std::vector<std::string> method_names() {
  return {"ce_only",       "mib",           "ce_ali",        "ce_ali_kd_labeled", "ce_ali_kd_unlabeled",
          "ce_ali_kd_all", "alife",         "alife_m",       "s3_ce_labeled",     "s3_ce_all",
          "s3_fl_labeled", "s3_fl_all",     "s3_fl_all_mem", "s3_fl_all_ali",     "s3_fl_all_ali_mem"};
}

MethodSpec method_preset(const std::string& name, const Hyperparams& hp) {
  MethodSpec m;
  m.name = name;
  TermWeights alife = ce_labeled();
  alife.ali = hp.lambda_ali;
  alife.kd = hp.lambda_kd;
  alife.kd_region = Region::kLabeled;

  if (name == "ce_only") {
    m.step1 = ce_labeled();
  } else if (name == "mib") {
    m.step1.cce = 1.0;
    m.step1.ckd = hp.lambda_kd;
  } else if (name == "ce_ali") {
    m.step1 = ce_labeled();
    m.step1.ali = hp.lambda_ali;
  } else if (name == "ce_ali_kd_labeled" || name == "alife") {
    m.step1 = alife;
  } else if (name == "ce_ali_kd_unlabeled" || name == "ce_ali_kd_all") {
    m.step1 = alife;
    m.step1.kd_region = name == "ce_ali_kd_all" ? Region::kAll : Region::kUnlabeled;
  } else if (name == "alife_m" || name.starts_with("s3_")) {
    m.step1 = alife;
    m.replay = true;
    const std::string key = name == "alife_m" ? "s3_fl_all_ali_mem" : name;
    TermWeights s3;
    s3.focal_alpha = hp.focal_alpha;
    if (key == "s3_ce_labeled") {
      s3.ce = 1.0;
    } else if (key == "s3_ce_all") {
      s3.ce = 1.0;
      s3.ce_region = Region::kAll;
    } else if (key == "s3_fl_labeled") {
      s3.focal = 1.0;
      s3.focal_region = Region::kLabeled;
    } else if (key == "s3_fl_all" || key == "s3_fl_all_mem" || key == "s3_fl_all_ali" ||
               key == "s3_fl_all_ali_mem") {
      s3.focal = 1.0;
      if (key.find("_ali") != std::string::npos) s3.ali = hp.lambda_ali;
      m.step3_mem = key.ends_with("_mem");
    } else {
      throw std::invalid_argument("unknown method '" + name + "'");
    }
    m.step3 = s3;
  } else {
    throw std::invalid_argument("unknown method '" + name + "'");
  }
  return m;
}

nlohmann::json StageResult::to_json() const {
  return {{"stage", stage},
          {"metrics", metrics.to_json()},
          {"memory_categories", memory_categories},
          {"rotations", rotations},
          {"memory_bytes", memory_bytes},
          {"clamp_warnings", clamp_warnings}};
}

nlohmann::json pipeline::MethodSummary::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : per_class_iou_mean) per.push_back(opt_json(v));
  return {{"method", method},
          {"runs", runs},
          {"miou_base", {{"mean", opt_json(miou_base_mean)}, {"std", opt_json(miou_base_std)}}},
          {"miou_new", {{"mean", opt_json(miou_new_mean)}, {"std", opt_json(miou_new_std)}}},
          {"miou", {{"mean", opt_json(miou_mean)}, {"std", opt_json(miou_std)}}},
          {"hiou", {{"mean", opt_json(hiou_mean)}, {"std", opt_json(hiou_std)}}},
          {"memory_bytes", memory_bytes},
          {"per_class_iou_mean", per}};
}

namespace pipeline {

std::vector<int> pseudo_label_from_probs(const Matrix& prev_probs, const std::vector<int>& mask) {
  if (static_cast<Eigen::Index>(mask.size()) != prev_probs.cols()) throw std::invalid_argument("mask size mismatch");
  std::vector<int> out(mask);
  for (std::size_t p = 0; p < out.size(); ++p)
    if (out[p] == kUnlabeled) out[p] = argmax_lowest(prev_probs.col(static_cast<Eigen::Index>(p)));
  return out;
}

std::vector<int> pseudo_label(const ModelParams& prev_model, const Image& image, const std::vector<int>& mask) {
  const LogitField z = segmodel::classify(segmodel::extract_features(image, prev_model), prev_model);
  return pseudo_label_from_probs(softmax_columns(z.data), mask);
}

std::vector<int> predict(const ModelParams& model, const Image& image) {
  const LogitField z = segmodel::classify(segmodel::extract_features(image, model), model);
  std::vector<int> out(static_cast<std::size_t>(z.data.cols()));
  for (Eigen::Index p = 0; p < z.data.cols(); ++p) out[static_cast<std::size_t>(p)] = argmax_lowest(z.data.col(p));
  return out;
}

MetricsReport evaluate(const ModelParams& model, const Scenario& scenario, int stage, int threads) {
  const int known = scenario.spec.partition(stage).size();
  if (model.num_classes() != known) throw std::invalid_argument("model class count does not match the stage");
  const auto& samples = scenario.evaluation.samples;
  std::vector<ConfusionMatrix> slots(samples.size(), ConfusionMatrix(known));
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    std::vector<int> gt = samples[i].mask;
    for (int& g : gt)
      if (g >= known) g = kUnlabeled;
    slots[i].accumulate(gt, predict(model, samples[i].image));
  });
  ConfusionMatrix conf(known);
  for (const auto& s : slots) conf += s;
  return metrics::make_report(conf, scenario.spec.base, stage);
}

ModelParams train_base(const StageEnv& env) {
  const Scenario& sc = *env.scenario;
  const CategoryPartition part = sc.spec.partition(1);
  Rng init = stage_stream(env.seed, 1, kInit);
  ModelParams model = ModelParams::init(env.model, part.size(), init);
  return train_full(std::move(model), sc.stages[0], part, ce_labeled(), nullptr, env.hp.epochs_base, env.hp.lr_base,
                    env, stage_stream(env.seed, 1, kStep1));
}

ModelParams train_step1(const StageEnv& env, int stage, const ModelParams& prev) {
  const Scenario& sc = *env.scenario;
  const CategoryPartition part = sc.spec.partition(stage);
  if (prev.num_classes() != static_cast<int>(part.prev.size()))
    throw std::invalid_argument("previous model does not cover the previous categories");
  const StageDataset& data = sc.stages[static_cast<std::size_t>(stage - 1)];
  Rng init = stage_stream(env.seed, stage, kInit);
  ModelParams model = segmodel::extend_classifier(prev, static_cast<int>(part.novel.size()), init,
                                                  env.model.new_row_sigma);
  std::vector<Matrix> prev_probs;
  if (env.method.step1.needs_prev_model()) prev_probs = previous_probs(prev, data, env.threads);
  return train_full(std::move(model), data, part, env.method.step1, prev_probs.empty() ? nullptr : &prev_probs,
                    env.hp.epochs_inc, env.hp.lr_inc, env, stage_stream(env.seed, stage, kStep1));
}

ModelParams finetune_classifier(const StageEnv& env, int stage, const ModelParams& model,
                                const ModelParams& prev_model, const FeatureMemory& rotated_memory) {
  const Scenario& sc = *env.scenario;
  const CategoryPartition part = sc.spec.partition(stage);
  const StageDataset& data = sc.stages[static_cast<std::size_t>(stage - 1)];
  const std::size_t n = data.samples.size();
  const std::size_t bs = static_cast<std::size_t>(env.hp.batch_size);
  const std::size_t batches = (n + bs - 1) / bs;
  ModelParams out = model;
  if (env.hp.epochs_ft <= 0 || n == 0) return out;

  std::vector<FeatureField> features(n);
  parallel_for(n, env.threads, [&](std::size_t i) { features[i] = segmodel::extract_features(data.samples[i].image, model); });
  const std::vector<Matrix> prev_probs = previous_probs(prev_model, data, env.threads);
  const auto [mem_features, mem_targets] = rotated_memory.stacked();
  const bool use_mem = env.method.step3_mem && env.hp.lambda_mem > 0 && mem_features.rows() > 0;

  const FreezeMask mask = segmodel::freeze_flags(out, true, false);
  SgdTrainer trainer(out, env.hp.lr_ft, env.hp.momentum, env.hp.poly_power,
                     static_cast<std::int64_t>(batches) * env.hp.epochs_ft);
  const Rng rng = stage_stream(env.seed, stage, kFinetune);
  std::vector<ModelGrads> slots(bs);
  for (int epoch = 0; epoch < env.hp.epochs_ft; ++epoch) {
    const auto order = shuffled(n, rng.fork(static_cast<std::uint64_t>(epoch)));
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * bs;
      const std::span<const std::size_t> idx(order.data() + lo, std::min(n, lo + bs) - lo);
      const RegionNorms norms = batch_norms(data, idx);
      parallel_for(idx.size(), env.threads, [&](std::size_t k) {
        const std::size_t i = idx[k];
        const Matrix logits = segmodel::classify(features[i], out).data;
        const Matrix g = pixel_logit_grads(logits, &prev_probs[i], data.samples[i].mask, part, env.method.step3, norms);
        ModelGrads mg = ModelGrads::zeros_like(out);
        mg.classifier.noalias() = g * features[i].data.transpose();
        if (out.has_bias()) mg.classifier_bias = g.rowwise().sum();
        slots[k] = std::move(mg);
      });
      ModelGrads total = ModelGrads::zeros_like(out);
      for (std::size_t k = 0; k < idx.size(); ++k) total += slots[k];
      if (use_mem) {
        const losses::MemLossResult mem = losses::mem_loss(mem_features, mem_targets, out.classifier,
                                                           out.has_bias() ? &out.classifier_bias : nullptr);
        total.classifier += env.hp.lambda_mem * mem.grad_weights;
        if (out.has_bias()) total.classifier_bias += env.hp.lambda_mem * mem.grad_bias;
      }
      trainer.step(out, total, mask);
    }
  }
  return out;
}

StageResult run_stage(ScenarioState& state, const StageEnv& env, int stage, const ModelParams* base_model) {
  const auto start = std::chrono::steady_clock::now();
  losses::reset_clamp_warnings();
  const Scenario& sc = *env.scenario;
  const CategoryPartition part = sc.spec.partition(stage);
  const StageDataset& data = sc.stages[static_cast<std::size_t>(stage - 1)];
  StageResult result;
  result.stage = stage;

  ModelParams model;
  std::optional<ModelParams> prev;
  if (stage == 1) {
    model = base_model ? *base_model : train_base(env);
  } else {
    if (!state.model) throw std::logic_error("stage " + std::to_string(stage) + " needs a previous model");
    prev = *state.model;
    model = train_step1(env, stage, *prev);
  }

  const int s = env.hp.memory_size;
  if (env.method.replay && s > 0) {
    FeatureMemory fresh =
        replay::memorize_features(data, model, part, s, stage_stream(env.seed, stage, kMemorize));
    if (stage > 1) {
      RotationTrainConfig rc;
      rc.lambda_rot = env.hp.lambda_rot;
      rc.epochs = env.hp.epochs_rot;
      rc.lr = env.hp.lr_rot;
      rc.poly_power = env.hp.poly_power;
      rc.batch_size = env.hp.rot_batch_size;
      rc.tau = env.hp.tau;
      rc.normalize_by_s = env.hp.normalize_by_s;
      rc.threads = env.threads;
      const RotationSet rotations = replay::train_rotations(data, *prev, model, state.memory, part, rc,
                                                            stage_stream(env.seed, stage, kRotation));
      FeatureMemory rotated = replay::rotate_memory(state.memory, rotations);
      model = finetune_classifier(env, stage, model, *prev, rotated);
      rotated.merge(fresh);
      state.memory = std::move(rotated);
      result.rotations = static_cast<int>(rotations.size());
    } else {
      state.memory = std::move(fresh);
    }
    result.memory_categories = static_cast<int>(state.memory.categories().size());
    result.memory_bytes = state.memory.storage_bytes() + replay::rotation_bytes(model.feature_dim, result.rotations);
  }

  result.metrics = evaluate(model, sc, stage, env.threads);
  result.clamp_warnings = losses::clamp_warnings();
  state.model = std::move(model);
  result.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

RunOutcome run_scenario(const RunRequest& req) {
  req.hp.validate();
  req.scenario.validate();
  if (req.seeds < 1) throw std::invalid_argument("need at least one seed");
  if (req.methods.empty()) throw std::invalid_argument("no methods to run");
  std::vector<MethodSpec> methods;
  for (const auto& name : req.methods) methods.push_back(method_preset(name, req.hp));

  std::map<std::pair<std::size_t, int>, SeedRun> by_key;
  for (int k = 0; k < req.seeds; ++k) {
    const std::uint64_t seed = req.base_seed + static_cast<std::uint64_t>(k);
    ScenarioSpec spec = req.scenario;
    spec.seed = seed;
    const Scenario scenario = dataset::generate_scenario(spec, req.generator, req.threads);

    StageEnv env{&scenario, req.model, req.hp, methods.front(), seed, req.threads};
    const auto base_start = std::chrono::steady_clock::now();
    const ModelParams base = train_base(env);
    const double base_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - base_start).count();

    for (std::size_t m = 0; m < methods.size(); ++m) {
      env.method = methods[m];
      ScenarioState state;
      SeedRun run{methods[m].name, seed, {}};
      for (int t = 1; t <= spec.num_stages(); ++t) {
        run.stages.push_back(run_stage(state, env, t, &base));
        if (t == 1) run.stages.back().wall_time += base_time;
      }
      by_key[{m, k}] = std::move(run);
    }
  }
  RunOutcome out;
  for (auto& [key, run] : by_key) out.runs.push_back(std::move(run));
  out.summary = summarize(out.runs);
  return out;
}

std::vector<MethodSummary> summarize(const std::vector<SeedRun>& runs) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const StageResult*>> finals;
  for (const auto& r : runs) {
    if (r.stages.empty()) continue;
    if (!finals.count(r.method)) order.push_back(r.method);
    finals[r.method].push_back(&r.stages.back());
  }
  std::vector<MethodSummary> out;
  for (const auto& name : order) {
    const auto& list = finals[name];
    MethodSummary s;
    s.method = name;
    s.runs = static_cast<int>(list.size());
    s.memory_bytes = list.front()->memory_bytes;
    auto stat = [&](auto get, std::optional<double>& mean, std::optional<double>& sd) {
      std::vector<double> v;
      for (const auto* r : list)
        if (auto x = get(*r)) v.push_back(*x);
      if (v.size() != list.size()) return;
      mean = mean_of(v);
      sd = sample_std(v);
    };
    stat([](const StageResult& r) { return r.metrics.miou_base; }, s.miou_base_mean, s.miou_base_std);
    stat([](const StageResult& r) { return r.metrics.miou_new; }, s.miou_new_mean, s.miou_new_std);
    stat([](const StageResult& r) { return r.metrics.miou; }, s.miou_mean, s.miou_std);
    stat([](const StageResult& r) { return r.metrics.hiou; }, s.hiou_mean, s.hiou_std);
    const std::size_t classes = list.front()->metrics.per_class_iou.size();
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> v;
      for (const auto* r : list)
        if (c < r->metrics.per_class_iou.size() && r->metrics.per_class_iou[c]) v.push_back(*r->metrics.per_class_iou[c]);
      s.per_class_iou_mean.push_back(v.empty() ? std::nullopt : std::optional<double>(mean_of(v)));
    }
    out.push_back(std::move(s));
  }
  return out;
}

nlohmann::json metrics_json(const RunRequest& req, const RunOutcome& outcome) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : outcome.runs) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : r.stages) stages.push_back(s.to_json());
    runs.push_back({{"method", r.method}, {"seed", r.seed}, {"stages", stages}});
  }
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : outcome.summary) summary.push_back(s.to_json());
  return {{"scenario", req.scenario.name()}, {"feature_dim", req.model.feature_dim},
          {"memory_size", req.hp.memory_size}, {"runs", runs}, {"summary", summary}};
}

void write_outputs(const std::filesystem::path& dir, const RunRequest& req, const RunOutcome& outcome) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("metrics.json");
    f << metrics_json(req, outcome).dump(2) << '\n';
  }
  {
    auto f = open("stages.csv");
    f << "method,seed,stage,miou_base,miou_new,miou,hiou,memory_bytes\n";
    for (const auto& r : outcome.runs)
      for (const auto& s : r.stages)
        f << r.method << ',' << r.seed << ',' << s.stage << ',' << fmt(s.metrics.miou_base) << ','
          << fmt(s.metrics.miou_new) << ',' << fmt(s.metrics.miou) << ',' << fmt(s.metrics.hiou) << ','
          << s.memory_bytes << '\n';
  }
  {
    auto f = open("summary.csv");
    f << "method,runs,miou_base_mean,miou_base_std,miou_new_mean,miou_new_std,miou_mean,miou_std,hiou_mean,hiou_std,"
         "memory_bytes\n";
    for (const auto& s : outcome.summary)
      f << s.method << ',' << s.runs << ',' << fmt(s.miou_base_mean) << ',' << fmt(s.miou_base_std) << ','
        << fmt(s.miou_new_mean) << ',' << fmt(s.miou_new_std) << ',' << fmt(s.miou_mean) << ',' << fmt(s.miou_std)
        << ',' << fmt(s.hiou_mean) << ',' << fmt(s.hiou_std) << ',' << s.memory_bytes << '\n';
  }
  {
    auto f = open("hiou_vs_memory.tsv");
    f << "method\tmemory_bytes\thiou_mean\thiou_std\n";
    for (const auto& s : outcome.summary)
      f << s.method << '\t' << s.memory_bytes << '\t' << fmt(s.hiou_mean) << '\t' << fmt(s.hiou_std) << '\n';
  }
  {
    auto f = open("per_category_iou.tsv");
    f << "method\tcategory\tgroup\tiou_mean\n";
    for (const auto& s : outcome.summary)
      for (std::size_t c = 0; c < s.per_class_iou_mean.size(); ++c)
        f << s.method << '\t' << c << '\t' << (static_cast<int>(c) < req.scenario.base ? "base" : "new") << '\t'
          << fmt(s.per_class_iou_mean[c]) << '\n';
  }
  {
    nlohmann::json t = nlohmann::json::array();
    for (const auto& r : outcome.runs) {
      nlohmann::json stages = nlohmann::json::array();
      for (const auto& s : r.stages) stages.push_back({{"stage", s.stage}, {"wall_time", s.wall_time}});
      t.push_back({{"method", r.method}, {"seed", r.seed}, {"stages", stages}});
    }
    auto f = open("timing.json");
    f << t.dump(2) << '\n';
  }
}

}  // namespace pipeline
}  // namespace isslab
