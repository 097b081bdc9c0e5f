#include "isslab/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#ifndef ISSLAB_BUILD_ID
#define ISSLAB_BUILD_ID "unknown"
#endif

namespace isslab::config {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = first + value.size();
  if (!value.empty() && value.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || first == last)
    throw ConfigError(key, "expected a number, got '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number(T& (*ref)(RunConfig&)) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_number<T>(k, v); },
          [ref](const RunConfig& c) {
            T& x = ref(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) return format_double(x);
            else return std::to_string(x);
          }};
}

Field flag(bool& (*ref)(RunConfig&)) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_bool(k, v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

#define ISS_REF(expr) +[](RunConfig& c) -> auto& { return expr; }

// Ordered as render() writes them.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("run.name", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                       if (v.empty()) throw ConfigError(k, "must not be empty");
                                       c.name = v;
                                     },
                                     [](const RunConfig& c) { return c.name; }});
    t.emplace_back("run.methods", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                          auto list = split_list(v);
                                          if (list.empty()) throw ConfigError(k, "needs at least one method");
                                          for (const auto& m : list) {
                                            const auto names = method_names();
                                            if (std::find(names.begin(), names.end(), m) == names.end())
                                              throw ConfigError(k, "unknown method '" + m + "'");
                                          }
                                          c.request.methods = std::move(list);
                                        },
                                        [](const RunConfig& c) {
                                          std::string out;
                                          for (const auto& m : c.request.methods) out += (out.empty() ? "" : ",") + m;
                                          return out;
                                        }});
    t.emplace_back("run.seed", number<std::uint64_t>(ISS_REF(c.request.base_seed)));
    t.emplace_back("run.seeds", number<int>(ISS_REF(c.request.seeds)));
    t.emplace_back("run.threads", number<int>(ISS_REF(c.request.threads)));
    t.emplace_back("run.output", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                         if (v.empty()) throw ConfigError(k, "must not be empty");
                                         c.output = v;
                                       },
                                       [](const RunConfig& c) { return c.output.string(); }});
    t.emplace_back("scenario.spec", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                            try {
                                              c.request.scenario = ScenarioSpec::parse(v);
                                            } catch (const std::invalid_argument& e) {
                                              throw ConfigError(k, e.what());
                                            }
                                          },
                                          [](const RunConfig& c) { return c.request.scenario.name(); }});
    t.emplace_back("generator.images_per_stage", number<int>(ISS_REF(c.request.generator.images_per_stage)));
    t.emplace_back("generator.eval_images", number<int>(ISS_REF(c.request.generator.eval_images)));
    t.emplace_back("generator.height", number<int>(ISS_REF(c.request.generator.height)));
    t.emplace_back("generator.width", number<int>(ISS_REF(c.request.generator.width)));
    t.emplace_back("generator.noise_sigma", number<double>(ISS_REF(c.request.generator.noise_sigma)));
    t.emplace_back("generator.min_shapes", number<int>(ISS_REF(c.request.generator.min_shapes)));
    t.emplace_back("generator.max_shapes", number<int>(ISS_REF(c.request.generator.max_shapes)));
    t.emplace_back("model.feature_dim", number<int>(ISS_REF(c.request.model.feature_dim)));
    t.emplace_back("model.hidden1", number<int>(ISS_REF(c.request.model.hidden1)));
    t.emplace_back("model.hidden2", number<int>(ISS_REF(c.request.model.hidden2)));
    t.emplace_back("model.feature_relu", flag(ISS_REF(c.request.model.feature_relu)));
    t.emplace_back("model.classifier_bias", flag(ISS_REF(c.request.model.classifier_bias)));
    t.emplace_back("model.new_row_sigma", number<double>(ISS_REF(c.request.model.new_row_sigma)));
    t.emplace_back("pipeline.lambda_ali", number<double>(ISS_REF(c.request.hp.lambda_ali)));
    t.emplace_back("pipeline.lambda_kd", number<double>(ISS_REF(c.request.hp.lambda_kd)));
    t.emplace_back("pipeline.lambda_mem", number<double>(ISS_REF(c.request.hp.lambda_mem)));
    t.emplace_back("pipeline.lambda_rot", number<double>(ISS_REF(c.request.hp.lambda_rot)));
    t.emplace_back("pipeline.tau", number<double>(ISS_REF(c.request.hp.tau)));
    t.emplace_back("pipeline.memory_size", number<int>(ISS_REF(c.request.hp.memory_size)));
    t.emplace_back("pipeline.focal_alpha", number<double>(ISS_REF(c.request.hp.focal_alpha)));
    t.emplace_back("pipeline.normalize_by_s", flag(ISS_REF(c.request.hp.normalize_by_s)));
    t.emplace_back("pipeline.lr_base", number<double>(ISS_REF(c.request.hp.lr_base)));
    t.emplace_back("pipeline.lr_inc", number<double>(ISS_REF(c.request.hp.lr_inc)));
    t.emplace_back("pipeline.lr_rot", number<double>(ISS_REF(c.request.hp.lr_rot)));
    t.emplace_back("pipeline.lr_ft", number<double>(ISS_REF(c.request.hp.lr_ft)));
    t.emplace_back("pipeline.momentum", number<double>(ISS_REF(c.request.hp.momentum)));
    t.emplace_back("pipeline.epochs_base", number<int>(ISS_REF(c.request.hp.epochs_base)));
    t.emplace_back("pipeline.epochs_inc", number<int>(ISS_REF(c.request.hp.epochs_inc)));
    t.emplace_back("pipeline.epochs_rot", number<int>(ISS_REF(c.request.hp.epochs_rot)));
    t.emplace_back("pipeline.epochs_ft", number<int>(ISS_REF(c.request.hp.epochs_ft)));
    t.emplace_back("pipeline.poly_power", number<double>(ISS_REF(c.request.hp.poly_power)));
    t.emplace_back("pipeline.batch_size", number<int>(ISS_REF(c.request.hp.batch_size)));
    t.emplace_back("pipeline.rot_batch_size", number<int>(ISS_REF(c.request.hp.rot_batch_size)));
    return t;
  }();
  return table;
}

#undef ISS_REF

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return f;
  throw ConfigError(key, "unknown config key");
}

// Cross-field checks, reported against the first key involved.
void validate(RunConfig& cfg) {
  auto& r = cfg.request;
  if (r.seeds < 1) throw ConfigError("run.seeds", "must be at least 1");
  if (r.threads < 1) throw ConfigError("run.threads", "must be at least 1");
  const auto& g = r.generator;
  if (g.images_per_stage < 1) throw ConfigError("generator.images_per_stage", "must be at least 1");
  if (g.eval_images < 1) throw ConfigError("generator.eval_images", "must be at least 1");
  if (g.height < 16) throw ConfigError("generator.height", "must be at least 16");
  if (g.width < 16) throw ConfigError("generator.width", "must be at least 16");
  if (g.noise_sigma < 0.0) throw ConfigError("generator.noise_sigma", "must be nonnegative");
  if (g.min_shapes < 1) throw ConfigError("generator.min_shapes", "must be at least 1");
  if (g.max_shapes < g.min_shapes) throw ConfigError("generator.max_shapes", "must be >= generator.min_shapes");
  if (r.model.feature_dim < 2) throw ConfigError("model.feature_dim", "must be at least 2");
  if (r.model.hidden1 < 1) throw ConfigError("model.hidden1", "must be at least 1");
  if (r.model.hidden2 < 1) throw ConfigError("model.hidden2", "must be at least 1");
  if (r.model.new_row_sigma < 0.0) throw ConfigError("model.new_row_sigma", "must be nonnegative");
  r.model.height = g.height;
  r.model.width = g.width;
  try {
    r.scenario.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("scenario.spec", e.what());
  }
  try {
    r.hp.validate();
  } catch (const std::invalid_argument& e) {
    // Hyperparams messages start with the field name.
    const std::string msg = e.what();
    const auto sp = msg.find(' ');
    const std::string key = "pipeline." + msg.substr(0, sp);
    if (std::any_of(fields().begin(), fields().end(), [&](const auto& f) { return f.first == key; }))
      throw ConfigError(key, sp == std::string::npos ? msg : msg.substr(sp + 1));
    throw ConfigError("pipeline", msg);
  }
}

}  // namespace

void set(RunConfig& cfg, const std::string& key, const std::string& value) {
  field(key).set(cfg, key, trim(value));
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(trim(assignment), "override must look like key=value");
  RunConfig next = cfg;
  set(next, trim(std::string_view(assignment).substr(0, eq)), assignment.substr(eq + 1));
  validate(next);
  cfg = std::move(next);
}

std::string get(const RunConfig& cfg, const std::string& key) { return field(key).get(cfg); }

std::vector<std::string> keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.first);
  return out;
}

RunConfig parse(std::string_view text, const RunConfig& base) {
  RunConfig cfg = base;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("", "line " + std::to_string(line_no) + ": malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("", "line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(std::string_view(line).substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set(cfg, key, line.substr(eq + 1));
  }
  validate(cfg);
  return cfg;
}

RunConfig parse(std::string_view text) { return parse(text, defaults()); }

std::string render(const RunConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& [name, f] : fields()) {
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out << '\n';
      out << '[' << sec << "]\n";
      section = sec;
    }
    out << name.substr(dot + 1) << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

RunConfig defaults() {
  RunConfig cfg;
  cfg.request.methods = {"alife"};
  validate(cfg);
  return cfg;
}

std::vector<std::string> preset_names() { return {"default", "ablation_table4", "ablation_table5", "replay"}; }

std::optional<RunConfig> preset(const std::string& name) {
  RunConfig cfg = defaults();
  if (name == "default") return cfg;
  if (name == "ablation_table4") {
    cfg.name = name;
    cfg.request.methods = {"ce_only", "ce_ali", "ce_ali_kd_labeled", "ce_ali_kd_unlabeled", "ce_ali_kd_all"};
    cfg.request.seeds = 3;
    cfg.output = "out/ablation_table4";
    return cfg;
  }
  if (name == "ablation_table5") {
    cfg.name = name;
    cfg.request.scenario = ScenarioSpec::parse("4-2(2)");
    cfg.request.methods = {"alife",         "s3_ce_labeled", "s3_ce_all",         "s3_fl_labeled",
                           "s3_fl_all",     "s3_fl_all_mem", "s3_fl_all_ali",     "s3_fl_all_ali_mem"};
    cfg.request.seeds = 3;
    cfg.output = "out/ablation_table5";
    return cfg;
  }
  if (name == "replay") {
    cfg.name = name;
    cfg.request.scenario = ScenarioSpec::parse("4-2(2)");
    cfg.request.methods = {"alife", "alife_m"};
    cfg.request.seeds = 3;
    cfg.output = "out/replay";
    return cfg;
  }
  return std::nullopt;
}

RunConfig load(const std::string& path_or_preset) {
  const std::filesystem::path path(path_or_preset);
  std::error_code ec;
  if (std::filesystem::is_regular_file(path, ec)) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("", "cannot read config file " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }
  if (auto p = preset(path_or_preset)) return *p;
  throw ConfigError("", "no config file or preset named '" + path_or_preset + "'");
}

std::string manifest(const RunConfig& cfg) {
  std::ostringstream out;
  out << "# build: " << build_id() << '\n';
  out << "# seeds:";
  for (int i = 0; i < cfg.request.seeds; ++i) out << ' ' << cfg.request.base_seed + static_cast<std::uint64_t>(i);
  out << "\n\n" << render(cfg);
  return out.str();
}

const char* build_id() { return ISSLAB_BUILD_ID; }

}  // namespace isslab::config
