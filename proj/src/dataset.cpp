#include "isslab/dataset.hpp"

#include "isslab/binary_io.hpp"
#include "isslab/parallel.hpp"
#include "isslab/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>

namespace isslab {

namespace {

constexpr std::string_view kDataMagic = "ISSDATA\x1a";
constexpr std::uint32_t kDataVersion = 1;

enum class Shape {
  kDisk, kSquare, kTriangle, kRing, kCross, kStripes, kChecker, kEllipse, kDiamond, kLShape, kHBar, kVBar
};

struct Palette {
  std::array<double, 3> rgb;
};

// one hue per shape, well separated so colour alone is nearly decisive
constexpr std::array<Palette, kShapeVocabulary> kPalette = {{
    {{0.90, 0.15, 0.15}},  // disk: red
    {{0.15, 0.75, 0.20}},  // square: green
    {{0.20, 0.30, 0.90}},  // triangle: blue
    {{0.95, 0.85, 0.15}},  // ring: yellow
    {{0.85, 0.20, 0.85}},  // cross: magenta
    {{0.15, 0.85, 0.85}},  // stripes: cyan
    {{0.95, 0.55, 0.10}},  // checker: orange
    {{0.55, 0.25, 0.10}},  // ellipse: brown
    {{0.95, 0.95, 0.95}},  // diamond: white
    {{0.55, 0.90, 0.55}},  // L-shape: light green
    {{0.50, 0.10, 0.60}},  // H-bar: purple
    {{0.60, 0.60, 0.95}},  // V-bar: lavender
}};

bool inside(Shape s, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (s) {
    case Shape::kDisk: return dx * dx + dy * dy <= r * r;
    case Shape::kSquare:
    case Shape::kStripes:
    case Shape::kChecker: return ax <= 0.8 * r && ay <= 0.8 * r;
    case Shape::kTriangle: return dy >= -r && dy <= 0.8 * r && ax <= 0.55 * (dy + r);
    case Shape::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case Shape::kCross: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
    case Shape::kEllipse: return (dx / r) * (dx / r) + (dy / (0.55 * r)) * (dy / (0.55 * r)) <= 1.0;
    case Shape::kDiamond: return ax + ay <= r;
    case Shape::kLShape: return (dx >= -r && dx <= -0.35 * r && ay <= r) || (dy >= 0.35 * r && dy <= r && ax <= r);
    case Shape::kHBar: return ay <= 0.3 * r && ax <= r;
    case Shape::kVBar: return ax <= 0.3 * r && ay <= r;
  }
  return false;
}

double texture(Shape s, int x, int y) {
  switch (s) {
    case Shape::kStripes: return ((y / 2) % 2) ? 1.0 : 0.55;
    case Shape::kChecker: return (((x / 3) + (y / 3)) % 2) ? 1.0 : 0.55;
    case Shape::kRing: return 0.95;
    case Shape::kCross: return ((x + y) % 2) ? 1.0 : 0.85;
    default: return 1.0;
  }
}

struct Rendered {
  Image image;
  std::vector<int> full_mask;  // category id at every pixel
};

/// Draws 2-4 shapes; `required` (if >= 1) is always among them.
Rendered render(Rng rng, const GeneratorConfig& cfg, int num_categories, int required) {
  const int h = cfg.height, w = cfg.width;
  Rendered out;
  out.image = {h, w, Matrix::Zero(3, h * w)};
  out.full_mask.assign(static_cast<std::size_t>(h * w), 0);

  // low-amplitude background texture
  const double base = rng.uniform(0.12, 0.22);
  for (int p = 0; p < h * w; ++p) {
    const double v = base + rng.uniform(-0.04, 0.04);
    for (int c = 0; c < 3; ++c) out.image.data(c, p) = v;
  }

  const int count = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
  std::vector<int> cats;
  if (required >= 1) cats.push_back(required);
  while (static_cast<int>(cats.size()) < count) cats.push_back(rng.uniform_int(1, num_categories - 1));
  rng.shuffle(std::span<int>(cats));

  const double scale = std::min(h, w) / 48.0;
  for (int cat : cats) {
    const auto shape = static_cast<Shape>((cat - 1) % kShapeVocabulary);
    const double r = rng.uniform(7.0, 12.0) * scale;
    const double cx = rng.uniform(r * 0.6, w - r * 0.6);
    const double cy = rng.uniform(r * 0.6, h - r * 0.6);
    const double shade = rng.uniform(0.85, 1.0);
    const auto& rgb = kPalette[static_cast<std::size_t>(shape)].rgb;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!inside(shape, x + 0.5 - cx, y + 0.5 - cy, r)) continue;
        const int p = y * w + x;
        const double t = shade * texture(shape, x, y);
        for (int c = 0; c < 3; ++c) out.image.data(c, p) = rgb[static_cast<std::size_t>(c)] * t;
        out.full_mask[static_cast<std::size_t>(p)] = cat;
      }
  }
  for (Eigen::Index i = 0; i < out.image.data.size(); ++i) {
    double& v = out.image.data.data()[i];
    v = std::clamp(v + rng.normal(0.0, cfg.noise_sigma), 0.0, 1.0);
  }
  return out;
}

// When the stage owns the background, every pixel outside its shapes is
// background; future shapes included.  Later stages leave it unlabeled.
std::vector<int> stage_mask(const std::vector<int>& full, const std::vector<int>& labeled) {
  const bool owns_bg = std::find(labeled.begin(), labeled.end(), 0) != labeled.end();
  std::vector<int> mask(full.size(), owns_bg ? 0 : kUnlabeled);
  for (std::size_t p = 0; p < full.size(); ++p)
    if (std::find(labeled.begin(), labeled.end(), full[p]) != labeled.end()) mask[p] = full[p];
  return mask;
}

bool has_any(const std::vector<int>& full, int cat) {
  return std::find(full.begin(), full.end(), cat) != full.end();
}

}  // namespace

bool StageDataset::operator==(const StageDataset& other) const {
  if (stage != other.stage || labeled_categories != other.labeled_categories ||
      samples.size() != other.samples.size())
    return false;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& a = samples[i];
    const auto& b = other.samples[i];
    if (a.mask != b.mask || a.image.height != b.image.height || a.image.width != b.image.width ||
        a.image.data != b.image.data)
      return false;
  }
  return true;
}

ScenarioSpec ScenarioSpec::parse(std::string_view text) {
  static const std::regex pattern(R"(^\s*(\d+)-(\d+)\((\d+)\)\s*$)");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_match(text.begin(), text.end(), m, pattern))
    throw std::invalid_argument("scenario must look like A-B(C), got '" + std::string(text) + "'");
  ScenarioSpec s;
  s.base = std::stoi(m[1].str());
  s.total_new = std::stoi(m[2].str());
  s.incremental_stages = std::stoi(m[3].str());
  s.validate();
  return s;
}

std::string ScenarioSpec::name() const {
  return std::to_string(base) + "-" + std::to_string(total_new) + "(" + std::to_string(incremental_stages) + ")";
}

void ScenarioSpec::validate() const {
  if (base < 1) throw std::invalid_argument("base stage needs at least the background category");
  if (total_new < 0 || incremental_stages < 0) throw std::invalid_argument("negative scenario counts");
  if (incremental_stages > 0 && total_new < incremental_stages)
    throw std::invalid_argument("fewer new categories than incremental stages");
  if (incremental_stages == 0 && total_new != 0)
    throw std::invalid_argument("new categories without incremental stages");
  if (total_categories() > kShapeVocabulary)
    throw std::invalid_argument("scenario needs " + std::to_string(total_categories()) +
                                " categories; at most " + std::to_string(kShapeVocabulary) + " supported");
}

std::vector<std::vector<int>> ScenarioSpec::stage_categories() const {
  validate();
  std::vector<std::vector<int>> out;
  std::vector<int> first;
  for (int c = 0; c < base; ++c) first.push_back(c);
  out.push_back(first);
  int next = base;
  for (int s = 0; s < incremental_stages; ++s) {
    const int n = total_new / incremental_stages + (s < total_new % incremental_stages ? 1 : 0);
    std::vector<int> ids;
    for (int k = 0; k < n; ++k) ids.push_back(next++);
    out.push_back(ids);
  }
  return out;
}

CategoryPartition ScenarioSpec::partition(int stage) const {
  const auto cats = stage_categories();
  if (stage < 1 || stage > static_cast<int>(cats.size())) throw std::invalid_argument("stage out of range");
  int prev = 0;
  for (int s = 0; s < stage - 1; ++s) prev += static_cast<int>(cats[static_cast<std::size_t>(s)].size());
  return CategoryPartition::dense(stage, prev, static_cast<int>(cats[static_cast<std::size_t>(stage - 1)].size()));
}

namespace dataset {

Scenario generate_scenario(const ScenarioSpec& spec, const GeneratorConfig& cfg, int threads) {
  spec.validate();
  if (cfg.height < 16 || cfg.width < 16) throw std::invalid_argument("images must be at least 16x16");
  if (cfg.images_per_stage < 1 || cfg.eval_images < 1) throw std::invalid_argument("image counts must be >= 1");
  if (cfg.min_shapes < 1 || cfg.max_shapes < cfg.min_shapes) throw std::invalid_argument("bad shape count range");

  const int num_categories = spec.total_categories();
  const auto cats = spec.stage_categories();
  const Rng root(spec.seed);
  Scenario sc;
  sc.spec = spec;

  for (std::size_t s = 0; s < cats.size(); ++s) {
    StageDataset ds;
    ds.stage = static_cast<int>(s) + 1;
    ds.labeled_categories = cats[s];
    std::vector<int> foreground;
    for (int c : cats[s])
      if (c != 0) foreground.push_back(c);
    ds.samples.resize(static_cast<std::size_t>(cfg.images_per_stage));
    std::vector<std::vector<int>> full(ds.samples.size());
    const Rng stage_rng = root.fork(1000 + s);
    parallel_for(ds.samples.size(), threads, [&](std::size_t i) {
      Rng image_rng = stage_rng.fork(i);
      const int required = foreground.empty()
                               ? -1
                               : foreground[static_cast<std::size_t>(image_rng.below(foreground.size()))];
      // redraw until the required shape survives occlusion
      for (std::uint64_t attempt = 0;; ++attempt) {
        Rendered r = render(image_rng.fork(attempt), cfg, num_categories, required);
        if (required >= 1 && !has_any(r.full_mask, required) && attempt < 64) continue;
        ds.samples[i].image = std::move(r.image);
        ds.samples[i].mask = stage_mask(r.full_mask, ds.labeled_categories);
        full[i] = std::move(r.full_mask);
        break;
      }
    });
    sc.stages.push_back(std::move(ds));
    sc.stage_full_masks.push_back(std::move(full));
  }

  StageDataset eval;
  eval.stage = 0;
  for (int c = 0; c < num_categories; ++c) eval.labeled_categories.push_back(c);
  eval.samples.resize(static_cast<std::size_t>(cfg.eval_images));
  const Rng eval_rng = root.fork(999);
  parallel_for(eval.samples.size(), threads, [&](std::size_t i) {
    // round-robin the guaranteed shape so every category is covered
    const int required = num_categories > 1 ? 1 + static_cast<int>(i % static_cast<std::size_t>(num_categories - 1)) : -1;
    Rng image_rng = eval_rng.fork(i);
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rendered r = render(image_rng.fork(attempt), cfg, num_categories, required);
      if (required >= 1 && !has_any(r.full_mask, required) && attempt < 64) continue;
      eval.samples[i].image = std::move(r.image);
      eval.samples[i].mask = std::move(r.full_mask);
      break;
    }
  });
  sc.evaluation = std::move(eval);
  return sc;
}

std::string serialize(const StageDataset& data) {
  std::ostringstream out(std::ios::binary);
  BinaryWriter w(out);
  w.magic(kDataMagic);
  w.u32(kDataVersion);
  w.i32(data.stage);
  w.u32(static_cast<std::uint32_t>(data.labeled_categories.size()));
  for (int c : data.labeled_categories) w.i32(c);
  w.u32(static_cast<std::uint32_t>(data.samples.size()));
  w.i32(data.height());
  w.i32(data.width());
  for (const auto& s : data.samples) {
    if (s.image.height != data.height() || s.image.width != data.width() || s.image.channels() != 3)
      throw std::invalid_argument("dataset samples must share one 3-channel size");
    for (Eigen::Index c = 0; c < 3; ++c)
      for (Eigen::Index p = 0; p < s.image.data.cols(); ++p) w.f64(s.image.data(c, p));
    for (int v : s.mask) w.i32(v);
  }
  return out.str();
}

void save(const StageDataset& data, const std::filesystem::path& path) {
  const std::string bytes = serialize(data);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

StageDataset load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  BinaryReader r(f);
  r.expect_magic(kDataMagic);
  const auto version = r.u32();
  if (version != kDataVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  StageDataset data;
  data.stage = r.i32();
  const auto ncat = r.u32();
  if (ncat > 4096) throw FormatError("implausible category count");
  for (std::uint32_t i = 0; i < ncat; ++i) data.labeled_categories.push_back(r.i32());
  const auto n = r.u32();
  const int h = r.i32();
  const int w = r.i32();
  if (h < 0 || w < 0 || h > 8192 || w > 8192 || n > (1u << 24)) throw FormatError("implausible dataset header");
  data.samples.resize(n);
  for (auto& s : data.samples) {
    s.image = {h, w, Matrix(3, h * w)};
    for (Eigen::Index c = 0; c < 3; ++c)
      for (Eigen::Index p = 0; p < h * w; ++p) s.image.data(c, p) = r.f64();
    s.mask.resize(static_cast<std::size_t>(h * w));
    for (int& v : s.mask) v = r.i32();
  }
  r.expect_end();
  return data;
}

std::uint64_t checksum(const StageDataset& data) {
  const std::string bytes = serialize(data);
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void dump_ppm(const StageDataset& data, const std::filesystem::path& dir, int limit) {
  std::filesystem::create_directories(dir);
  const int n = std::min<int>(limit, static_cast<int>(data.samples.size()));
  for (int i = 0; i < n; ++i) {
    const auto& s = data.samples[static_cast<std::size_t>(i)];
    const int h = s.image.height, w = s.image.width;
    std::ofstream img(dir / ("image_" + std::to_string(i) + ".ppm"), std::ios::binary);
    img << "P6\n" << w << " " << h << "\n255\n";
    for (int p = 0; p < h * w; ++p)
      for (int c = 0; c < 3; ++c)
        img.put(static_cast<char>(std::lround(std::clamp(s.image.data(c, p), 0.0, 1.0) * 255.0)));
    std::ofstream mask(dir / ("mask_" + std::to_string(i) + ".pgm"), std::ios::binary);
    mask << "P5\n" << w << " " << h << "\n255\n";
    // unlabeled pixels render white, categories as evenly spaced grays
    for (int v : s.mask) mask.put(static_cast<char>(v == kUnlabeled ? 255 : std::min(254, v * 20)));
  }
}

double background_shift_fraction(const Scenario& scenario, int stage) {
  const auto& ds = scenario.stages.at(static_cast<std::size_t>(stage - 1));
  const auto& full = scenario.stage_full_masks.at(static_cast<std::size_t>(stage - 1));
  int shifted = 0;
  for (const auto& m : full) {
    std::set<int> present(m.begin(), m.end());
    for (int c : present)
      if (c != 0 && std::find(ds.labeled_categories.begin(), ds.labeled_categories.end(), c) ==
                        ds.labeled_categories.end()) {
        ++shifted;
        break;
      }
  }
  return full.empty() ? 0.0 : static_cast<double>(shifted) / static_cast<double>(full.size());
}

std::vector<int> evaluation_coverage(const Scenario& scenario) {
  std::vector<int> counts(static_cast<std::size_t>(scenario.spec.total_categories()), 0);
  for (const auto& s : scenario.evaluation.samples) {
    std::set<int> present(s.mask.begin(), s.mask.end());
    for (int c : present)
      if (c >= 0 && c < static_cast<int>(counts.size())) ++counts[static_cast<std::size_t>(c)];
  }
  return counts;
}

}  // namespace dataset
}  // namespace isslab
