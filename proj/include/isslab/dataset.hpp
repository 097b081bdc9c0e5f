#pragma once

#include "isslab/losses.hpp"
#include "isslab/segmodel.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace isslab {

/// Number of distinct foreground shapes the generator can draw.
inline constexpr int kShapeVocabulary = 12;

struct Sample {
  Image image;             // 3 x HW, values in [0, 1]
  std::vector<int> mask;   // HW entries: category id or kUnlabeled
};

struct StageDataset {
  int stage = 0;  // 0 marks the fully labelled evaluation split
  std::vector<int> labeled_categories;
  std::vector<Sample> samples;

  int height() const { return samples.empty() ? 0 : samples.front().image.height; }
  int width() const { return samples.empty() ? 0 : samples.front().image.width; }
  bool operator==(const StageDataset& other) const;
};

/// A-B(C): A base categories (background included), then B new categories
/// spread over C incremental stages.
struct ScenarioSpec {
  int base = 4;
  int total_new = 2;
  int incremental_stages = 1;
  std::uint64_t seed = 0;

  /// Parses "A-B(C)"; throws std::invalid_argument.
  static ScenarioSpec parse(std::string_view text);
  std::string name() const;
  int total_categories() const { return base + total_new; }
  int num_stages() const { return 1 + incremental_stages; }
  /// Category ids introduced at each stage (stage 1 first).  New categories
  /// are split as evenly as possible, earlier stages taking any remainder.
  std::vector<std::vector<int>> stage_categories() const;
  /// Partition seen at stage t (1-based).
  CategoryPartition partition(int stage) const;
  void validate() const;
};

struct GeneratorConfig {
  int images_per_stage = 64;
  int eval_images = 48;
  int height = 48;
  int width = 48;
  double noise_sigma = 0.05;
  int min_shapes = 2;
  int max_shapes = 4;
};

struct Scenario {
  ScenarioSpec spec;
  std::vector<StageDataset> stages;  // stages[t - 1] is stage t
  StageDataset evaluation;           // full labels for every category
  /// Full (all-category) labels of each stage sample, for auditing only.
  std::vector<std::vector<std::vector<int>>> stage_full_masks;
};

namespace dataset {

/// Deterministic in spec.seed; the `threads` count does not change a byte.
Scenario generate_scenario(const ScenarioSpec& spec, const GeneratorConfig& cfg, int threads = 1);

void save(const StageDataset& data, const std::filesystem::path& path);
/// Throws FormatError on bad magic, version mismatch or truncation.
StageDataset load(const std::filesystem::path& path);

/// FNV-1a over the serialised bytes.
std::uint64_t checksum(const StageDataset& data);
std::string serialize(const StageDataset& data);

/// Writes image_<i>.ppm and mask_<i>.pgm for the first `limit` samples.
void dump_ppm(const StageDataset& data, const std::filesystem::path& dir, int limit);

/// Fraction of stage samples that contain a rendered shape of a category
/// outside the stage's labelled set.
double background_shift_fraction(const Scenario& scenario, int stage);

/// Number of evaluation images in which category c occurs.
std::vector<int> evaluation_coverage(const Scenario& scenario);

}  // namespace dataset
}  // namespace isslab
