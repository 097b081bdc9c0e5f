#pragma once

#include "isslab/binary_io.hpp"
#include "isslab/numerics.hpp"
#include "isslab/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace isslab {

/// Planar image: row c of `data` is channel c, column y * width + x is a
/// pixel.  Feature and logit fields share the layout.
struct Field {
  int height = 0;
  int width = 0;
  Matrix data;  // channels x (height * width)

  int channels() const { return static_cast<int>(data.rows()); }
  int pixels() const { return height * width; }
};

using Image = Field;         // 3 channels in [0, 1]
using FeatureField = Field;  // D channels, f(p)
using LogitField = Field;    // |C_all| channels, z_c(p)

struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  Matrix weight;  // out x (in * 9), column index = in_channel * 9 + ky * 3 + kx
  Vector bias;    // out
};

struct ModelConfig {
  int height = 48;
  int width = 48;
  int feature_dim = 16;
  int hidden1 = 16;
  int hidden2 = 32;
  bool feature_relu = false;  // ReLU after the last conv layer
  bool classifier_bias = false;
  double new_row_sigma = 1e-3;
};

/// Three 3x3 same-padded conv layers (ReLU between them) produce a D-dim
/// feature per pixel; a linear classifier maps it to |C_all| logits.
struct ModelParams {
  std::vector<ConvLayer> extractor;
  Matrix classifier;  // |C_all| x D, row c is w_c
  Vector classifier_bias;  // empty unless enabled
  int feature_dim = 0;
  int stage = 1;
  bool feature_relu = false;
  /// Bumped on every parameter update; forward caches remember it.
  std::uint64_t version = 0;

  int num_classes() const { return static_cast<int>(classifier.rows()); }
  bool has_bias() const { return classifier_bias.size() > 0; }

  static ModelParams init(const ModelConfig& cfg, int num_classes, Rng& rng);

  /// Bitwise equality of every parameter (ignores `version`).
  bool same_values(const ModelParams& other) const;
  bool same_extractor(const ModelParams& other) const;
};

struct ConvGrad {
  Matrix weight;
  Vector bias;
};

struct ModelGrads {
  std::vector<ConvGrad> extractor;
  Matrix classifier;
  Vector classifier_bias;

  static ModelGrads zeros_like(const ModelParams& params);
  ModelGrads& operator+=(const ModelGrads& other);
  ModelGrads& operator*=(double s);
  bool all_zero() const;
};

/// Activations kept by `forward` for the matching `backward`.
struct ForwardCache {
  std::uint64_t version = 0;
  int height = 0;
  int width = 0;
  std::vector<Matrix> columns;  // im2col of each layer's input
  std::vector<Matrix> pre_activations;
  Matrix features;
};

struct ForwardResult {
  FeatureField features;
  LogitField logits;
  ForwardCache cache;
};

struct FreezeMask {
  bool extractor = false;
  bool classifier = false;
};

namespace segmodel {

/// Throws std::invalid_argument on channel or size mismatch.
ForwardResult forward(const Image& image, const ModelParams& params);

/// Features only; no cache is retained.
FeatureField extract_features(const Image& image, const ModelParams& params);

/// Logits from an existing feature field.
LogitField classify(const FeatureField& features, const ModelParams& params);

/// Parameter gradients given dL/dz per pixel (|C_all| x HW).  Throws
/// std::logic_error when the cache belongs to a different parameter version.
/// With `classifier_only` the extractor gradients are left at zero.
ModelGrads backward(const LogitField& logit_grads, const ForwardCache& cache, const ModelParams& params,
                    bool classifier_only = false);

/// Copies `params` and appends `new_categories` classifier rows drawn from
/// N(0, sigma^2).  Existing rows and the extractor are copied verbatim.
ModelParams extend_classifier(const ModelParams& params, int new_categories, Rng& rng,
                              double sigma = 1e-3);

FreezeMask freeze_flags(const ModelParams& params, bool freeze_extractor, bool freeze_classifier);

/// Versioned little-endian checkpoint.
void save(const ModelParams& params, const std::filesystem::path& path);
ModelParams load(const std::filesystem::path& path);

/// im2col for a 3x3 kernel with zero padding 1.
Matrix im2col(const Matrix& input, int height, int width);
/// Adjoint of im2col.
Matrix col2im(const Matrix& columns, int channels, int height, int width);

}  // namespace segmodel
}  // namespace isslab
