#include "isslab/segmodel.hpp"

#include "isslab/binary_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace isslab {

namespace {

constexpr std::string_view kModelMagic = "ISSMODEL";
constexpr std::uint32_t kModelVersion = 1;

bool layer_has_relu(const ModelParams& params, std::size_t layer) {
  return layer + 1 < params.extractor.size() || params.feature_relu;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool bitwise_equal(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return false;
  return a.size() == 0 ||
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

void write_matrix(BinaryWriter& w, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
}

void read_matrix(BinaryReader& r, Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, int num_classes, Rng& rng) {
  if (num_classes < 1) throw std::invalid_argument("model needs at least one class");
  ModelParams p;
  p.feature_dim = cfg.feature_dim;
  p.feature_relu = cfg.feature_relu;
  const int channels[] = {3, cfg.hidden1, cfg.hidden2, cfg.feature_dim};
  for (int l = 0; l < 3; ++l) {
    ConvLayer layer;
    layer.in_channels = channels[l];
    layer.out_channels = channels[l + 1];
    const int fan_in = layer.in_channels * 9;
    const double std_dev = std::sqrt(2.0 / fan_in);
    layer.weight.resize(layer.out_channels, fan_in);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = rng.normal(0.0, std_dev);
    layer.bias = Vector::Zero(layer.out_channels);
    p.extractor.push_back(std::move(layer));
  }
  p.classifier.resize(num_classes, cfg.feature_dim);
  const double cls_std = std::sqrt(1.0 / cfg.feature_dim);
  for (Eigen::Index i = 0; i < p.classifier.size(); ++i) p.classifier.data()[i] = rng.normal(0.0, cls_std);
  if (cfg.classifier_bias) p.classifier_bias = Vector::Zero(num_classes);
  return p;
}

bool ModelParams::same_extractor(const ModelParams& other) const {
  if (extractor.size() != other.extractor.size()) return false;
  for (std::size_t l = 0; l < extractor.size(); ++l)
    if (!bitwise_equal(extractor[l].weight, other.extractor[l].weight) ||
        !bitwise_equal(extractor[l].bias, other.extractor[l].bias))
      return false;
  return true;
}

bool ModelParams::same_values(const ModelParams& other) const {
  return same_extractor(other) && bitwise_equal(classifier, other.classifier) &&
         bitwise_equal(classifier_bias, other.classifier_bias) && feature_dim == other.feature_dim &&
         stage == other.stage;
}

ModelGrads ModelGrads::zeros_like(const ModelParams& params) {
  ModelGrads g;
  for (const auto& layer : params.extractor)
    g.extractor.push_back({Matrix::Zero(layer.weight.rows(), layer.weight.cols()),
                           Vector::Zero(layer.bias.size())});
  g.classifier = Matrix::Zero(params.classifier.rows(), params.classifier.cols());
  g.classifier_bias = Vector::Zero(params.classifier_bias.size());
  return g;
}

ModelGrads& ModelGrads::operator+=(const ModelGrads& other) {
  for (std::size_t l = 0; l < extractor.size(); ++l) {
    extractor[l].weight += other.extractor[l].weight;
    extractor[l].bias += other.extractor[l].bias;
  }
  classifier += other.classifier;
  if (classifier_bias.size() > 0) classifier_bias += other.classifier_bias;
  return *this;
}

ModelGrads& ModelGrads::operator*=(double s) {
  for (auto& layer : extractor) {
    layer.weight *= s;
    layer.bias *= s;
  }
  classifier *= s;
  classifier_bias *= s;
  return *this;
}

bool ModelGrads::all_zero() const {
  for (const auto& layer : extractor)
    if (!layer.weight.isZero(0.0) || !layer.bias.isZero(0.0)) return false;
  return classifier.isZero(0.0) && (classifier_bias.size() == 0 || classifier_bias.isZero(0.0));
}

namespace segmodel {

Matrix im2col(const Matrix& input, int height, int width) {
  const Eigen::Index channels = input.rows();
  const int pixels = height * width;
  Matrix cols = Matrix::Zero(channels * 9, pixels);
  const double* in = input.data();
  double* out = cols.data();
  const Eigen::Index out_stride = cols.rows();
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double* dst = out + (y * width + x) * out_stride;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= width) continue;
          const double* src = in + (sy * width + sx) * channels;
          const int k = ky * 3 + kx;
          for (Eigen::Index c = 0; c < channels; ++c) dst[c * 9 + k] = src[c];
        }
      }
    }
  return cols;
}

Matrix col2im(const Matrix& columns, int channels, int height, int width) {
  Matrix out = Matrix::Zero(channels, height * width);
  const double* src_base = columns.data();
  double* dst_base = out.data();
  const Eigen::Index col_stride = columns.rows();
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double* src = src_base + (y * width + x) * col_stride;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= width) continue;
          double* dst = dst_base + (sy * width + sx) * channels;
          const int k = ky * 3 + kx;
          for (int c = 0; c < channels; ++c) dst[c] += src[c * 9 + k];
        }
      }
    }
  return out;
}

namespace {

void check_image(const Image& image, const ModelParams& params) {
  if (params.extractor.empty()) throw std::invalid_argument("model has no extractor");
  if (image.channels() != params.extractor.front().in_channels)
    throw std::invalid_argument("image has " + std::to_string(image.channels()) + " channels, model expects " +
                                std::to_string(params.extractor.front().in_channels));
  if (image.data.cols() != image.pixels() || image.height <= 0 || image.width <= 0)
    throw std::invalid_argument("image dimensions do not match its pixel buffer");
}

}  // namespace

ForwardResult forward(const Image& image, const ModelParams& params) {
  check_image(image, params);
  ForwardResult out;
  ForwardCache& cache = out.cache;
  cache.version = params.version;
  cache.height = image.height;
  cache.width = image.width;
  Matrix act = image.data;
  for (std::size_t l = 0; l < params.extractor.size(); ++l) {
    const auto& layer = params.extractor[l];
    cache.columns.push_back(im2col(act, image.height, image.width));
    Matrix pre = layer.weight * cache.columns.back();
    pre.colwise() += layer.bias;
    act = layer_has_relu(params, l) ? Matrix(pre.cwiseMax(0.0)) : pre;
    cache.pre_activations.push_back(std::move(pre));
  }
  cache.features = act;
  out.features = {image.height, image.width, act};
  out.logits = classify(out.features, params);
  return out;
}

FeatureField extract_features(const Image& image, const ModelParams& params) {
  check_image(image, params);
  Matrix act = image.data;
  for (std::size_t l = 0; l < params.extractor.size(); ++l) {
    const auto& layer = params.extractor[l];
    Matrix pre = layer.weight * im2col(act, image.height, image.width);
    pre.colwise() += layer.bias;
    act = layer_has_relu(params, l) ? Matrix(pre.cwiseMax(0.0)) : std::move(pre);
  }
  return {image.height, image.width, std::move(act)};
}

LogitField classify(const FeatureField& features, const ModelParams& params) {
  if (features.channels() != params.feature_dim)
    throw std::invalid_argument("feature dimension mismatch");
  Matrix logits = params.classifier * features.data;
  if (params.has_bias()) logits.colwise() += params.classifier_bias;
  return {features.height, features.width, std::move(logits)};
}

ModelGrads backward(const LogitField& logit_grads, const ForwardCache& cache, const ModelParams& params,
                    bool classifier_only) {
  if (cache.version != params.version) throw std::logic_error("stale forward cache");
  if (logit_grads.data.rows() != params.num_classes() || logit_grads.data.cols() != cache.features.cols())
    throw std::invalid_argument("logit gradient shape mismatch");
  ModelGrads g = ModelGrads::zeros_like(params);
  const Matrix& dz = logit_grads.data;
  g.classifier.noalias() = dz * cache.features.transpose();
  if (params.has_bias()) g.classifier_bias = dz.rowwise().sum();
  if (classifier_only) return g;

  Matrix d_act = params.classifier.transpose() * dz;
  for (std::size_t l = params.extractor.size(); l-- > 0;) {
    const auto& layer = params.extractor[l];
    if (layer_has_relu(params, l))
      d_act = (cache.pre_activations[l].array() > 0.0).select(d_act, 0.0);
    g.extractor[l].weight.noalias() = d_act * cache.columns[l].transpose();
    g.extractor[l].bias = d_act.rowwise().sum();
    if (l > 0) {
      const Matrix d_cols = layer.weight.transpose() * d_act;
      d_act = col2im(d_cols, layer.in_channels, cache.height, cache.width);
    }
  }
  return g;
}

ModelParams extend_classifier(const ModelParams& params, int new_categories, Rng& rng, double sigma) {
  if (new_categories < 0) throw std::invalid_argument("negative category count");
  ModelParams out = params;
  if (new_categories == 0) return out;
  const Eigen::Index old_rows = params.classifier.rows();
  out.classifier.conservativeResize(old_rows + new_categories, Eigen::NoChange);
  for (Eigen::Index i = old_rows; i < out.classifier.rows(); ++i)
    for (Eigen::Index j = 0; j < out.classifier.cols(); ++j) out.classifier(i, j) = rng.normal(0.0, sigma);
  if (params.has_bias()) {
    out.classifier_bias.conservativeResize(old_rows + new_categories);
    out.classifier_bias.tail(new_categories).setZero();
  }
  out.stage = params.stage + 1;
  ++out.version;
  return out;
}

FreezeMask freeze_flags(const ModelParams&, bool freeze_extractor, bool freeze_classifier) {
  return FreezeMask{freeze_extractor, freeze_classifier};
}

void save(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  BinaryWriter w(f);
  w.magic(kModelMagic);
  w.u32(kModelVersion);
  w.i32(params.stage);
  w.i32(params.feature_dim);
  w.u8(params.feature_relu ? 1 : 0);
  w.i32(static_cast<std::int32_t>(params.extractor.size()));
  for (const auto& layer : params.extractor) {
    w.i32(layer.in_channels);
    w.i32(layer.out_channels);
  }
  w.i32(params.num_classes());
  w.u8(params.has_bias() ? 1 : 0);
  for (const auto& layer : params.extractor) {
    write_matrix(w, layer.weight);
    w.f64s({layer.bias.data(), static_cast<std::size_t>(layer.bias.size())});
  }
  write_matrix(w, params.classifier);
  if (params.has_bias())
    w.f64s({params.classifier_bias.data(), static_cast<std::size_t>(params.classifier_bias.size())});
  w.check();
}

ModelParams load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  BinaryReader r(f);
  r.expect_magic(kModelMagic);
  const auto version = r.u32();
  if (version != kModelVersion) throw FormatError("unsupported model version " + std::to_string(version));
  ModelParams p;
  p.stage = r.i32();
  p.feature_dim = r.i32();
  p.feature_relu = r.u8() != 0;
  const int layers = r.i32();
  if (layers < 1 || layers > 16) throw FormatError("implausible layer count");
  for (int l = 0; l < layers; ++l) {
    ConvLayer layer;
    layer.in_channels = r.i32();
    layer.out_channels = r.i32();
    if (layer.in_channels < 1 || layer.out_channels < 1 || layer.in_channels > 4096 || layer.out_channels > 4096)
      throw FormatError("implausible channel count");
    p.extractor.push_back(std::move(layer));
  }
  const int classes = r.i32();
  if (classes < 1 || classes > 4096 || p.feature_dim < 1 || p.feature_dim > 4096)
    throw FormatError("implausible classifier shape");
  const bool bias = r.u8() != 0;
  for (auto& layer : p.extractor) {
    layer.weight.resize(layer.out_channels, layer.in_channels * 9);
    layer.bias.resize(layer.out_channels);
    read_matrix(r, layer.weight);
    r.f64s({layer.bias.data(), static_cast<std::size_t>(layer.bias.size())});
  }
  p.classifier.resize(classes, p.feature_dim);
  read_matrix(r, p.classifier);
  if (bias) {
    p.classifier_bias.resize(classes);
    r.f64s({p.classifier_bias.data(), static_cast<std::size_t>(classes)});
  }
  r.expect_end();
  return p;
}

}  // namespace segmodel
}  // namespace isslab
