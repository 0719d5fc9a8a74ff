#pragma once

// Network assemblies: a Siamese backbone (or externally supplied feature
// grids), a fusion encoder over the two grids, and a regression head for
// either the rigid task or the fundamental-matrix task.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "geolab/ad/checkpoint.hpp"
#include "geolab/ad/ops.hpp"
#include "geolab/ad/tensor.hpp"
#include "geolab/binary_io.hpp"
#include "geolab/error.hpp"

namespace geolab {

enum class Task { Rigid, FMatrix };
enum class BackboneKind { RandomPatch, TinyConv, External };
enum class TokenStrategy { SpatialConv, SpatialFlat, Gap, ClsOnly };
enum class InputCombo { OrigTrans, TransOnly, OrigTransHadamard, HadamardOnly };

namespace names {

inline constexpr std::string_view task(Task t) { return t == Task::Rigid ? "rigid" : "fmatrix"; }
inline constexpr std::string_view backbone(BackboneKind k) {
  switch (k) {
    case BackboneKind::RandomPatch: return "random_patch";
    case BackboneKind::TinyConv: return "tiny_conv";
    case BackboneKind::External: return "external";
  }
  return "";
}
inline constexpr std::string_view token(TokenStrategy s) {
  switch (s) {
    case TokenStrategy::SpatialConv: return "spatial_conv";
    case TokenStrategy::SpatialFlat: return "spatial_flat";
    case TokenStrategy::Gap: return "gap";
    case TokenStrategy::ClsOnly: return "cls_only";
  }
  return "";
}
inline constexpr std::string_view combo(InputCombo c) {
  switch (c) {
    case InputCombo::OrigTrans: return "orig_trans";
    case InputCombo::TransOnly: return "trans_only";
    case InputCombo::OrigTransHadamard: return "orig_trans_hadamard";
    case InputCombo::HadamardOnly: return "hadamard_only";
  }
  return "";
}

inline Task parse_task(std::string_view s) {
  if (s == "rigid") return Task::Rigid;
  if (s == "fmatrix") return Task::FMatrix;
  throw Error(ErrorKind::ConfigError, "unknown task '" + std::string(s) + "'");
}
inline BackboneKind parse_backbone(std::string_view s) {
  for (auto k : {BackboneKind::RandomPatch, BackboneKind::TinyConv, BackboneKind::External})
    if (backbone(k) == s) return k;
  throw Error(ErrorKind::ConfigError, "unknown backbone '" + std::string(s) + "'");
}
inline TokenStrategy parse_token(std::string_view s) {
  for (auto k : {TokenStrategy::SpatialConv, TokenStrategy::SpatialFlat, TokenStrategy::Gap,
                 TokenStrategy::ClsOnly})
    if (token(k) == s) return k;
  throw Error(ErrorKind::ConfigError, "unknown token strategy '" + std::string(s) + "'");
}
inline InputCombo parse_combo(std::string_view s) {
  for (auto k : {InputCombo::OrigTrans, InputCombo::TransOnly, InputCombo::OrigTransHadamard,
                 InputCombo::HadamardOnly})
    if (combo(k) == s) return k;
  throw Error(ErrorKind::ConfigError, "unknown input combination '" + std::string(s) + "'");
}

}  // namespace names

/// One image's backbone output, channel-major (d, s, s), plus an optional
/// global token for token-based backbones.
struct FeatureGrid {
  std::uint32_t d = 0;
  std::uint32_t s = 0;
  std::vector<float> values;
  std::optional<std::vector<float>> cls;
};

struct FusionConfig {
  TokenStrategy token_strategy = TokenStrategy::SpatialConv;
  InputCombo input_combo = InputCombo::OrigTrans;
};

struct FreezeSpec {
  std::size_t frozen_prefix_depth = 0;
};

inline constexpr std::size_t kPatchSize = 8;
inline constexpr std::size_t kStandinDim = 64;
inline constexpr std::size_t kEncoderWidth1 = 256;
inline constexpr std::size_t kEncoderWidth2 = 512;

struct ModelSpec {
  Task task = Task::Rigid;
  BackboneKind backbone = BackboneKind::TinyConv;
  FusionConfig fusion;
  FreezeSpec freeze;
  std::size_t image_size = 32;     // backbone input side; ignored for External
  std::size_t feature_dim = 64;    // d; derived for stand-in backbones
  std::size_t grid_side = 4;       // s; derived for stand-in backbones
  bool has_cls = false;
  std::uint64_t seed = 1;          // initialization of trainable weights
  std::uint64_t backbone_seed = 0x5eedULL;  // fixed random_patch projection

  /// Number of feature grids the input combination feeds the encoder.
  std::size_t grid_count() const {
    switch (fusion.input_combo) {
      case InputCombo::OrigTrans: return 2;
      case InputCombo::TransOnly: return 1;
      case InputCombo::OrigTransHadamard: return 3;
      case InputCombo::HadamardOnly: return 1;
    }
    return 0;
  }

  std::size_t encoder_output_dim() const {
    const std::size_t k = grid_count();
    switch (fusion.token_strategy) {
      case TokenStrategy::SpatialConv: return 3 * kEncoderWidth2;
      case TokenStrategy::SpatialFlat: return k * feature_dim * grid_side * grid_side;
      case TokenStrategy::Gap:
      case TokenStrategy::ClsOnly: return k * feature_dim;
    }
    return 0;
  }

  /// Fills d and s for stand-in backbones and validates the combination.
  void resolve() {
    if (backbone != BackboneKind::External) {
      if (image_size == 0 || image_size % kPatchSize != 0) {
        throw Error(ErrorKind::ConfigError, "image_size must be a positive multiple of 8");
      }
      feature_dim = kStandinDim;
      grid_side = image_size / kPatchSize;
      has_cls = false;
    }
    if (feature_dim == 0 || grid_side == 0) throw Error(ErrorKind::ConfigError, "empty feature grid");
    if (fusion.token_strategy == TokenStrategy::ClsOnly && !has_cls) {
      throw Error(ErrorKind::ConfigUnsatisfiable, "cls_only requires CLS tokens in the feature source");
    }
  }

  std::string descriptor() const {
    std::ostringstream os;
    os << "task = " << names::task(task) << "\n"
       << "backbone = " << names::backbone(backbone) << "\n"
       << "token_strategy = " << names::token(fusion.token_strategy) << "\n"
       << "input_combo = " << names::combo(fusion.input_combo) << "\n"
       << "freeze_depth = " << freeze.frozen_prefix_depth << "\n"
       << "image_size = " << image_size << "\n"
       << "feature_dim = " << feature_dim << "\n"
       << "grid_side = " << grid_side << "\n"
       << "has_cls = " << (has_cls ? 1 : 0) << "\n"
       << "seed = " << seed << "\n"
       << "backbone_seed = " << backbone_seed << "\n";
    return os.str();
  }

  static ModelSpec from_descriptor(const std::string& text) {
    ModelSpec spec;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      try {
        if (key == "task") spec.task = names::parse_task(value);
        else if (key == "backbone") spec.backbone = names::parse_backbone(value);
        else if (key == "token_strategy") spec.fusion.token_strategy = names::parse_token(value);
        else if (key == "input_combo") spec.fusion.input_combo = names::parse_combo(value);
        else if (key == "freeze_depth") spec.freeze.frozen_prefix_depth = std::stoull(value);
        else if (key == "image_size") spec.image_size = std::stoull(value);
        else if (key == "feature_dim") spec.feature_dim = std::stoull(value);
        else if (key == "grid_side") spec.grid_side = std::stoull(value);
        else if (key == "has_cls") spec.has_cls = value == "1";
        else if (key == "seed") spec.seed = std::stoull(value);
        else if (key == "backbone_seed") spec.backbone_seed = std::stoull(value);
        else throw Error(ErrorKind::FormatError, "unknown descriptor key '" + key + "'");
      } catch (const std::logic_error&) {
        throw Error(ErrorKind::FormatError, "bad descriptor value for '" + key + "'");
      }
    }
    return spec;
  }
};

namespace layers {

template <typename T>
ad::Tensor<T> random_normal(std::mt19937_64& rng, ad::Shape shape, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<T> v(ad::shape_size(shape));
  for (auto& x : v) x = static_cast<T>(n(rng));
  return ad::Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
struct Linear {
  ad::Parameter<T> weight, bias;

  Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, double gain)
      : weight{name + ".weight", random_normal<T>(rng, {out, in}, gain / std::sqrt(double(in)))},
        bias{name + ".bias", ad::Tensor<T>::zeros({out}, true)} {}

  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const { return ad::linear(x, weight.tensor, bias.tensor); }
};

template <typename T>
struct Conv {
  ad::Parameter<T> weight, bias;

  Conv(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng)
      : weight{name + ".weight", random_normal<T>(rng, {out, in, 3, 3}, std::sqrt(2.0 / (9.0 * in)))},
        bias{name + ".bias", ad::Tensor<T>::zeros({out}, true)} {}

  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const { return ad::conv3x3(x, weight.tensor, bias.tensor); }
};

template <typename T>
struct BatchNorm {
  ad::Parameter<T> gamma, beta;
  ad::Buffer<T> running_mean, running_var;
  bool use_running_stats = false;  // set while the owning stage is frozen

  BatchNorm(const std::string& name, std::size_t ch)
      : gamma{name + ".gamma", ad::Tensor<T>::from({ch}, std::vector<T>(ch, T(1)), true)},
        beta{name + ".beta", ad::Tensor<T>::zeros({ch}, true)},
        running_mean{name + ".running_mean", std::vector<T>(ch, T(0))},
        running_var{name + ".running_var", std::vector<T>(ch, T(1))} {}

  ad::Tensor<T> operator()(const ad::Tensor<T>& x, bool training) {
    return ad::batchnorm(x, gamma.tensor, beta.tensor, running_mean.values, running_var.values,
                         training && !use_running_stats);
  }
};

}  // namespace layers

/// Per-sample network input: either two images (B, 1, H, W) for stand-in
/// backbones or two feature-grid batches (B, d, s, s) with optional CLS (B, d).
template <typename T>
struct FeatureBatch {
  ad::Tensor<T> grid_a, grid_b;
  ad::Tensor<T> cls_a, cls_b;
};

template <typename T>
class Model {
 public:
  /// A freezable group of parameters, bottom-up.
  struct Stage {
    std::string name;
    std::vector<ad::Parameter<T>*> params;
    std::vector<layers::BatchNorm<T>*> norms;
  };

  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.resolve();
    std::mt19937_64 rng(spec_.seed);
    const std::size_t d = spec_.feature_dim;

    if (spec_.backbone == BackboneKind::RandomPatch) {
      std::mt19937_64 fixed(spec_.backbone_seed);
      projection_ = std::make_unique<ad::Parameter<T>>(ad::Parameter<T>{
          "backbone.projection",
          layers::random_normal<T>(fixed, {kStandinDim, kPatchSize * kPatchSize}, 1.0 / kPatchSize)});
      projection_->set_frozen(true);
    } else if (spec_.backbone == BackboneKind::TinyConv) {
      const std::size_t widths[4] = {1, 16, 32, kStandinDim};
      for (int i = 0; i < 3; ++i) {
        tiny_.push_back(std::make_unique<layers::Conv<T>>("backbone.conv" + std::to_string(i + 1),
                                                          widths[i], widths[i + 1], rng));
      }
    }

    if (spec_.fusion.token_strategy == TokenStrategy::SpatialConv) {
      const std::size_t in = spec_.grid_count() * d;
      enc_conv1_ = std::make_unique<layers::Conv<T>>("encoder.conv1", in, kEncoderWidth1, rng);
      enc_bn1_ = std::make_unique<layers::BatchNorm<T>>("encoder.bn1", kEncoderWidth1);
      enc_conv2_ = std::make_unique<layers::Conv<T>>("encoder.conv2", kEncoderWidth1, kEncoderWidth2, rng);
      enc_bn2_ = std::make_unique<layers::BatchNorm<T>>("encoder.bn2", kEncoderWidth2);
    }

    const std::size_t feat = spec_.encoder_output_dim();
    const double he = std::sqrt(2.0);
    if (spec_.task == Task::Rigid) {
      head_.push_back(std::make_unique<layers::Linear<T>>("head.fc1", feat, 512, rng, he));
      head_.push_back(std::make_unique<layers::Linear<T>>("head.fc2", 512, 1024, rng, he));
      head_.push_back(std::make_unique<layers::Linear<T>>("head.out", 1024, 3, rng, 1.0));
    } else {
      head_.push_back(std::make_unique<layers::Linear<T>>("head.fc1", feat, 1024, rng, he));
      head_.push_back(std::make_unique<layers::Linear<T>>("head.fc2", 1024, 512, rng, he));
      head_.push_back(std::make_unique<layers::Linear<T>>("head.out", 512, 8, rng, 1.0));
    }

    for (auto& c : tiny_) stages_.push_back({"backbone." + c->weight.name.substr(9, 5), {&c->weight, &c->bias}, {}});
    if (enc_conv1_) {
      stages_.push_back({"encoder.stage1",
                         {&enc_conv1_->weight, &enc_conv1_->bias, &enc_bn1_->gamma, &enc_bn1_->beta},
                         {enc_bn1_.get()}});
      stages_.push_back({"encoder.stage2",
                         {&enc_conv2_->weight, &enc_conv2_->bias, &enc_bn2_->gamma, &enc_bn2_->beta},
                         {enc_bn2_.get()}});
    }
    apply_freeze(spec_.freeze);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Stage>& stages() const { return stages_; }
  std::size_t stage_count() const { return stages_.size(); }

  /// Freezes the bottom `depth` encoder stages and unfreezes the rest; the
  /// head always stays trainable. Frozen batchnorm layers switch to their
  /// running statistics so the stage is a fixed function.
  void apply_freeze(FreezeSpec freeze) {
    if (freeze.frozen_prefix_depth > stages_.size()) {
      throw Error(ErrorKind::DepthOutOfRange, "freeze depth " + std::to_string(freeze.frozen_prefix_depth) +
                                                  " exceeds " + std::to_string(stages_.size()) + " stages");
    }
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const bool frozen = i < freeze.frozen_prefix_depth;
      for (auto* p : stages_[i].params) p->set_frozen(frozen);
      for (auto* n : stages_[i].norms) n->use_running_stats = frozen;
    }
    for (auto& l : head_) {
      l->weight.set_frozen(false);
      l->bias.set_frozen(false);
    }
    spec_.freeze = freeze;
  }

  std::vector<ad::Parameter<T>*> parameters() {
    std::vector<ad::Parameter<T>*> out;
    if (projection_) out.push_back(projection_.get());
    for (auto& s : stages_)
      for (auto* p : s.params) out.push_back(p);
    for (auto* p : head_parameters()) out.push_back(p);
    return out;
  }

  std::vector<ad::Parameter<T>*> head_parameters() {
    std::vector<ad::Parameter<T>*> out;
    for (auto& l : head_) {
      out.push_back(&l->weight);
      out.push_back(&l->bias);
    }
    return out;
  }

  std::vector<ad::Buffer<T>*> buffers() {
    std::vector<ad::Buffer<T>*> out;
    for (auto* bn : {enc_bn1_.get(), enc_bn2_.get()}) {
      if (!bn) continue;
      out.push_back(&bn->running_mean);
      out.push_back(&bn->running_var);
    }
    return out;
  }

  std::size_t trainable_parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters())
      if (!p->frozen) n += p->tensor.size();
    return n;
  }

  /// Backbone for one image batch (B, 1, H, W) -> (B, d, s, s).
  ad::Tensor<T> backbone(const ad::Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != spec_.image_size ||
        images.dim(3) != spec_.image_size) {
      throw Error(ErrorKind::ShapeMismatch, "backbone expects (B, 1, " + std::to_string(spec_.image_size) +
                                                ", " + std::to_string(spec_.image_size) + "), got " +
                                                ad::shape_string(images.shape()));
    }
    switch (spec_.backbone) {
      case BackboneKind::RandomPatch:
        return ad::patch_embed(images, projection_->tensor, kPatchSize);
      case BackboneKind::TinyConv: {
        ad::Tensor<T> x = images;
        for (auto& c : tiny_) x = ad::max_pool2x2(ad::relu((*c)(x)));
        return x;
      }
      case BackboneKind::External:
        break;
    }
    throw Error(ErrorKind::ConfigError, "external-feature model has no backbone");
  }

  FeatureBatch<T> extract(const ad::Tensor<T>& images_a, const ad::Tensor<T>& images_b) const {
    return {backbone(images_a), backbone(images_b), {}, {}};
  }

  /// Fusion encoder: combines the two grids per the input combination and
  /// reduces them per the token strategy to a flat (B, F) feature.
  ad::Tensor<T> encode(const FeatureBatch<T>& in, bool training) {
    const auto& s = in.grid_a.shape();
    if (s.size() != 4 || s != in.grid_b.shape() || s[1] != spec_.feature_dim || s[2] != spec_.grid_side ||
        s[3] != spec_.grid_side) {
      throw Error(ErrorKind::ShapeMismatch, "encoder expects two (B, " + std::to_string(spec_.feature_dim) +
                                                ", " + std::to_string(spec_.grid_side) + ", " +
                                                std::to_string(spec_.grid_side) + ") grids");
    }
    auto combine = [&](const ad::Tensor<T>& a, const ad::Tensor<T>& b) -> std::vector<ad::Tensor<T>> {
      switch (spec_.fusion.input_combo) {
        case InputCombo::OrigTrans: return {a, b};
        case InputCombo::TransOnly: return {b};
        case InputCombo::OrigTransHadamard: return {a, b, ad::hadamard(a, b)};
        case InputCombo::HadamardOnly: return {ad::hadamard(a, b)};
      }
      return {};
    };
    switch (spec_.fusion.token_strategy) {
      case TokenStrategy::SpatialConv: {
        ad::Tensor<T> x = ad::concat_depth(combine(in.grid_a, in.grid_b));
        x = (*enc_bn1_)(ad::relu((*enc_conv1_)(x)), training);
        x = (*enc_bn2_)(ad::relu((*enc_conv2_)(x)), training);
        return ad::location_aware_max_pool(x);
      }
      case TokenStrategy::SpatialFlat:
        return ad::flatten(ad::concat_depth(combine(in.grid_a, in.grid_b)));
      case TokenStrategy::Gap: {
        std::vector<ad::Tensor<T>> pooled;
        for (const auto& g : combine(in.grid_a, in.grid_b)) pooled.push_back(ad::spatial_mean(g));
        return ad::concat_depth(pooled);
      }
      case TokenStrategy::ClsOnly:
        if (!in.cls_a.defined() || !in.cls_b.defined()) {
          throw Error(ErrorKind::ConfigUnsatisfiable, "cls_only requested but CLS tokens are absent");
        }
        return ad::concat_depth(combine(in.cls_a, in.cls_b));
    }
    throw Error(ErrorKind::ConfigError, "unknown token strategy");
  }

  /// Rigid: (B, 3) in (-1, 1) ordered (angle, shift_x, shift_y).
  /// F: (B, 3, 3), rank 2 and unit Frobenius norm unless the eps guard fired.
  ad::Tensor<T> head(const ad::Tensor<T>& f) const {
    if (f.rank() != 2 || f.dim(1) != spec_.encoder_output_dim()) {
      throw Error(ErrorKind::ShapeMismatch, "head expects (B, " + std::to_string(spec_.encoder_output_dim()) +
                                                "), got " + ad::shape_string(f.shape()));
    }
    ad::Tensor<T> x = ad::relu((*head_[0])(f));
    x = ad::relu((*head_[1])(x));
    x = (*head_[2])(x);
    if (spec_.task == Task::Rigid) return ad::tanh(x);
    return ad::frobenius_normalize(ad::rank_constraint(x));
  }

  ad::Tensor<T> forward(const FeatureBatch<T>& in, bool training) { return head(encode(in, training)); }

  // -- persistence --------------------------------------------------------

  ad::Checkpoint to_checkpoint() {
    ad::Checkpoint c;
    for (auto* p : parameters()) {
      c.entries.push_back({p->name, p->frozen, p->tensor.shape(),
                           std::vector<double>(p->tensor.values().begin(), p->tensor.values().end())});
    }
    for (auto* b : buffers()) {
      c.entries.push_back({b->name, true, {b->values.size()}, std::vector<double>(b->values.begin(), b->values.end())});
    }
    c.descriptor = spec_.descriptor();
    return c;
  }

  void load(const ad::Checkpoint& c) {
    auto fetch = [&](const std::string& name, const ad::Shape& shape) -> const ad::CheckpointEntry& {
      const ad::CheckpointEntry* e = c.find(name);
      if (!e) throw Error(ErrorKind::FormatError, "checkpoint lacks '" + name + "'");
      if (e->shape != shape) {
        throw Error(ErrorKind::ShapeError, "checkpoint '" + name + "' has shape " + ad::shape_string(e->shape) +
                                               ", model expects " + ad::shape_string(shape));
      }
      return *e;
    };
    for (auto* p : parameters()) {
      const auto& e = fetch(p->name, p->tensor.shape());
      for (std::size_t i = 0; i < e.values.size(); ++i) p->tensor.values()[i] = static_cast<T>(e.values[i]);
    }
    for (auto* b : buffers()) {
      const auto& e = fetch(b->name, {b->values.size()});
      for (std::size_t i = 0; i < e.values.size(); ++i) b->values[i] = static_cast<T>(e.values[i]);
    }
  }

  static std::unique_ptr<Model> from_checkpoint(const ad::Checkpoint& c) {
    auto m = std::make_unique<Model>(ModelSpec::from_descriptor(c.descriptor));
    m->load(c);
    return m;
  }

  /// FNV-1a over names and values of the selected parameters (as stored in a
  /// checkpoint, i.e. widened to double).
  template <typename Pred>
  std::uint64_t checksum(Pred select) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto* p : parameters()) {
      if (!select(*p)) continue;
      h = binary::fnv1a(p->name.data(), p->name.size(), h);
      for (T v : p->tensor.values()) {
        const double d = static_cast<double>(v);
        h = binary::fnv1a(&d, sizeof d, h);
      }
    }
    return h;
  }

 private:
  ModelSpec spec_;
  std::unique_ptr<ad::Parameter<T>> projection_;
  std::vector<std::unique_ptr<layers::Conv<T>>> tiny_;
  std::unique_ptr<layers::Conv<T>> enc_conv1_, enc_conv2_;
  std::unique_ptr<layers::BatchNorm<T>> enc_bn1_, enc_bn2_;
  std::vector<std::unique_ptr<layers::Linear<T>>> head_;
  std::vector<Stage> stages_;
};

}  // namespace geolab
