#include <gtest/gtest.h>

#include "geolab/config.hpp"

using namespace geolab;

namespace {

ErrorKind kind_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::IOError;  // sentinel: no error
}

}  // namespace

TEST(Config, TaskDependentDefaults) {
  const auto rigid = parse_config_text("");
  EXPECT_EQ(rigid.task, Task::Rigid);
  EXPECT_EQ(rigid.batch_size(), 32u);
  EXPECT_EQ(rigid.epoch_count(), 100u);
  EXPECT_EQ(rigid.backbone_kind(), BackboneKind::TinyConv);
  EXPECT_EQ(rigid.data_count(rigid.data), 2000u);
  EXPECT_DOUBLE_EQ(rigid.lr, 1e-4);

  const auto f = parse_config_text("task = fmatrix\n");
  EXPECT_EQ(f.batch_size(), 8u);
  EXPECT_EQ(f.epoch_count(), 200u);
  EXPECT_EQ(f.backbone_kind(), BackboneKind::RandomPatch);
  EXPECT_EQ(f.data_count(f.data), 512u);
  EXPECT_EQ(f.sizes(), (std::vector<std::size_t>{128, 32}));
}

TEST(Config, ParsesEveryKey) {
  const auto c = parse_config_text(R"(
# comment line
task = fmatrix   # trailing comment
seed = 9
precision = float
data.count = 64
data.val_fraction = 0.25
data.image_size = 24
stereo.noise_px = 0.1
stereo.outlier_frac = 0
model.backbone = tiny_conv
model.token_strategy = gap
model.input_combo = orig_trans_hadamard
model.freeze_depth = 2
train.lr = 6e-5
train.batch = 4
train.epochs = 3
train.hparam_grid = true
loss.beta_f = 2.5
sweep.sizes = 16, 8
sweep.replicates = 2
freeze.depths = 0,1
cross.finetune_size = 8
target.stereo.noise_px = 0.3
target.data.seed = 77
)");
  EXPECT_EQ(c.task, Task::FMatrix);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.precision, Precision::Float);
  EXPECT_EQ(c.data_count(c.data), 64u);
  EXPECT_EQ(c.data.image_size, 24u);
  EXPECT_DOUBLE_EQ(c.data.noise_px, 0.1);
  EXPECT_DOUBLE_EQ(c.target.noise_px, 0.3);
  EXPECT_EQ(c.target.image_size, 24u);  // inherited from data.*
  EXPECT_EQ(c.data_seed(c.target), 77u);
  EXPECT_EQ(c.data_seed(c.data), 9u);
  EXPECT_EQ(c.fusion.token_strategy, TokenStrategy::Gap);
  EXPECT_EQ(c.fusion.input_combo, InputCombo::OrigTransHadamard);
  EXPECT_EQ(c.freeze_depth, 2u);
  EXPECT_EQ(c.batch_size(), 4u);
  EXPECT_EQ(c.epoch_count(), 3u);
  EXPECT_TRUE(c.hparam_grid);
  EXPECT_DOUBLE_EQ(c.loss.beta_f, 2.5);
  EXPECT_EQ(c.sizes(), (std::vector<std::size_t>{16, 8}));
  EXPECT_EQ(c.replicates, 2u);
  EXPECT_EQ(c.freeze_depths, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(c.finetune_size, 8u);
}

TEST(Config, RejectsBadInput) {
  EXPECT_EQ(kind_of("unknown.key = 1"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("target.model.backbone = tiny_conv"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("seed = 1\nseed = 2"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("seed"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("seed = -1"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("train.lr = 1e-4x"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("task = stereo"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("data.image_size = 20"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("data.val_fraction = 1"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("sweep.sizes = 32, 128"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("train.batch = 0"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("data.jitter = maybe"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("model.backbone = external"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("data.source = files"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of("seed = 3"), ErrorKind::IOError);
}

TEST(Config, CanonicalHashTracksResolvedValues) {
  const auto a = parse_config_text("");
  const auto b = parse_config_text("# only a comment\ntrain.batch = 32\n");
  EXPECT_EQ(a.canonical(), b.canonical());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), parse_config_text("seed = 2").hash());
  EXPECT_NE(a.hash(), parse_config_text("target.data.jitter = false").hash());
  EXPECT_NE(a.canonical().find("train.epochs=100\n"), std::string::npos);
}
