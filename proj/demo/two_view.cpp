// Walks through the library on one synthetic two-view scene, then trains a
// small F-regression model for a few epochs on stand-in features.
#include <iostream>
#include <random>

#include "geolab/experiment.hpp"

using namespace geolab;

int main() {
  std::mt19937_64 rng(7);
  StereoConfig sc;
  sc.outlier_frac = 0.3;
  sc.noise_px = 0.5;
  const StereoScene scene = gen_stereo_scene(rng, sc);

  const auto ransac = ransac_f(scene.corrs, {2000, 2.0, 7});
  const CorrespondenceSet truth_inliers = [&] {
    CorrespondenceSet out;
    for (std::size_t i = 0; i < scene.corrs.size(); ++i)
      if (!scene.outlier_mask[i]) out.push_back(scene.corrs[i]);
    return out;
  }();
  const double n = double(truth_inliers.size());
  std::cout << "scene: " << scene.corrs.size() << " matches, " << truth_inliers.size() << " true inliers\n"
            << "  mean SED  ground truth " << sed(scene.f, truth_inliers) / n << "\n"
            << "  mean SED  eight-point  " << sed(eight_point(scene.corrs), truth_inliers) / n << "\n"
            << "  mean SED  RANSAC       " << sed(ransac.f, truth_inliers) / n << " (" << ransac.inlier_count
            << " inliers)\n";

  const ExperimentConfig cfg = parse_config_text(
      "task = fmatrix\ndata.count = 96\nmodel.backbone = random_patch\nmodel.token_strategy = gap\n"
      "train.epochs = 8\ntrain.batch = 8\nprecision = float\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  const RunContext ctx{cfg};
  std::cout << "training on " << ds.size() << " scenes\n";
  run_train<float>(ctx, ds, [](const EpochLog& e) {
    std::cout << "  epoch " << e.epoch << "  val loss " << e.val.loss.value_or(NAN) << "  val mean SED "
              << e.val.sed.value_or(NAN) << "\n";
  });
}
