#pragma once

// The 8-image, 2-class overfit run shared by the training tests and the
// acceptance suite.

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "lcbm/concept_catalog.hpp"
#include "lcbm/losses.hpp"
#include "lcbm/patch_embedding.hpp"
#include "lcbm/synthetic.hpp"
#include "lcbm/training.hpp"

namespace lcbm::testing {

// Non-overlapping patches aligned with the fixture backbone's cells.
inline std::vector<Sample> scored_samples(const std::vector<SyntheticItem>& items,
                                          std::size_t concepts_for_classes,
                                          EmbeddingOracle& oracle, std::size_t grid_side = 3) {
  std::vector<Concept> concepts;
  for (const auto& text : synthetic_concepts(concepts_for_classes))
    concepts.push_back({concepts.size(), text, std::nullopt, std::nullopt});
  const Tensor text = embed_concepts(ConceptSet(concepts, {}), oracle);
  const auto grid = build_patch_grid(24, grid_side, grid_side, 24 / grid_side);
  std::vector<Sample> out;
  for (const auto& it : items)
    out.push_back({it.id, it.image, compute_scores(embed_patches(it.image, grid, oracle), text),
                   it.label});
  return out;
}

inline std::vector<Sample> hash_scored_samples(const std::vector<SyntheticItem>& items,
                                               std::size_t concepts_for_classes) {
  HashOracle oracle(32);
  return scored_samples(items, concepts_for_classes, oracle);
}

inline std::vector<Sample> palette_scored_samples(const std::vector<SyntheticItem>& items,
                                                  std::size_t concepts_for_classes,
                                                  std::size_t grid_side = 3) {
  PaletteOracle oracle(32);
  return scored_samples(items, concepts_for_classes, oracle, grid_side);
}

inline double mean_locality(const LcbmModel& model, const std::vector<Sample>& data) {
  double s = 0;
  for (const auto& d : data)
    s += compute_losses(model.forward(d.image, d.scores), d.label, model.config()).locality.value()[0];
  return s / static_cast<double>(data.size());
}

struct SmokeResult {
  double initial_locality = 0, final_locality = 0;
  double train_accuracy = 0;  // best over the run; validation runs on the training set
  double last_accuracy = 0;
  std::size_t steps = 0;
  TrainState state;
};

struct SmokeOptions {
  std::uint64_t seed = 1;
  std::size_t k1 = 2, k2 = 2;
  double alpha = 0.5, beta = 0.1;
  double learning_rate = 1e-2;
  std::size_t batch_size = 4;
  std::size_t grid_side = 3;
  std::size_t width = 8;
  std::size_t steps = 200;
};

inline SmokeResult run_overfit_smoke(const SmokeOptions& o = {}) {
  const std::uint64_t seed = o.seed;
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 4;
  spec.seed = seed;
  const auto data = palette_scored_samples(generate_synthetic(spec), 2, o.grid_side);
  auto bb = BackboneSpec::fixture();
  const std::size_t k = 6 / o.grid_side;
  bb.layers[1] = {o.width, k, k, 0, false};
  auto mc = config_for(bb, 4, 2, o.k1, o.k2);
  mc.alpha = o.alpha;
  mc.beta = o.beta;
  LcbmModel model(mc, bb, seed);
  TrainConfig cfg;
  cfg.learning_rate = o.learning_rate;
  cfg.batch_size = o.batch_size;
  cfg.max_steps = o.steps;
  cfg.max_epochs = o.steps;
  cfg.patience = 1000;
  cfg.seed = seed;
  SmokeResult r;
  r.initial_locality = mean_locality(model, data);
  // train() hands back the best-validation snapshot; the locality drop is
  // measured on the parameters training ended with.
  const auto dir = std::filesystem::temp_directory_path() /
                   ("lcbm_smoke_" + std::to_string(seed) + "_" + std::to_string(::getpid()));
  TrainOptions opts;
  opts.out_dir = dir;
  r.state = train(model, data, data, cfg, opts);
  r.steps = r.state.step;
  const auto last = load_checkpoint(dir / "last.ckpt").model;
  std::filesystem::remove_all(dir);
  r.final_locality = mean_locality(last, data);
  r.train_accuracy = r.state.best_val_accuracy;
  r.last_accuracy = validate(last, data);
  return r;
}

}  // namespace lcbm::testing
