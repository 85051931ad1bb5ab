#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "histodistill/augment.hpp"
#include "histodistill/dataset.hpp"
#include "histodistill/models.hpp"
#include "histodistill/rng.hpp"

namespace histodistill::distill {

struct DistillConfig {
  int per_class = 10;      // m
  int outer_steps = 200;   // K: reference-model refreshes
  int inner_steps = 100;   // U: synthetic/model update rounds per refresh
  double lr_syn = 0.05;    // synthetic pixel step
  double syn_momentum = 0.5;
  double lr_model = 0.01;  // inner model step
  double alpha = 0.05;     // perturbation strength
  int real_batch = 64;     // per-class real batch
  std::string distance = "l1";
  aug::AugmentationSpec augment;
  uint64_t seed = 0;

  void validate() const;
};

// Learnable per-class synthetic images; pixels live in [0,1] and carry
// per-pixel momentum state.
struct SyntheticSet {
  std::vector<int> classes;                   // class ids covered
  int per_class = 0;                          // m
  int height = 0, width = 0;
  std::vector<std::vector<double>> images;    // per class: m*3*H*W
  std::vector<std::vector<double>> velocity;  // same shapes
  std::string provenance;
  uint64_t seed = 0;

  int64_t total_images() const { return static_cast<int64_t>(classes.size()) * per_class; }
  void validate() const;
  nn::TrainData to_train_data() const;
};

struct StepRecord {
  int outer = 0;
  int inner = 0;
  int cls = 0;
  double loss = 0.0;
  double wall_s = 0.0;
};

struct RunLog {
  std::vector<StepRecord> steps;
  int skipped_class_steps = 0;
  int skipped_model_updates = 0;

  // Mean matching loss per outer step.
  std::vector<double> per_outer_mean() const;
  void save(const std::filesystem::path& path) const;
  static RunLog load(const std::filesystem::path& path);
};

// Per-class copies of uniformly sampled real records.
SyntheticSet init_synthetic(const data::PatchDataset& ds, int per_class, Rng& rng);

// Sum over parameter arrays of elementwise L1 distance.
double layer_gradient_distance(const std::vector<nn::NamedArray>& a,
                               const std::vector<nn::NamedArray>& b);

struct MatchStats {
  std::vector<int> classes;
  std::vector<double> class_loss;
  int skipped = 0;
};

// One per-class sweep of gradient matching: sample a real batch, apply the
// siamese augmentation to (real, synthetic), match layer-wise cross-entropy
// gradients, and take one momentum step on the synthetic pixels (second-order
// differentiation through the augmented forward and backward). Model
// parameters are never modified.
MatchStats match_step(SyntheticSet& synthetic, const data::PatchDataset& ds,
                      const nn::ModelSnapshot& model, const DistillConfig& cfg, Rng& rng);

// One balanced minibatch cross-entropy step on real data; synthetic pixels
// are never touched. skipped is set when the loss was non-finite.
nn::ModelSnapshot inner_model_update(const nn::ModelSnapshot& model,
                                     const data::PatchDataset& ds, const DistillConfig& cfg,
                                     Rng& rng, bool* skipped = nullptr);

// The full nested loop: K outer refreshes (pick + perturb a pool snapshot),
// each running U rounds of match_step followed by inner_model_update.
std::pair<SyntheticSet, RunLog> run_distillation(const data::PatchDataset& ds,
                                                 const nn::ModelPool& pool,
                                                 const DistillConfig& cfg);

// Directory layout: class{c}_idx{i}.png per image (inspection), images.npy
// float32 dump (authoritative), meta.json (m, classes, seed, provenance,
// config hash).
void save_synthetic(const SyntheticSet& s, const std::filesystem::path& dir,
                    uint64_t config_hash = 0);
SyntheticSet load_synthetic(const std::filesystem::path& dir);
uint64_t synthetic_config_hash(const std::filesystem::path& dir);

}  // namespace histodistill::distill
