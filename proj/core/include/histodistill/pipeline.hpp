#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "histodistill/augment.hpp"
#include "histodistill/dataset.hpp"
#include "histodistill/distill.hpp"
#include "histodistill/io.hpp"
#include "histodistill/stain.hpp"

namespace histodistill::pipeline {

// ---------------------------------------------------------------------------
// tissue masking and tiling
// ---------------------------------------------------------------------------

struct OtsuResult {
  double threshold = 0.0;
  bool degenerate = false;
};

// Maximizes between-class variance over a 256-bin histogram of [0,1] values;
// ties break to the smallest bin edge. Constant images return the constant
// value with the degenerate flag set.
OtsuResult otsu_threshold(const std::vector<double>& gray);

struct ExtractedPatch {
  std::vector<float> chw;
  int row = 0;
  int col = 0;
};

// Tissue = pixels darker than the Otsu threshold of the grayscale slide.
// Grid tiling at the given stride keeps patches whose tissue fraction is
// strictly greater than tissue_fraction. A degenerate threshold implies an
// all-tissue mask (warned through the flag).
std::vector<ExtractedPatch> extract_patches(const io::Image& slide, int patch_size, int stride,
                                            double tissue_fraction = 0.5,
                                            bool* degenerate_warned = nullptr);

// ---------------------------------------------------------------------------
// toy H&E generator
// ---------------------------------------------------------------------------

// Per-class concentration-field statistics: nuclei-like Gaussian blobs in
// the hematoxylin channel over an eosin background.
struct ToyClassTexture {
  double blob_count_mean = 6.0;
  double blob_count_sd = 2.0;
  double blob_radius_mean = 2.0;
  double blob_radius_sd = 0.4;
  double blob_amp_mean = 0.9;
  double blob_amp_sd = 0.25;
  double eosin_mean = 0.45;
  double eosin_sd = 0.15;
};

struct ToyGenSpec {
  int num_classes = 3;
  int patches_per_class = 1250;
  int image_size = 32;
  std::array<double, 6> stain_matrix;  // row-major 3x2; defaults to H&E reference directions
  std::vector<ToyClassTexture> textures;  // per class; defaults derived when empty
  double noise_level = 0.0;
  // Per-image random rotation of the stain columns, in degrees (stain
  // heterogeneity knob for the normalization ablations).
  double stain_jitter_degrees = 0.0;
  // Slide grouping: 0 means pseudo-slides of contiguous chunks; otherwise
  // slides_per_class x patches_per_slide coherent slides are produced and
  // patches_per_class is ignored.
  int slides_per_class = 0;
  int patches_per_slide = 0;
  double train_fraction = 0.8;
  uint64_t seed = 1;

  ToyGenSpec();
  void validate() const;
};

std::vector<ToyClassTexture> default_textures(int num_classes);

struct ToyCorpus {
  data::PatchDataset train;
  data::PatchDataset test;
  stain::StainProfile profile;  // the exact generator basis
};

// Renders pixels = 10^(-S c) from nonnegative class-conditioned
// concentration fields; stratified train/test split (by slide when slides
// are generated). With noise_level 0 every OD vector lies exactly in the
// stain plane.
ToyCorpus generate_toy_dataset(const ToyGenSpec& spec);

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  std::filesystem::path train_data;
  std::filesystem::path test_data;
  std::filesystem::path output_dir;
  std::filesystem::path stain_profile;  // optional; empty -> fit from train data
  distill::DistillConfig distill;
  std::vector<std::string> aug_ops;  // names; resolved against the profile
  nn::ArchitectureSpec distill_arch;
  std::vector<std::string> eval_archs;
  int pool_size = 5;
  int pool_epochs = 2;
  int eval_epochs = 60;
  std::vector<uint64_t> eval_seeds = {1, 2, 3, 4, 5};
  uint64_t seed = 1;
};

RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_canonical_json(const RunConfig& cfg);
uint64_t run_config_hash(const RunConfig& cfg);

// True when HISTODISTILL_DETERMINISTIC=1: forces single-threaded numerics.
bool deterministic_mode();
void apply_deterministic_mode();

// Contact sheet of a synthetic set (classes as rows), for inspection.
void write_contact_sheet(const distill::SyntheticSet& s, const std::filesystem::path& path);

}  // namespace histodistill::pipeline
