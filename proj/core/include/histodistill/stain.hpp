#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "histodistill/dataset.hpp"
#include "histodistill/tensor.hpp"

namespace histodistill::stain {

// Constants of the conventional stain-separation method. Pixel domain is
// [0,1], so io_intensity defaults to 1.
struct StainConfig {
  double io_intensity = 1.0;
  double od_floor = 1.0 / 255.0;
  double od_beta = 0.15;
  double angle_percentile = 1.0;
  double conc_percentile = 99.0;

  void validate() const;
};

// Stain basis of one template image: two unit-norm nonnegative columns
// (column 0 hematoxylin-like, column 1 eosin-like) and the robust maximum
// concentration per stain.
struct StainProfile {
  std::array<double, 6> stain_matrix{};  // row-major 3x2
  std::array<double, 2> max_concentration{};
  std::string template_ref;
  StainConfig config;

  double at(int row, int col) const { return stain_matrix[static_cast<size_t>(row * 2 + col)]; }
  void validate() const;
  // Column angle against another basis, per column, in degrees.
  std::array<double, 2> column_angles_deg(const std::array<double, 6>& other) const;
};

// Key-value text serialization, value-exact at 17 significant digits.
void save_profile(const StainProfile& p, const std::filesystem::path& path);
StainProfile load_profile(const std::filesystem::path& path);

// Beer-Lambert optical density; elementwise, differentiable above od_floor.
ad::Tensor rgb_to_od(const ad::Tensor& pixels, const StainConfig& cfg);

// Nearest-rank percentile (p in (0,100]).
double percentile_nearest_rank(std::vector<double> values, double p);

// Macenko eigen-plane extreme-angle estimation; offline, not differentiable.
StainProfile estimate_stain_profile(const std::vector<float>& chw_image, int height, int width,
                                    const StainConfig& cfg, const std::string& template_ref = "");
StainProfile estimate_stain_profile(const data::PatchDataset& ds, size_t record_idx,
                                    const StainConfig& cfg);

// Record whose pixel mean/std is closest to the dataset's overall stats.
size_t select_template(const data::PatchDataset& ds);

// Differentiable normalization of a batch against a template profile.
// Deconvolution uses the template basis pseudo-inverse (a fixed matrix
// multiply); per-stain scaling uses a detached nearest-rank robust max.
// Blank images (robust max <= 0) pass through unchanged and increment
// *blank_counter when provided.
data::ImageBatch normalize_to_template(const data::ImageBatch& batch, const StainProfile& tpl,
                                       const StainConfig& cfg, int* blank_counter = nullptr);

struct NormalizeReport {
  int blank_passthrough = 0;
};

// Applies normalize_to_template to every record; labels and grouping are
// preserved.
data::PatchDataset preprocess_normalize_dataset(const data::PatchDataset& ds,
                                                const StainProfile& tpl, const StainConfig& cfg,
                                                NormalizeReport* report = nullptr);

}  // namespace histodistill::stain
