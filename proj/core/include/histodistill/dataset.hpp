#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "histodistill/rng.hpp"
#include "histodistill/tensor.hpp"

namespace histodistill::data {

struct PatchRecord {
  std::string image_ref;  // source path or "inline:<id>"
  int label = 0;
  std::string slide_id;
};

// One labeled training batch in model layout (B x 3 x H x W, doubles).
struct ImageBatch {
  ad::Tensor pixels;
  std::vector<int> labels;

  int64_t size() const { return pixels.defined() ? pixels.dim(0) : 0; }
};

// Immutable after construction; pixel payload is float32 in [0,1], CHW.
class PatchDataset {
 public:
  PatchDataset() = default;

  // strict_classes demands every class 0..C-1 nonempty (the manifest
  // contract); slide-restricted views constructed by subset() relax it.
  static PatchDataset build(int num_classes, std::array<int, 3> image_shape_hw3,
                            std::vector<PatchRecord> records,
                            std::vector<std::vector<float>> pixels, bool strict_classes = true);

  int num_classes() const { return num_classes_; }
  const std::array<int, 3>& image_shape() const { return image_shape_; }  // (H, W, 3)
  int height() const { return image_shape_[0]; }
  int width() const { return image_shape_[1]; }
  size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  const PatchRecord& record(size_t i) const { return records_[i]; }
  const std::vector<float>& pixels(size_t i) const { return pixels_[i]; }
  std::vector<float>& mutable_pixels(size_t i) { return pixels_[i]; }

  const std::vector<int>& class_records(int c) const;
  const std::map<std::string, std::vector<int>>& slide_index() const { return slide_index_; }
  std::vector<std::string> slide_ids() const;
  // Classes that actually hold records (all of 0..C-1 for strict datasets).
  std::vector<int> present_classes() const;

  // Restriction to a subset of records; grouping is recomputed, the class
  // count and image shape are inherited.
  PatchDataset subset(const std::vector<int>& record_indices) const;
  PatchDataset subset_by_slide(const std::string& slide_id) const;

 private:
  int num_classes_ = 0;
  std::array<int, 3> image_shape_{0, 0, 3};
  std::vector<PatchRecord> records_;
  std::vector<std::vector<float>> pixels_;
  std::vector<std::vector<int>> class_index_;
  std::map<std::string, std::vector<int>> slide_index_;
};

// Manifest round trip. Layout on disk:
//   <dir>/manifest.csv   header image_path,label,slide_id
//   <dir>/meta.json      num_classes, image_shape
//   <dir>/images/*.png   lossless 8-bit patches
PatchDataset load_manifest(const std::filesystem::path& dir);
void save_manifest(const PatchDataset& ds, const std::filesystem::path& dir);

// batch_size records of the given class: without replacement when the class
// is large enough, with replacement otherwise. Pure in (ds, cls, n, rng).
ImageBatch sample_class_batch(const PatchDataset& ds, int cls, int batch_size, Rng& rng);

// Materializes specific records as a batch.
ImageBatch gather_batch(const PatchDataset& ds, const std::vector<int>& record_indices);

// Pooled mean / population standard deviation over every pixel value.
std::pair<double, double> dataset_pixel_stats(const PatchDataset& ds);

// Per-record mean / population std (used by template selection).
std::pair<double, double> record_pixel_stats(const PatchDataset& ds, size_t idx);

}  // namespace histodistill::data
