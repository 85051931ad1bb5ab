#include "histodistill/dataset.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "histodistill/io.hpp"

namespace histodistill::data {

namespace fs = std::filesystem;
using nlohmann::json;

PatchDataset PatchDataset::build(int num_classes, std::array<int, 3> image_shape_hw3,
                                 std::vector<PatchRecord> records,
                                 std::vector<std::vector<float>> pixels, bool strict_classes) {
  if (num_classes < 1) throw std::invalid_argument("dataset: num_classes must be >= 1");
  if (records.size() != pixels.size())
    throw std::invalid_argument("dataset: record/pixel count mismatch");
  if (image_shape_hw3[2] != 3) throw std::invalid_argument("dataset: images must have 3 channels");

  PatchDataset ds;
  ds.num_classes_ = num_classes;
  ds.image_shape_ = image_shape_hw3;
  ds.class_index_.resize(static_cast<size_t>(num_classes));
  const size_t expect =
      static_cast<size_t>(image_shape_hw3[0]) * static_cast<size_t>(image_shape_hw3[1]) * 3;

  for (size_t i = 0; i < records.size(); ++i) {
    const PatchRecord& r = records[i];
    if (r.label < 0 || r.label >= num_classes)
      throw std::invalid_argument("dataset: record " + std::to_string(i) + " has label " +
                                  std::to_string(r.label) + " outside 0.." +
                                  std::to_string(num_classes - 1));
    if (pixels[i].size() != expect)
      throw std::invalid_argument("dataset: record " + std::to_string(i) +
                                  " image shape mismatch");
    // Loader contract: clamp out-of-range values into [0,1].
    for (float& v : pixels[i]) v = std::min(1.0f, std::max(0.0f, v));
    ds.class_index_[static_cast<size_t>(r.label)].push_back(static_cast<int>(i));
    ds.slide_index_[r.slide_id].push_back(static_cast<int>(i));
  }
  if (strict_classes) {
    for (int c = 0; c < num_classes; ++c) {
      if (ds.class_index_[static_cast<size_t>(c)].empty())
        throw std::invalid_argument("dataset: empty class " + std::to_string(c));
    }
  }
  ds.records_ = std::move(records);
  ds.pixels_ = std::move(pixels);
  return ds;
}

const std::vector<int>& PatchDataset::class_records(int c) const {
  if (c < 0 || c >= num_classes_)
    throw std::invalid_argument("dataset: invalid class index " + std::to_string(c));
  return class_index_[static_cast<size_t>(c)];
}

std::vector<std::string> PatchDataset::slide_ids() const {
  std::vector<std::string> ids;
  ids.reserve(slide_index_.size());
  for (const auto& [k, v] : slide_index_) ids.push_back(k);
  return ids;
}

std::vector<int> PatchDataset::present_classes() const {
  std::vector<int> out;
  for (int c = 0; c < num_classes_; ++c) {
    if (!class_index_[static_cast<size_t>(c)].empty()) out.push_back(c);
  }
  return out;
}

PatchDataset PatchDataset::subset(const std::vector<int>& record_indices) const {
  std::vector<PatchRecord> recs;
  std::vector<std::vector<float>> pix;
  recs.reserve(record_indices.size());
  pix.reserve(record_indices.size());
  for (int i : record_indices) {
    recs.push_back(records_[static_cast<size_t>(i)]);
    pix.push_back(pixels_[static_cast<size_t>(i)]);
  }
  return build(num_classes_, image_shape_, std::move(recs), std::move(pix),
               /*strict_classes=*/false);
}

PatchDataset PatchDataset::subset_by_slide(const std::string& slide_id) const {
  auto it = slide_index_.find(slide_id);
  if (it == slide_index_.end())
    throw std::invalid_argument("dataset: unknown slide " + slide_id);
  return subset(it->second);
}

PatchDataset load_manifest(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.csv";
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(manifest)) throw std::runtime_error("manifest missing: " + manifest.string());
  if (!fs::exists(meta_path)) throw std::runtime_error("metadata missing: " + meta_path.string());

  json meta = json::parse(io::read_text_file(meta_path));
  if (!meta.contains("num_classes") || !meta.contains("image_shape"))
    throw std::runtime_error("metadata schema violation: need num_classes and image_shape");
  const int num_classes = meta["num_classes"].get<int>();
  const auto shp = meta["image_shape"].get<std::vector<int>>();
  if (shp.size() != 3 || shp[2] != 3)
    throw std::runtime_error("metadata schema violation: image_shape must be [H, W, 3]");
  const std::array<int, 3> image_shape{shp[0], shp[1], shp[2]};

  std::istringstream lines(io::read_text_file(manifest));
  std::string line;
  if (!std::getline(lines, line)) throw std::runtime_error("manifest schema violation: empty file");
  {
    auto header = io::split_csv_line(line);
    if (header != std::vector<std::string>{"image_path", "label", "slide_id"})
      throw std::runtime_error("manifest schema violation: bad header");
  }

  std::vector<PatchRecord> records;
  std::vector<std::vector<float>> pixels;
  size_t lineno = 1;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = io::split_csv_line(line);
    if (cols.size() != 3)
      throw std::runtime_error("manifest schema violation at line " + std::to_string(lineno));
    PatchRecord rec;
    rec.image_ref = cols[0];
    try {
      rec.label = std::stoi(cols[1]);
    } catch (const std::exception&) {
      throw std::runtime_error("manifest schema violation: bad label at line " +
                               std::to_string(lineno));
    }
    rec.slide_id = cols[2];

    const fs::path img_path = dir / rec.image_ref;
    io::Image img = io::read_png(img_path);
    if (img.height != image_shape[0] || img.width != image_shape[1])
      throw std::runtime_error("image shape mismatch: " + img_path.string());
    records.push_back(std::move(rec));
    pixels.push_back(std::move(img.chw));
  }
  return PatchDataset::build(num_classes, image_shape, std::move(records), std::move(pixels));
}

void save_manifest(const PatchDataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::ostringstream manifest;
  manifest << "image_path,label,slide_id\n";
  char name[64];
  for (size_t i = 0; i < ds.size(); ++i) {
    std::snprintf(name, sizeof(name), "images/patch%06zu.png", i);
    io::write_png(dir / name, ds.pixels(i).data(), ds.height(), ds.width());
    manifest << name << "," << ds.record(i).label << "," << ds.record(i).slide_id << "\n";
  }
  io::write_text_file(dir / "manifest.csv", manifest.str());

  json meta;
  meta["num_classes"] = ds.num_classes();
  meta["image_shape"] = {ds.image_shape()[0], ds.image_shape()[1], 3};
  io::write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

ImageBatch gather_batch(const PatchDataset& ds, const std::vector<int>& record_indices) {
  const int64_t b = static_cast<int64_t>(record_indices.size());
  const int64_t h = ds.height(), w = ds.width();
  std::vector<double> buf(static_cast<size_t>(b * 3 * h * w));
  std::vector<int> labels(record_indices.size());
  const size_t per = static_cast<size_t>(3 * h * w);
  for (size_t i = 0; i < record_indices.size(); ++i) {
    const auto& src = ds.pixels(static_cast<size_t>(record_indices[i]));
    std::copy(src.begin(), src.end(), buf.begin() + static_cast<int64_t>(i * per));
    labels[i] = ds.record(static_cast<size_t>(record_indices[i])).label;
  }
  ImageBatch batch;
  batch.pixels = ad::Tensor::from_data({b, 3, h, w}, std::move(buf));
  batch.labels = std::move(labels);
  return batch;
}

ImageBatch sample_class_batch(const PatchDataset& ds, int cls, int batch_size, Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("sample_class_batch: batch_size must be >= 1");
  const auto& pool = ds.class_records(cls);
  if (pool.empty()) throw std::invalid_argument("sample_class_batch: class has no records");

  std::vector<int> chosen;
  chosen.reserve(static_cast<size_t>(batch_size));
  if (batch_size <= static_cast<int>(pool.size())) {
    // Partial Fisher-Yates without replacement.
    std::vector<int> idx = pool;
    for (int i = 0; i < batch_size; ++i) {
      const int64_t j = i + rng.uniform_int(static_cast<int64_t>(idx.size()) - i);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
      chosen.push_back(idx[static_cast<size_t>(i)]);
    }
  } else {
    for (int i = 0; i < batch_size; ++i)
      chosen.push_back(pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))]);
  }
  return gather_batch(ds, chosen);
}

std::pair<double, double> dataset_pixel_stats(const PatchDataset& ds) {
  if (ds.empty()) throw std::invalid_argument("dataset_pixel_stats: empty dataset");
  double sum = 0.0, sumsq = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < ds.size(); ++i) {
    for (float v : ds.pixels(i)) {
      sum += v;
      sumsq += static_cast<double>(v) * v;
    }
    n += ds.pixels(i).size();
  }
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sumsq / static_cast<double>(n) - mean * mean);
  return {mean, std::sqrt(var)};
}

std::pair<double, double> record_pixel_stats(const PatchDataset& ds, size_t idx) {
  const auto& px = ds.pixels(idx);
  double sum = 0.0, sumsq = 0.0;
  for (float v : px) {
    sum += v;
    sumsq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(px.size());
  const double mean = sum / n;
  const double var = std::max(0.0, sumsq / n - mean * mean);
  return {mean, std::sqrt(var)};
}

}  // namespace histodistill::data
