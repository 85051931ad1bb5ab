#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace histodistill::io {

// In-memory 8-bit-or-better RGB image, channel-major (3 x H x W), values in
// [0,1]. The float payload is the working representation everywhere; 8-bit
// conversion happens only at file boundaries.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> chw;  // 3 * height * width
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const float* chw, int height, int width);
void write_png(const std::filesystem::path& path, const double* chw, int height, int width);

// Minimal .npy support (version 1.0, little endian, C order, <f8 or <f4).
struct NpyArray {
  std::vector<int64_t> shape;
  std::vector<double> data;
};

void save_npy_f8(const std::filesystem::path& path, const std::vector<int64_t>& shape,
                 const double* data);
void save_npy_f4(const std::filesystem::path& path, const std::vector<int64_t>& shape,
                 const float* data);
NpyArray load_npy(const std::filesystem::path& path);

// Line-record helpers for the CSV-style tables used by manifests and logs.
std::vector<std::string> split_csv_line(const std::string& line);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

// Total size in bytes of the regular files directly inside a directory tree.
uint64_t directory_bytes(const std::filesystem::path& dir);

// FNV-1a over a string; used for config provenance stamps.
uint64_t fnv1a64(const std::string& s);

}  // namespace histodistill::io
