#include "histodistill/io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace histodistill::io {

namespace fs = std::filesystem;

Image read_png(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("failed to read image: " + path.string());
  Image img;
  img.height = bgr.rows;
  img.width = bgr.cols;
  img.chw.resize(static_cast<size_t>(3 * bgr.rows * bgr.cols));
  const size_t plane = static_cast<size_t>(bgr.rows) * static_cast<size_t>(bgr.cols);
  for (int r = 0; r < bgr.rows; ++r) {
    const uchar* row = bgr.ptr<uchar>(r);
    for (int c = 0; c < bgr.cols; ++c) {
      const size_t p = static_cast<size_t>(r) * bgr.cols + c;
      img.chw[p] = row[3 * c + 2] / 255.0f;              // R
      img.chw[plane + p] = row[3 * c + 1] / 255.0f;      // G
      img.chw[2 * plane + p] = row[3 * c + 0] / 255.0f;  // B
    }
  }
  return img;
}

namespace {

template <typename T>
void write_png_impl(const fs::path& path, const T* chw, int height, int width) {
  cv::Mat bgr(height, width, CV_8UC3);
  const size_t plane = static_cast<size_t>(height) * static_cast<size_t>(width);
  for (int r = 0; r < height; ++r) {
    uchar* row = bgr.ptr<uchar>(r);
    for (int c = 0; c < width; ++c) {
      const size_t p = static_cast<size_t>(r) * width + c;
      auto q = [](double v) {
        v = std::min(1.0, std::max(0.0, v));
        return static_cast<uchar>(std::lround(v * 255.0));
      };
      row[3 * c + 2] = q(static_cast<double>(chw[p]));
      row[3 * c + 1] = q(static_cast<double>(chw[plane + p]));
      row[3 * c + 0] = q(static_cast<double>(chw[2 * plane + p]));
    }
  }
  if (!cv::imwrite(path.string(), bgr))
    throw std::runtime_error("failed to write image: " + path.string());
}

}  // namespace

void write_png(const fs::path& path, const float* chw, int height, int width) {
  write_png_impl(path, chw, height, width);
}
void write_png(const fs::path& path, const double* chw, int height, int width) {
  write_png_impl(path, chw, height, width);
}

namespace {

void write_npy_header(std::ofstream& f, const std::string& descr,
                      const std::vector<int64_t>& shape) {
  std::ostringstream dict;
  dict << "{'descr': '" << descr << "', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < shape.size(); ++i) dict << shape[i] << (shape.size() == 1 ? "," : (i + 1 < shape.size() ? ", " : ""));
  dict << "), }";
  std::string header = dict.str();
  const size_t unpadded = 10 + header.size() + 1;
  const size_t padded = (unpadded + 63) / 64 * 64;
  header.append(padded - unpadded, ' ');
  header.push_back('\n');
  const char magic[] = "\x93NUMPY";
  f.write(magic, 6);
  const unsigned char ver[2] = {1, 0};
  f.write(reinterpret_cast<const char*>(ver), 2);
  const uint16_t hlen = static_cast<uint16_t>(header.size());
  f.write(reinterpret_cast<const char*>(&hlen), 2);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
}

}  // namespace

void save_npy_f8(const fs::path& path, const std::vector<int64_t>& shape, const double* data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  write_npy_header(f, "<f8", shape);
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 8));
  if (!f) throw std::runtime_error("short write: " + path.string());
}

void save_npy_f4(const fs::path& path, const std::vector<int64_t>& shape, const float* data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  write_npy_header(f, "<f4", shape);
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
  if (!f) throw std::runtime_error("short write: " + path.string());
}

NpyArray load_npy(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, "\x93NUMPY", 6) != 0)
    throw std::runtime_error("not an npy file: " + path.string());
  unsigned char ver[2];
  f.read(reinterpret_cast<char*>(ver), 2);
  uint16_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 2);
  std::string header(hlen, '\0');
  f.read(header.data(), hlen);
  if (!f) throw std::runtime_error("truncated npy header: " + path.string());

  const bool f8 = header.find("'<f8'") != std::string::npos;
  const bool f4 = header.find("'<f4'") != std::string::npos;
  if (!f8 && !f4) throw std::runtime_error("unsupported npy dtype: " + path.string());
  if (header.find("'fortran_order': False") == std::string::npos)
    throw std::runtime_error("unsupported npy order: " + path.string());

  NpyArray arr;
  const size_t lp = header.find('(');
  const size_t rp = header.find(')', lp);
  if (lp == std::string::npos || rp == std::string::npos)
    throw std::runtime_error("bad npy shape: " + path.string());
  std::string dims = header.substr(lp + 1, rp - lp - 1);
  std::stringstream ss(dims);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    arr.shape.push_back(std::stoll(tok.substr(b)));
  }
  int64_t n = 1;
  for (int64_t d : arr.shape) n *= d;
  arr.data.resize(static_cast<size_t>(n));
  if (f8) {
    f.read(reinterpret_cast<char*>(arr.data.data()), static_cast<std::streamsize>(n * 8));
  } else {
    std::vector<float> tmp(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 4));
    std::copy(tmp.begin(), tmp.end(), arr.data.begin());
  }
  if (!f) throw std::runtime_error("truncated npy payload: " + path.string());
  return arr;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  f << content;
  if (!f) throw std::runtime_error("short write: " + path.string());
}

uint64_t directory_bytes(const fs::path& dir) {
  uint64_t total = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) total += e.file_size();
  }
  return total;
}

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace histodistill::io
