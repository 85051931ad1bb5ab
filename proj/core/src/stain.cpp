#include "histodistill/stain.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

#include "histodistill/io.hpp"

namespace histodistill::stain {

namespace {

constexpr double kLn10 = 2.302585092994045684017991454684364208;

double log10_clamped(double v, double floor_v, double io) {
  return std::log10(io) - std::log10(std::max(v, floor_v));
}

Eigen::Matrix<double, 3, 2> as_matrix(const std::array<double, 6>& m) {
  Eigen::Matrix<double, 3, 2> s;
  s << m[0], m[1], m[2], m[3], m[4], m[5];
  return s;
}

}  // namespace

void StainConfig::validate() const {
  ad::check(od_floor > 0.0 && od_floor < io_intensity,
            "stain config: need 0 < od_floor < io_intensity");
  ad::check(od_beta > 0.0, "stain config: od_beta must be positive");
  ad::check(angle_percentile > 0.0 && angle_percentile < 50.0,
            "stain config: angle_percentile must lie in (0,50)");
  ad::check(conc_percentile > 50.0 && conc_percentile < 100.0,
            "stain config: conc_percentile must lie in (50,100)");
}

void StainProfile::validate() const {
  const auto s = as_matrix(stain_matrix);
  for (int c = 0; c < 2; ++c) {
    const double n = s.col(c).norm();
    ad::check(std::fabs(n - 1.0) <= 1e-6, "stain profile: column norm must be 1");
    for (int r = 0; r < 3; ++r)
      ad::check(s(r, c) >= 0.0, "stain profile: column entries must be nonnegative");
    ad::check(max_concentration[static_cast<size_t>(c)] > 0.0,
              "stain profile: max concentration must be positive");
  }
  const double cosang = std::clamp(s.col(0).dot(s.col(1)), -1.0, 1.0);
  ad::check(std::acos(cosang) > 1e-3, "stain profile: columns are collinear");
}

std::array<double, 2> StainProfile::column_angles_deg(const std::array<double, 6>& other) const {
  const auto a = as_matrix(stain_matrix);
  const auto b = as_matrix(other);
  std::array<double, 2> out{};
  for (int c = 0; c < 2; ++c) {
    const double d = std::clamp(a.col(c).normalized().dot(b.col(c).normalized()), -1.0, 1.0);
    out[static_cast<size_t>(c)] = std::acos(d) * 180.0 / M_PI;
  }
  return out;
}

void save_profile(const StainProfile& p, const std::filesystem::path& path) {
  std::ostringstream os;
  char buf[64];
  auto emit = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << key << "=" << buf << "\n";
  };
  os << "template_ref=" << p.template_ref << "\n";
  for (int i = 0; i < 6; ++i) {
    std::snprintf(buf, sizeof(buf), "stain_matrix_%d", i);
    emit(buf, p.stain_matrix[static_cast<size_t>(i)]);
  }
  emit("max_concentration_0", p.max_concentration[0]);
  emit("max_concentration_1", p.max_concentration[1]);
  emit("io_intensity", p.config.io_intensity);
  emit("od_floor", p.config.od_floor);
  emit("od_beta", p.config.od_beta);
  emit("angle_percentile", p.config.angle_percentile);
  emit("conc_percentile", p.config.conc_percentile);
  io::write_text_file(path, os.str());
}

StainProfile load_profile(const std::filesystem::path& path) {
  std::istringstream in(io::read_text_file(path));
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("bad profile line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto num = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("profile missing key: " + key);
    return std::stod(it->second);
  };
  StainProfile p;
  p.template_ref = kv.count("template_ref") ? kv["template_ref"] : "";
  for (int i = 0; i < 6; ++i)
    p.stain_matrix[static_cast<size_t>(i)] = num("stain_matrix_" + std::to_string(i));
  p.max_concentration[0] = num("max_concentration_0");
  p.max_concentration[1] = num("max_concentration_1");
  p.config.io_intensity = num("io_intensity");
  p.config.od_floor = num("od_floor");
  p.config.od_beta = num("od_beta");
  p.config.angle_percentile = num("angle_percentile");
  p.config.conc_percentile = num("conc_percentile");
  p.validate();
  return p;
}

ad::Tensor rgb_to_od(const ad::Tensor& pixels, const StainConfig& cfg) {
  // od = log10(io) - log10(max(x, floor))
  ad::Tensor logs = ad::log(ad::max_scalar(pixels, cfg.od_floor));
  return ad::add_scalar(ad::mul_scalar(logs, -1.0 / kLn10), std::log10(cfg.io_intensity));
}

double percentile_nearest_rank(std::vector<double> values, double p) {
  ad::check(!values.empty(), "percentile: empty sample");
  ad::check(p > 0.0 && p <= 100.0, "percentile: p out of range");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<int64_t>(std::ceil(p / 100.0 * n));
  rank = std::max<int64_t>(1, std::min<int64_t>(rank, static_cast<int64_t>(values.size())));
  return values[static_cast<size_t>(rank - 1)];
}

StainProfile estimate_stain_profile(const std::vector<float>& chw, int height, int width,
                                    const StainConfig& cfg, const std::string& template_ref) {
  cfg.validate();
  const size_t plane = static_cast<size_t>(height) * static_cast<size_t>(width);
  ad::check(chw.size() == 3 * plane, "estimate_stain_profile: bad image size");

  // Optical densities, one 3-vector per pixel.
  Eigen::Matrix3Xd od(3, static_cast<Eigen::Index>(plane));
  for (size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c)
      od(c, static_cast<Eigen::Index>(p)) =
          log10_clamped(chw[static_cast<size_t>(c) * plane + p], cfg.od_floor, cfg.io_intensity);
  }

  // Tissue pixels: OD magnitude above beta.
  std::vector<Eigen::Index> keep;
  keep.reserve(plane);
  for (Eigen::Index p = 0; p < od.cols(); ++p) {
    if (od.col(p).norm() > cfg.od_beta) keep.push_back(p);
  }
  if (keep.size() < 100)
    throw std::runtime_error("estimate_stain_profile: too few tissue pixels (" +
                             std::to_string(keep.size()) + ")");

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (Eigen::Index p : keep) mean += od.col(p);
  mean /= static_cast<double>(keep.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (Eigen::Index p : keep) {
    const Eigen::Vector3d d = od.col(p) - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(keep.size());

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  const Eigen::Vector3d evals = eig.eigenvalues();  // ascending
  if (!(evals(2) > 0.0) || evals(1) <= 1e-9 * evals(2))
    throw std::runtime_error("estimate_stain_profile: degenerate OD covariance (rank < 2)");
  Eigen::Vector3d e1 = eig.eigenvectors().col(2);
  Eigen::Vector3d e2 = eig.eigenvectors().col(1);
  // Orient the leading axis toward the OD cloud so angles do not wrap.
  if (mean.dot(e1) < 0.0) e1 = -e1;

  std::vector<double> angles;
  angles.reserve(keep.size());
  for (Eigen::Index p : keep)
    angles.push_back(std::atan2(od.col(p).dot(e2), od.col(p).dot(e1)));
  const double lo = percentile_nearest_rank(angles, cfg.angle_percentile);
  const double hi = percentile_nearest_rank(angles, 100.0 - cfg.angle_percentile);

  auto direction = [&](double phi) {
    Eigen::Vector3d v = std::cos(phi) * e1 + std::sin(phi) * e2;
    if (v.sum() < 0.0) v = -v;
    v = v.cwiseMax(0.0);
    const double n = v.norm();
    if (!(n > 0.0))
      throw std::runtime_error("estimate_stain_profile: extreme direction collapsed to zero");
    return Eigen::Vector3d(v / n);
  };
  Eigen::Vector3d v_lo = direction(lo);
  Eigen::Vector3d v_hi = direction(hi);
  // Column 0 is the hematoxylin-like stain: larger red component.
  if (v_lo(0) < v_hi(0)) std::swap(v_lo, v_hi);

  Eigen::Matrix<double, 3, 2> s;
  s.col(0) = v_lo;
  s.col(1) = v_hi;

  // Least-squares concentrations over all pixels (the same population the
  // normalizer's robust max sees), then the robust percentile per stain.
  const Eigen::Matrix<double, 2, 3> pinv = (s.transpose() * s).inverse() * s.transpose();
  std::vector<double> c0, c1;
  c0.reserve(plane);
  c1.reserve(plane);
  for (Eigen::Index p = 0; p < od.cols(); ++p) {
    const Eigen::Vector2d c = pinv * od.col(p);
    c0.push_back(c(0));
    c1.push_back(c(1));
  }
  StainProfile profile;
  profile.stain_matrix = {s(0, 0), s(0, 1), s(1, 0), s(1, 1), s(2, 0), s(2, 1)};
  profile.max_concentration = {percentile_nearest_rank(c0, cfg.conc_percentile),
                               percentile_nearest_rank(c1, cfg.conc_percentile)};
  profile.template_ref = template_ref;
  profile.config = cfg;
  profile.validate();
  return profile;
}

StainProfile estimate_stain_profile(const data::PatchDataset& ds, size_t record_idx,
                                    const StainConfig& cfg) {
  return estimate_stain_profile(ds.pixels(record_idx), ds.height(), ds.width(), cfg,
                                ds.record(record_idx).image_ref);
}

size_t select_template(const data::PatchDataset& ds) {
  ad::check(!ds.empty(), "select_template: empty dataset");
  const auto [mean_d, std_d] = dataset_pixel_stats(ds);
  size_t best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < ds.size(); ++i) {
    const auto [m, s] = record_pixel_stats(ds, i);
    const double score = (m - mean_d) * (m - mean_d) + (s - std_d) * (s - std_d);
    if (score < best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

namespace {

// Cached permutation indices between (B,C,H,W) and (C, B*H*W) layouts.
ad::IndexArray chw_to_cfirst(int64_t b, int64_t c, int64_t hw) {
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(c * b * hw));
  int64_t o = 0;
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t p = 0; p < hw; ++p) (*idx)[static_cast<size_t>(o++)] = bi * c * hw + ci * hw + p;
  return idx;
}

ad::IndexArray cfirst_to_chw(int64_t b, int64_t c, int64_t hw) {
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(b * c * hw));
  int64_t o = 0;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t p = 0; p < hw; ++p) (*idx)[static_cast<size_t>(o++)] = ci * b * hw + bi * hw + p;
  return idx;
}

}  // namespace

data::ImageBatch normalize_to_template(const data::ImageBatch& batch, const StainProfile& tpl,
                                       const StainConfig& cfg, int* blank_counter) {
  tpl.validate();
  cfg.validate();
  const ad::Tensor& x = batch.pixels;
  ad::check(x.defined() && x.rank() == 4 && x.dim(1) == 3,
            "normalize_to_template: batch must be B x 3 x H x W");
  const int64_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int64_t hw = h * w;

  const auto s = as_matrix(tpl.stain_matrix);
  const Eigen::Matrix<double, 2, 3> pinv = (s.transpose() * s).inverse() * s.transpose();

  ad::Tensor od = rgb_to_od(x, cfg);  // (B,3,H,W)

  // Concentrations: (2, B*HW) = pinv (2x3) * od arranged as (3, B*HW).
  ad::Tensor od_cf = ad::gather(od, chw_to_cfirst(b, 3, hw), {3, b * hw});
  std::vector<double> pinv_rm = {pinv(0, 0), pinv(0, 1), pinv(0, 2),
                                 pinv(1, 0), pinv(1, 1), pinv(1, 2)};
  ad::Tensor conc_cf = ad::matmul(ad::Tensor::from_data({2, 3}, pinv_rm), od_cf);  // (2, B*HW)

  // Detached per-image, per-stain scale from the robust max concentration.
  const auto& cv = conc_cf.data();
  std::vector<double> scales(static_cast<size_t>(b * 2), 1.0);
  std::vector<double> blend(static_cast<size_t>(b), 1.0);
  int blanks = 0;
  for (int64_t bi = 0; bi < b; ++bi) {
    double sc[2];
    bool ok = true;
    for (int64_t k = 0; k < 2; ++k) {
      std::vector<double> vals(static_cast<size_t>(hw));
      for (int64_t p = 0; p < hw; ++p)
        vals[static_cast<size_t>(p)] = cv[static_cast<size_t>(k * b * hw + bi * hw + p)];
      const double rm = percentile_nearest_rank(std::move(vals), cfg.conc_percentile);
      if (!(rm > 0.0)) {
        ok = false;
        break;
      }
      sc[k] = tpl.max_concentration[static_cast<size_t>(k)] / rm;
    }
    if (ok) {
      scales[static_cast<size_t>(2 * bi)] = sc[0];
      scales[static_cast<size_t>(2 * bi + 1)] = sc[1];
    } else {
      // Blank image: passes through unchanged via the blend mask.
      blend[static_cast<size_t>(bi)] = 0.0;
      ++blanks;
    }
  }
  if (blank_counter) *blank_counter += blanks;

  // Cnorm = diag(scale_b) * Csrc, per image.
  ad::Tensor conc_bchw = ad::gather(conc_cf, cfirst_to_chw(b, 2, hw), {b, 2, h, w});
  ad::Tensor scale_t = ad::Tensor::from_data({b, 2, 1, 1}, std::move(scales));
  ad::Tensor conc_norm = ad::bmul(conc_bchw, scale_t);

  // Back to OD with the template basis, then to transmitted intensity.
  ad::Tensor cn_cf = ad::gather(conc_norm, chw_to_cfirst(b, 2, hw), {2, b * hw});
  std::vector<double> s_rm = {s(0, 0), s(0, 1), s(1, 0), s(1, 1), s(2, 0), s(2, 1)};
  ad::Tensor od_norm_cf = ad::matmul(ad::Tensor::from_data({3, 2}, s_rm), cn_cf);  // (3, B*HW)
  ad::Tensor od_norm = ad::gather(od_norm_cf, cfirst_to_chw(b, 3, hw), {b, 3, h, w});
  ad::Tensor out = ad::exp(ad::mul_scalar(od_norm, -kLn10));  // 10^(-od)
  out = ad::clamp(ad::mul_scalar(out, cfg.io_intensity), 0.0, 1.0);

  // Blend normalized and pass-through images with a constant 0/1 mask.
  ad::Tensor mask = ad::Tensor::from_data({b, 1, 1, 1}, blend);
  std::vector<double> inv_blend(static_cast<size_t>(b));
  for (int64_t bi = 0; bi < b; ++bi)
    inv_blend[static_cast<size_t>(bi)] = 1.0 - blend[static_cast<size_t>(bi)];
  ad::Tensor inv_mask = ad::Tensor::from_data({b, 1, 1, 1}, std::move(inv_blend));
  ad::Tensor mixed = ad::add(ad::bmul(out, mask), ad::bmul(x, inv_mask));

  data::ImageBatch result;
  result.pixels = mixed;
  result.labels = batch.labels;
  return result;
}

data::PatchDataset preprocess_normalize_dataset(const data::PatchDataset& ds,
                                                const StainProfile& tpl, const StainConfig& cfg,
                                                NormalizeReport* report) {
  std::vector<data::PatchRecord> recs;
  std::vector<std::vector<float>> pix;
  recs.reserve(ds.size());
  pix.reserve(ds.size());
  int blanks = 0;
  ad::NoGradGuard off;
  for (size_t i = 0; i < ds.size(); ++i) {
    data::ImageBatch one = data::gather_batch(ds, {static_cast<int>(i)});
    data::ImageBatch norm = normalize_to_template(one, tpl, cfg, &blanks);
    const auto& d = norm.pixels.data();
    std::vector<float> f(d.size());
    for (size_t j = 0; j < d.size(); ++j) f[j] = static_cast<float>(d[j]);
    recs.push_back(ds.record(i));
    pix.push_back(std::move(f));
  }
  if (report) report->blank_passthrough = blanks;
  return data::PatchDataset::build(ds.num_classes(), ds.image_shape(), std::move(recs),
                                   std::move(pix), /*strict_classes=*/false);
}

}  // namespace histodistill::stain
