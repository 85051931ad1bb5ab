#include "histodistill/pipeline.hpp"

#include <Eigen/Core>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>

namespace histodistill::pipeline {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Otsu and tiling
// ---------------------------------------------------------------------------

OtsuResult otsu_threshold(const std::vector<double>& gray) {
  ad::check(!gray.empty(), "otsu_threshold: empty image");
  double minv = gray[0], maxv = gray[0];
  for (double v : gray) {
    minv = std::min(minv, v);
    maxv = std::max(maxv, v);
  }
  if (minv == maxv) return {minv, true};

  // Per-bin counts and value sums, so the class means use the true pixel
  // values: identical to a direct per-threshold computation.
  constexpr int kBins = 256;
  std::array<double, kBins> count{}, sum{};
  for (double v : gray) {
    int b = static_cast<int>(std::floor(v * kBins));
    b = std::min(kBins - 1, std::max(0, b));
    count[static_cast<size_t>(b)] += 1.0;
    sum[static_cast<size_t>(b)] += v;
  }
  const double total = static_cast<double>(gray.size());
  const double total_sum = std::accumulate(sum.begin(), sum.end(), 0.0);

  double best_var = -1.0;
  int best_k = 0;
  double c0 = 0.0, s0 = 0.0;
  for (int k = 0; k < kBins - 1; ++k) {
    c0 += count[static_cast<size_t>(k)];
    s0 += sum[static_cast<size_t>(k)];
    const double c1 = total - c0;
    if (c0 == 0.0 || c1 == 0.0) continue;
    const double mu0 = s0 / c0;
    const double mu1 = (total_sum - s0) / c1;
    const double var = (c0 / total) * (c1 / total) * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {  // strict > keeps the smallest maximizing bin edge
      best_var = var;
      best_k = k;
    }
  }
  if (best_var <= 0.0) return {minv, true};
  return {static_cast<double>(best_k + 1) / kBins, false};
}

std::vector<ExtractedPatch> extract_patches(const io::Image& slide, int patch_size, int stride,
                                            double tissue_fraction, bool* degenerate_warned) {
  ad::check(patch_size >= 1 && stride >= 1, "extract_patches: bad patch size or stride");
  ad::check(patch_size <= slide.height && patch_size <= slide.width,
            "extract_patches: patch larger than slide");
  const size_t plane = static_cast<size_t>(slide.height) * static_cast<size_t>(slide.width);
  std::vector<double> gray(plane);
  for (size_t p = 0; p < plane; ++p) {
    gray[p] = (static_cast<double>(slide.chw[p]) + slide.chw[plane + p] + slide.chw[2 * plane + p]) /
              3.0;
  }
  const OtsuResult otsu = otsu_threshold(gray);
  if (degenerate_warned) *degenerate_warned = otsu.degenerate;

  // Stained tissue is darker than the background.
  std::vector<char> tissue(plane, 1);
  if (!otsu.degenerate) {
    for (size_t p = 0; p < plane; ++p) tissue[p] = gray[p] < otsu.threshold ? 1 : 0;
  }

  std::vector<ExtractedPatch> out;
  const double denom = static_cast<double>(patch_size) * patch_size;
  for (int r = 0; r + patch_size <= slide.height; r += stride) {
    for (int c = 0; c + patch_size <= slide.width; c += stride) {
      int64_t hits = 0;
      for (int i = 0; i < patch_size; ++i)
        for (int j = 0; j < patch_size; ++j)
          hits += tissue[static_cast<size_t>(r + i) * slide.width + (c + j)];
      if (static_cast<double>(hits) / denom > tissue_fraction) {
        ExtractedPatch p;
        p.row = r;
        p.col = c;
        p.chw.resize(static_cast<size_t>(3) * patch_size * patch_size);
        const size_t pp = static_cast<size_t>(patch_size) * patch_size;
        for (int ch = 0; ch < 3; ++ch)
          for (int i = 0; i < patch_size; ++i)
            for (int j = 0; j < patch_size; ++j)
              p.chw[static_cast<size_t>(ch) * pp + static_cast<size_t>(i) * patch_size + j] =
                  slide.chw[static_cast<size_t>(ch) * plane +
                            static_cast<size_t>(r + i) * slide.width + (c + j)];
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// toy generator
// ---------------------------------------------------------------------------

namespace {

std::array<double, 6> default_he_matrix() {
  // Classic H&E reference directions, renormalized.
  Eigen::Vector3d h(0.65, 0.70, 0.29), e(0.07, 0.99, 0.11);
  h.normalize();
  e.normalize();
  return {h(0), e(0), h(1), e(1), h(2), e(2)};
}

Eigen::Matrix<double, 3, 2> to_matrix(const std::array<double, 6>& m) {
  Eigen::Matrix<double, 3, 2> s;
  s << m[0], m[1], m[2], m[3], m[4], m[5];
  return s;
}

// Small random rotation of both stain columns about a random axis.
Eigen::Matrix<double, 3, 2> jitter_matrix(const Eigen::Matrix<double, 3, 2>& s, double degrees,
                                          Rng& rng) {
  const double angle = rng.uniform(-degrees, degrees) * M_PI / 180.0;
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  const double n = axis.norm();
  if (n == 0.0) return s;
  axis /= n;
  const Eigen::Matrix3d rot = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  Eigen::Matrix<double, 3, 2> out = rot * s;
  for (int c = 0; c < 2; ++c) {
    for (int r = 0; r < 3; ++r) out(r, c) = std::max(0.0, out(r, c));
    const double cn = out.col(c).norm();
    if (cn > 0.0) out.col(c) /= cn;
  }
  return out;
}

struct SlideContext {
  double density_mult = 1.0;
  double eosin_offset = 0.0;
};

std::vector<float> render_patch(const ToyGenSpec& spec, const ToyClassTexture& tex,
                                const SlideContext& ctx, Rng& rng) {
  const int sz = spec.image_size;
  const size_t plane = static_cast<size_t>(sz) * sz;
  std::vector<double> conc_h(plane, 0.0), conc_e(plane, 0.0);

  const int blobs = std::max(
      0, static_cast<int>(std::lround(rng.normal() * tex.blob_count_sd +
                                      tex.blob_count_mean * ctx.density_mult)));
  for (int b = 0; b < blobs; ++b) {
    const double by = rng.uniform(0.0, static_cast<double>(sz));
    const double bx = rng.uniform(0.0, static_cast<double>(sz));
    const double r = std::max(0.6, tex.blob_radius_mean + rng.normal() * tex.blob_radius_sd);
    const double amp = std::max(0.05, tex.blob_amp_mean + rng.normal() * tex.blob_amp_sd);
    const double inv2r2 = 1.0 / (2.0 * r * r);
    for (int y = 0; y < sz; ++y) {
      for (int x = 0; x < sz; ++x) {
        const double d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
        conc_h[static_cast<size_t>(y) * sz + x] += amp * std::exp(-d2 * inv2r2);
      }
    }
  }
  const double eosin =
      std::max(0.0, tex.eosin_mean + ctx.eosin_offset + rng.normal() * tex.eosin_sd);
  for (size_t p = 0; p < plane; ++p) conc_e[p] = eosin;

  if (spec.noise_level > 0.0) {
    for (size_t p = 0; p < plane; ++p) {
      conc_h[p] = std::max(0.0, conc_h[p] + spec.noise_level * rng.normal());
      conc_e[p] = std::max(0.0, conc_e[p] + spec.noise_level * rng.normal());
    }
  }

  Eigen::Matrix<double, 3, 2> s = to_matrix(spec.stain_matrix);
  if (spec.stain_jitter_degrees > 0.0) s = jitter_matrix(s, spec.stain_jitter_degrees, rng);

  std::vector<float> chw(3 * plane);
  for (size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double od = s(c, 0) * conc_h[p] + s(c, 1) * conc_e[p];
      chw[static_cast<size_t>(c) * plane + p] =
          static_cast<float>(std::min(1.0, std::pow(10.0, -od)));
    }
  }
  return chw;
}

}  // namespace

std::vector<ToyClassTexture> default_textures(int num_classes) {
  std::vector<ToyClassTexture> out;
  for (int c = 0; c < num_classes; ++c) {
    const double t = num_classes > 1 ? static_cast<double>(c) / (num_classes - 1) : 0.5;
    ToyClassTexture tex;
    tex.blob_count_mean = 3.0 + t * 11.0;   // 3 .. 14
    tex.blob_count_sd = 1.5 + t * 2.0;      // 1.5 .. 3.5
    tex.blob_radius_mean = 2.6 - t * 1.2;   // 2.6 .. 1.4
    tex.blob_radius_sd = 0.55 - t * 0.2;
    tex.blob_amp_mean = 1.0 - t * 0.2;
    tex.blob_amp_sd = 0.25;
    tex.eosin_mean = 0.50 - t * 0.16;       // 0.50 .. 0.34
    tex.eosin_sd = 0.18;
    out.push_back(tex);
  }
  return out;
}

ToyGenSpec::ToyGenSpec() : stain_matrix(default_he_matrix()) {}

void ToyGenSpec::validate() const {
  ad::check(num_classes >= 1, "toy spec: num_classes must be >= 1");
  ad::check(image_size >= 8, "toy spec: image_size must be >= 8");
  ad::check(noise_level >= 0.0, "toy spec: noise_level must be >= 0");
  ad::check(train_fraction > 0.0 && train_fraction < 1.0, "toy spec: bad train_fraction");
  if (slides_per_class > 0)
    ad::check(patches_per_slide >= 1, "toy spec: patches_per_slide must be >= 1");
  else
    ad::check(patches_per_class >= 2, "toy spec: patches_per_class must be >= 2");
  const auto s = to_matrix(stain_matrix);
  for (int c = 0; c < 2; ++c) {
    ad::check(std::fabs(s.col(c).norm() - 1.0) <= 1e-6, "toy spec: stain columns must be unit");
    for (int r = 0; r < 3; ++r) ad::check(s(r, c) >= 0.0, "toy spec: stain entries must be >= 0");
  }
  if (!textures.empty())
    ad::check(static_cast<int>(textures.size()) == num_classes,
              "toy spec: texture count must match classes");
}

ToyCorpus generate_toy_dataset(const ToyGenSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto textures = spec.textures.empty() ? default_textures(spec.num_classes) : spec.textures;

  struct Generated {
    data::PatchRecord rec;
    std::vector<float> chw;
    bool train = true;
  };
  std::vector<Generated> all;

  if (spec.slides_per_class > 0) {
    for (int c = 0; c < spec.num_classes; ++c) {
      // Slide-level split keeps bags intact.
      std::vector<int> slide_order(static_cast<size_t>(spec.slides_per_class));
      std::iota(slide_order.begin(), slide_order.end(), 0);
      for (size_t i = slide_order.size(); i > 1; --i) {
        const auto j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
        std::swap(slide_order[i - 1], slide_order[j]);
      }
      const int train_slides =
          std::max(1, static_cast<int>(std::lround(spec.train_fraction * spec.slides_per_class)));
      std::vector<bool> is_train(static_cast<size_t>(spec.slides_per_class), false);
      for (int i = 0; i < train_slides; ++i) is_train[static_cast<size_t>(slide_order[i])] = true;

      for (int s = 0; s < spec.slides_per_class; ++s) {
        SlideContext ctx;
        ctx.density_mult = std::exp(0.15 * rng.normal());
        ctx.eosin_offset = 0.05 * rng.normal();
        for (int p = 0; p < spec.patches_per_slide; ++p) {
          Generated g;
          g.rec.label = c;
          g.rec.slide_id = "c" + std::to_string(c) + "_s" + std::to_string(s);
          g.rec.image_ref = "inline:" + g.rec.slide_id + "_p" + std::to_string(p);
          g.chw = render_patch(spec, textures[static_cast<size_t>(c)], ctx, rng);
          g.train = is_train[static_cast<size_t>(s)];
          all.push_back(std::move(g));
        }
      }
    }
  } else {
    constexpr int kPseudoSlideChunk = 50;
    for (int c = 0; c < spec.num_classes; ++c) {
      std::vector<int> order(static_cast<size_t>(spec.patches_per_class));
      std::iota(order.begin(), order.end(), 0);
      for (size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
        std::swap(order[i - 1], order[j]);
      }
      const int train_n = static_cast<int>(std::lround(spec.train_fraction *
                                                       spec.patches_per_class));
      std::vector<bool> is_train(static_cast<size_t>(spec.patches_per_class), false);
      for (int i = 0; i < train_n; ++i) is_train[static_cast<size_t>(order[i])] = true;

      SlideContext ctx;
      for (int p = 0; p < spec.patches_per_class; ++p) {
        Generated g;
        g.rec.label = c;
        g.rec.slide_id =
            "c" + std::to_string(c) + "_s" + std::to_string(p / kPseudoSlideChunk);
        g.rec.image_ref = "inline:c" + std::to_string(c) + "_p" + std::to_string(p);
        g.chw = render_patch(spec, textures[static_cast<size_t>(c)], ctx, rng);
        g.train = is_train[static_cast<size_t>(p)];
        all.push_back(std::move(g));
      }
    }
  }

  std::vector<data::PatchRecord> train_recs, test_recs;
  std::vector<std::vector<float>> train_pix, test_pix;
  for (auto& g : all) {
    if (g.train) {
      train_recs.push_back(std::move(g.rec));
      train_pix.push_back(std::move(g.chw));
    } else {
      test_recs.push_back(std::move(g.rec));
      test_pix.push_back(std::move(g.chw));
    }
  }
  const std::array<int, 3> shape{spec.image_size, spec.image_size, 3};
  ToyCorpus corpus{
      data::PatchDataset::build(spec.num_classes, shape, std::move(train_recs),
                                std::move(train_pix)),
      data::PatchDataset::build(spec.num_classes, shape, std::move(test_recs),
                                std::move(test_pix)),
      {}};

  // Ground-truth profile: generator basis plus the robust concentration of
  // the dataset's own template image.
  const size_t tpl = stain::select_template(corpus.train);
  const auto s = to_matrix(spec.stain_matrix);
  const Eigen::Matrix<double, 2, 3> pinv = (s.transpose() * s).inverse() * s.transpose();
  const auto& px = corpus.train.pixels(tpl);
  const size_t plane = static_cast<size_t>(spec.image_size) * spec.image_size;
  stain::StainConfig scfg;
  std::vector<double> c0, c1;
  c0.reserve(plane);
  c1.reserve(plane);
  for (size_t p = 0; p < plane; ++p) {
    Eigen::Vector3d od;
    for (int ch = 0; ch < 3; ++ch)
      od(ch) = std::log10(scfg.io_intensity) -
               std::log10(std::max(static_cast<double>(px[static_cast<size_t>(ch) * plane + p]),
                                   scfg.od_floor));
    const Eigen::Vector2d c = pinv * od;
    c0.push_back(c(0));
    c1.push_back(c(1));
  }
  corpus.profile.stain_matrix = spec.stain_matrix;
  corpus.profile.max_concentration = {
      stain::percentile_nearest_rank(c0, scfg.conc_percentile),
      stain::percentile_nearest_rank(c1, scfg.conc_percentile)};
  corpus.profile.template_ref = corpus.train.record(tpl).image_ref;
  corpus.profile.config = scfg;
  corpus.profile.validate();
  return corpus;
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

RunConfig load_run_config(const std::filesystem::path& path) {
  const json j = json::parse(io::read_text_file(path));
  RunConfig cfg;
  cfg.train_data = j.at("train_data").get<std::string>();
  cfg.test_data = j.at("test_data").get<std::string>();
  cfg.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("stain_profile")) cfg.stain_profile = j.at("stain_profile").get<std::string>();

  if (j.contains("distill")) {
    const json& d = j.at("distill");
    auto get = [&](const char* key, auto fallback) {
      using T = decltype(fallback);
      return d.contains(key) ? d.at(key).get<T>() : fallback;
    };
    cfg.distill.per_class = get("per_class", cfg.distill.per_class);
    cfg.distill.outer_steps = get("outer_steps", cfg.distill.outer_steps);
    cfg.distill.inner_steps = get("inner_steps", cfg.distill.inner_steps);
    cfg.distill.lr_syn = get("lr_syn", cfg.distill.lr_syn);
    cfg.distill.syn_momentum = get("syn_momentum", cfg.distill.syn_momentum);
    cfg.distill.lr_model = get("lr_model", cfg.distill.lr_model);
    cfg.distill.alpha = get("alpha", cfg.distill.alpha);
    cfg.distill.real_batch = get("real_batch", cfg.distill.real_batch);
    cfg.distill.seed = get("seed", cfg.distill.seed);
  }
  if (j.contains("augment")) {
    const json& a = j.at("augment");
    if (a.contains("ops")) cfg.aug_ops = a.at("ops").get<std::vector<std::string>>();
    if (a.contains("rotate_degrees"))
      cfg.distill.augment.rotate_degrees = a.at("rotate_degrees").get<double>();
    if (a.contains("scale_lo")) cfg.distill.augment.scale_range.first = a.at("scale_lo").get<double>();
    if (a.contains("scale_hi"))
      cfg.distill.augment.scale_range.second = a.at("scale_hi").get<double>();
  }
  if (j.contains("distill_arch")) {
    const json& a = j.at("distill_arch");
    cfg.distill_arch.name = a.value("name", std::string("resnet-ap-10"));
    cfg.distill_arch.width = a.value("width", 0);
    cfg.distill_arch.depth = a.value("depth", 3);
  } else {
    cfg.distill_arch.name = "resnet-ap-10";
  }
  if (j.contains("eval_archs")) cfg.eval_archs = j.at("eval_archs").get<std::vector<std::string>>();
  cfg.pool_size = j.value("pool_size", cfg.pool_size);
  cfg.pool_epochs = j.value("pool_epochs", cfg.pool_epochs);
  cfg.eval_epochs = j.value("eval_epochs", cfg.eval_epochs);
  if (j.contains("eval_seeds")) cfg.eval_seeds = j.at("eval_seeds").get<std::vector<uint64_t>>();
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

std::string run_config_canonical_json(const RunConfig& cfg) {
  json j;
  j["train_data"] = cfg.train_data.string();
  j["test_data"] = cfg.test_data.string();
  j["output_dir"] = cfg.output_dir.string();
  j["stain_profile"] = cfg.stain_profile.string();
  j["distill"] = {{"per_class", cfg.distill.per_class},
                  {"outer_steps", cfg.distill.outer_steps},
                  {"inner_steps", cfg.distill.inner_steps},
                  {"lr_syn", cfg.distill.lr_syn},
                  {"syn_momentum", cfg.distill.syn_momentum},
                  {"lr_model", cfg.distill.lr_model},
                  {"alpha", cfg.distill.alpha},
                  {"real_batch", cfg.distill.real_batch},
                  {"seed", cfg.distill.seed}};
  j["augment"] = {{"ops", cfg.aug_ops},
                  {"rotate_degrees", cfg.distill.augment.rotate_degrees},
                  {"scale_lo", cfg.distill.augment.scale_range.first},
                  {"scale_hi", cfg.distill.augment.scale_range.second}};
  j["distill_arch"] = {{"name", cfg.distill_arch.name},
                       {"width", cfg.distill_arch.width},
                       {"depth", cfg.distill_arch.depth}};
  j["eval_archs"] = cfg.eval_archs;
  j["pool_size"] = cfg.pool_size;
  j["pool_epochs"] = cfg.pool_epochs;
  j["eval_epochs"] = cfg.eval_epochs;
  j["eval_seeds"] = cfg.eval_seeds;
  j["seed"] = cfg.seed;
  return j.dump();
}

uint64_t run_config_hash(const RunConfig& cfg) {
  return io::fnv1a64(run_config_canonical_json(cfg));
}

bool deterministic_mode() {
  const char* v = std::getenv("HISTODISTILL_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

void apply_deterministic_mode() {
  if (!deterministic_mode()) return;
  Eigen::setNbThreads(1);
#ifdef _OPENMP
  omp_set_num_threads(1);
#endif
}

void write_contact_sheet(const distill::SyntheticSet& s, const std::filesystem::path& path) {
  const int cell = s.height;
  const int rows = static_cast<int>(s.classes.size());
  const int cols = s.per_class;
  const int pad = 2;
  const int hh = rows * (cell + pad) + pad;
  const int ww = cols * (s.width + pad) + pad;
  std::vector<double> sheet(static_cast<size_t>(3) * hh * ww, 1.0);
  const size_t sheet_plane = static_cast<size_t>(hh) * ww;
  const size_t img_plane = static_cast<size_t>(s.height) * s.width;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double* img =
          s.images[static_cast<size_t>(r)].data() + static_cast<size_t>(c) * 3 * img_plane;
      const int oy = pad + r * (cell + pad);
      const int ox = pad + c * (s.width + pad);
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < s.height; ++y)
          for (int x = 0; x < s.width; ++x)
            sheet[static_cast<size_t>(ch) * sheet_plane + static_cast<size_t>(oy + y) * ww +
                  (ox + x)] = img[static_cast<size_t>(ch) * img_plane +
                                  static_cast<size_t>(y) * s.width + x];
    }
  }
  io::write_png(path, sheet.data(), hh, ww);
}

}  // namespace histodistill::pipeline
