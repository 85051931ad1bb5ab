#include "histodistill/distill.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "histodistill/io.hpp"

namespace histodistill::distill {

using ad::Tensor;
using nlohmann::json;

namespace {

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

void DistillConfig::validate() const {
  ad::check(per_class >= 1 && outer_steps >= 0 && inner_steps >= 1,
            "distill config: need m >= 1, K >= 0, U >= 1");
  ad::check(lr_syn >= 0.0 && lr_model >= 0.0, "distill config: learning rates must be >= 0");
  ad::check(alpha >= 0.0, "distill config: alpha must be >= 0");
  ad::check(real_batch >= 1, "distill config: real_batch must be >= 1");
  ad::check(distance == "l1", "distill config: only the l1 distance is supported");
  augment.validate();
}

void SyntheticSet::validate() const {
  ad::check(!classes.empty() && per_class >= 1, "synthetic set: empty");
  ad::check(images.size() == classes.size() && velocity.size() == classes.size(),
            "synthetic set: slice count mismatch");
  const size_t expect = static_cast<size_t>(per_class) * 3 * height * width;
  for (size_t i = 0; i < images.size(); ++i) {
    ad::check(images[i].size() == expect && velocity[i].size() == expect,
              "synthetic set: slice size mismatch");
    for (double v : images[i])
      ad::check(v >= 0.0 && v <= 1.0, "synthetic set: pixel outside [0,1]");
  }
}

nn::TrainData SyntheticSet::to_train_data() const {
  nn::TrainData t;
  t.height = height;
  t.width = width;
  const size_t per = static_cast<size_t>(3) * height * width;
  for (size_t ci = 0; ci < classes.size(); ++ci) {
    for (int i = 0; i < per_class; ++i) {
      const double* base = images[ci].data() + static_cast<size_t>(i) * per;
      t.images.emplace_back(base, base + per);
      t.labels.push_back(classes[ci]);
    }
  }
  return t;
}

std::vector<double> RunLog::per_outer_mean() const {
  std::vector<double> sums, counts;
  for (const auto& s : steps) {
    const auto k = static_cast<size_t>(s.outer);
    if (k >= sums.size()) {
      sums.resize(k + 1, 0.0);
      counts.resize(k + 1, 0.0);
    }
    sums[k] += s.loss;
    counts[k] += 1.0;
  }
  std::vector<double> out(sums.size(), 0.0);
  for (size_t i = 0; i < sums.size(); ++i) out[i] = counts[i] > 0 ? sums[i] / counts[i] : 0.0;
  return out;
}

void RunLog::save(const std::filesystem::path& path) const {
  std::ostringstream os;
  os << "outer,inner,class,loss,wall_s\n";
  char buf[128];
  for (const auto& s : steps) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.17g,%.6f\n", s.outer, s.inner, s.cls, s.loss,
                  s.wall_s);
    os << buf;
  }
  io::write_text_file(path, os.str());
}

RunLog RunLog::load(const std::filesystem::path& path) {
  std::istringstream in(io::read_text_file(path));
  std::string line;
  RunLog log;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto cols = io::split_csv_line(line);
    if (cols.size() != 5) throw std::runtime_error("run log: bad line: " + line);
    StepRecord r;
    r.outer = std::stoi(cols[0]);
    r.inner = std::stoi(cols[1]);
    r.cls = std::stoi(cols[2]);
    r.loss = std::stod(cols[3]);
    r.wall_s = std::stod(cols[4]);
    log.steps.push_back(r);
  }
  return log;
}

SyntheticSet init_synthetic(const data::PatchDataset& ds, int per_class, Rng& rng) {
  ad::check(per_class >= 1, "init_synthetic: per_class must be >= 1");
  const auto classes = ds.present_classes();
  ad::check(!classes.empty(), "init_synthetic: dataset has no populated class");

  SyntheticSet s;
  s.classes = classes;
  s.per_class = per_class;
  s.height = ds.height();
  s.width = ds.width();
  s.provenance = "random-real-init";
  const size_t per = static_cast<size_t>(3) * s.height * s.width;

  for (int cls : classes) {
    const auto& pool = ds.class_records(cls);
    std::vector<double> slice(static_cast<size_t>(per_class) * per);
    // Uniform without replacement when the class is large enough.
    std::vector<int> chosen;
    if (per_class <= static_cast<int>(pool.size())) {
      std::vector<int> idx = pool;
      for (int i = 0; i < per_class; ++i) {
        const int64_t j = i + rng.uniform_int(static_cast<int64_t>(idx.size()) - i);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        chosen.push_back(idx[static_cast<size_t>(i)]);
      }
    } else {
      for (int i = 0; i < per_class; ++i)
        chosen.push_back(
            pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))]);
    }
    for (int i = 0; i < per_class; ++i) {
      const auto& px = ds.pixels(static_cast<size_t>(chosen[static_cast<size_t>(i)]));
      for (size_t j = 0; j < per; ++j)
        slice[static_cast<size_t>(i) * per + j] = static_cast<double>(px[j]);
    }
    s.images.push_back(std::move(slice));
    s.velocity.emplace_back(static_cast<size_t>(per_class) * per, 0.0);
  }
  return s;
}

double layer_gradient_distance(const std::vector<nn::NamedArray>& a,
                               const std::vector<nn::NamedArray>& b) {
  ad::check(a.size() == b.size(), "layer_gradient_distance: layer count mismatch");
  double total = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ad::check(a[i].name == b[i].name && a[i].shape == b[i].shape,
              "layer_gradient_distance: mismatched layer " + a[i].name);
    for (size_t j = 0; j < a[i].data.size(); ++j)
      total += std::fabs(a[i].data[j] - b[i].data[j]);
  }
  return total;
}

MatchStats match_step(SyntheticSet& synthetic, const data::PatchDataset& ds,
                      const nn::ModelSnapshot& model, const DistillConfig& cfg, Rng& rng) {
  cfg.validate();
  synthetic.validate();
  ad::check(ds.num_classes() == model.arch.num_classes,
            "match_step: dataset/model class count mismatch");

  MatchStats stats;
  const int64_t h = synthetic.height, w = synthetic.width;

  for (size_t ci = 0; ci < synthetic.classes.size(); ++ci) {
    const int cls = synthetic.classes[ci];

    data::ImageBatch real = data::sample_class_batch(ds, cls, cfg.real_batch, rng);
    Tensor syn_leaf = Tensor::from_data({synthetic.per_class, 3, h, w}, synthetic.images[ci],
                                        /*requires_grad=*/true);
    data::ImageBatch syn;
    syn.pixels = syn_leaf;
    syn.labels.assign(static_cast<size_t>(synthetic.per_class), cls);

    aug::SiamesePair pair{real, syn};
    if (cfg.augment.enabled()) pair = aug::apply_siamese(pair, cfg.augment, rng);

    // Real-branch gradients are constants of the matching objective.
    std::vector<Tensor> real_grads;
    auto params = nn::param_tensors(model, /*requires_grad=*/true);
    std::vector<Tensor> wrt;
    wrt.reserve(params.size());
    for (auto& [name, t] : params) wrt.push_back(t);
    {
      Tensor loss_real =
          ad::softmax_cross_entropy(nn::forward(model.arch, params, pair.real.pixels),
                                    pair.real.labels);
      real_grads = ad::grad(loss_real, wrt);  // detached values
    }

    // Synthetic-branch gradients stay on the tape.
    Tensor loss_syn = ad::softmax_cross_entropy(
        nn::forward(model.arch, params, pair.synthetic.pixels), pair.synthetic.labels);
    auto syn_grads = ad::grad(loss_syn, wrt, {.create_graph = true});

    Tensor dist;
    for (size_t i = 0; i < syn_grads.size(); ++i) {
      Tensor term = ad::sum_all(ad::abs(ad::sub(syn_grads[i], real_grads[i].detach())));
      dist = dist.defined() ? ad::add(dist, term) : term;
    }

    const double loss_value = dist.item();
    stats.classes.push_back(cls);
    if (!std::isfinite(loss_value)) {
      stats.class_loss.push_back(loss_value);
      ++stats.skipped;
      continue;
    }
    stats.class_loss.push_back(loss_value);

    if (cfg.lr_syn > 0.0) {
      Tensor g = ad::grad(dist, {syn_leaf})[0];
      auto& imgs = synthetic.images[ci];
      auto& vel = synthetic.velocity[ci];
      const auto& gd = g.data();
      for (size_t j = 0; j < imgs.size(); ++j) {
        vel[j] = cfg.syn_momentum * vel[j] + gd[j];
        imgs[j] = std::min(1.0, std::max(0.0, imgs[j] - cfg.lr_syn * vel[j]));
      }
    }
  }
  return stats;
}

nn::ModelSnapshot inner_model_update(const nn::ModelSnapshot& model, const data::PatchDataset& ds,
                                     const DistillConfig& cfg, Rng& rng, bool* skipped) {
  // Balanced batch: real_batch records from every populated class.
  std::vector<data::ImageBatch> parts;
  const auto classes = ds.present_classes();
  int64_t total = 0;
  for (int cls : classes) {
    parts.push_back(data::sample_class_batch(ds, cls, cfg.real_batch, rng));
    total += parts.back().size();
  }
  const int64_t h = ds.height(), w = ds.width();
  std::vector<double> buf(static_cast<size_t>(total * 3 * h * w));
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(total));
  size_t off = 0;
  for (const auto& p : parts) {
    const auto& src = p.pixels.data();
    std::copy(src.begin(), src.end(), buf.begin() + static_cast<int64_t>(off));
    off += src.size();
    labels.insert(labels.end(), p.labels.begin(), p.labels.end());
  }
  data::ImageBatch batch;
  batch.pixels = Tensor::from_data({total, 3, h, w}, std::move(buf));
  batch.labels = std::move(labels);

  nn::ModelSnapshot out = model;
  auto params = nn::param_tensors(out, /*requires_grad=*/true);
  Tensor loss = ad::softmax_cross_entropy(nn::forward(out.arch, params, batch.pixels),
                                          batch.labels);
  if (!std::isfinite(loss.item())) {
    if (skipped) *skipped = true;
    return out;
  }
  if (skipped) *skipped = false;
  if (cfg.lr_model == 0.0) return out;
  std::vector<Tensor> wrt;
  wrt.reserve(params.size());
  for (auto& [name, t] : params) wrt.push_back(t);
  auto gs = ad::grad(loss, wrt);
  for (size_t i = 0; i < out.params.size(); ++i) {
    auto& theta = out.params[i].data;
    const auto& g = gs[i].data();
    for (size_t j = 0; j < theta.size(); ++j) theta[j] -= cfg.lr_model * g[j];
  }
  return out;
}

std::pair<SyntheticSet, RunLog> run_distillation(const data::PatchDataset& ds,
                                                 const nn::ModelPool& pool,
                                                 const DistillConfig& cfg) {
  cfg.validate();
  pool.validate();
  ad::check(pool.snapshots[0].arch.num_classes == ds.num_classes(),
            "distill: pool architecture does not match dataset classes");

  Rng rng(cfg.seed);
  SyntheticSet synthetic = init_synthetic(ds, cfg.per_class, rng);
  RunLog log;
  const double t0 = now_s();

  for (int k = 0; k < cfg.outer_steps; ++k) {
    nn::ModelSnapshot working = pool.pick(rng);
    working = nn::perturb_model(working, cfg.alpha, rng);
    for (int u = 0; u < cfg.inner_steps; ++u) {
      MatchStats stats = match_step(synthetic, ds, working, cfg, rng);
      const double t = now_s() - t0;
      for (size_t i = 0; i < stats.classes.size(); ++i) {
        if (!std::isfinite(stats.class_loss[i])) continue;
        log.steps.push_back(StepRecord{k, u, stats.classes[i], stats.class_loss[i], t});
      }
      log.skipped_class_steps += stats.skipped;
      if (stats.skipped == static_cast<int>(stats.classes.size()))
        throw std::runtime_error("distill: every class failed in one sweep (outer " +
                                 std::to_string(k) + ", inner " + std::to_string(u) + ")");
      bool skipped = false;
      working = inner_model_update(working, ds, cfg, rng, &skipped);
      if (skipped) ++log.skipped_model_updates;
    }
  }
  return {std::move(synthetic), std::move(log)};
}

void save_synthetic(const SyntheticSet& s, const std::filesystem::path& dir,
                    uint64_t config_hash) {
  std::filesystem::create_directories(dir);
  const size_t per = static_cast<size_t>(3) * s.height * s.width;
  const int64_t n = s.total_images();
  std::vector<float> dump(static_cast<size_t>(n) * per);
  char name[64];
  size_t img = 0;
  for (size_t ci = 0; ci < s.classes.size(); ++ci) {
    for (int i = 0; i < s.per_class; ++i, ++img) {
      const double* base = s.images[ci].data() + static_cast<size_t>(i) * per;
      std::snprintf(name, sizeof(name), "class%d_idx%d.png", s.classes[ci], i);
      io::write_png(dir / name, base, s.height, s.width);
      for (size_t j = 0; j < per; ++j) dump[img * per + j] = static_cast<float>(base[j]);
    }
  }
  io::save_npy_f4(dir / "images.npy", {n, 3, s.height, s.width}, dump.data());

  json meta;
  meta["classes"] = s.classes;
  meta["per_class"] = s.per_class;
  meta["height"] = s.height;
  meta["width"] = s.width;
  meta["seed"] = s.seed;
  meta["provenance"] = s.provenance;
  meta["config_hash"] = config_hash;
  io::write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

SyntheticSet load_synthetic(const std::filesystem::path& dir) {
  const json meta = json::parse(io::read_text_file(dir / "meta.json"));
  SyntheticSet s;
  s.classes = meta.at("classes").get<std::vector<int>>();
  s.per_class = meta.at("per_class").get<int>();
  s.height = meta.at("height").get<int>();
  s.width = meta.at("width").get<int>();
  s.seed = meta.at("seed").get<uint64_t>();
  s.provenance = meta.at("provenance").get<std::string>();

  const io::NpyArray arr = io::load_npy(dir / "images.npy");
  const size_t per = static_cast<size_t>(3) * s.height * s.width;
  ad::check(arr.data.size() == s.classes.size() * static_cast<size_t>(s.per_class) * per,
            "load_synthetic: dump size mismatch");
  size_t off = 0;
  for (size_t ci = 0; ci < s.classes.size(); ++ci) {
    const size_t slice = static_cast<size_t>(s.per_class) * per;
    s.images.emplace_back(arr.data.begin() + static_cast<int64_t>(off),
                          arr.data.begin() + static_cast<int64_t>(off + slice));
    s.velocity.emplace_back(slice, 0.0);
    off += slice;
  }
  s.validate();
  return s;
}

uint64_t synthetic_config_hash(const std::filesystem::path& dir) {
  const json meta = json::parse(io::read_text_file(dir / "meta.json"));
  return meta.at("config_hash").get<uint64_t>();
}

}  // namespace histodistill::distill
