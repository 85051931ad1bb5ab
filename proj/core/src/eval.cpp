#include "histodistill/eval.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "histodistill/io.hpp"

namespace histodistill::eval {

using ad::Tensor;
using nlohmann::json;

namespace {

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::pair<double, double> mean_population_std(const std::vector<double>& xs) {
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, std::sqrt(var)};
}

}  // namespace

void EvalReport::validate() const {
  ad::check(accuracy_std >= 0.0, "eval report: negative std");
  ad::check(accuracy_mean >= 0.0 && accuracy_mean <= 100.0, "eval report: accuracy out of range");
  std::vector<uint64_t> s = seeds;
  std::sort(s.begin(), s.end());
  ad::check(std::adjacent_find(s.begin(), s.end()) == s.end(), "eval report: duplicate seeds");
}

uint64_t png_payload_bytes(const nn::TrainData& data) {
  uint64_t total = 0;
  const int h = data.height, w = data.width;
  const size_t plane = static_cast<size_t>(h) * static_cast<size_t>(w);
  cv::Mat bgr(h, w, CV_8UC3);
  std::vector<uchar> buf;
  for (const auto& img : data.images) {
    for (int r = 0; r < h; ++r) {
      uchar* row = bgr.ptr<uchar>(r);
      for (int c = 0; c < w; ++c) {
        const size_t p = static_cast<size_t>(r) * w + c;
        auto q = [](double v) {
          return static_cast<uchar>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
        };
        row[3 * c + 2] = q(img[p]);
        row[3 * c + 1] = q(img[plane + p]);
        row[3 * c + 0] = q(img[2 * plane + p]);
      }
    }
    buf.clear();
    cv::imencode(".png", bgr, buf);
    total += buf.size();
  }
  return total;
}

TrainSource source_from_dataset(const data::PatchDataset& ds, const std::string& descriptor) {
  TrainSource s;
  s.data = nn::train_data_from_dataset(ds);
  s.descriptor = descriptor;
  s.storage_bytes = png_payload_bytes(s.data);
  return s;
}

TrainSource source_from_synthetic(const distill::SyntheticSet& set) {
  TrainSource s;
  s.data = set.to_train_data();
  s.descriptor = "synthetic(" + std::to_string(set.per_class) + ")";
  s.storage_bytes = png_payload_bytes(s.data);
  return s;
}

nn::ModelSnapshot train_classifier(const nn::TrainData& data, const nn::ArchitectureSpec& arch,
                                   int epochs, uint64_t seed,
                                   const aug::AugmentationSpec* augment, const nn::SgdConfig& cfg,
                                   double* per_epoch_s) {
  nn::ModelSnapshot m = nn::build_model(arch, seed);
  if (epochs <= 0) {
    if (per_epoch_s) *per_epoch_s = 0.0;
    return m;
  }
  Rng rng(seed ^ 0x7f4a7c15ULL);
  const double t0 = now_s();
  nn::train_snapshot_with_retry(m, data, epochs, cfg, rng, augment);
  if (per_epoch_s) *per_epoch_s = (now_s() - t0) / static_cast<double>(epochs);
  return m;
}

double evaluate(const nn::ModelSnapshot& m, const data::PatchDataset& test) {
  ad::check(!test.empty(), "evaluate: empty test set");
  const nn::TrainData data = nn::train_data_from_dataset(test);
  const std::vector<bool> correct = nn::predictions_correct(m, data);
  int64_t hits = 0;
  for (bool c : correct) hits += c ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(correct.size());
}

EvalReport repeat_eval(const TrainSource& source, const nn::ArchitectureSpec& arch,
                       const data::PatchDataset& test, int epochs,
                       const std::vector<uint64_t>& seeds, const aug::AugmentationSpec* augment,
                       const nn::SgdConfig& cfg) {
  ad::check(seeds.size() >= 2, "repeat_eval: need at least 2 seeds");
  std::vector<double> accs;
  double epoch_time = 0.0;
  for (uint64_t seed : seeds) {
    double t = 0.0;
    nn::ModelSnapshot m = train_classifier(source.data, arch, epochs, seed, augment, cfg, &t);
    accs.push_back(evaluate(m, test));
    epoch_time += t;
  }
  const auto [mean, sd] = mean_population_std(accs);
  EvalReport r;
  r.accuracy_mean = mean;
  r.accuracy_std = sd;
  r.seeds = seeds;
  r.per_epoch_time_s = epoch_time / static_cast<double>(seeds.size());
  r.epochs = epochs;
  r.arch = arch.name;
  r.train_source = source.descriptor;
  r.storage_bytes = source.storage_bytes;
  r.validate();
  return r;
}

std::vector<EvalReport> cross_arch_eval(const distill::SyntheticSet& synthetic,
                                        const std::vector<nn::ArchitectureSpec>& archs,
                                        const data::PatchDataset& test, int epochs,
                                        const std::vector<uint64_t>& seeds,
                                        const aug::AugmentationSpec* augment,
                                        const nn::SgdConfig& cfg) {
  ad::check(!archs.empty(), "cross_arch_eval: no architectures");
  const TrainSource source = source_from_synthetic(synthetic);
  std::vector<EvalReport> out;
  out.reserve(archs.size());
  for (const auto& arch : archs)
    out.push_back(repeat_eval(source, arch, test, epochs, seeds, augment, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// MIL
// ---------------------------------------------------------------------------

std::vector<SlideBag> bags_from_dataset(const data::PatchDataset& ds) {
  std::vector<SlideBag> bags;
  for (const auto& [slide, idxs] : ds.slide_index()) {
    SlideBag bag;
    bag.slide_id = slide;
    bag.instances = data::gather_batch(ds, idxs);
    bag.bag_label = ds.record(static_cast<size_t>(idxs[0])).label;
    for (int i : idxs)
      ad::check(ds.record(static_cast<size_t>(i)).label == bag.bag_label,
                "bags_from_dataset: slide " + slide + " mixes labels");
    bags.push_back(std::move(bag));
  }
  return bags;
}

namespace {

constexpr int kAttentionDim = 64;

}  // namespace

MilModel build_mil_model(Aggregator agg, int num_classes, std::array<int, 3> input_shape,
                         uint64_t seed) {
  MilModel m;
  m.encoder.name = "convnet3";
  m.encoder.num_classes = num_classes;  // head unused; kept for arch validity
  m.encoder.input_shape = input_shape;
  m.aggregator = agg;
  m.num_classes = num_classes;

  nn::ModelSnapshot enc = nn::build_model(m.encoder, seed);
  const int feat = [&] {
    int64_t f = 0;
    for (const auto& p : enc.params)
      if (p.name == "head.weight") f = p.shape[1];
    return static_cast<int>(f);
  }();
  for (auto& p : enc.params) {
    if (p.name.rfind("head.", 0) == 0) continue;  // trunk only
    m.params.push_back(std::move(p));
  }
  Rng rng(seed ^ 0x94d049bbULL);
  auto normal = [&](int64_t n, double stddev) {
    std::vector<double> d(static_cast<size_t>(n));
    for (auto& v : d) v = rng.normal() * stddev;
    return d;
  };
  if (agg == Aggregator::attention) {
    m.params.push_back(nn::NamedArray{"att.v.weight", {kAttentionDim, feat},
                                      normal(static_cast<int64_t>(kAttentionDim) * feat,
                                             std::sqrt(1.0 / feat))});
    m.params.push_back(nn::NamedArray{"att.w.weight", {1, kAttentionDim},
                                      normal(kAttentionDim, std::sqrt(1.0 / kAttentionDim))});
  }
  m.params.push_back(nn::NamedArray{
      "bag_head.weight", {num_classes, feat},
      normal(static_cast<int64_t>(num_classes) * feat, std::sqrt(1.0 / feat))});
  m.params.push_back(
      nn::NamedArray{"bag_head.bias", {num_classes},
                     std::vector<double>(static_cast<size_t>(num_classes), 0.0)});
  return m;
}

namespace {

Tensor mil_bag_features(const MilModel& m,
                        const std::vector<std::pair<std::string, Tensor>>& params,
                        const Tensor& instances, Tensor* attention_out) {
  Tensor feats = nn::forward_features(m.encoder, params, instances);  // (n, feat)
  const int64_t n = feats.dim(0), feat = feats.dim(1);
  if (m.aggregator == Aggregator::mean) {
    if (attention_out)
      *attention_out = Tensor::full({n, 1}, 1.0 / static_cast<double>(n));
    return ad::reshape(ad::mean_axes(feats, {0}, false), {1, feat});
  }
  const Tensor* v = nullptr;
  const Tensor* w = nullptr;
  for (const auto& [name, t] : params) {
    if (name == "att.v.weight") v = &t;
    if (name == "att.w.weight") w = &t;
  }
  ad::check(v && w, "mil_forward: missing attention parameters");
  Tensor scores = ad::matmul(ad::tanh(ad::matmul(feats, ad::transpose2d(*v))),
                             ad::transpose2d(*w));            // (n, 1)
  Tensor att = ad::softmax2d(scores, 0);                      // weights sum to 1 per bag
  if (attention_out) *attention_out = att;
  return ad::matmul(ad::transpose2d(att), feats);             // (1, feat)
}

}  // namespace

Tensor mil_forward(const MilModel& m,
                   const std::vector<std::pair<std::string, Tensor>>& params,
                   const Tensor& instances) {
  Tensor bag = mil_bag_features(m, params, instances, nullptr);
  const Tensor* hw = nullptr;
  const Tensor* hb = nullptr;
  for (const auto& [name, t] : params) {
    if (name == "bag_head.weight") hw = &t;
    if (name == "bag_head.bias") hb = &t;
  }
  ad::check(hw && hb, "mil_forward: missing bag head");
  return ad::badd(ad::matmul(bag, ad::transpose2d(*hw)), ad::reshape(*hb, {1, m.num_classes}));
}

std::vector<double> mil_attention_weights(const MilModel& m, const data::ImageBatch& bag) {
  ad::NoGradGuard off;
  std::vector<std::pair<std::string, Tensor>> params;
  for (const auto& p : m.params)
    params.emplace_back(p.name, Tensor::from_data(p.shape, p.data, false));
  Tensor att;
  mil_bag_features(m, params, bag.pixels, &att);
  return att.data();
}

double mil_bag_accuracy(const MilModel& m, const std::vector<SlideBag>& bags) {
  ad::NoGradGuard off;
  std::vector<std::pair<std::string, Tensor>> params;
  for (const auto& p : m.params)
    params.emplace_back(p.name, Tensor::from_data(p.shape, p.data, false));
  int hits = 0;
  for (const auto& bag : bags) {
    Tensor logits = mil_forward(m, params, bag.instances.pixels);
    const auto& lv = logits.data();
    int best = 0;
    for (size_t j = 1; j < lv.size(); ++j)
      if (lv[j] > lv[static_cast<size_t>(best)]) best = static_cast<int>(j);
    hits += best == bag.bag_label ? 1 : 0;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(bags.size());
}

EvalReport mil_eval(const std::vector<SlideBag>& train_bags,
                    const std::vector<SlideBag>& test_bags, Aggregator agg, int epochs,
                    const std::vector<uint64_t>& seeds, const nn::SgdConfig& cfg) {
  ad::check(!train_bags.empty() && !test_bags.empty(), "mil_eval: empty bag set");
  const auto shape = train_bags[0].instances.pixels.shape();
  const std::array<int, 3> input_shape{static_cast<int>(shape[1]), static_cast<int>(shape[2]),
                                       static_cast<int>(shape[3])};
  int num_classes = 0;
  for (const auto& b : train_bags) num_classes = std::max(num_classes, b.bag_label + 1);
  for (const auto& b : test_bags) num_classes = std::max(num_classes, b.bag_label + 1);

  std::vector<double> accs;
  double epoch_time = 0.0;
  for (uint64_t seed : seeds) {
    MilModel m = build_mil_model(agg, num_classes, input_shape, seed);
    Rng rng(seed ^ 0xbf58476dULL);
    std::vector<std::vector<double>> velocity(m.params.size());
    for (size_t i = 0; i < m.params.size(); ++i) velocity[i].assign(m.params[i].data.size(), 0.0);
    std::vector<int> order(train_bags.size());
    std::iota(order.begin(), order.end(), 0);

    const double t0 = now_s();
    for (int e = 0; e < epochs; ++e) {
      for (size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
        std::swap(order[i - 1], order[j]);
      }
      for (int bi : order) {
        const SlideBag& bag = train_bags[static_cast<size_t>(bi)];
        std::vector<std::pair<std::string, Tensor>> params;
        params.reserve(m.params.size());
        for (const auto& p : m.params)
          params.emplace_back(p.name, Tensor::from_data(p.shape, p.data, true));
        Tensor loss = ad::softmax_cross_entropy(mil_forward(m, params, bag.instances.pixels),
                                                {bag.bag_label});
        if (!std::isfinite(loss.item())) continue;  // skip pathological bags
        std::vector<Tensor> wrt;
        for (auto& [name, t] : params) wrt.push_back(t);
        auto gs = ad::grad(loss, wrt);
        for (size_t i = 0; i < m.params.size(); ++i) {
          auto& theta = m.params[i].data;
          auto& v = velocity[i];
          const auto& g = gs[i].data();
          for (size_t j = 0; j < theta.size(); ++j) {
            v[j] = cfg.momentum * v[j] + g[j];
            theta[j] -= cfg.lr * v[j];
          }
        }
      }
    }
    if (epochs > 0) epoch_time += (now_s() - t0) / epochs;
    accs.push_back(mil_bag_accuracy(m, test_bags));
  }

  const auto [mean, sd] = mean_population_std(accs);
  EvalReport r;
  r.accuracy_mean = mean;
  r.accuracy_std = sd;
  r.seeds = seeds;
  r.per_epoch_time_s = epoch_time / static_cast<double>(seeds.size());
  r.epochs = epochs;
  r.arch = agg == Aggregator::attention ? "mil-attention" : "mil-mean";
  r.train_source = "bags(" + std::to_string(train_bags.size()) + ")";
  r.validate();
  return r;
}

EvalReport transfer_eval(const nn::ModelSnapshot& pretrained, const TrainSource& target_source,
                         const data::PatchDataset& target_test, int epochs,
                         const std::vector<uint64_t>& seeds, const aug::AugmentationSpec* augment,
                         const nn::SgdConfig& cfg) {
  std::vector<double> accs;
  double epoch_time = 0.0;
  for (uint64_t seed : seeds) {
    nn::ModelSnapshot m = pretrained;  // fine-tuning updates every parameter
    if (epochs > 0) {
      Rng rng(seed ^ 0x1ce4e5b9ULL);
      const double t0 = now_s();
      nn::train_snapshot_with_retry(m, target_source.data, epochs, cfg, rng, augment);
      epoch_time += (now_s() - t0) / epochs;
    }
    accs.push_back(evaluate(m, target_test));
  }
  const auto [mean, sd] = mean_population_std(accs);
  EvalReport r;
  r.accuracy_mean = mean;
  r.accuracy_std = sd;
  r.seeds = seeds;
  r.per_epoch_time_s = epoch_time / static_cast<double>(seeds.size());
  r.epochs = epochs;
  r.arch = pretrained.arch.name;
  r.train_source = target_source.descriptor;
  r.storage_bytes = target_source.storage_bytes;
  r.validate();
  return r;
}

void append_report_jsonl(const EvalReport& r, const std::filesystem::path& path) {
  json j;
  j["accuracy_mean"] = r.accuracy_mean;
  j["accuracy_std"] = r.accuracy_std;
  j["seeds"] = r.seeds;
  j["per_epoch_time_s"] = r.per_epoch_time_s;
  j["epochs"] = r.epochs;
  j["arch"] = r.arch;
  j["train_source"] = r.train_source;
  j["storage_bytes"] = r.storage_bytes;
  j["config_hash"] = r.config_hash;
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot open report file: " + path.string());
  f << j.dump() << "\n";
}

std::string format_report_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-24s %-14s %10s %10s %12s %12s\n", "source", "arch",
                "acc_mean", "acc_std", "epoch_s", "bytes");
  os << buf;
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "%-24s %-14s %10.2f %10.2f %12.4f %12llu\n",
                  r.train_source.c_str(), r.arch.c_str(), r.accuracy_mean, r.accuracy_std,
                  r.per_epoch_time_s, static_cast<unsigned long long>(r.storage_bytes));
    os << buf;
  }
  return os.str();
}

}  // namespace histodistill::eval
