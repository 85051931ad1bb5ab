#include "histodistill/coreset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "histodistill/io.hpp"

namespace histodistill::coreset {

const char* method_name(Method m) {
  switch (m) {
    case Method::random: return "random";
    case Method::herding: return "herding";
    case Method::forgetting: return "forgetting";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  if (name == "random") return Method::random;
  if (name == "herding") return Method::herding;
  if (name == "forgetting") return Method::forgetting;
  throw std::invalid_argument("unknown coreset method: " + name);
}

void CoresetResult::validate(const data::PatchDataset& ds, int per_class) const {
  ad::check(static_cast<int>(selected.size()) == ds.num_classes(),
            "coreset: class slot count mismatch");
  for (int c = 0; c < ds.num_classes(); ++c) {
    const auto& sel = selected[static_cast<size_t>(c)];
    ad::check(static_cast<int>(sel.size()) == per_class, "coreset: wrong count for class " +
                                                             std::to_string(c));
    std::vector<int> sorted = sel;
    std::sort(sorted.begin(), sorted.end());
    ad::check(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
              "coreset: duplicate record in class " + std::to_string(c));
    for (int idx : sel) {
      ad::check(idx >= 0 && idx < static_cast<int>(ds.size()), "coreset: index out of range");
      ad::check(ds.record(static_cast<size_t>(idx)).label == c,
                "coreset: record class mismatch");
    }
  }
}

namespace {

void check_class_size(const data::PatchDataset& ds, int per_class) {
  for (int c = 0; c < ds.num_classes(); ++c)
    ad::check(static_cast<int>(ds.class_records(c).size()) >= per_class,
              "coreset: class " + std::to_string(c) + " smaller than m");
}

}  // namespace

CoresetResult random_select(const data::PatchDataset& ds, int per_class, Rng& rng) {
  check_class_size(ds, per_class);
  CoresetResult r;
  r.method = Method::random;
  for (int c = 0; c < ds.num_classes(); ++c) {
    std::vector<int> idx = ds.class_records(c);
    std::vector<int> sel;
    for (int i = 0; i < per_class; ++i) {
      const int64_t j = i + rng.uniform_int(static_cast<int64_t>(idx.size()) - i);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
      sel.push_back(idx[static_cast<size_t>(i)]);
    }
    r.selected.push_back(std::move(sel));
  }
  r.validate(ds, per_class);
  return r;
}

CoresetResult herding_select(const data::PatchDataset& ds, int per_class,
                             const nn::ModelSnapshot& feature_model, bool* degenerate_warned) {
  check_class_size(ds, per_class);
  // Penultimate-layer embeddings for every record, in chunks.
  ad::NoGradGuard off;
  auto params = nn::param_tensors(feature_model, false);
  std::vector<std::vector<double>> feats(ds.size());
  const size_t chunk = 256;
  for (size_t start = 0; start < ds.size(); start += chunk) {
    const size_t end = std::min(ds.size(), start + chunk);
    std::vector<int> idx(end - start);
    std::iota(idx.begin(), idx.end(), static_cast<int>(start));
    data::ImageBatch batch = data::gather_batch(ds, idx);
    ad::Tensor f = nn::forward_features(feature_model.arch, params, batch.pixels);
    const auto& fd = f.data();
    const int64_t dim = f.dim(1);
    for (size_t i = 0; i < idx.size(); ++i)
      feats[start + i].assign(fd.begin() + static_cast<int64_t>(i) * dim,
                              fd.begin() + static_cast<int64_t>(i + 1) * dim);
  }

  CoresetResult r;
  r.method = Method::herding;
  bool degenerate = false;
  for (int c = 0; c < ds.num_classes(); ++c) {
    const auto& pool = ds.class_records(c);
    const size_t dim = feats[static_cast<size_t>(pool[0])].size();

    std::vector<double> mean(dim, 0.0);
    for (int idx : pool)
      for (size_t d = 0; d < dim; ++d) mean[d] += feats[static_cast<size_t>(idx)][d];
    for (double& v : mean) v /= static_cast<double>(pool.size());

    bool all_same = true;
    for (int idx : pool)
      all_same = all_same && feats[static_cast<size_t>(idx)] == feats[static_cast<size_t>(pool[0])];
    if (all_same) {
      degenerate = true;
      std::vector<int> sel(pool.begin(), pool.begin() + per_class);
      r.selected.push_back(std::move(sel));
      continue;
    }

    std::vector<double> selected_sum(dim, 0.0);
    std::vector<bool> taken(pool.size(), false);
    std::vector<int> sel;
    for (int t = 0; t < per_class; ++t) {
      double best = std::numeric_limits<double>::infinity();
      size_t best_i = 0;
      for (size_t i = 0; i < pool.size(); ++i) {
        if (taken[i]) continue;
        const auto& f = feats[static_cast<size_t>(pool[i])];
        double d2 = 0.0;
        for (size_t d = 0; d < dim; ++d) {
          const double cand = (selected_sum[d] + f[d]) / static_cast<double>(t + 1);
          const double diff = mean[d] - cand;
          d2 += diff * diff;
        }
        if (d2 < best) {  // strict < keeps the lowest record index on ties
          best = d2;
          best_i = i;
        }
      }
      taken[best_i] = true;
      const auto& f = feats[static_cast<size_t>(pool[best_i])];
      for (size_t d = 0; d < dim; ++d) selected_sum[d] += f[d];
      sel.push_back(pool[best_i]);
      r.scores[pool[best_i]] = std::sqrt(best);
    }
    r.selected.push_back(std::move(sel));
  }
  if (degenerate_warned) *degenerate_warned = degenerate;
  r.validate(ds, per_class);
  return r;
}

double forgetting_score(const std::vector<bool>& correct_per_epoch) {
  bool ever_correct = false;
  int events = 0;
  for (size_t e = 0; e < correct_per_epoch.size(); ++e) {
    ever_correct = ever_correct || correct_per_epoch[e];
    if (e > 0 && correct_per_epoch[e - 1] && !correct_per_epoch[e]) ++events;
  }
  if (!ever_correct) return std::numeric_limits<double>::infinity();
  return static_cast<double>(events);
}

CoresetResult forgetting_select(const data::PatchDataset& ds, int per_class,
                                const nn::ArchitectureSpec& arch, int epochs, Rng& rng) {
  ad::check(epochs >= 2, "forgetting_select: need at least 2 epochs");
  check_class_size(ds, per_class);

  const nn::TrainData data = nn::train_data_from_dataset(ds);
  nn::ModelSnapshot model = nn::build_model(arch, rng.next_u64());
  Rng trng = rng.fork();

  std::vector<std::vector<bool>> history(ds.size());
  nn::SgdConfig cfg;
  for (int e = 0; e < epochs; ++e) {
    nn::train_snapshot_with_retry(model, data, 1, cfg, trng);
    const std::vector<bool> correct = nn::predictions_correct(model, data);
    for (size_t i = 0; i < ds.size(); ++i) history[i].push_back(correct[i]);
  }

  CoresetResult r;
  r.method = Method::forgetting;
  std::vector<double> score(ds.size(), 0.0);
  for (size_t i = 0; i < ds.size(); ++i) {
    score[i] = forgetting_score(history[i]);
    r.scores[static_cast<int>(i)] = score[i];
  }
  for (int c = 0; c < ds.num_classes(); ++c) {
    std::vector<int> pool = ds.class_records(c);
    // Highest score first; lowest index wins ties.
    std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) {
      const double sa = score[static_cast<size_t>(a)], sb = score[static_cast<size_t>(b)];
      if (sa != sb) return sa > sb;
      return a < b;
    });
    r.selected.emplace_back(pool.begin(), pool.begin() + per_class);
  }
  r.validate(ds, per_class);
  return r;
}

nn::TrainData to_train_data(const data::PatchDataset& ds, const CoresetResult& r) {
  nn::TrainData t;
  t.height = ds.height();
  t.width = ds.width();
  for (const auto& cls : r.selected) {
    for (int idx : cls) {
      const auto& px = ds.pixels(static_cast<size_t>(idx));
      t.images.emplace_back(px.begin(), px.end());
      t.labels.push_back(ds.record(static_cast<size_t>(idx)).label);
    }
  }
  return t;
}

void save_coreset(const CoresetResult& r, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "method=" << method_name(r.method) << "\n";
  os << "class,record_index\n";
  for (size_t c = 0; c < r.selected.size(); ++c)
    for (int idx : r.selected[c]) os << c << "," << idx << "\n";
  io::write_text_file(path, os.str());
}

CoresetResult load_coreset(const std::filesystem::path& path) {
  std::istringstream in(io::read_text_file(path));
  std::string line;
  CoresetResult r;
  if (!std::getline(in, line) || line.rfind("method=", 0) != 0)
    throw std::runtime_error("coreset file: missing method header");
  r.method = method_from_name(line.substr(7));
  std::getline(in, line);  // column header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = io::split_csv_line(line);
    if (cols.size() != 2) throw std::runtime_error("coreset file: bad line " + line);
    const auto cls = static_cast<size_t>(std::stoi(cols[0]));
    if (r.selected.size() <= cls) r.selected.resize(cls + 1);
    r.selected[cls].push_back(std::stoi(cols[1]));
  }
  return r;
}

}  // namespace histodistill::coreset
