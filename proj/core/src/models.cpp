#include "histodistill/models.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <unordered_map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "histodistill/io.hpp"

namespace histodistill::nn {

using ad::Tensor;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// cached index maps for conv / pooling layouts
// ---------------------------------------------------------------------------

using Key = std::array<int64_t, 7>;

struct KeyHash {
  size_t operator()(const Key& k) const {
    size_t h = 1469598103934665603ULL;
    for (int64_t v : k) {
      h ^= static_cast<size_t>(v);
      h *= 1099511628211ULL;
    }
    return h;
  }
};

ad::IndexArray cached(const Key& key, const std::function<std::vector<int64_t>()>& make) {
  static std::unordered_map<Key, ad::IndexArray, KeyHash> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto arr = std::make_shared<const std::vector<int64_t>>(make());
  cache.emplace(key, arr);
  return arr;
}

ad::IndexArray pad_indices(int64_t b, int64_t c, int64_t h, int64_t w, int64_t p) {
  return cached({0, b, c, h, w, p, 0}, [=] {
    const int64_t hp = h + 2 * p, wp = w + 2 * p;
    std::vector<int64_t> idx(static_cast<size_t>(b * c * h * w));
    int64_t o = 0;
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j)
            idx[static_cast<size_t>(o++)] =
                ((bi * c + ci) * hp + (i + p)) * wp + (j + p);
    return idx;
  });
}

// Output layout (B*OH*OW, C*K*K) over a padded (B,C,HP,WP) input, stride 1.
ad::IndexArray im2col_indices(int64_t b, int64_t c, int64_t hp, int64_t wp, int64_t k) {
  return cached({1, b, c, hp, wp, k, 0}, [=] {
    const int64_t oh = hp - k + 1, ow = wp - k + 1;
    std::vector<int64_t> idx(static_cast<size_t>(b * oh * ow * c * k * k));
    int64_t o = 0;
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j)
          for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx)
                idx[static_cast<size_t>(o++)] =
                    ((bi * c + ci) * hp + (i + ky)) * wp + (j + kx);
    return idx;
  });
}

// From (B*OH*OW, Oc) row-major back to (B,Oc,OH,OW).
ad::IndexArray tochw_indices(int64_t b, int64_t oc, int64_t oh, int64_t ow) {
  return cached({2, b, oc, oh, ow, 0, 0}, [=] {
    std::vector<int64_t> idx(static_cast<size_t>(b * oc * oh * ow));
    int64_t o = 0;
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t c = 0; c < oc; ++c)
        for (int64_t i = 0; i < oh; ++i)
          for (int64_t j = 0; j < ow; ++j)
            idx[static_cast<size_t>(o++)] = ((bi * oh + i) * ow + j) * oc + c;
    return idx;
  });
}

// 2x2 stride-2 pooling windows: (B,C,OH,OW,4).
ad::IndexArray pool_indices(int64_t b, int64_t c, int64_t h, int64_t w) {
  return cached({3, b, c, h, w, 0, 0}, [=] {
    const int64_t oh = h / 2, ow = w / 2;
    std::vector<int64_t> idx(static_cast<size_t>(b * c * oh * ow * 4));
    int64_t o = 0;
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < oh; ++i)
          for (int64_t j = 0; j < ow; ++j)
            for (int64_t dy = 0; dy < 2; ++dy)
              for (int64_t dx = 0; dx < 2; ++dx)
                idx[static_cast<size_t>(o++)] =
                    ((bi * c + ci) * h + (2 * i + dy)) * w + (2 * j + dx);
    return idx;
  });
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad) {
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t oc = w.dim(0), k = w.dim(2);
  ad::check(w.dim(1) == c, "conv2d: channel mismatch");
  const int64_t hp = h + 2 * pad, wp = wd + 2 * pad;
  const int64_t oh = hp - k + 1, ow = wp - k + 1;
  Tensor xp = pad > 0 ? ad::scatter_add(x, pad_indices(b, c, h, wd, pad), {b, c, hp, wp}) : x;
  Tensor cols = ad::gather(xp, im2col_indices(b, c, hp, wp, k), {b * oh * ow, c * k * k});
  Tensor w2 = ad::transpose2d(ad::reshape(w, {oc, c * k * k}));
  Tensor out2 = ad::matmul(cols, w2);
  out2 = ad::badd(out2, ad::reshape(bias, {1, oc}));
  return ad::gather(out2, tochw_indices(b, oc, oh, ow), {b, oc, oh, ow});
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  constexpr double kEps = 1e-5;
  const int64_t c = x.dim(1);
  Tensor mu = ad::mean_axes(x, {2, 3}, true);
  Tensor xc = ad::sub(x, ad::broadcast_to(mu, x.shape()));
  Tensor var = ad::mean_axes(ad::mul(xc, xc), {2, 3}, true);
  Tensor inv = ad::pow_scalar(ad::add_scalar(var, kEps), -0.5);
  Tensor y = ad::mul(xc, ad::broadcast_to(inv, x.shape()));
  y = ad::bmul(y, ad::reshape(gamma, {1, c, 1, 1}));
  return ad::badd(y, ad::reshape(beta, {1, c, 1, 1}));
}

Tensor avgpool2(const Tensor& x) {
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  ad::check(h % 2 == 0 && w % 2 == 0, "avgpool2: spatial dims must be even");
  Tensor g = ad::gather(x, pool_indices(b, c, h, w), {b, c, h / 2, w / 2, 4});
  return ad::mul_scalar(ad::sum_axes(g, {4}, false), 0.25);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor out = ad::matmul(x, ad::transpose2d(w));
  return ad::badd(out, ad::reshape(bias, {1, w.dim(0)}));
}

class ParamLookup {
 public:
  explicit ParamLookup(const std::vector<std::pair<std::string, Tensor>>& params) {
    for (const auto& [name, t] : params) map_.emplace(name, t);
  }
  const Tensor& operator()(const std::string& name) const {
    auto it = map_.find(name);
    ad::check(it != map_.end(), "forward: missing parameter " + name);
    return it->second;
  }

 private:
  std::map<std::string, Tensor> map_;
};

struct ResnetWidths {
  int base;
  std::array<int, 4> stages;
};

ResnetWidths resnet_widths(const ArchitectureSpec& arch) {
  const int w = arch.effective_width();
  return {w, {w, 2 * w, 4 * w, 8 * w}};
}

}  // namespace

int ArchitectureSpec::effective_width() const {
  if (width > 0) return width;
  if (name == "convnet3") return 32;
  if (name == "convnet-wide") return 64;
  if (name == "resnet-ap-10") return 16;
  if (name == "mlp") return 128;
  throw std::invalid_argument("unknown architecture: " + name);
}

void ArchitectureSpec::validate() const {
  effective_width();
  ad::check(num_classes >= 2, "architecture: num_classes must be >= 2");
  ad::check(input_shape[0] == 3, "architecture: expected 3 input channels");
  if (name == "convnet3" || name == "convnet-wide") {
    ad::check(depth >= 1, "architecture: depth must be >= 1");
    const int div = 1 << depth;
    ad::check(input_shape[1] % div == 0 && input_shape[2] % div == 0,
              "architecture: input not divisible by 2^depth");
  } else if (name == "resnet-ap-10") {
    ad::check(input_shape[1] % 8 == 0 && input_shape[2] % 8 == 0,
              "architecture: resnet-ap-10 needs inputs divisible by 8");
  }
}

namespace {

void push_array(std::vector<NamedArray>& out, std::string name, std::vector<int64_t> shape,
                std::vector<double> data) {
  out.push_back(NamedArray{std::move(name), std::move(shape), std::move(data)});
}

std::vector<double> normal_init(Rng& rng, int64_t n, double stddev) {
  std::vector<double> d(static_cast<size_t>(n));
  for (auto& v : d) v = rng.normal() * stddev;
  return d;
}

void init_conv(std::vector<NamedArray>& p, Rng& rng, const std::string& prefix, int in_ch,
               int out_ch, int k) {
  const double std = std::sqrt(2.0 / (in_ch * k * k));
  push_array(p, prefix + ".weight", {out_ch, in_ch, k, k},
             normal_init(rng, static_cast<int64_t>(out_ch) * in_ch * k * k, std));
  push_array(p, prefix + ".bias", {out_ch}, std::vector<double>(static_cast<size_t>(out_ch), 0.0));
}

void init_norm(std::vector<NamedArray>& p, const std::string& prefix, int ch) {
  push_array(p, prefix + ".gamma", {ch}, std::vector<double>(static_cast<size_t>(ch), 1.0));
  push_array(p, prefix + ".beta", {ch}, std::vector<double>(static_cast<size_t>(ch), 0.0));
}

void init_linear(std::vector<NamedArray>& p, Rng& rng, const std::string& prefix, int in,
                 int out, double gain) {
  const double std = std::sqrt(gain / in);
  push_array(p, prefix + ".weight", {out, in},
             normal_init(rng, static_cast<int64_t>(out) * in, std));
  push_array(p, prefix + ".bias", {out}, std::vector<double>(static_cast<size_t>(out), 0.0));
}

}  // namespace

ModelSnapshot build_model(const ArchitectureSpec& arch, uint64_t init_seed) {
  arch.validate();
  Rng rng(init_seed);
  ModelSnapshot m;
  m.arch = arch;
  m.train_seed = init_seed;
  const int w = arch.effective_width();
  const int h = arch.input_shape[1], wd = arch.input_shape[2];

  if (arch.name == "convnet3" || arch.name == "convnet-wide") {
    int in_ch = 3;
    for (int i = 1; i <= arch.depth; ++i) {
      const std::string b = "block" + std::to_string(i);
      init_conv(m.params, rng, b + ".conv", in_ch, w, 3);
      init_norm(m.params, b + ".norm", w);
      in_ch = w;
    }
    const int feat = w * (h >> arch.depth) * (wd >> arch.depth);
    init_linear(m.params, rng, "head", feat, arch.num_classes, 1.0);
  } else if (arch.name == "mlp") {
    const int in = 3 * h * wd;
    init_linear(m.params, rng, "fc1", in, w, 2.0);
    init_linear(m.params, rng, "fc2", w, w, 2.0);
    init_linear(m.params, rng, "head", w, arch.num_classes, 1.0);
  } else if (arch.name == "resnet-ap-10") {
    const auto widths = resnet_widths(arch);
    init_conv(m.params, rng, "stem.conv", 3, widths.stages[0], 3);
    init_norm(m.params, "stem.norm", widths.stages[0]);
    int in_ch = widths.stages[0];
    for (int s = 1; s <= 4; ++s) {
      const std::string st = "stage" + std::to_string(s);
      const int out_ch = widths.stages[static_cast<size_t>(s - 1)];
      init_conv(m.params, rng, st + ".conv1", in_ch, out_ch, 3);
      init_norm(m.params, st + ".norm1", out_ch);
      init_conv(m.params, rng, st + ".conv2", out_ch, out_ch, 3);
      init_norm(m.params, st + ".norm2", out_ch);
      if (in_ch != out_ch) init_conv(m.params, rng, st + ".proj", in_ch, out_ch, 1);
      in_ch = out_ch;
    }
    init_linear(m.params, rng, "head", widths.stages[3], arch.num_classes, 1.0);
  } else {
    throw std::invalid_argument("unknown architecture: " + arch.name);
  }
  return m;
}

std::vector<std::pair<std::string, Tensor>> param_tensors(const ModelSnapshot& m,
                                                          bool requires_grad) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(m.params.size());
  for (const auto& p : m.params)
    out.emplace_back(p.name, Tensor::from_data(p.shape, p.data, requires_grad));
  return out;
}

namespace {

Tensor features_impl(const ArchitectureSpec& arch,
                     const std::vector<std::pair<std::string, Tensor>>& params, const Tensor& x) {
  ParamLookup p(params);
  const int64_t b = x.dim(0);

  if (arch.name == "convnet3" || arch.name == "convnet-wide") {
    Tensor h = x;
    for (int i = 1; i <= arch.depth; ++i) {
      const std::string bl = "block" + std::to_string(i);
      h = conv2d(h, p(bl + ".conv.weight"), p(bl + ".conv.bias"), 1);
      h = instance_norm(h, p(bl + ".norm.gamma"), p(bl + ".norm.beta"));
      h = ad::relu(h);
      h = avgpool2(h);
    }
    return ad::reshape(h, {b, h.numel() / b});
  }
  if (arch.name == "mlp") {
    Tensor h = ad::reshape(x, {b, x.numel() / b});
    h = ad::relu(linear(h, p("fc1.weight"), p("fc1.bias")));
    h = ad::relu(linear(h, p("fc2.weight"), p("fc2.bias")));
    return h;
  }
  if (arch.name == "resnet-ap-10") {
    Tensor h = conv2d(x, p("stem.conv.weight"), p("stem.conv.bias"), 1);
    h = ad::relu(instance_norm(h, p("stem.norm.gamma"), p("stem.norm.beta")));
    const auto widths = resnet_widths(arch);
    int in_ch = widths.stages[0];
    for (int s = 1; s <= 4; ++s) {
      const std::string st = "stage" + std::to_string(s);
      const int out_ch = widths.stages[static_cast<size_t>(s - 1)];
      if (s >= 2) h = avgpool2(h);
      Tensor shortcut = in_ch != out_ch
                            ? conv2d(h, p(st + ".proj.weight"), p(st + ".proj.bias"), 0)
                            : h;
      Tensor y = conv2d(h, p(st + ".conv1.weight"), p(st + ".conv1.bias"), 1);
      y = ad::relu(instance_norm(y, p(st + ".norm1.gamma"), p(st + ".norm1.beta")));
      y = conv2d(y, p(st + ".conv2.weight"), p(st + ".conv2.bias"), 1);
      y = instance_norm(y, p(st + ".norm2.gamma"), p(st + ".norm2.beta"));
      h = ad::relu(ad::add(y, shortcut));
      in_ch = out_ch;
    }
    return ad::mean_axes(h, {2, 3}, false);  // (B, 8w)
  }
  throw std::invalid_argument("unknown architecture: " + arch.name);
}

}  // namespace

Tensor forward_features(const ArchitectureSpec& arch,
                        const std::vector<std::pair<std::string, Tensor>>& params,
                        const Tensor& x) {
  return features_impl(arch, params, x);
}

Tensor forward(const ArchitectureSpec& arch,
               const std::vector<std::pair<std::string, Tensor>>& params, const Tensor& x) {
  ParamLookup p(params);
  Tensor f = features_impl(arch, params, x);
  return linear(f, p("head.weight"), p("head.bias"));
}

std::vector<int> conv_strides(const ArchitectureSpec& arch) {
  // Every convolution in these families runs at stride 1; resnet-ap-10
  // downsamples exclusively through average pooling.
  int convs = 0;
  if (arch.name == "convnet3" || arch.name == "convnet-wide") convs = arch.depth;
  else if (arch.name == "mlp") convs = 0;
  else if (arch.name == "resnet-ap-10") convs = 1 + 8 + 3;
  else throw std::invalid_argument("unknown architecture: " + arch.name);
  return std::vector<int>(static_cast<size_t>(convs), 1);
}

std::vector<NamedArray> model_gradients(const ModelSnapshot& m, const data::ImageBatch& batch) {
  for (int lb : batch.labels)
    ad::check(lb >= 0 && lb < m.arch.num_classes, "model_gradients: label out of range");
  auto params = param_tensors(m, /*requires_grad=*/true);
  Tensor logits = forward(m.arch, params, batch.pixels);
  Tensor loss = ad::softmax_cross_entropy(logits, batch.labels);
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("model_gradients: non-finite loss (" + std::to_string(loss.item()) +
                             ") on batch of " + std::to_string(batch.labels.size()));
  std::vector<Tensor> wrt;
  wrt.reserve(params.size());
  for (auto& [name, t] : params) wrt.push_back(t);
  auto gs = ad::grad(loss, wrt);
  std::vector<NamedArray> out;
  out.reserve(gs.size());
  for (size_t i = 0; i < gs.size(); ++i)
    out.push_back(NamedArray{params[i].first, gs[i].shape(), gs[i].data()});
  return out;
}

ModelSnapshot perturb_model(const ModelSnapshot& m, double alpha, Rng& rng,
                            int* zero_norm_filters) {
  ad::check(alpha >= 0.0, "perturb_model: alpha must be >= 0");
  ModelSnapshot out = m;
  int zero_filters = 0;
  for (auto& arr : out.params) {
    const int64_t n = static_cast<int64_t>(arr.data.size());
    const int64_t filters = arr.shape.size() >= 2 ? arr.shape[0] : 1;
    const int64_t per = n / filters;
    for (int64_t f = 0; f < filters; ++f) {
      double* w = arr.data.data() + f * per;
      std::vector<double> d(static_cast<size_t>(per));
      double dn = 0.0, wn = 0.0;
      for (int64_t i = 0; i < per; ++i) {
        d[static_cast<size_t>(i)] = rng.normal();
        dn += d[static_cast<size_t>(i)] * d[static_cast<size_t>(i)];
        wn += w[i] * w[i];
      }
      dn = std::sqrt(dn);
      wn = std::sqrt(wn);
      if (wn == 0.0) {
        ++zero_filters;
        continue;
      }
      if (alpha == 0.0 || dn == 0.0) continue;
      const double scale = alpha * wn / dn;
      for (int64_t i = 0; i < per; ++i) w[i] += scale * d[static_cast<size_t>(i)];
    }
  }
  if (zero_norm_filters) *zero_norm_filters += zero_filters;
  return out;
}

TrainData train_data_from_dataset(const data::PatchDataset& ds) {
  TrainData t;
  t.height = ds.height();
  t.width = ds.width();
  t.images.reserve(ds.size());
  t.labels.reserve(ds.size());
  for (size_t i = 0; i < ds.size(); ++i) {
    const auto& px = ds.pixels(i);
    t.images.emplace_back(px.begin(), px.end());
    t.labels.push_back(ds.record(i).label);
  }
  return t;
}

namespace {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

data::ImageBatch make_batch(const TrainData& data, const std::vector<int>& idx) {
  const int64_t b = static_cast<int64_t>(idx.size());
  const size_t per = data.images.empty() ? 0 : data.images[0].size();
  std::vector<double> buf(static_cast<size_t>(b) * per);
  std::vector<int> labels(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    const auto& src = data.images[static_cast<size_t>(idx[i])];
    std::copy(src.begin(), src.end(), buf.begin() + static_cast<int64_t>(i * per));
    labels[i] = data.labels[static_cast<size_t>(idx[i])];
  }
  data::ImageBatch batch;
  batch.pixels = Tensor::from_data({b, 3, data.height, data.width}, std::move(buf));
  batch.labels = std::move(labels);
  return batch;
}

}  // namespace

double train_snapshot(ModelSnapshot& m, const TrainData& data, int epochs, const SgdConfig& cfg,
                      Rng& rng, const aug::AugmentationSpec* augment) {
  ad::check(!data.images.empty(), "train_snapshot: empty training data");
  std::vector<std::vector<double>> velocity(m.params.size());
  for (size_t i = 0; i < m.params.size(); ++i)
    velocity[i].assign(m.params[i].data.size(), 0.0);

  std::vector<int> order(data.images.size());
  std::iota(order.begin(), order.end(), 0);
  double epoch_loss = 0.0;

  for (int e = 0; e < epochs; ++e) {
    // Fisher-Yates shuffle from the caller's stream.
    for (size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
      std::swap(order[i - 1], order[j]);
    }
    epoch_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<int> idx(order.begin() + static_cast<int64_t>(start),
                           order.begin() + static_cast<int64_t>(end));
      data::ImageBatch batch = make_batch(data, idx);
      if (augment && augment->enabled()) batch = aug::apply_single(batch, *augment, rng);

      auto params = param_tensors(m, /*requires_grad=*/true);
      Tensor loss = ad::softmax_cross_entropy(forward(m.arch, params, batch.pixels), batch.labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw DivergenceError("training loss became non-finite");
      std::vector<Tensor> wrt;
      wrt.reserve(params.size());
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
      epoch_loss += lv;
      ++batches;
    }
    epoch_loss /= std::max(1, batches);
  }
  return epoch_loss;
}

double train_snapshot_with_retry(ModelSnapshot& m, const TrainData& data, int epochs,
                                 SgdConfig cfg, Rng& rng, const aug::AugmentationSpec* augment) {
  const ModelSnapshot initial = m;
  for (int attempt = 0; attempt < 3; ++attempt) {
    try {
      return train_snapshot(m, data, epochs, cfg, rng, augment);
    } catch (const DivergenceError&) {
      m = initial;  // restart from the same initialization with a smaller step
      cfg.lr *= 0.1;
    }
  }
  return train_snapshot(m, data, epochs, cfg, rng, augment);
}

ModelPool pretrain_pool(const data::PatchDataset& ds, const ArchitectureSpec& arch, int n_models,
                        int epochs, Rng& rng, const SgdConfig& cfg) {
  ad::check(!ds.empty(), "pretrain_pool: empty dataset");
  ad::check(n_models >= 1, "pretrain_pool: need at least one model");
  const TrainData data = train_data_from_dataset(ds);
  ModelPool pool;
  for (int i = 0; i < n_models; ++i) {
    const uint64_t seed = rng.next_u64();
    ModelSnapshot snap = build_model(arch, seed);
    snap.train_seed = seed;
    Rng trng = rng.fork();
    double final_loss = 0.0;
    if (epochs > 0) final_loss = train_snapshot_with_retry(snap, data, epochs, cfg, trng);
    std::ostringstream recipe;
    recipe << "sgd(lr=" << cfg.lr << ",momentum=" << cfg.momentum << ",batch=" << cfg.batch_size
           << "),epochs=" << epochs << ",final_loss=" << final_loss;
    snap.metadata["recipe"] = recipe.str();
    pool.snapshots.push_back(std::move(snap));
  }
  pool.validate();
  return pool;
}

const ModelSnapshot& ModelPool::pick(Rng& rng) const {
  ad::check(!snapshots.empty(), "model pool: empty");
  return snapshots[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(snapshots.size())))];
}

void ModelPool::validate() const {
  ad::check(!snapshots.empty(), "model pool: needs at least one snapshot");
  for (const auto& s : snapshots)
    ad::check(s.arch.name == snapshots[0].arch.name &&
                  s.arch.effective_width() == snapshots[0].arch.effective_width() &&
                  s.arch.num_classes == snapshots[0].arch.num_classes,
              "model pool: snapshots must share an architecture");
}

std::vector<bool> predictions_correct(const ModelSnapshot& m, const TrainData& data) {
  ad::NoGradGuard off;
  std::vector<bool> correct(data.images.size(), false);
  const int chunk = 256;
  auto params = param_tensors(m, false);
  for (size_t start = 0; start < data.images.size(); start += chunk) {
    const size_t end = std::min(data.images.size(), start + chunk);
    std::vector<int> idx(end - start);
    std::iota(idx.begin(), idx.end(), static_cast<int>(start));
    data::ImageBatch batch = make_batch(data, idx);
    Tensor logits = forward(m.arch, params, batch.pixels);
    const auto& lv = logits.data();
    const int64_t c = logits.dim(1);
    for (size_t r = 0; r < idx.size(); ++r) {
      int best = 0;
      for (int64_t j = 1; j < c; ++j) {
        // strict > keeps the lowest class index on ties
        if (lv[r * static_cast<size_t>(c) + static_cast<size_t>(j)] >
            lv[r * static_cast<size_t>(c) + static_cast<size_t>(best)])
          best = static_cast<int>(j);
      }
      correct[start + r] = best == batch.labels[r];
    }
  }
  return correct;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

std::string sanitize(const std::string& name) {
  std::string s = name;
  for (char& c : s)
    if (c == '/' || c == '\\') c = '_';
  return s;
}

json arch_to_json(const ArchitectureSpec& a) {
  json j;
  j["name"] = a.name;
  j["width"] = a.width;
  j["depth"] = a.depth;
  j["num_classes"] = a.num_classes;
  j["input_shape"] = {a.input_shape[0], a.input_shape[1], a.input_shape[2]};
  return j;
}

ArchitectureSpec arch_from_json(const json& j) {
  ArchitectureSpec a;
  a.name = j.at("name").get<std::string>();
  a.width = j.at("width").get<int>();
  a.depth = j.at("depth").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  const auto shp = j.at("input_shape").get<std::vector<int>>();
  a.input_shape = {shp[0], shp[1], shp[2]};
  return a;
}

}  // namespace

void save_snapshot(const ModelSnapshot& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["arch"] = arch_to_json(m.arch);
  meta["train_seed"] = m.train_seed;
  meta["metadata"] = m.metadata;
  std::vector<std::string> order;
  for (const auto& p : m.params) {
    order.push_back(p.name);
    io::save_npy_f8(dir / (sanitize(p.name) + ".npy"), p.shape, p.data.data());
  }
  meta["params"] = order;
  io::write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

ModelSnapshot load_snapshot(const std::filesystem::path& dir) {
  const json meta = json::parse(io::read_text_file(dir / "meta.json"));
  ModelSnapshot m;
  m.arch = arch_from_json(meta.at("arch"));
  m.train_seed = meta.at("train_seed").get<uint64_t>();
  if (meta.contains("metadata"))
    m.metadata = meta.at("metadata").get<std::map<std::string, std::string>>();
  for (const auto& name : meta.at("params").get<std::vector<std::string>>()) {
    io::NpyArray arr = io::load_npy(dir / (sanitize(name) + ".npy"));
    m.params.push_back(NamedArray{name, arr.shape, std::move(arr.data)});
  }
  return m;
}

void save_pool(const ModelPool& pool, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["count"] = pool.snapshots.size();
  io::write_text_file(dir / "pool.json", meta.dump(2) + "\n");
  for (size_t i = 0; i < pool.snapshots.size(); ++i)
    save_snapshot(pool.snapshots[i], dir / ("model" + std::to_string(i)));
}

ModelPool load_pool(const std::filesystem::path& dir) {
  const json meta = json::parse(io::read_text_file(dir / "pool.json"));
  ModelPool pool;
  const auto n = meta.at("count").get<size_t>();
  for (size_t i = 0; i < n; ++i)
    pool.snapshots.push_back(load_snapshot(dir / ("model" + std::to_string(i))));
  pool.validate();
  return pool;
}

}  // namespace histodistill::nn
