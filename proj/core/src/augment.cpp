#include "histodistill/augment.hpp"

#include <cmath>
#include <stdexcept>

namespace histodistill::aug {

const char* op_name(Op op) {
  switch (op) {
    case Op::rotate: return "rotate";
    case Op::flip: return "flip";
    case Op::scale: return "scale";
    case Op::stain_norm: return "stain_norm";
  }
  return "?";
}

Op op_from_name(const std::string& name) {
  if (name == "rotate") return Op::rotate;
  if (name == "flip") return Op::flip;
  if (name == "scale") return Op::scale;
  if (name == "stain_norm") return Op::stain_norm;
  throw std::invalid_argument("unknown augmentation op: " + name);
}

void AugmentationSpec::validate() const {
  for (Op op : ops) {
    if (op == Op::stain_norm)
      ad::check(template_profile.has_value(), "augmentation: stain_norm requires a template");
  }
  ad::check(scale_range.first > 0.0 && scale_range.first <= 1.0 && scale_range.second >= 1.0,
            "augmentation: scale range must satisfy 0 < lo <= 1 <= hi");
  ad::check(rotate_degrees >= 0.0 && rotate_degrees <= 180.0,
            "augmentation: rotate_degrees must lie in [0,180]");
}

namespace {

// Inverse-mapped bilinear resampling with constant coefficients: the output
// is a fixed linear function of the input pixels, expressed as four gathers
// with constant weights so the op is differentiable to any order.
data::ImageBatch bilinear_warp(const data::ImageBatch& batch,
                               const std::function<void(double, double, double&, double&)>& src_of,
                               int64_t h, int64_t w) {
  const ad::Tensor& x = batch.pixels;
  const int64_t b = x.dim(0), c = x.dim(1);
  const int64_t hw = h * w;
  const size_t n = static_cast<size_t>(b * c * hw);

  auto i00 = std::make_shared<std::vector<int64_t>>(n, 0);
  auto i01 = std::make_shared<std::vector<int64_t>>(n, 0);
  auto i10 = std::make_shared<std::vector<int64_t>>(n, 0);
  auto i11 = std::make_shared<std::vector<int64_t>>(n, 0);
  std::vector<double> w00(n, 0.0), w01(n, 0.0), w10(n, 0.0), w11(n, 0.0);

  // The same spatial map applies to every (batch, channel) plane.
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      double sy = 0.0, sx = 0.0;
      src_of(static_cast<double>(i), static_cast<double>(j), sy, sx);
      const double fy = std::floor(sy), fx = std::floor(sx);
      const int64_t y0 = static_cast<int64_t>(fy), x0 = static_cast<int64_t>(fx);
      const double dy = sy - fy, dx = sx - fx;
      const int64_t base = i * w + j;
      auto put = [&](auto& idx, auto& wgt, int64_t yy, int64_t xx, double ww) {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w || ww == 0.0) return;
        idx[static_cast<size_t>(base)] = yy * w + xx;
        wgt[static_cast<size_t>(base)] = ww;
      };
      put(*i00, w00, y0, x0, (1.0 - dy) * (1.0 - dx));
      put(*i01, w01, y0, x0 + 1, (1.0 - dy) * dx);
      put(*i10, w10, y0 + 1, x0, dy * (1.0 - dx));
      put(*i11, w11, y0 + 1, x0 + 1, dy * dx);
    }
  }
  // Tile the per-plane map over batch and channel.
  for (int64_t plane = 1; plane < b * c; ++plane) {
    const int64_t off = plane * hw;
    for (int64_t p = 0; p < hw; ++p) {
      const size_t src = static_cast<size_t>(p);
      const size_t dst = static_cast<size_t>(off + p);
      (*i00)[dst] = (*i00)[src] + off;
      (*i01)[dst] = (*i01)[src] + off;
      (*i10)[dst] = (*i10)[src] + off;
      (*i11)[dst] = (*i11)[src] + off;
      w00[dst] = w00[src];
      w01[dst] = w01[src];
      w10[dst] = w10[src];
      w11[dst] = w11[src];
    }
  }

  const ad::Shape out_shape{b, c, h, w};
  auto weighted = [&](const ad::IndexArray& idx, std::vector<double>&& wgt) {
    return ad::mul(ad::gather(x, idx, out_shape),
                   ad::Tensor::from_data(out_shape, std::move(wgt)));
  };
  ad::Tensor out = ad::add(ad::add(weighted(i00, std::move(w00)), weighted(i01, std::move(w01))),
                           ad::add(weighted(i10, std::move(w10)), weighted(i11, std::move(w11))));
  data::ImageBatch result;
  result.pixels = out;
  result.labels = batch.labels;
  return result;
}

}  // namespace

data::ImageBatch rotate(const data::ImageBatch& batch, double degrees) {
  ad::check(std::fabs(degrees) <= 180.0, "rotate: |degrees| must be <= 180");
  const ad::Tensor& x = batch.pixels;
  const int64_t h = x.dim(2), w = x.dim(3);
  const double theta = degrees * M_PI / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  return bilinear_warp(
      batch,
      [&](double i, double j, double& sy, double& sx) {
        const double dy = i - cy, dx = j - cx;
        sx = cx + ct * dx + st * dy;
        sy = cy - st * dx + ct * dy;
      },
      h, w);
}

data::ImageBatch flip(const data::ImageBatch& batch, FlipAxis axis) {
  const ad::Tensor& x = batch.pixels;
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(b * c * h * w));
  int64_t o = 0;
  for (int64_t plane = 0; plane < b * c; ++plane) {
    const int64_t off = plane * h * w;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        const int64_t si = axis == FlipAxis::vertical ? h - 1 - i : i;
        const int64_t sj = axis == FlipAxis::horizontal ? w - 1 - j : j;
        (*idx)[static_cast<size_t>(o++)] = off + si * w + sj;
      }
  }
  data::ImageBatch result;
  result.pixels = ad::gather(x, idx, {b, c, h, w});
  result.labels = batch.labels;
  return result;
}

data::ImageBatch scale(const data::ImageBatch& batch, double factor) {
  ad::check(factor > 0.0, "scale: factor must be positive");
  const ad::Tensor& x = batch.pixels;
  const int64_t h = x.dim(2), w = x.dim(3);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  return bilinear_warp(
      batch,
      [&](double i, double j, double& sy, double& sx) {
        sy = cy + (i - cy) / factor;
        sx = cx + (j - cx) / factor;
      },
      h, w);
}

namespace {

data::ImageBatch apply_op(const data::ImageBatch& batch, Op op, double p0,
                          const AugmentationSpec& spec) {
  switch (op) {
    case Op::rotate:
      return rotate(batch, p0);
    case Op::flip:
      return flip(batch, p0 < 0.5 ? FlipAxis::horizontal : FlipAxis::vertical);
    case Op::scale:
      return scale(batch, p0);
    case Op::stain_norm:
      return stain::normalize_to_template(batch, *spec.template_profile, spec.stain_cfg);
  }
  throw std::logic_error("apply_op: unreachable");
}

// Draws (op, parameter) once; both pair members must see identical values.
std::pair<Op, double> draw(const AugmentationSpec& spec, Rng& rng) {
  const Op op = spec.ops[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(spec.ops.size())))];
  double p0 = 0.0;
  switch (op) {
    case Op::rotate: p0 = rng.uniform(-spec.rotate_degrees, spec.rotate_degrees); break;
    case Op::flip: p0 = rng.uniform(); break;
    case Op::scale: p0 = rng.uniform(spec.scale_range.first, spec.scale_range.second); break;
    case Op::stain_norm: break;
  }
  return {op, p0};
}

}  // namespace

SiamesePair apply_siamese(const SiamesePair& pair, const AugmentationSpec& spec, Rng& rng) {
  spec.validate();
  if (!spec.enabled()) return pair;
  ad::check(pair.real.pixels.dim(2) == pair.synthetic.pixels.dim(2) &&
                pair.real.pixels.dim(3) == pair.synthetic.pixels.dim(3),
            "apply_siamese: pair images must share spatial size");
  const auto [op, p0] = draw(spec, rng);
  SiamesePair out;
  out.real = apply_op(pair.real, op, p0, spec);
  out.synthetic = apply_op(pair.synthetic, op, p0, spec);
  return out;
}

data::ImageBatch apply_single(const data::ImageBatch& batch, const AugmentationSpec& spec,
                              Rng& rng) {
  spec.validate();
  if (!spec.enabled()) return batch;
  const auto [op, p0] = draw(spec, rng);
  return apply_op(batch, op, p0, spec);
}

}  // namespace histodistill::aug
