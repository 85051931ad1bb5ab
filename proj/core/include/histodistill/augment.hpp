#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "histodistill/dataset.hpp"
#include "histodistill/rng.hpp"
#include "histodistill/stain.hpp"

namespace histodistill::aug {

enum class Op { rotate, flip, scale, stain_norm };

const char* op_name(Op op);
Op op_from_name(const std::string& name);

// One differentiable transform family per distillation step, sampled
// uniformly; a stain_norm entry requires a template profile.
struct AugmentationSpec {
  std::vector<Op> ops;
  double rotate_degrees = 15.0;
  std::pair<double, double> scale_range{0.8, 1.2};
  std::optional<stain::StainProfile> template_profile;
  stain::StainConfig stain_cfg;

  bool enabled() const { return !ops.empty(); }
  void validate() const;
};

struct SiamesePair {
  data::ImageBatch real;
  data::ImageBatch synthetic;
};

enum class FlipAxis { horizontal, vertical };

// Bilinear rotation about the image center, zero-padded corners. Linear in
// the pixels, hence exactly differentiable.
data::ImageBatch rotate(const data::ImageBatch& batch, double degrees);

// Exact index reversal along one axis.
data::ImageBatch flip(const data::ImageBatch& batch, FlipAxis axis);

// Center zoom with bilinear resampling back to the original size; zoom-in
// crops, zoom-out zero-pads.
data::ImageBatch scale(const data::ImageBatch& batch, double factor);

// Samples one op and one parameter set, applies the identical transform to
// both members of the pair.
SiamesePair apply_siamese(const SiamesePair& pair, const AugmentationSpec& spec, Rng& rng);

// Same sampling rules applied to a single batch; used by downstream training
// which shares the distillation-time augmentation policy.
data::ImageBatch apply_single(const data::ImageBatch& batch, const AugmentationSpec& spec,
                              Rng& rng);

}  // namespace histodistill::aug
