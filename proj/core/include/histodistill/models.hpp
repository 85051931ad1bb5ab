#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "histodistill/augment.hpp"
#include "histodistill/dataset.hpp"
#include "histodistill/rng.hpp"
#include "histodistill/tensor.hpp"

namespace histodistill::nn {

// Small classifier families. resnet-ap-10 replaces every strided convolution
// with stride-1 conv + 2x2 average pooling; convnet-wide and mlp serve the
// cross-architecture checks.
struct ArchitectureSpec {
  std::string name = "convnet3";  // convnet3 | convnet-wide | resnet-ap-10 | mlp
  int width = 0;                  // 0 -> family default
  int depth = 3;                  // convnet block count
  int num_classes = 2;
  std::array<int, 3> input_shape{3, 32, 32};  // C,H,W

  int effective_width() const;
  void validate() const;
};

struct NamedArray {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<double> data;
};

struct ModelSnapshot {
  ArchitectureSpec arch;
  std::vector<NamedArray> params;
  uint64_t train_seed = 0;
  std::map<std::string, std::string> metadata;
};

struct ModelPool {
  std::vector<ModelSnapshot> snapshots;

  const ModelSnapshot& pick(Rng& rng) const;
  void validate() const;
};

// Deterministic initialization for the given seed.
ModelSnapshot build_model(const ArchitectureSpec& arch, uint64_t init_seed);

// Leaf tensors over snapshot parameters, in declaration order.
std::vector<std::pair<std::string, ad::Tensor>> param_tensors(const ModelSnapshot& m,
                                                              bool requires_grad);

// Logits (B x num_classes) from parameter tensors; fully recorded on the
// tape, so gradients of gradients are available.
ad::Tensor forward(const ArchitectureSpec& arch,
                   const std::vector<std::pair<std::string, ad::Tensor>>& params,
                   const ad::Tensor& x);

// Penultimate features (input to the linear head).
ad::Tensor forward_features(const ArchitectureSpec& arch,
                            const std::vector<std::pair<std::string, ad::Tensor>>& params,
                            const ad::Tensor& x);

// Mean cross-entropy gradient for every parameter array.
std::vector<NamedArray> model_gradients(const ModelSnapshot& m, const data::ImageBatch& batch);

// Model augmentation: per filter, Gaussian direction rescaled to the
// filter's Frobenius norm, then theta + alpha * d. A filter is one
// dim-0 slice of a rank>=2 array; rank-1 arrays count as one filter.
ModelSnapshot perturb_model(const ModelSnapshot& m, double alpha, Rng& rng,
                            int* zero_norm_filters = nullptr);

// Materialized training source (images already in model layout, doubles).
struct TrainData {
  std::vector<std::vector<double>> images;  // each 3*H*W
  std::vector<int> labels;
  int height = 0, width = 0;

  size_t size() const { return images.size(); }
};

TrainData train_data_from_dataset(const data::PatchDataset& ds);

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
};

// In-place minibatch cross-entropy SGD; optional per-batch augmentation.
// Returns mean loss of the final epoch. Throws on persistent divergence.
double train_snapshot(ModelSnapshot& m, const TrainData& data, int epochs, const SgdConfig& cfg,
                      Rng& rng, const aug::AugmentationSpec* augment = nullptr);

// Divergence-tolerant wrapper: restarts with a 10x smaller step, 3 attempts.
double train_snapshot_with_retry(ModelSnapshot& m, const TrainData& data, int epochs,
                                 SgdConfig cfg, Rng& rng,
                                 const aug::AugmentationSpec* augment = nullptr);

// n_models cross-entropy-trained snapshots from distinct seeds.
ModelPool pretrain_pool(const data::PatchDataset& ds, const ArchitectureSpec& arch, int n_models,
                        int epochs, Rng& rng, const SgdConfig& cfg = {});

// Per-example correctness of argmax predictions against labels.
std::vector<bool> predictions_correct(const ModelSnapshot& m, const TrainData& data);

// Snapshot persistence: one .npy per parameter plus meta.json.
void save_snapshot(const ModelSnapshot& m, const std::filesystem::path& dir);
ModelSnapshot load_snapshot(const std::filesystem::path& dir);
void save_pool(const ModelPool& pool, const std::filesystem::path& dir);
ModelPool load_pool(const std::filesystem::path& dir);

// Structural description used by tests: conv strides in the forward plan.
std::vector<int> conv_strides(const ArchitectureSpec& arch);

}  // namespace histodistill::nn
