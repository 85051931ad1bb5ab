#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "histodistill/augment.hpp"
#include "histodistill/dataset.hpp"
#include "histodistill/distill.hpp"
#include "histodistill/models.hpp"

namespace histodistill::eval {

struct EvalReport {
  double accuracy_mean = 0.0;  // percent
  double accuracy_std = 0.0;   // percent, population
  std::vector<uint64_t> seeds;
  double per_epoch_time_s = 0.0;
  int epochs = 0;
  std::string arch;
  std::string train_source;  // full | coreset(method,m) | synthetic(m)
  uint64_t storage_bytes = 0;
  uint64_t config_hash = 0;

  void validate() const;
};

// A materialized training source plus its provenance and storage footprint.
struct TrainSource {
  nn::TrainData data;
  std::string descriptor;
  uint64_t storage_bytes = 0;
};

// PNG-encoded payload size of a training source; the same meter is applied
// to real and synthetic sources so storage ratios are comparable.
uint64_t png_payload_bytes(const nn::TrainData& data);

TrainSource source_from_dataset(const data::PatchDataset& ds, const std::string& descriptor);
TrainSource source_from_synthetic(const distill::SyntheticSet& s);

// Cross-entropy training with the distillation-time augmentation policy.
// epochs == 0 returns the initialization. per_epoch_s, when given, receives
// the mean wall-clock seconds per epoch.
nn::ModelSnapshot train_classifier(const nn::TrainData& data, const nn::ArchitectureSpec& arch,
                                   int epochs, uint64_t seed,
                                   const aug::AugmentationSpec* augment = nullptr,
                                   const nn::SgdConfig& cfg = {}, double* per_epoch_s = nullptr);

// Top-1 accuracy in percent; argmax ties resolve to the lowest class index.
double evaluate(const nn::ModelSnapshot& m, const data::PatchDataset& test);

// Train + evaluate once per seed; reports mean, population std, mean
// per-epoch time, and the source storage size.
EvalReport repeat_eval(const TrainSource& source, const nn::ArchitectureSpec& arch,
                       const data::PatchDataset& test, int epochs,
                       const std::vector<uint64_t>& seeds,
                       const aug::AugmentationSpec* augment = nullptr,
                       const nn::SgdConfig& cfg = {});

// One repeat_eval per architecture over the same synthetic set.
std::vector<EvalReport> cross_arch_eval(const distill::SyntheticSet& synthetic,
                                        const std::vector<nn::ArchitectureSpec>& archs,
                                        const data::PatchDataset& test, int epochs,
                                        const std::vector<uint64_t>& seeds,
                                        const aug::AugmentationSpec* augment = nullptr,
                                        const nn::SgdConfig& cfg = {});

// ---------------------------------------------------------------------------
// slide-level MIL
// ---------------------------------------------------------------------------

struct SlideBag {
  std::string slide_id;
  data::ImageBatch instances;
  int bag_label = 0;
};

enum class Aggregator { attention, mean };

// One bag per slide; the bag label comes from the slide's (shared) record
// label.
std::vector<SlideBag> bags_from_dataset(const data::PatchDataset& ds);

struct MilModel {
  nn::ArchitectureSpec encoder;  // convnet3 trunk
  Aggregator aggregator = Aggregator::attention;
  int num_classes = 2;
  std::vector<nn::NamedArray> params;
};

MilModel build_mil_model(Aggregator agg, int num_classes, std::array<int, 3> input_shape,
                         uint64_t seed);
ad::Tensor mil_forward(const MilModel& m,
                       const std::vector<std::pair<std::string, ad::Tensor>>& params,
                       const ad::Tensor& instances);
// Normalized attention weights for one bag (uniform for the mean aggregator).
std::vector<double> mil_attention_weights(const MilModel& m, const data::ImageBatch& bag);

double mil_bag_accuracy(const MilModel& m, const std::vector<SlideBag>& bags);

// Trains a bag classifier per seed on train_bags, evaluates bag-level
// accuracy on test_bags.
EvalReport mil_eval(const std::vector<SlideBag>& train_bags,
                    const std::vector<SlideBag>& test_bags, Aggregator agg, int epochs,
                    const std::vector<uint64_t>& seeds, const nn::SgdConfig& cfg = {});

// ---------------------------------------------------------------------------
// cross-centre transfer
// ---------------------------------------------------------------------------

// Fine-tunes a copy of the pretrained snapshot on target_source (all
// parameters updated) and reports accuracy on target_test.
EvalReport transfer_eval(const nn::ModelSnapshot& pretrained, const TrainSource& target_source,
                         const data::PatchDataset& target_test, int epochs,
                         const std::vector<uint64_t>& seeds,
                         const aug::AugmentationSpec* augment = nullptr,
                         const nn::SgdConfig& cfg = {});

// Line-delimited JSON records plus a fixed-width table for humans.
void append_report_jsonl(const EvalReport& r, const std::filesystem::path& path);
std::string format_report_table(const std::vector<EvalReport>& reports);

}  // namespace histodistill::eval
