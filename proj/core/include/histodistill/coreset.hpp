#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "histodistill/dataset.hpp"
#include "histodistill/models.hpp"
#include "histodistill/rng.hpp"

namespace histodistill::coreset {

enum class Method { random, herding, forgetting };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct CoresetResult {
  std::vector<std::vector<int>> selected;  // per class, exactly m indices
  Method method = Method::random;
  // Optional per-record diagnostics (forgetting counts, herding distances).
  std::map<int, double> scores;

  void validate(const data::PatchDataset& ds, int per_class) const;
};

// Uniform without replacement per class.
CoresetResult random_select(const data::PatchDataset& ds, int per_class, Rng& rng);

// Greedy herding toward the class feature mean in the feature model's
// penultimate space; ties break to the lowest record index. Degenerate
// all-identical features fall back to lowest-index order (warned via flag).
CoresetResult herding_select(const data::PatchDataset& ds, int per_class,
                             const nn::ModelSnapshot& feature_model,
                             bool* degenerate_warned = nullptr);

// Trains a fresh model while counting correct->incorrect transitions between
// consecutive epoch evaluations; never-correct records rank above any finite
// score. Picks the m highest-scoring records per class.
CoresetResult forgetting_select(const data::PatchDataset& ds, int per_class,
                                const nn::ArchitectureSpec& arch, int epochs, Rng& rng);

// Counts correct->incorrect transitions in one correctness history; a record
// that was never correct maps to +infinity.
double forgetting_score(const std::vector<bool>& correct_per_epoch);

// Materializes selected real records for downstream training.
nn::TrainData to_train_data(const data::PatchDataset& ds, const CoresetResult& r);

// Text serialization: "class,record_index" lines plus a method header.
void save_coreset(const CoresetResult& r, const std::filesystem::path& path);
CoresetResult load_coreset(const std::filesystem::path& path);

}  // namespace histodistill::coreset
