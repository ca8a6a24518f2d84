// Datasets, the detection model bundle, Adam, checkpoints and the
// validation-driven training loop.

#ifndef TSED_TRAINER_H_
#define TSED_TRAINER_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "tsed/audio.h"
#include "tsed/metrics.h"
#include "tsed/temporal.h"
#include "tsed/timeline.h"

namespace tsed {

/// Clips of one split with features and frame targets, aligned by index.
struct Dataset {
  std::vector<std::string> classes;
  std::vector<ClipAnnotation> clips;
  std::vector<FeatureMatrix> features;
  std::vector<ActivityMatrix> targets;

  std::size_t size() const { return clips.size(); }
  int feature_dim() const { return features.empty() ? 0 : static_cast<int>(features.front().cols()); }
  /// Adds one clip; targets are rasterized on the feature frame grid.
  void add(ClipAnnotation clip, FeatureMatrix feats);
  /// Subset in the given index order.
  Dataset subset(const std::vector<std::size_t>& idx) const;
};

enum class FeatureKind { kLogMel, kEmbeddings };

/// Reads `<root>/<split>/audio/*.wav` (sorted by name) with labels from
/// `<root>/<split>/labels.tsv`. With kEmbeddings, features come from
/// `<root>/<split>/embeddings/<stem>.emb` instead of the audio.
Dataset load_split(const std::filesystem::path& root, const std::string& split,
                   const std::vector<std::string>& classes, const FrontendConfig& frontend,
                   FeatureKind kind = FeatureKind::kLogMel);

/// Per-dimension standardization fitted on training features.
struct Normalizer {
  Eigen::RowVectorXf mean;
  Eigen::RowVectorXf inv_std;

  static Normalizer fit(const std::vector<FeatureMatrix>& feats);
  static Normalizer identity(int dim);
  FeatureMatrix apply(const FeatureMatrix& f) const;
};

/// Everything needed to map features to posteriors.
struct Model {
  TemporalModule module;
  Readout readout;
  std::vector<std::string> classes;
  Normalizer normalizer;
  FrontendConfig frontend;
  FeatureKind feature_kind = FeatureKind::kLogMel;

  Model() = default;
  Model(const ModuleConfig& cfg, std::vector<std::string> classes, Normalizer norm,
        std::uint64_t readout_seed);
  std::int64_t trainable() const { return count_trainable(module, readout); }
};

/// Posteriors (T x C) for raw (unnormalized) features.
std::vector<Eigen::MatrixXd> predict(const Model& model, const std::vector<FeatureMatrix>& feats);

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 64;
  int max_epochs = 100;
  int early_stop_patience = 20;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModuleConfig& c);
ModuleConfig module_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FrontendConfig& c);
FrontendConfig frontend_config_from_json(const nlohmann::json& j);

/// First and second moments per trainable tensor plus the step count.
struct AdamState {
  std::map<std::string, Eigen::MatrixXd> m, v;
  std::int64_t step = 0;
};

/// One Adam update (a single step count) on every trainable tensor of every
/// set that has a gradient. Frozen tensors and tensors without gradients are
/// left untouched. Throws on a non-finite gradient, naming the tensor.
void adam_step(const std::vector<ParameterSet*>& params, const Gradients& grads,
               AdamState& state, const TrainConfig& cfg);

struct Checkpoint {
  Model model;
  AdamState optimizer;
  int epoch = 0;
  double val_psds1 = 0.0;
  TrainConfig train;
  /// FNV-1a of the serialized module, frontend and training configuration.
  std::uint64_t config_hash = 0;
};

std::uint64_t config_hash(const Model& model, const TrainConfig& train);

// Checkpoint container, little-endian:
//   "TSEDCKPT" | u32 version=1 | u64 json length | JSON header |
//   u32 tensor count | per tensor: u32 name length, name, u8 dtype (1 = f64),
//   u8 trainable, u32 rows, u32 cols, rows*cols f64 column-major |
//   u64 CRC-64/XZ of every preceding byte
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  /// Absent when selecting on training loss.
  std::optional<double> val_psds1;
  /// Eval-mode training-set loss, only computed when selecting on it.
  std::optional<double> eval_loss;
  double lr = 0.0;
  double seconds = 0.0;
};
nlohmann::json to_json(const EpochRecord& r);

enum class Selection {
  /// Highest validation PSDS1 (median window 1).
  kValPsds1,
  /// Lowest eval-mode loss on the training set; no validation set needed.
  kTrainLoss,
};

struct FitOptions {
  Selection selection = Selection::kValPsds1;
  PsdsConfig psds;
  /// Line-delimited JSON log, one record per epoch.
  std::optional<std::filesystem::path> log_path;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochRecord> log;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
};

/// Trains `model` on `train` (features are normalized with the model's
/// normalizer), evaluates validation PSDS1 with median window 1 after every
/// epoch and keeps the best epoch. Stops after `early_stop_patience` epochs
/// without improvement. Modules without trainable tensors train the readout
/// on cached states.
FitResult fit(Model model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
              const FitOptions& opts = {});

/// Mean binary cross-entropy of eval-mode posteriors against the targets.
double dataset_loss(const Model& model, const Dataset& data);

/// Validation PSDS1 with median window 1, as used for checkpoint selection.
double selection_psds1(const Model& model, const Dataset& val, const PsdsConfig& cfg = {});

}  // namespace tsed

#endif  // TSED_TRAINER_H_
