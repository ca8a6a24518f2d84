// Few-shot adaptation of single-class detectors from K strongly labeled
// support clips, repeated over seeds.

#ifndef TSED_FEWSHOT_H_
#define TSED_FEWSHOT_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsed/metrics.h"
#include "tsed/trainer.h"

namespace tsed {

struct FewShotProtocol {
  std::string target_class = "eating";
  /// Clip ids eligible as support.
  std::vector<std::string> support_pool;
  std::vector<int> ks{1, 2, 3, 4, 5};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};

  void validate() const;
};

/// K distinct clip ids drawn uniformly from the pool, in draw order.
std::vector<std::string> sample_support(const std::vector<std::string>& pool, int k, std::uint64_t seed);

enum class FewShotModel { kBiGru, kBiEsn };
std::string to_string(FewShotModel m);
FewShotModel parse_fewshot_model(const std::string& s);

struct FewShotConfig {
  /// Hidden units per direction.
  int gru_hidden = 256;
  int gru_layers = 2;
  double gru_dropout = 0.3;
  int esn_size = 256;
  EsnParams esn;
  TrainConfig train{.learning_rate = 1e-3, .batch_size = 8, .max_epochs = 50, .early_stop_patience = 50};
  PsdsConfig psds;
  /// Start the BiGRU from a trained checkpoint's module and normalizer.
  std::optional<std::filesystem::path> init_from;
};

/// The same clips and features with events of other classes dropped and a
/// single target class.
Dataset single_class(const Dataset& data, const std::string& target);

/// Model before adaptation (readout at its initial values).
Model initial_fewshot_model(FewShotModel kind, const Dataset& support, const FewShotConfig& cfg,
                            std::uint64_t seed);

/// Trains on the support clips (every non-target frame is a negative),
/// keeps the epoch with the lowest support loss and returns PSDS1 on the
/// query clips. BiGRU trains module and readout, BiESN only the readout.
double adapt_and_eval(FewShotModel kind, const Dataset& support, const Dataset& query,
                      const FewShotConfig& cfg, std::uint64_t seed);

struct FewShotRun {
  FewShotModel model;
  int k = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> support;
  double psds1 = 0.0;
};

struct FewShotSummary {
  FewShotModel model;
  int k = 0;
  std::vector<double> values;
  double mean = 0.0;
  /// Population standard deviation.
  double std = 0.0;
};

struct FewShotResult {
  std::vector<FewShotRun> runs;
  std::vector<FewShotSummary> summary;
};

/// `pool` holds the support pool clips, `query` the held-out evaluation
/// clips; both must be single-class datasets for the target. Every model
/// and K is run once per seed.
FewShotResult run_protocol(const FewShotProtocol& protocol, const std::vector<FewShotModel>& models,
                           const Dataset& pool, const Dataset& query, const FewShotConfig& cfg);

FewShotSummary summarize(FewShotModel model, int k, std::vector<double> values);

/// `model\tK\tseed\tpsds1`
void write_runs_tsv(const FewShotResult& r, const std::filesystem::path& path);
/// `model\tK\tmean\tstd\tn`
void write_summary_tsv(const FewShotResult& r, const std::filesystem::path& path);

}  // namespace tsed

#endif  // TSED_FEWSHOT_H_
