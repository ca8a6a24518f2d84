// Hyperparameter search with random and tree-structured Parzen samplers.

#ifndef TSED_HPO_H_
#define TSED_HPO_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsed/temporal.h"
#include "tsed/trainer.h"

namespace tsed {

struct SearchDim {
  std::string name;
  double lo = 0.0;
  double hi = 1.0;
  /// Log-uniform prior; the TPE models this dimension in log space.
  bool log_scale = false;
};

struct SearchSpace {
  std::vector<SearchDim> dims;

  /// Reservoir dynamics and readout learning rate.
  static SearchSpace esn();
  void validate() const;
  bool contains(const std::map<std::string, double>& cfg) const;
};

using TrialConfig = std::map<std::string, double>;

/// Writes the reservoir and learning-rate entries of `trial` into the
/// configs. Unknown names are an error. Both directions of a bidirectional
/// reservoir use the same values.
void apply_trial(const TrialConfig& trial, ModuleConfig& module, TrainConfig& train);

enum class TrialStatus { kOk, kFailed };

struct Trial {
  int id = 0;
  TrialConfig config;
  TrialStatus status = TrialStatus::kOk;
  /// Set only for kOk.
  std::optional<double> objective;
  std::string error;
  double seconds = 0.0;

  nlohmann::json to_json() const;
  static Trial from_json(const nlohmann::json& j);
};

enum class SamplerKind { kRandom, kTpe };
SamplerKind parse_sampler(const std::string& s);
std::string to_string(SamplerKind s);

struct TpeOptions {
  double gamma = 0.25;
  int warmup = 20;
  int candidates = 24;
};

/// Independent prior draws.
TrialConfig sample_random(const SearchSpace& space, Rng& rng);

/// Next configuration given completed trials (maximizing the objective).
/// With fewer than `warmup` successful trials this is a prior draw.
TrialConfig sample(const SearchSpace& space, SamplerKind sampler,
                   const std::vector<Trial>& history, Rng& rng, const TpeOptions& tpe = {});

struct StudyOptions {
  int budget = 150;
  SamplerKind sampler = SamplerKind::kTpe;
  std::uint64_t seed = 0;
  TpeOptions tpe;
  /// One JSON trial record per line, appended as trials finish.
  std::optional<std::filesystem::path> study_file;
  /// Continue from the records already in `study_file`.
  bool resume = false;
};

struct StudyResult {
  std::vector<Trial> history;
  /// Highest objective among successful trials; empty when all failed.
  std::optional<Trial> best;
};

/// The objective receives the trial configuration and a per-trial seed.
/// Exceptions mark the trial as failed; failed trials count toward the
/// budget and are not retried.
using Objective = std::function<double(const TrialConfig&, std::uint64_t)>;

StudyResult run_study(const SearchSpace& space, const Objective& objective,
                      const StudyOptions& opts);

std::vector<Trial> read_study(const std::filesystem::path& path);

}  // namespace tsed

#endif  // TSED_HPO_H_
