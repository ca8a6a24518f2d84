// Frame posteriors to events: thresholds, median smoothing, decoding and
// validation tuning.

#ifndef TSED_POSTPROC_H_
#define TSED_POSTPROC_H_

#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "tsed/metrics.h"
#include "tsed/timeline.h"

namespace tsed {

struct PostprocConfig {
  int median_window = 1;
  /// One per class; empty means 0.5 everywhere.
  std::vector<double> class_thresholds;

  double threshold(int c) const;
  void validate(int num_classes) const;
};

nlohmann::json to_json(const PostprocConfig& cfg);
PostprocConfig postproc_from_json(const nlohmann::json& j);

/// Active iff posterior >= threshold of its class.
FrameActivity binarize(const Eigen::MatrixXd& posteriors, const std::vector<double>& thresholds,
                       const FrameGrid& grid, const std::vector<std::string>& classes);
/// Same threshold for every class.
ActivityMatrix binarize_all(const Eigen::MatrixXd& posteriors, double threshold);

/// Per-class majority over a centered odd window; near the edges the window
/// shrinks symmetrically to the frames available.
ActivityMatrix median_filter(const ActivityMatrix& act, int window);
FrameActivity median_filter(const FrameActivity& act, int window);

/// Threshold, smooth and decode one clip.
ClipAnnotation detect(const Eigen::MatrixXd& posteriors, const PostprocConfig& cfg,
                      const std::vector<std::string>& classes, const std::string& clip_id,
                      double duration);
std::vector<ClipAnnotation> detect_all(const std::vector<ClipAnnotation>& clips,
                                       const std::vector<Eigen::MatrixXd>& posteriors,
                                       const PostprocConfig& cfg,
                                       const std::vector<std::string>& classes);

enum class TuneObjective { kPsds1, kEventF1 };
TuneObjective parse_tune_objective(const std::string& s);

struct TuneOptions {
  TuneObjective objective = TuneObjective::kPsds1;
  std::vector<int> windows = default_windows();
  std::vector<double> thresholds = default_threshold_grid();
  MatchConfig match;
  PsdsConfig psds;

  /// 1, 3, ..., 31.
  static std::vector<int> default_windows();
  /// 0.05, 0.10, ..., 0.95.
  static std::vector<double> default_threshold_grid();
};

struct TuneResult {
  PostprocConfig config;
  /// Objective at the tuned configuration and at window 1 / thresholds 0.5.
  double objective = 0.0;
  double default_objective = 0.0;
  /// Macro event F1 of the tuned configuration.
  double event_f1 = 0.0;
};

/// With the psds1 objective the window maximizes PSDS and thresholds then
/// maximize per-class event F1 at that window. With event_f1 both are chosen
/// to maximize macro event F1. Ties go to the smaller window and the higher
/// threshold.
TuneResult tune(const std::vector<ClipAnnotation>& refs,
                const std::vector<Eigen::MatrixXd>& posteriors,
                const std::vector<std::string>& classes, const TuneOptions& opts = {});

}  // namespace tsed

#endif  // TSED_POSTPROC_H_
