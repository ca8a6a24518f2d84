// Segment-based F1, collar-based event F1 and the polyphonic sound detection
// score (PSDS) with detection/ground-truth intersection criteria.

#ifndef TSED_METRICS_H_
#define TSED_METRICS_H_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "tsed/timeline.h"

namespace tsed {

/// Absolute slack applied to every collar and ratio comparison so that
/// frame-aligned boundaries are not rejected by rounding.
inline constexpr double kMetricEps = 1e-9;

enum class OffsetRule { kStrictCollar, kCollarOr20Pct };

struct MatchConfig {
  double segment_length = 1.0;
  double collar = 0.200;
  OffsetRule offset_rule = OffsetRule::kStrictCollar;
  void validate() const;
};

struct Counts {
  std::int64_t tp = 0, fp = 0, fn = 0;
  /// 2TP / (2TP + FP + FN), with 0/0 = 0.
  double f1() const;
};

struct F1Result {
  std::vector<std::string> classes;
  std::vector<Counts> counts;
  std::vector<double> per_class;
  double macro = 0.0;
};

// Predictions are matched to references by clip id. Reference clips without
// predictions count as empty; a prediction for an unknown clip, or with a
// different duration, is an error.
F1Result segment_f1(const std::vector<ClipAnnotation>& refs,
                    const std::vector<ClipAnnotation>& preds,
                    const std::vector<std::string>& classes, const MatchConfig& cfg = {});
/// Maximum-cardinality one-to-one matching per class and clip; a pair is
/// eligible when onsets (and offsets, per the rule) agree within the collar.
F1Result event_f1(const std::vector<ClipAnnotation>& refs,
                  const std::vector<ClipAnnotation>& preds,
                  const std::vector<std::string>& classes, const MatchConfig& cfg = {});

struct PsdsConfig {
  double dtc = 0.7;
  double gtc = 0.7;
  double alpha_ct = 0.0;
  double alpha_st = 1.0;
  /// Upper end of the eFPR axis, in false positives per hour.
  double e_max = 100.0;
  std::vector<double> thresholds = default_thresholds();

  static std::vector<double> default_thresholds();
  void validate() const;
};

struct RocPoint {
  double threshold = 0.0;
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  double tpr = 0.0;
  /// False positives per hour of audio.
  double efpr = 0.0;
};

struct ClassRoc {
  std::string label;
  std::int64_t num_refs = 0;
  /// One point per threshold, in threshold order.
  std::vector<RocPoint> points;
  /// Upper staircase (eFPR, TPR) starting at (0, 0), strictly increasing in
  /// both coordinates.
  std::vector<std::pair<double, double>> envelope;
};

struct PsdsReport {
  double psds = 0.0;
  double total_duration = 0.0;
  std::vector<ClassRoc> classes;
  std::vector<std::string> warnings;
};

/// Intersection-based TP/FP counts for one class over all clips.
/// `dets` are aligned with `refs` by position.
struct IntersectionCounts {
  std::int64_t tp = 0, fp = 0, num_refs = 0;
};
IntersectionCounts intersection_counts(const std::vector<ClipAnnotation>& refs,
                                       const std::vector<ClipAnnotation>& dets,
                                       const std::string& label, double dtc, double gtc);

/// PSDS from one detection set per threshold (each aligned with `refs`).
PsdsReport psds_from_detections(const std::vector<ClipAnnotation>& refs,
                                const std::vector<std::vector<ClipAnnotation>>& detections,
                                const std::vector<std::string>& classes, const PsdsConfig& cfg);

/// PSDS from frame posteriors (T x C per clip, aligned with `refs`): every
/// threshold is applied to all classes, followed by the median filter and
/// event decoding.
PsdsReport psds(const std::vector<ClipAnnotation>& refs,
                const std::vector<Eigen::MatrixXd>& posteriors,
                const std::vector<std::string>& classes, int median_window,
                const PsdsConfig& cfg = {});

nlohmann::json to_json(const F1Result& r);
nlohmann::json to_json(const PsdsReport& r);
/// Columns: class, threshold, tp, fp, tpr, efpr_per_hour.
void write_roc_tsv(const PsdsReport& r, const std::filesystem::path& path);

}  // namespace tsed

#endif  // TSED_METRICS_H_
