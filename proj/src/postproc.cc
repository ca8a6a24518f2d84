#include "tsed/postproc.h"

#include <algorithm>

namespace tsed {

double PostprocConfig::threshold(int c) const {
  return class_thresholds.empty() ? 0.5 : class_thresholds.at(static_cast<std::size_t>(c));
}

void PostprocConfig::validate(int num_classes) const {
  if (median_window < 1 || median_window % 2 == 0)
    throw Error("median window must be odd and >= 1, got " + std::to_string(median_window));
  if (!class_thresholds.empty() && static_cast<int>(class_thresholds.size()) != num_classes)
    throw Error("expected " + std::to_string(num_classes) + " class thresholds, got " +
                std::to_string(class_thresholds.size()));
  for (double t : class_thresholds)
    if (!(t > 0.0 && t < 1.0)) throw Error("class thresholds must lie in (0, 1)");
}

nlohmann::json to_json(const PostprocConfig& cfg) {
  return {{"median_window", cfg.median_window}, {"class_thresholds", cfg.class_thresholds}};
}

PostprocConfig postproc_from_json(const nlohmann::json& j) {
  PostprocConfig cfg;
  cfg.median_window = j.at("median_window").get<int>();
  cfg.class_thresholds = j.at("class_thresholds").get<std::vector<double>>();
  return cfg;
}

FrameActivity binarize(const Eigen::MatrixXd& posteriors, const std::vector<double>& thresholds,
                       const FrameGrid& grid, const std::vector<std::string>& classes) {
  if (posteriors.cols() != static_cast<Eigen::Index>(classes.size()) ||
      thresholds.size() != classes.size())
    throw Error("posterior columns, thresholds and classes disagree");
  if (posteriors.rows() != grid.num_frames) throw Error("posterior rows do not match the frame grid");
  FrameActivity act(grid, classes);
  for (Eigen::Index c = 0; c < posteriors.cols(); ++c)
    act.activity.col(c) = (posteriors.col(c).array() >= thresholds[c]).cast<std::uint8_t>();
  return act;
}

ActivityMatrix binarize_all(const Eigen::MatrixXd& posteriors, double threshold) {
  return (posteriors.array() >= threshold).cast<std::uint8_t>().matrix();
}

ActivityMatrix median_filter(const ActivityMatrix& act, int window) {
  if (window < 1 || window % 2 == 0)
    throw Error("median window must be odd and >= 1, got " + std::to_string(window));
  if (window == 1) return act;
  const int n = static_cast<int>(act.rows());
  const int half = window / 2;
  ActivityMatrix out(act.rows(), act.cols());
  std::vector<int> prefix(n + 1);
  for (Eigen::Index c = 0; c < act.cols(); ++c) {
    for (int t = 0; t < n; ++t) prefix[t + 1] = prefix[t] + (act(t, c) != 0);
    for (int t = 0; t < n; ++t) {
      const int k = std::min({half, t, n - 1 - t});
      const int ones = prefix[t + k + 1] - prefix[t - k];
      out(t, c) = 2 * ones > 2 * k + 1 ? 1 : 0;
    }
  }
  return out;
}

FrameActivity median_filter(const FrameActivity& act, int window) {
  FrameActivity out = act;
  out.activity = median_filter(act.activity, window);
  return out;
}

ClipAnnotation detect(const Eigen::MatrixXd& posteriors, const PostprocConfig& cfg,
                      const std::vector<std::string>& classes, const std::string& clip_id,
                      double duration) {
  const int num_classes = static_cast<int>(classes.size());
  cfg.validate(num_classes);
  std::vector<double> th(classes.size());
  for (int c = 0; c < num_classes; ++c) th[c] = cfg.threshold(c);
  const FrameActivity act = binarize(posteriors, th, FrameGrid::for_duration(duration), classes);
  return decode_events(median_filter(act, cfg.median_window), clip_id, duration);
}

std::vector<ClipAnnotation> detect_all(const std::vector<ClipAnnotation>& clips,
                                       const std::vector<Eigen::MatrixXd>& posteriors,
                                       const PostprocConfig& cfg,
                                       const std::vector<std::string>& classes) {
  if (clips.size() != posteriors.size()) throw Error("posteriors are not aligned with clips");
  std::vector<ClipAnnotation> out;
  out.reserve(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i)
    out.push_back(detect(posteriors[i], cfg, classes, clips[i].clip_id, clips[i].duration));
  return out;
}

TuneObjective parse_tune_objective(const std::string& s) {
  if (s == "psds1") return TuneObjective::kPsds1;
  if (s == "event_f1") return TuneObjective::kEventF1;
  throw Error("unknown tuning objective '" + s + "' (expected psds1 or event_f1)");
}

std::vector<int> TuneOptions::default_windows() {
  std::vector<int> w;
  for (int k = 1; k <= 31; k += 2) w.push_back(k);
  return w;
}

std::vector<double> TuneOptions::default_threshold_grid() {
  std::vector<double> t;
  for (int k = 1; k <= 19; ++k) t.push_back(k / 20.0);
  return t;
}

namespace {

struct ThresholdChoice {
  std::vector<double> thresholds;
  double macro = 0.0;
};

// Per-class F1 depends only on that class's threshold, so each class is
// optimized independently.
ThresholdChoice best_thresholds(const std::vector<ClipAnnotation>& refs,
                                const std::vector<Eigen::MatrixXd>& posteriors,
                                const std::vector<std::string>& classes, int window,
                                const TuneOptions& opts) {
  const std::size_t nc = classes.size();
  ThresholdChoice best;
  best.thresholds.assign(nc, 0.5);
  std::vector<double> best_f1(nc, -1.0);
  for (double t : opts.thresholds) {
    PostprocConfig cfg;
    cfg.median_window = window;
    cfg.class_thresholds.assign(nc, t);
    const F1Result f1 = event_f1(refs, detect_all(refs, posteriors, cfg, classes), classes, opts.match);
    for (std::size_t c = 0; c < nc; ++c) {
      if (f1.per_class[c] >= best_f1[c]) {
        best_f1[c] = f1.per_class[c];
        best.thresholds[c] = t;
      }
    }
  }
  PostprocConfig cfg;
  cfg.median_window = window;
  cfg.class_thresholds = best.thresholds;
  best.macro = event_f1(refs, detect_all(refs, posteriors, cfg, classes), classes, opts.match).macro;
  return best;
}

}  // namespace

TuneResult tune(const std::vector<ClipAnnotation>& refs,
                const std::vector<Eigen::MatrixXd>& posteriors,
                const std::vector<std::string>& classes, const TuneOptions& opts) {
  if (refs.empty()) throw Error("cannot tune on an empty validation set");
  if (opts.windows.empty() || opts.thresholds.empty()) throw Error("empty tuning grid");
  std::vector<double> grid = opts.thresholds;
  std::sort(grid.begin(), grid.end());
  if (!std::binary_search(grid.begin(), grid.end(), 0.5)) grid.push_back(0.5);
  std::sort(grid.begin(), grid.end());
  std::vector<int> windows = opts.windows;
  windows.push_back(1);
  std::sort(windows.begin(), windows.end());
  windows.erase(std::unique(windows.begin(), windows.end()), windows.end());
  TuneOptions o = opts;
  o.thresholds = grid;

  PostprocConfig def;
  def.class_thresholds.assign(classes.size(), 0.5);
  TuneResult res;
  if (opts.objective == TuneObjective::kPsds1) {
    int best_w = 1;
    double best = -1.0;
    for (int w : windows) {
      const double v = psds(refs, posteriors, classes, w, opts.psds).psds;
      if (w == 1) res.default_objective = v;
      if (v > best) {
        best = v;
        best_w = w;
      }
    }
    const ThresholdChoice th = best_thresholds(refs, posteriors, classes, best_w, o);
    res.config.median_window = best_w;
    res.config.class_thresholds = th.thresholds;
    res.objective = best;
    res.event_f1 = th.macro;
  } else {
    res.default_objective =
        event_f1(refs, detect_all(refs, posteriors, def, classes), classes, opts.match).macro;
    double best = -1.0;
    for (int w : windows) {
      ThresholdChoice th = best_thresholds(refs, posteriors, classes, w, o);
      if (th.macro > best) {
        best = th.macro;
        res.config.median_window = w;
        res.config.class_thresholds = th.thresholds;
      }
    }
    res.objective = best;
    res.event_f1 = best;
  }
  return res;
}

}  // namespace tsed
