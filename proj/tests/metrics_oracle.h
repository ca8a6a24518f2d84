// Brute-force reference implementations of the detection metrics, written
// independently of src/metrics.cc for cross-checking on small instances.

#ifndef TSED_TESTS_METRICS_ORACLE_H_
#define TSED_TESTS_METRICS_ORACLE_H_

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tsed/timeline.h"

namespace oracle {

struct Ev {
  int cls;
  double on, off;
};

struct Clip {
  double duration;
  std::vector<Ev> refs;
  std::vector<Ev> preds;
  Eigen::MatrixXd post;  // T x C
};

inline double inter(const Ev& a, const Ev& b) {
  const double lo = a.on > b.on ? a.on : b.on;
  const double hi = a.off < b.off ? a.off : b.off;
  return hi > lo ? hi - lo : 0.0;
}

inline double f1(double tp, double fp, double fn) {
  return tp == 0 && fp == 0 && fn == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
}

// Segment activity tallied by walking every (segment, event) pair.
inline double segment_f1(const std::vector<Clip>& clips, int C, double seg = 1.0) {
  double total = 0.0;
  for (int c = 0; c < C; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (const auto& clip : clips) {
      int nseg = 0;
      while (nseg * seg < clip.duration - 1e-9) ++nseg;
      for (int k = 0; k < nseg; ++k) {
        const Ev s{c, k * seg, std::min(clip.duration, (k + 1) * seg)};
        bool r = false, p = false;
        for (const auto& e : clip.refs) r = r || (e.cls == c && inter(e, s) > 1e-9);
        for (const auto& e : clip.preds) p = p || (e.cls == c && inter(e, s) > 1e-9);
        if (r && p) ++tp;
        if (!r && p) ++fp;
        if (r && !p) ++fn;
      }
    }
    total += f1(tp, fp, fn);
  }
  return total / C;
}

// Largest matching found by trying every assignment.
inline int best_matching(const std::vector<Ev>& r, const std::vector<Ev>& p, std::size_t i,
                         std::vector<bool>& used, double collar) {
  if (i == r.size()) return 0;
  int best = best_matching(r, p, i + 1, used, collar);
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (used[j]) continue;
    if (std::abs(r[i].on - p[j].on) > collar + 1e-9 || std::abs(r[i].off - p[j].off) > collar + 1e-9)
      continue;
    used[j] = true;
    best = std::max(best, 1 + best_matching(r, p, i + 1, used, collar));
    used[j] = false;
  }
  return best;
}

inline double event_f1(const std::vector<Clip>& clips, int C, double collar = 0.2) {
  double total = 0.0;
  for (int c = 0; c < C; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (const auto& clip : clips) {
      std::vector<Ev> r, p;
      for (const auto& e : clip.refs)
        if (e.cls == c) r.push_back(e);
      for (const auto& e : clip.preds)
        if (e.cls == c) p.push_back(e);
      std::vector<bool> used(p.size(), false);
      const int m = best_matching(r, p, 0, used, collar);
      tp += m;
      fp += static_cast<double>(p.size()) - m;
      fn += static_cast<double>(r.size()) - m;
    }
    total += f1(tp, fp, fn);
  }
  return total / C;
}

// Median by sorting the shrunken window explicitly.
inline std::vector<int> smooth(const std::vector<int>& x, int window) {
  const int n = static_cast<int>(x.size()), half = window / 2;
  std::vector<int> out(n);
  for (int t = 0; t < n; ++t) {
    int k = half;
    if (t < k) k = t;
    if (n - 1 - t < k) k = n - 1 - t;
    std::vector<int> w(x.begin() + (t - k), x.begin() + (t + k + 1));
    std::sort(w.begin(), w.end());
    out[t] = w[w.size() / 2];
  }
  return out;
}

// Detections of class c: scan for runs of ones.
inline std::vector<Ev> detect(const Clip& clip, int c, double thr, int window, double period = 0.04) {
  const int T = static_cast<int>(clip.post.rows());
  std::vector<int> x(T);
  for (int t = 0; t < T; ++t) x[t] = clip.post(t, c) >= thr ? 1 : 0;
  x = smooth(x, window);
  std::vector<Ev> out;
  for (int t = 0; t < T;) {
    if (!x[t]) {
      ++t;
      continue;
    }
    int u = t;
    while (u < T && x[u]) ++u;
    out.push_back({c, t * period, std::min(u * period, clip.duration)});
    t = u;
  }
  return out;
}

struct PsdsParams {
  double dtc = 0.7, gtc = 0.7, alpha_st = 1.0, e_max = 100.0;
};

inline double psds(const std::vector<Clip>& clips, int C, const std::vector<double>& thresholds,
                   int window, const PsdsParams& p = {}) {
  double total = 0.0;
  for (const auto& clip : clips) total += clip.duration;
  // Raw (eFPR, TPR) points per class with references.
  std::vector<std::vector<std::pair<double, double>>> pts;
  for (int c = 0; c < C; ++c) {
    int nref = 0;
    for (const auto& clip : clips)
      for (const auto& e : clip.refs) nref += e.cls == c;
    if (nref == 0) continue;
    std::vector<std::pair<double, double>> cls_pts;
    for (double thr : thresholds) {
      int tp = 0, fp = 0;
      for (const auto& clip : clips) {
        const std::vector<Ev> dets = detect(clip, c, thr, window);
        std::vector<bool> valid(dets.size(), false);
        for (std::size_t d = 0; d < dets.size(); ++d) {
          double s = 0.0;
          for (const auto& r : clip.refs)
            if (r.cls == c) s += inter(dets[d], r);
          const double ratio = s / (dets[d].off - dets[d].on);
          valid[d] = ratio > 0.0 && ratio >= p.dtc - 1e-9;
          if (!valid[d]) ++fp;
        }
        for (const auto& r : clip.refs) {
          if (r.cls != c) continue;
          double s = 0.0;
          for (std::size_t d = 0; d < dets.size(); ++d)
            if (valid[d]) s += inter(dets[d], r);
          const double ratio = s / (r.off - r.on);
          if (ratio > 0.0 && ratio >= p.gtc - 1e-9) ++tp;
        }
      }
      cls_pts.emplace_back(fp / (total / 3600.0), static_cast<double>(tp) / nref);
    }
    pts.push_back(cls_pts);
  }
  if (pts.empty()) return 0.0;
  // Breakpoints: every eFPR below e_max; on each interval every class holds
  // the best TPR among points at or left of the interval start.
  std::vector<double> xs{0.0};
  for (const auto& cls_pts : pts)
    for (const auto& [e, t] : cls_pts)
      if (e < p.e_max) xs.push_back(e);
  std::sort(xs.begin(), xs.end());
  double area = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double lo = xs[i];
    const double hi = i + 1 < xs.size() ? xs[i + 1] : p.e_max;
    if (hi <= lo) continue;
    std::vector<double> v;
    for (const auto& cls_pts : pts) {
      double best = 0.0;
      for (const auto& [e, t] : cls_pts)
        if (e <= lo && t > best) best = t;
      v.push_back(best);
    }
    double m = 0.0;
    for (double x : v) m += x;
    m /= v.size();
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    area += std::max(0.0, m - p.alpha_st * std::sqrt(s2 / v.size())) * (hi - lo);
  }
  return area / p.e_max;
}

/// Random small instance: <= 6 reference events per clip, predictions that
/// jitter some references and add spurious events, and noisy posteriors
/// built around the references.
inline std::vector<Clip> random_instance(std::mt19937_64& rng, int C, int num_clips) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> nev(0, 6), cls(0, C - 1);
  std::vector<Clip> clips;
  for (int k = 0; k < num_clips; ++k) {
    Clip clip;
    clip.duration = 2.0 + 0.04 * std::uniform_int_distribution<int>(0, 75)(rng);
    for (int n = nev(rng); n > 0; --n) {
      const double on = u(rng) * (clip.duration - 0.1);
      const double off = std::min(clip.duration, on + 0.05 + u(rng) * 1.5);
      clip.refs.push_back({cls(rng), on, off});
    }
    for (const auto& r : clip.refs) {
      if (u(rng) < 0.3) continue;
      const double on = std::clamp(r.on + (u(rng) - 0.5) * 0.6, 0.0, clip.duration - 0.02);
      const double off = std::clamp(r.off + (u(rng) - 0.5) * 0.6, on + 0.01, clip.duration);
      clip.preds.push_back({u(rng) < 0.8 ? r.cls : cls(rng), on, off});
    }
    for (int n = std::uniform_int_distribution<int>(0, 2)(rng); n > 0; --n) {
      const double on = u(rng) * (clip.duration - 0.1);
      clip.preds.push_back({cls(rng), on, std::min(clip.duration, on + 0.05 + u(rng))});
    }
    const tsed::FrameGrid grid = tsed::FrameGrid::for_duration(clip.duration);
    clip.post = Eigen::MatrixXd::Zero(grid.num_frames, C);
    for (int t = 0; t < grid.num_frames; ++t) {
      for (int c = 0; c < C; ++c) {
        bool on = false;
        for (const auto& r : clip.refs) on = on || (r.cls == c && grid.center(t) >= r.on && grid.center(t) < r.off);
        clip.post(t, c) = std::clamp((on ? 0.7 : 0.2) + (u(rng) - 0.5) * 0.7, 0.001, 0.999);
      }
    }
    clips.push_back(clip);
  }
  return clips;
}

inline std::vector<std::string> class_names(int C) {
  std::vector<std::string> out;
  for (int c = 0; c < C; ++c) out.push_back("class" + std::to_string(c));
  return out;
}

inline tsed::ClipAnnotation to_annotation(const Clip& clip, const std::string& id,
                                          const std::vector<Ev>& evs, int C) {
  tsed::ClipAnnotation a;
  a.clip_id = id;
  a.duration = clip.duration;
  const auto names = class_names(C);
  for (const auto& e : evs) a.events.emplace_back(names[e.cls], e.on, e.off);
  return a;
}

}  // namespace oracle

#endif  // TSED_TESTS_METRICS_ORACLE_H_
