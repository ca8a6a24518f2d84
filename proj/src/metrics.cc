#include "tsed/metrics.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>

#include "tsed/postproc.h"

namespace tsed {

namespace {

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

// Predictions re-keyed to the reference order.
std::vector<const ClipAnnotation*> align(const std::vector<ClipAnnotation>& refs,
                                         const std::vector<ClipAnnotation>& preds) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!index.emplace(refs[i].clip_id, i).second)
      throw Error("duplicate reference clip '" + refs[i].clip_id + "'");
  }
  std::vector<const ClipAnnotation*> out(refs.size(), nullptr);
  for (const auto& p : preds) {
    auto it = index.find(p.clip_id);
    if (it == index.end()) throw Error("prediction for unknown clip '" + p.clip_id + "'");
    if (out[it->second]) throw Error("duplicate prediction clip '" + p.clip_id + "'");
    if (std::abs(p.duration - refs[it->second].duration) > kMetricEps)
      throw Error("duration mismatch for clip '" + p.clip_id + "'");
    out[it->second] = &p;
  }
  return out;
}

std::vector<const Event*> of_label(const ClipAnnotation* clip, const std::string& label) {
  std::vector<const Event*> out;
  if (!clip) return out;
  for (const auto& e : clip->events)
    if (e.label == label) out.push_back(&e);
  std::sort(out.begin(), out.end(), [](const Event* a, const Event* b) {
    return a->onset != b->onset ? a->onset < b->onset : a->offset < b->offset;
  });
  return out;
}

bool collar_match(const Event& ref, const Event& pred, const MatchConfig& cfg) {
  if (std::abs(ref.onset - pred.onset) > cfg.collar + kMetricEps) return false;
  double tol = cfg.collar;
  if (cfg.offset_rule == OffsetRule::kCollarOr20Pct) tol = std::max(tol, 0.2 * ref.duration());
  return std::abs(ref.offset - pred.offset) <= tol + kMetricEps;
}

// Kuhn's augmenting-path matching; refs are tried in onset order.
int max_matching(const std::vector<std::vector<int>>& adj, int num_right) {
  std::vector<int> match_right(num_right, -1);
  int size = 0;
  for (std::size_t l = 0; l < adj.size(); ++l) {
    std::vector<char> seen(num_right, 0);
    std::function<bool(int)> augment = [&](int u) {
      for (int v : adj[u]) {
        if (seen[v]) continue;
        seen[v] = 1;
        if (match_right[v] < 0 || augment(match_right[v])) {
          match_right[v] = u;
          return true;
        }
      }
      return false;
    };
    if (augment(static_cast<int>(l))) ++size;
  }
  return size;
}

F1Result finish(const std::vector<std::string>& classes, std::vector<Counts> counts) {
  F1Result r;
  r.classes = classes;
  r.counts = std::move(counts);
  double sum = 0.0;
  for (const auto& c : r.counts) {
    r.per_class.push_back(c.f1());
    sum += r.per_class.back();
  }
  r.macro = classes.empty() ? 0.0 : sum / static_cast<double>(classes.size());
  return r;
}

}  // namespace

void MatchConfig::validate() const {
  if (!(segment_length > 0.0)) throw Error("segment length must be positive");
  if (!(collar > 0.0)) throw Error("collar must be positive");
}

double Counts::f1() const {
  const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp + fn);
  return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
}

F1Result segment_f1(const std::vector<ClipAnnotation>& refs,
                    const std::vector<ClipAnnotation>& preds,
                    const std::vector<std::string>& classes, const MatchConfig& cfg) {
  cfg.validate();
  const auto aligned = align(refs, preds);
  std::vector<Counts> counts(classes.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const double dur = refs[i].duration;
    const int segments = static_cast<int>(std::ceil(dur / cfg.segment_length - kMetricEps));
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto r = of_label(&refs[i], classes[c]);
      const auto p = of_label(aligned[i], classes[c]);
      for (int k = 0; k < segments; ++k) {
        const double a = k * cfg.segment_length;
        const double b = std::min(dur, (k + 1) * cfg.segment_length);
        auto active = [&](const std::vector<const Event*>& evs) {
          return std::any_of(evs.begin(), evs.end(), [&](const Event* e) {
            return overlap(e->onset, e->offset, a, b) > kMetricEps;
          });
        };
        const bool ra = active(r), pa = active(p);
        counts[c].tp += ra && pa;
        counts[c].fp += !ra && pa;
        counts[c].fn += ra && !pa;
      }
    }
  }
  return finish(classes, std::move(counts));
}

F1Result event_f1(const std::vector<ClipAnnotation>& refs,
                  const std::vector<ClipAnnotation>& preds,
                  const std::vector<std::string>& classes, const MatchConfig& cfg) {
  cfg.validate();
  const auto aligned = align(refs, preds);
  std::vector<Counts> counts(classes.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto r = of_label(&refs[i], classes[c]);
      const auto p = of_label(aligned[i], classes[c]);
      std::vector<std::vector<int>> adj(r.size());
      for (std::size_t a = 0; a < r.size(); ++a)
        for (std::size_t b = 0; b < p.size(); ++b)
          if (collar_match(*r[a], *p[b], cfg)) adj[a].push_back(static_cast<int>(b));
      const int tp = max_matching(adj, static_cast<int>(p.size()));
      counts[c].tp += tp;
      counts[c].fp += static_cast<std::int64_t>(p.size()) - tp;
      counts[c].fn += static_cast<std::int64_t>(r.size()) - tp;
    }
  }
  return finish(classes, std::move(counts));
}

std::vector<double> PsdsConfig::default_thresholds() {
  std::vector<double> t(50);
  for (int i = 0; i < 50; ++i) t[i] = 0.01 + 0.98 * i / 49.0;
  return t;
}

void PsdsConfig::validate() const {
  if (!(dtc > 0.0 && dtc <= 1.0)) throw Error("dtc must lie in (0, 1]");
  if (!(gtc > 0.0 && gtc <= 1.0)) throw Error("gtc must lie in (0, 1]");
  if (alpha_ct != 0.0) throw Error("cross-trigger cost is not supported (alpha_ct must be 0)");
  if (!(alpha_st >= 0.0)) throw Error("alpha_st must be non-negative");
  if (!(e_max > 0.0)) throw Error("e_max must be positive");
  if (thresholds.empty()) throw Error("psds needs at least one threshold");
}

IntersectionCounts intersection_counts(const std::vector<ClipAnnotation>& refs,
                                       const std::vector<ClipAnnotation>& dets,
                                       const std::string& label, double dtc, double gtc) {
  if (dets.size() != refs.size()) throw Error("detections are not aligned with references");
  IntersectionCounts out;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto r = of_label(&refs[i], label);
    const auto d = of_label(&dets[i], label);
    out.num_refs += static_cast<std::int64_t>(r.size());
    std::vector<const Event*> valid;
    for (const Event* det : d) {
      double inter = 0.0;
      for (const Event* ref : r) inter += overlap(det->onset, det->offset, ref->onset, ref->offset);
      const double ratio = inter / det->duration();
      if (ratio > 0.0 && ratio >= dtc - kMetricEps) {
        valid.push_back(det);
      } else {
        ++out.fp;
      }
    }
    for (const Event* ref : r) {
      double inter = 0.0;
      for (const Event* det : valid) inter += overlap(det->onset, det->offset, ref->onset, ref->offset);
      const double ratio = inter / ref->duration();
      if (ratio > 0.0 && ratio >= gtc - kMetricEps) ++out.tp;
    }
  }
  return out;
}

PsdsReport psds_from_detections(const std::vector<ClipAnnotation>& refs,
                                const std::vector<std::vector<ClipAnnotation>>& detections,
                                const std::vector<std::string>& classes, const PsdsConfig& cfg) {
  cfg.validate();
  if (detections.size() != cfg.thresholds.size())
    throw Error("need one detection set per threshold");
  PsdsReport rep;
  for (const auto& r : refs) rep.total_duration += r.duration;
  if (!(rep.total_duration > 0.0)) throw Error("psds needs a positive total duration");
  const double hours = rep.total_duration / 3600.0;

  std::vector<const ClassRoc*> used;
  rep.classes.reserve(classes.size());
  for (const auto& label : classes) {
    ClassRoc roc;
    roc.label = label;
    for (std::size_t k = 0; k < detections.size(); ++k) {
      const IntersectionCounts ic = intersection_counts(refs, detections[k], label, cfg.dtc, cfg.gtc);
      roc.num_refs = ic.num_refs;
      RocPoint p;
      p.threshold = cfg.thresholds[k];
      p.tp = ic.tp;
      p.fp = ic.fp;
      p.tpr = ic.num_refs > 0 ? static_cast<double>(ic.tp) / static_cast<double>(ic.num_refs) : 0.0;
      p.efpr = static_cast<double>(ic.fp) / hours;
      roc.points.push_back(p);
    }
    std::vector<RocPoint> sorted = roc.points;
    std::sort(sorted.begin(), sorted.end(),
              [](const RocPoint& a, const RocPoint& b) { return a.efpr < b.efpr; });
    roc.envelope.emplace_back(0.0, 0.0);
    for (const auto& p : sorted) {
      if (p.tpr <= roc.envelope.back().second) continue;
      if (p.efpr == roc.envelope.back().first) {
        roc.envelope.back().second = p.tpr;
      } else {
        roc.envelope.emplace_back(p.efpr, p.tpr);
      }
    }
    rep.classes.push_back(std::move(roc));
  }
  for (const auto& roc : rep.classes) {
    if (roc.num_refs == 0) {
      rep.warnings.push_back("class '" + roc.label + "' has no reference events; excluded from PSDS");
    } else {
      used.push_back(&roc);
    }
  }
  if (used.empty()) {
    rep.warnings.push_back("no class has reference events; PSDS is 0");
    return rep;
  }

  std::vector<double> breaks{0.0};
  for (const ClassRoc* roc : used)
    for (const auto& [e, tpr] : roc->envelope)
      if (e < cfg.e_max) breaks.push_back(e);
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

  auto staircase = [](const ClassRoc& roc, double e) {
    double v = 0.0;
    for (const auto& [x, tpr] : roc.envelope) {
      if (x > e) break;
      v = tpr;
    }
    return v;
  };
  const double n = static_cast<double>(used.size());
  double area = 0.0;
  for (std::size_t b = 0; b < breaks.size(); ++b) {
    const double lo = breaks[b];
    const double hi = b + 1 < breaks.size() ? breaks[b + 1] : cfg.e_max;
    double mean = 0.0;
    std::vector<double> tprs;
    for (const ClassRoc* roc : used) {
      tprs.push_back(staircase(*roc, lo));
      mean += tprs.back();
    }
    mean /= n;
    double var = 0.0;
    for (double t : tprs) var += (t - mean) * (t - mean);
    const double etpr = std::max(0.0, mean - cfg.alpha_st * std::sqrt(var / n));
    area += etpr * (hi - lo);
  }
  rep.psds = area / cfg.e_max;
  return rep;
}

PsdsReport psds(const std::vector<ClipAnnotation>& refs,
                const std::vector<Eigen::MatrixXd>& posteriors,
                const std::vector<std::string>& classes, int median_window,
                const PsdsConfig& cfg) {
  if (posteriors.size() != refs.size()) throw Error("posteriors are not aligned with references");
  std::vector<FrameGrid> grids;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    grids.push_back(FrameGrid::for_duration(refs[i].duration));
    if (posteriors[i].rows() != grids.back().num_frames ||
        posteriors[i].cols() != static_cast<Eigen::Index>(classes.size()))
      throw Error("posterior shape does not match clip '" + refs[i].clip_id + "'");
  }
  std::vector<std::vector<ClipAnnotation>> dets(cfg.thresholds.size());
  for (std::size_t k = 0; k < cfg.thresholds.size(); ++k) {
    dets[k].reserve(refs.size());
    for (std::size_t i = 0; i < refs.size(); ++i) {
      FrameActivity act(grids[i], classes);
      act.activity = median_filter(binarize_all(posteriors[i], cfg.thresholds[k]), median_window);
      dets[k].push_back(decode_events(act, refs[i].clip_id, refs[i].duration));
    }
  }
  return psds_from_detections(refs, dets, classes, cfg);
}

nlohmann::json to_json(const F1Result& r) {
  nlohmann::json j;
  j["macro"] = r.macro;
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    j["per_class"][r.classes[c]] = {{"f1", r.per_class[c]},
                                    {"tp", r.counts[c].tp},
                                    {"fp", r.counts[c].fp},
                                    {"fn", r.counts[c].fn}};
  }
  return j;
}

nlohmann::json to_json(const PsdsReport& r) {
  nlohmann::json j;
  j["psds"] = r.psds;
  j["total_duration"] = r.total_duration;
  j["warnings"] = r.warnings;
  for (const auto& roc : r.classes) {
    nlohmann::json c;
    c["num_refs"] = roc.num_refs;
    for (const auto& p : roc.points)
      c["points"].push_back({{"threshold", p.threshold}, {"tp", p.tp}, {"fp", p.fp},
                             {"tpr", p.tpr}, {"efpr", p.efpr}});
    for (const auto& [e, t] : roc.envelope) c["envelope"].push_back({e, t});
    j["classes"][roc.label] = c;
  }
  return j;
}

void write_roc_tsv(const PsdsReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "class\tthreshold\ttp\tfp\ttpr\tefpr_per_hour\n";
  for (const auto& roc : r.classes)
    for (const auto& p : roc.points)
      out << roc.label << '\t' << p.threshold << '\t' << p.tp << '\t' << p.fp << '\t' << p.tpr
          << '\t' << p.efpr << '\n';
}

}  // namespace tsed
