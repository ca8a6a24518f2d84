#include "tsed/hpo.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

namespace tsed {

SearchSpace SearchSpace::esn() {
  return {{{"spectral_radius", 0.1, 1.8, false},
           {"leak", 0.05, 1.0, false},
           {"input_scale", 0.01, 5.0, true},
           {"learning_rate", 1e-4, 3e-3, true}}};
}

void SearchSpace::validate() const {
  if (dims.empty()) throw Error("search space has no dimensions");
  for (const auto& d : dims) {
    if (!(d.hi > d.lo)) throw Error("search dimension '" + d.name + "' has an empty range");
    if (d.log_scale && d.lo <= 0.0) throw Error("log-scale dimension '" + d.name + "' must be positive");
  }
}

bool SearchSpace::contains(const TrialConfig& cfg) const {
  for (const auto& d : dims) {
    auto it = cfg.find(d.name);
    if (it == cfg.end() || !(it->second >= d.lo && it->second <= d.hi)) return false;
  }
  return true;
}

void apply_trial(const TrialConfig& trial, ModuleConfig& module, TrainConfig& train) {
  for (const auto& [name, value] : trial) {
    if (name == "spectral_radius") module.esn.spectral_radius = value;
    else if (name == "leak") module.esn.leak = value;
    else if (name == "input_scale") module.esn.input_scale = value;
    else if (name == "density") module.esn.density = value;
    else if (name == "learning_rate") train.learning_rate = value;
    else throw Error("unknown hyperparameter '" + name + "'");
  }
}

nlohmann::json Trial::to_json() const {
  nlohmann::json j = {{"id", id},
                      {"config", config},
                      {"status", status == TrialStatus::kOk ? "ok" : "failed"},
                      {"objective", nullptr},
                      {"seconds", seconds}};
  if (objective) j["objective"] = *objective;
  if (!error.empty()) j["error"] = error;
  return j;
}

Trial Trial::from_json(const nlohmann::json& j) {
  Trial t;
  t.id = j.at("id").get<int>();
  t.config = j.at("config").get<TrialConfig>();
  const std::string status = j.at("status").get<std::string>();
  if (status == "ok") t.status = TrialStatus::kOk;
  else if (status == "failed") t.status = TrialStatus::kFailed;
  else throw Error("unknown trial status '" + status + "'");
  if (t.status == TrialStatus::kOk) {
    if (j.at("objective").is_null()) throw Error("successful trial " + std::to_string(t.id) + " has no objective");
    t.objective = j.at("objective").get<double>();
  }
  t.error = j.value("error", "");
  t.seconds = j.value("seconds", 0.0);
  return t;
}

SamplerKind parse_sampler(const std::string& s) {
  if (s == "random") return SamplerKind::kRandom;
  if (s == "tpe") return SamplerKind::kTpe;
  throw Error("unknown sampler '" + s + "' (expected random or tpe)");
}

std::string to_string(SamplerKind s) { return s == SamplerKind::kRandom ? "random" : "tpe"; }

// ---------------------------------------------------------------- samplers

namespace {

double to_internal(const SearchDim& d, double x) { return d.log_scale ? std::log(x) : x; }
double from_internal(const SearchDim& d, double u) {
  return std::clamp(d.log_scale ? std::exp(u) : u, d.lo, d.hi);
}

double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Gaussian KDE truncated to [lo, hi] in the internal space.
struct Kde {
  std::vector<double> mu;
  double h = 1.0;
  double lo = 0.0, hi = 1.0;

  Kde(std::vector<double> points, double lo_, double hi_) : mu(std::move(points)), lo(lo_), hi(hi_) {
    const double n = static_cast<double>(mu.size());
    const double mean = std::accumulate(mu.begin(), mu.end(), 0.0) / n;
    double var = 0.0;
    for (double m : mu) var += (m - mean) * (m - mean);
    const double sd = mu.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    // Scott's rule, floored so a collapsed set still explores.
    h = std::max(sd * std::pow(n, -0.2), (hi - lo) * 0.01);
  }

  double log_density(double x) const {
    double p = 0.0;
    for (double m : mu) {
      const double mass = phi((hi - m) / h) - phi((lo - m) / h);
      const double z = (x - m) / h;
      p += std::exp(-0.5 * z * z) / (h * std::sqrt(2.0 * std::numbers::pi) * std::max(mass, 1e-300));
    }
    return std::log(std::max(p / static_cast<double>(mu.size()), 1e-300));
  }

  double draw(Rng& rng) const {
    const double m = mu[std::uniform_int_distribution<std::size_t>(0, mu.size() - 1)(rng)];
    return std::clamp(std::normal_distribution<double>(m, h)(rng), lo, hi);
  }
};

}  // namespace

TrialConfig sample_random(const SearchSpace& space, Rng& rng) {
  TrialConfig cfg;
  for (const auto& d : space.dims) {
    std::uniform_real_distribution<double> u(to_internal(d, d.lo), to_internal(d, d.hi));
    cfg[d.name] = from_internal(d, u(rng));
  }
  return cfg;
}

TrialConfig sample(const SearchSpace& space, SamplerKind sampler, const std::vector<Trial>& history, Rng& rng,
                   const TpeOptions& tpe) {
  space.validate();
  std::vector<const Trial*> done;
  for (const auto& t : history)
    if (t.status == TrialStatus::kOk && t.objective && space.contains(t.config)) done.push_back(&t);
  if (sampler == SamplerKind::kRandom || static_cast<int>(done.size()) < std::max(tpe.warmup, 2))
    return sample_random(space, rng);

  std::stable_sort(done.begin(), done.end(),
                   [](const Trial* a, const Trial* b) { return *a->objective > *b->objective; });
  const auto n_good = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(tpe.gamma * static_cast<double>(done.size()))), 1, done.size() - 1);

  std::vector<Kde> good, bad;
  for (const auto& d : space.dims) {
    std::vector<double> g, b;
    for (std::size_t i = 0; i < done.size(); ++i)
      (i < n_good ? g : b).push_back(to_internal(d, done[i]->config.at(d.name)));
    const double lo = to_internal(d, d.lo), hi = to_internal(d, d.hi);
    good.emplace_back(std::move(g), lo, hi);
    bad.emplace_back(std::move(b), lo, hi);
  }
  TrialConfig best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < std::max(tpe.candidates, 1); ++c) {
    TrialConfig cand;
    double score = 0.0;
    for (std::size_t k = 0; k < space.dims.size(); ++k) {
      const double u = good[k].draw(rng);
      score += good[k].log_density(u) - bad[k].log_density(u);
      cand[space.dims[k].name] = from_internal(space.dims[k], u);
    }
    if (score > best_score) {
      best_score = score;
      best = std::move(cand);
    }
  }
  return best;
}

// ------------------------------------------------------------------- study

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::vector<Trial> read_study(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open study file " + path.string());
  std::vector<Trial> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(Trial::from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (out.back().id != static_cast<int>(out.size()) - 1)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": trial ids are not consecutive");
  }
  return out;
}

StudyResult run_study(const SearchSpace& space, const Objective& objective, const StudyOptions& opts) {
  space.validate();
  if (opts.budget < 1) throw Error("study budget must be positive");
  if (!(opts.tpe.gamma > 0.0 && opts.tpe.gamma < 1.0)) throw Error("tpe gamma must lie in (0, 1)");
  StudyResult res;
  std::ofstream log;
  if (opts.study_file) {
    if (std::filesystem::exists(*opts.study_file)) {
      if (!opts.resume)
        throw Error("study file " + opts.study_file->string() + " exists (resume it or choose another path)");
      res.history = read_study(*opts.study_file);
    }
    log.open(*opts.study_file, std::ios::app);
    if (!log) throw Error("cannot write study file " + opts.study_file->string());
  }
  for (int id = static_cast<int>(res.history.size()); id < opts.budget; ++id) {
    // Per-trial streams make a resumed study match an uninterrupted one.
    Rng rng(splitmix(opts.seed ^ splitmix(static_cast<std::uint64_t>(id))));
    Trial t;
    t.id = id;
    t.config = sample(space, opts.sampler, res.history, rng, opts.tpe);
    const auto start = std::chrono::steady_clock::now();
    try {
      const double v = objective(t.config, splitmix(opts.seed + static_cast<std::uint64_t>(id)));
      if (!std::isfinite(v)) throw Error("objective is not finite");
      t.objective = v;
    } catch (const std::exception& e) {
      t.status = TrialStatus::kFailed;
      t.error = e.what();
    }
    t.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log.is_open()) log << t.to_json().dump() << '\n' << std::flush;
    res.history.push_back(std::move(t));
  }
  for (const auto& t : res.history)
    if (t.status == TrialStatus::kOk && (!res.best || *t.objective > *res.best->objective)) res.best = t;
  return res;
}

}  // namespace tsed
