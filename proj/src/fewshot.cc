#include "tsed/fewshot.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace tsed {

void FewShotProtocol::validate() const {
  if (target_class.empty()) throw Error("few-shot target class is empty");
  if (support_pool.empty()) throw Error("few-shot support pool is empty");
  if (std::set<std::string>(support_pool.begin(), support_pool.end()).size() != support_pool.size())
    throw Error("few-shot support pool lists a clip twice");
  if (ks.empty()) throw Error("no K values");
  for (int k : ks)
    if (k < 1 || k > static_cast<int>(support_pool.size()))
      throw Error("K = " + std::to_string(k) + " is outside 1.." + std::to_string(support_pool.size()));
  if (seeds.empty()) throw Error("no seeds");
}

std::vector<std::string> sample_support(const std::vector<std::string>& pool, int k, std::uint64_t seed) {
  if (k < 1 || k > static_cast<int>(pool.size()))
    throw Error("K = " + std::to_string(k) + " is outside 1.." + std::to_string(pool.size()));
  std::vector<std::string> out = pool;
  Rng rng(seed);
  // Partial Fisher-Yates.
  for (int i = 0; i < k; ++i) {
    const auto j = std::uniform_int_distribution<std::size_t>(static_cast<std::size_t>(i), out.size() - 1)(rng);
    std::swap(out[static_cast<std::size_t>(i)], out[j]);
  }
  out.resize(static_cast<std::size_t>(k));
  return out;
}

std::string to_string(FewShotModel m) { return m == FewShotModel::kBiGru ? "bigru" : "biesn"; }

FewShotModel parse_fewshot_model(const std::string& s) {
  if (s == "bigru") return FewShotModel::kBiGru;
  if (s == "biesn") return FewShotModel::kBiEsn;
  throw Error("unknown few-shot model '" + s + "' (expected bigru or biesn)");
}

Dataset single_class(const Dataset& data, const std::string& target) {
  Dataset out;
  out.classes = {target};
  for (std::size_t i = 0; i < data.size(); ++i) {
    ClipAnnotation clip = data.clips[i];
    std::erase_if(clip.events, [&](const Event& e) { return e.label != target; });
    out.add(std::move(clip), data.features[i]);
  }
  return out;
}

namespace {

void require_target(const Dataset& support) {
  if (support.classes.size() != 1) throw Error("few-shot datasets must have exactly one class");
  for (const auto& clip : support.clips)
    if (clip.events.empty())
      throw Error("support clip '" + clip.clip_id + "' has no '" + support.classes[0] + "' event");
}

}  // namespace

Model initial_fewshot_model(FewShotModel kind, const Dataset& support, const FewShotConfig& cfg,
                            std::uint64_t seed) {
  require_target(support);
  ModuleConfig mc;
  mc.direction = Direction::kBi;
  mc.input_dim = support.feature_dim();
  mc.init_seed = seed;
  if (kind == FewShotModel::kBiGru) {
    mc.kind = ModelKind::kGru;
    mc.hidden = cfg.gru_hidden;
    mc.layers = cfg.gru_layers;
    mc.dropout = cfg.gru_dropout;
  } else {
    mc.kind = ModelKind::kEsn;
    mc.hidden = cfg.esn_size;
    mc.esn = cfg.esn;
    mc.esn.seed = seed;
  }
  if (cfg.init_from && kind == FewShotModel::kBiGru) {
    const Checkpoint ck = load_checkpoint(*cfg.init_from);
    const ModuleConfig& pc = ck.model.module.config();
    if (pc.kind != ModelKind::kGru || pc.direction != Direction::kBi || pc.input_dim != mc.input_dim)
      throw Error("checkpoint " + cfg.init_from->string() + " is not a bigru over " +
                  std::to_string(mc.input_dim) + "-dim features");
    Model m(pc, support.classes, ck.model.normalizer, seed);
    m.module = ck.model.module;
    m.frontend = ck.model.frontend;
    m.feature_kind = ck.model.feature_kind;
    return m;
  }
  return Model(mc, support.classes, Normalizer::fit(support.features), seed);
}

double adapt_and_eval(FewShotModel kind, const Dataset& support, const Dataset& query, const FewShotConfig& cfg,
                      std::uint64_t seed) {
  if (support.size() == 0) throw Error("few-shot support set is empty");
  if (query.classes != support.classes) throw Error("query and support classes differ");
  Model model = initial_fewshot_model(kind, support, cfg, seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  FitOptions opts;
  opts.selection = Selection::kTrainLoss;
  const FitResult fr = fit(std::move(model), support, Dataset{}, tc, opts);
  return selection_psds1(fr.best.model, query, cfg.psds);
}

FewShotSummary summarize(FewShotModel model, int k, std::vector<double> values) {
  FewShotSummary s;
  s.model = model;
  s.k = k;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  const double n = static_cast<double>(s.values.size());
  for (double v : s.values) s.mean += v / n;
  double var = 0.0;
  for (double v : s.values) var += (v - s.mean) * (v - s.mean) / n;
  s.std = std::sqrt(var);
  return s;
}

FewShotResult run_protocol(const FewShotProtocol& protocol, const std::vector<FewShotModel>& models,
                           const Dataset& pool, const Dataset& query, const FewShotConfig& cfg) {
  protocol.validate();
  if (models.empty()) throw Error("no few-shot models");
  if (pool.classes != std::vector<std::string>{protocol.target_class} || query.classes != pool.classes)
    throw Error("few-shot datasets must contain only the target class '" + protocol.target_class + "'");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < pool.size(); ++i) index[pool.clips[i].clip_id] = i;
  for (const auto& id : protocol.support_pool)
    if (!index.count(id)) throw Error("support pool clip '" + id + "' is not in the pool dataset");
  for (const auto& clip : query.clips)
    if (std::find(protocol.support_pool.begin(), protocol.support_pool.end(), clip.clip_id) !=
        protocol.support_pool.end())
      throw Error("query clip '" + clip.clip_id + "' is also in the support pool");

  FewShotResult res;
  for (FewShotModel m : models) {
    for (int k : protocol.ks) {
      std::vector<double> values;
      for (std::uint64_t seed : protocol.seeds) {
        FewShotRun run;
        run.model = m;
        run.k = k;
        run.seed = seed;
        run.support = sample_support(protocol.support_pool, k, seed);
        std::vector<std::size_t> idx;
        for (const auto& id : run.support) idx.push_back(index.at(id));
        run.psds1 = adapt_and_eval(m, pool.subset(idx), query, cfg, seed);
        values.push_back(run.psds1);
        res.runs.push_back(std::move(run));
      }
      res.summary.push_back(summarize(m, k, std::move(values)));
    }
  }
  return res;
}

void write_runs_tsv(const FewShotResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "model\tK\tseed\tpsds1\n";
  for (const auto& run : r.runs) out << to_string(run.model) << '\t' << run.k << '\t' << run.seed << '\t' << run.psds1 << '\n';
}

void write_summary_tsv(const FewShotResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "model\tK\tmean\tstd\tn\n";
  for (const auto& s : r.summary)
    out << to_string(s.model) << '\t' << s.k << '\t' << s.mean << '\t' << s.std << '\t' << s.values.size() << '\n';
}

}  // namespace tsed
