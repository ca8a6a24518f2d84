// Command-line entry point: synthesis, training, evaluation, detection,
// hyperparameter search and few-shot adaptation.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tsed/audio.h"
#include "tsed/fewshot.h"
#include "tsed/hpo.h"
#include "tsed/metrics.h"
#include "tsed/postproc.h"
#include "tsed/scenegen.h"
#include "tsed/trainer.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tsed;

namespace {

// ------------------------------------------------------------------ config

// Reads JSON objects (nested objects are sections) and falls back to TOML.
class JsonOrTomlConfig : public CLI::ConfigBase {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos || text[first] != '{') {
      std::istringstream again(text);
      return CLI::ConfigBase::from_config(again);
    }
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw CLI::ConfigError(std::string("invalid JSON config: ") + e.what());
    }
    std::vector<CLI::ConfigItem> items;
    flatten(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

  static void flatten(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        auto p = parents;
        p.push_back(key);
        flatten(value, p, out);
        continue;
      }
      if (value.is_null()) continue;
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array())
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      else
        item.inputs.push_back(scalar(value));
      out.push_back(std::move(item));
    }
  }
};

// Effective option values of one subcommand, loadable again with --config.
json resolved_config(const CLI::App* sub) {
  json opts = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help") continue;
    if (opt->get_expected_max() == 0) {
      opts[name] = opt->count() > 0;
      continue;
    }
    std::vector<std::string> values = opt->results();
    if (values.empty()) {
      std::string def = opt->get_default_str();
      if (def.empty()) continue;
      if (def.size() >= 2 && def.front() == '[' && def.back() == ']') {
        std::stringstream items(def.substr(1, def.size() - 2));
        for (std::string v; std::getline(items, v, ',');) values.push_back(v);
      } else {
        values = {def};
      }
    }
    if (opt->get_expected_max() > 1 || values.size() > 1) opts[name] = values;
    else opts[name] = values.front();
  }
  return {{sub->get_name(), opts}};
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void echo_config(const CLI::App* sub, const fs::path& dir) {
  fs::create_directories(dir);
  write_json(resolved_config(sub), dir / "config.resolved.json");
}

// ---------------------------------------------------------------- datasets

std::vector<std::string> dataset_classes(const fs::path& root) {
  const fs::path manifest = root / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    const json m = json::parse(in);
    return m.at("config").at("classes").get<std::vector<std::string>>();
  }
  std::set<std::string> labels;
  for (const auto& c : read_strong_tsv(root / "train" / "labels.tsv"))
    for (const auto& e : c.events) labels.insert(e.label);
  if (labels.empty()) throw Error("cannot infer classes: no manifest and no training labels in " + root.string());
  return {labels.begin(), labels.end()};
}

FeatureKind parse_features(const std::string& s) {
  if (s == "logmel") return FeatureKind::kLogMel;
  if (s == "embeddings") return FeatureKind::kEmbeddings;
  throw Error("unknown feature kind '" + s + "'");
}

struct DataOptions {
  std::string data;
  std::vector<std::string> classes;
  std::string features = "logmel";
  int n_mels = 64;
  int projection = 0;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory with train/validation/test splits")
        ->required()
        ->check(CLI::ExistingDirectory);
    app->add_option("--classes", classes, "Class list (default: from the dataset)")->delimiter(',');
    app->add_option("--features", features, "logmel or embeddings")
        ->capture_default_str()
        ->check(CLI::IsMember({"logmel", "embeddings"}));
    app->add_option("--mels", n_mels, "Mel bands")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--projection", projection, "Frozen random projection width (0 = none)")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
  }

  FrontendConfig frontend(std::uint64_t seed) const {
    FrontendConfig f;
    f.n_mels = n_mels;
    if (projection > 0) f.projection_dim = projection;
    f.seed = seed;
    return f;
  }

  std::vector<std::string> resolved_classes() const { return classes.empty() ? dataset_classes(data) : classes; }
};

struct ModelOptions {
  std::string model = "gru";
  bool bi = false;
  int hidden = 256;
  int layers = 2;
  int input_proj = 0;
  int reservoir = 1024;
  double dropout = 0.3;
  double spectral_radius = 0.9;
  double leak = 0.5;
  double input_scale = 1.0;
  double density = 0.1;

  void add(CLI::App* app, bool esn_only = false) {
    if (!esn_only)
      app->add_option("--model", model, "linear, gru, lstm or esn")
          ->capture_default_str()
          ->check(CLI::IsMember({"linear", "gru", "lstm", "esn"}));
    app->add_flag("--bi", bi, "Bidirectional");
    if (!esn_only) {
      app->add_option("--hidden", hidden, "Hidden units per direction")->capture_default_str()->check(CLI::PositiveNumber);
      app->add_option("--layers", layers, "Recurrent layers")->capture_default_str()->check(CLI::PositiveNumber);
      app->add_option("--input-proj", input_proj, "Trainable input projection width (0 = none)")
          ->capture_default_str()
          ->check(CLI::NonNegativeNumber);
      app->add_option("--dropout", dropout, "Dropout between recurrent layers")->capture_default_str();
    }
    app->add_option("--reservoir", reservoir, "Reservoir size per direction")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--spectral-radius", spectral_radius)->capture_default_str();
    app->add_option("--leak", leak)->capture_default_str();
    app->add_option("--input-scale", input_scale)->capture_default_str();
    app->add_option("--density", density)->capture_default_str();
  }

  ModuleConfig config(int input_dim, std::uint64_t seed) const {
    ModuleConfig mc;
    mc.kind = parse_model_kind(model);
    mc.direction = bi ? Direction::kBi : Direction::kUni;
    mc.input_dim = input_dim;
    mc.hidden = mc.kind == ModelKind::kEsn ? reservoir : hidden;
    mc.layers = layers;
    if (input_proj > 0) mc.input_projection = input_proj;
    mc.dropout = dropout;
    mc.esn = {spectral_radius, leak, input_scale, density, seed};
    mc.init_seed = seed;
    mc.validate();
    return mc;
  }
};

struct TrainOptions {
  double lr = 1e-4;
  int batch = 64;
  int epochs = 100;
  int patience = 20;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
    app->add_option("--batch", batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--epochs", epochs, "Maximum epochs")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--patience", patience, "Early-stopping patience")->capture_default_str()->check(CLI::PositiveNumber);
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig t;
    t.learning_rate = lr;
    t.batch_size = batch;
    t.max_epochs = epochs;
    t.early_stop_patience = patience;
    t.seed = seed;
    t.validate();
    return t;
  }
};

// Posteriors of one split, or the targets themselves in oracle mode.
std::vector<Eigen::MatrixXd> split_posteriors(const Model& model, const Dataset& data, bool oracle) {
  if (!oracle) return predict(model, data.features);
  std::vector<Eigen::MatrixXd> out;
  for (const auto& t : data.targets) out.push_back(t.cast<double>());
  return out;
}

Dataset load_for_model(const Model& model, const fs::path& root, const std::string& split) {
  return load_split(root, split, model.classes, model.frontend, model.feature_kind);
}

// -------------------------------------------------------------- commands

struct Common {
  std::uint64_t seed = 0;
  int jobs = 1;

  void add(CLI::App* app) {
    app->add_option("--seed", seed, "Random seed")->capture_default_str();
    app->add_option("--jobs", jobs, "Worker cap")->capture_default_str()->check(CLI::PositiveNumber);
  }
};

struct MakeBank {
  Common common;
  std::string out;
  std::vector<std::string> classes{"eating", "typing", "clock"};
  int files = 10;
  int backgrounds = 5;
  int sample_rate = 16000;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("make-bank", "Write a procedural demo source bank");
    common.add(c);
    c->add_option("--out", out, "Output directory")->required();
    c->add_option("--classes", classes)->delimiter(',')->capture_default_str();
    c->add_option("--files-per-class", files)->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--backgrounds", backgrounds)->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--sample-rate", sample_rate)->capture_default_str()->check(CLI::PositiveNumber);
    c->callback([this, c] {
      if (fs::exists(out) && !fs::is_empty(out)) throw Error("output directory " + out + " is not empty");
      make_toy_bank(out, classes, files, backgrounds, common.seed, sample_rate);
      echo_config(c, out);
      std::cout << "wrote " << classes.size() * static_cast<std::size_t>(files) << " foreground and " << backgrounds
                << " background files to " << out << '\n';
    });
  }
};

struct Synth {
  Common common;
  std::string bank, out, manifest;
  std::vector<std::string> classes;
  std::vector<int> counts{6000, 2000, 2000};
  std::vector<int> events{1, 4};
  std::vector<double> snr{6.0, 30.0};
  std::vector<double> pitch{-3.0, 3.0};
  double duration = 10.0;
  double ref_db = -50.0;
  bool overwrite = false;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("synth", "Synthesize a strongly labeled soundscape dataset");
    common.add(c);
    c->add_option("--bank", bank, "Source bank directory")->check(CLI::ExistingDirectory);
    c->add_option("--from-manifest", manifest, "Re-render a dataset from its manifest")->check(CLI::ExistingFile);
    c->add_option("--out", out, "Output directory")->required();
    c->add_option("--classes", classes, "Classes (default: every bank class)")->delimiter(',');
    c->add_option("--counts", counts, "Clips per split")->delimiter(',')->expected(3)->capture_default_str();
    c->add_option("--events", events, "Events per clip range")->delimiter(',')->expected(2)->capture_default_str();
    c->add_option("--snr", snr, "SNR range in dB")->delimiter(',')->expected(2)->capture_default_str();
    c->add_option("--pitch", pitch, "Pitch shift range in semitones")->delimiter(',')->expected(2)->capture_default_str();
    c->add_option("--duration", duration, "Clip duration in seconds")->capture_default_str();
    c->add_option("--ref-db", ref_db, "Background RMS level in dBFS")->capture_default_str();
    c->add_flag("--overwrite", overwrite, "Replace an existing dataset");
    c->callback([this, c] {
      if (bank.empty() == manifest.empty()) throw CLI::ValidationError("synth", "give exactly one of --bank or --from-manifest");
      if (!manifest.empty()) {
        regenerate_from_manifest(manifest, out, overwrite);
        echo_config(c, out);
        std::cout << "regenerated " << out << '\n';
        return;
      }
      const SourceBank b = SourceBank::scan(bank, common.seed);
      SynthConfig cfg;
      cfg.classes = classes.empty() ? b.classes() : classes;
      cfg.counts = {counts[0], counts[1], counts[2]};
      cfg.min_events = events[0];
      cfg.max_events = events[1];
      cfg.snr_min_db = snr[0];
      cfg.snr_max_db = snr[1];
      cfg.pitch_min = pitch[0];
      cfg.pitch_max = pitch[1];
      cfg.clip_duration = duration;
      cfg.ref_db = ref_db;
      cfg.seed = common.seed;
      const SynthResult r = synthesize_dataset(b, cfg, out, overwrite);
      echo_config(c, out);
      std::cout << "class\tsource_files\tsynthesized_clips\ttotal_events\ttotal_duration_min\n";
      for (const auto& s : r.stats)
        std::printf("%s\t%d\t%d\t%d\t%.3f\n", s.label.c_str(), s.source_files, s.clips, s.events, s.minutes);
    });
  }
};

struct Train {
  Common common;
  DataOptions data;
  ModelOptions model;
  TrainOptions train;
  std::string out;
  bool dry_run = false;
  int input_dim = 0;
  int num_classes = 0;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("train", "Train a detector and keep the best validation epoch");
    common.add(c);
    c->add_option("--data", data.data, "Dataset directory")->check(CLI::ExistingDirectory);
    c->add_option("--classes", data.classes, "Class list (default: from the dataset)")->delimiter(',');
    c->add_option("--features", data.features)->capture_default_str()->check(CLI::IsMember({"logmel", "embeddings"}));
    c->add_option("--mels", data.n_mels)->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--projection", data.projection)->capture_default_str()->check(CLI::NonNegativeNumber);
    model.add(c);
    train.add(c);
    c->add_option("--out", out, "Output directory");
    c->add_flag("--dry-run", dry_run, "Only report the model size");
    c->add_option("--input-dim", input_dim, "Feature width for --dry-run")->check(CLI::PositiveNumber);
    c->add_option("--num-classes", num_classes, "Class count for --dry-run")->check(CLI::PositiveNumber);
    c->callback([this, c] {
      if (dry_run) {
        if (input_dim < 1 || (num_classes < 1 && data.classes.empty()))
          throw CLI::ValidationError("train", "--dry-run needs --input-dim and --num-classes or --classes");
        const int nc = num_classes > 0 ? num_classes : static_cast<int>(data.classes.size());
        const ModuleConfig mc = model.config(input_dim, common.seed);
        const Readout r(mc.exposed_dim(), nc, common.seed);
        std::cout << "trainable parameters: " << count_trainable(TemporalModule::shape_only(mc), r) << '\n';
        return;
      }
      if (data.data.empty() || out.empty()) throw CLI::ValidationError("train", "--data and --out are required");
      const auto classes = data.resolved_classes();
      const FrontendConfig fe = data.frontend(common.seed);
      const FeatureKind kind = parse_features(data.features);
      const Dataset tr = load_split(data.data, "train", classes, fe, kind);
      const Dataset va = load_split(data.data, "validation", classes, fe, kind);
      Model m(model.config(tr.feature_dim(), common.seed), classes, Normalizer::fit(tr.features), common.seed);
      m.frontend = fe;
      m.feature_kind = kind;
      std::cout << "trainable parameters: " << m.trainable() << '\n';
      echo_config(c, out);
      FitOptions opts;
      opts.log_path = fs::path(out) / "train_log.jsonl";
      opts.on_epoch = [](const EpochRecord& r) {
        std::printf("epoch %d  train_loss %.5f  val_psds1 %.4f  %.1fs\n", r.epoch, r.train_loss,
                    r.val_psds1.value_or(0.0), r.seconds);
        std::fflush(stdout);
      };
      const FitResult fr = fit(std::move(m), tr, va, train.config(common.seed), opts);
      save_checkpoint(fr.best, fs::path(out) / "model.ckpt");
      std::cout << "best epoch " << fr.best.epoch << ", validation PSDS1 " << fr.best.val_psds1 << '\n';
    });
  }
};

struct Eval {
  Common common;
  std::string checkpoint, data, split = "test", tune_split = "validation", objective = "psds1", out;
  double fixed_threshold = -1.0;
  int window = 1;
  bool oracle = false;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("eval", "Tune post-processing and report PSDS1, event F1 and segment F1");
    common.add(c);
    c->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    c->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    c->add_option("--split", split, "Split to score")->capture_default_str();
    auto* from = c->add_option("--thresholds-from", tune_split, "Split used to tune window and thresholds")
                     ->capture_default_str();
    auto* fixed = c->add_option("--thresholds", fixed_threshold, "Fixed threshold for every class (skips tuning)")
                      ->check(CLI::Range(0.0, 1.0));
    from->excludes(fixed);
    c->add_option("--window", window, "Median window with --thresholds")->capture_default_str();
    c->add_option("--objective", objective, "psds1 or event_f1")
        ->capture_default_str()
        ->check(CLI::IsMember({"psds1", "event_f1"}));
    c->add_flag("--oracle", oracle, "Use the reference activity as posteriors");
    c->add_option("--out", out, "Output directory for metrics.json and roc.tsv");
    c->callback([this, c] {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const Model& m = ck.model;
      const Dataset test = load_for_model(m, data, split);
      json report;
      PostprocConfig pp;
      if (c->get_option("--thresholds")->count() > 0) {
        pp.median_window = window;
        pp.class_thresholds.assign(m.classes.size(), fixed_threshold);
        pp.validate(static_cast<int>(m.classes.size()));
        report["tuning"] = {{"split", nullptr}};
      } else {
        const Dataset tune_set = load_for_model(m, data, tune_split);
        TuneOptions to;
        to.objective = parse_tune_objective(objective);
        const TuneResult tr = tune(tune_set.clips, split_posteriors(m, tune_set, oracle), m.classes, to);
        pp = tr.config;
        report["tuning"] = {{"split", tune_split},
                            {"objective", objective},
                            {"value", tr.objective},
                            {"default_value", tr.default_objective},
                            {"event_f1", tr.event_f1}};
      }
      const auto post = split_posteriors(m, test, oracle);
      const PsdsReport ps = psds(test.clips, post, m.classes, pp.median_window);
      const auto dets = detect_all(test.clips, post, pp, m.classes);
      const F1Result ev = event_f1(test.clips, dets, m.classes);
      const F1Result seg = segment_f1(test.clips, dets, m.classes);
      report["split"] = split;
      report["psds1"] = ps.psds;
      report["event_f1"] = ev.macro;
      report["segment_f1"] = seg.macro;
      report["postproc"] = to_json(pp);
      report["details"] = {{"psds", to_json(ps)}, {"event", to_json(ev)}, {"segment", to_json(seg)}};
      if (!out.empty()) {
        echo_config(c, out);
        write_json(report, fs::path(out) / "metrics.json");
        write_roc_tsv(ps, fs::path(out) / "roc.tsv");
        write_strong_tsv(dets, fs::path(out) / "detections.tsv");
      }
      json brief = report;
      brief.erase("details");
      std::cout << brief.dump(2) << '\n';
    });
  }
};

struct Detect {
  Common common;
  std::string checkpoint, output, postproc;
  std::vector<std::string> inputs;
  double threshold = 0.5;
  int window = 1;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("detect", "Write predicted events for wav or embedding files");
    common.add(c);
    c->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    c->add_option("--input", inputs, "wav or .emb files")->required()->check(CLI::ExistingFile);
    c->add_option("--postproc", postproc, "Post-processing JSON (e.g. from eval's metrics.json)")->check(CLI::ExistingFile);
    c->add_option("--threshold", threshold, "Threshold for every class")->capture_default_str();
    c->add_option("--window", window, "Median window")->capture_default_str();
    c->add_option("--out", output, "Output TSV (default: stdout)");
    c->callback([this] {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const Model& m = ck.model;
      PostprocConfig pp;
      if (!postproc.empty()) {
        std::ifstream in(postproc);
        json j = json::parse(in);
        pp = postproc_from_json(j.contains("postproc") ? j["postproc"] : j);
      } else {
        pp.median_window = window;
        pp.class_thresholds.assign(m.classes.size(), threshold);
      }
      pp.validate(static_cast<int>(m.classes.size()));
      std::vector<ClipAnnotation> results;
      for (const auto& in : inputs) {
        const fs::path p(in);
        FeatureMatrix feats;
        double duration = 0.0;
        if (p.extension() == ".emb") {
          if (m.feature_kind != FeatureKind::kEmbeddings) throw Error("the checkpoint expects audio, got " + in);
          const FeatureSequence f = read_embeddings(p);
          duration = f.num_frames() * f.frame_period;
          feats = f.frames;
        } else {
          if (m.feature_kind != FeatureKind::kLogMel) throw Error("the checkpoint expects embeddings, got " + in);
          const Waveform w = load_wav(p);
          if (w.sample_rate != m.frontend.sample_rate)
            throw Error(in + " is sampled at " + std::to_string(w.sample_rate) + " Hz, the model expects " +
                        std::to_string(m.frontend.sample_rate));
          duration = w.duration();
          feats = extract_features(w, m.frontend, FrameGrid::for_duration(duration).num_frames).frames;
        }
        const auto post = predict(m, {feats});
        results.push_back(detect(post[0], pp, m.classes, p.filename().string(), duration));
      }
      if (output.empty()) {
        std::cout.flush();
        write_strong_tsv(results, "/dev/stdout");
      } else {
        write_strong_tsv(results, output);
      }
    });
  }
};

struct Hpo {
  Common common;
  DataOptions data;
  ModelOptions model;
  TrainOptions train;
  std::string out, sampler = "tpe";
  int budget = 150;
  bool resume = false;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("hpo", "Search reservoir and readout hyperparameters on validation PSDS1");
    common.add(c);
    data.add(c);
    model.add(c, true);
    train.add(c);
    c->add_option("--out", out, "Output directory")->required();
    c->add_option("--budget", budget, "Trials")->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--sampler", sampler, "tpe or random")->capture_default_str()->check(CLI::IsMember({"tpe", "random"}));
    c->add_flag("--resume", resume, "Continue the study in --out");
    c->callback([this, c] {
      const auto classes = data.resolved_classes();
      const FrontendConfig fe = data.frontend(common.seed);
      const FeatureKind kind = parse_features(data.features);
      const Dataset tr = load_split(data.data, "train", classes, fe, kind);
      const Dataset va = load_split(data.data, "validation", classes, fe, kind);
      const Normalizer norm = Normalizer::fit(tr.features);
      fs::create_directories(out);
      echo_config(c, out);
      model.model = "esn";
      StudyOptions so;
      so.budget = budget;
      so.sampler = parse_sampler(sampler);
      so.seed = common.seed;
      so.study_file = fs::path(out) / "study.jsonl";
      so.resume = resume;
      const StudyResult r = run_study(
          SearchSpace::esn(),
          [&](const TrialConfig& trial, std::uint64_t trial_seed) {
            // One reservoir topology per study; only the dynamics vary.
            ModuleConfig mc = model.config(tr.feature_dim(), common.seed);
            TrainConfig tc = train.config(trial_seed);
            apply_trial(trial, mc, tc);
            Model m(mc, classes, norm, trial_seed);
            const double v = fit(std::move(m), tr, va, tc).best.val_psds1;
            std::printf("trial  psds1 %.4f  rho %.3f  alpha %.3f  sigma %.4f  lr %.2e\n", v,
                        trial.at("spectral_radius"), trial.at("leak"), trial.at("input_scale"),
                        trial.at("learning_rate"));
            std::fflush(stdout);
            return v;
          },
          so);
      json best = {{"trials", r.history.size()}};
      if (r.best) best["best"] = r.best->to_json();
      write_json(best, fs::path(out) / "best.json");
      std::cout << best.dump(2) << '\n';
      if (!r.best) throw Error("every trial failed");
    });
  }
};

struct FewShot {
  Common common;
  std::string data, target = "eating", pool_split = "train", query_split = "test", out, init_from, features = "logmel";
  int pool_size = 8;
  int runs = 10;
  std::vector<int> ks{1, 2, 3, 4, 5};
  std::vector<std::string> models{"bigru", "biesn"};
  FewShotConfig cfg;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("fewshot", "Adapt single-class detectors from K support clips");
    common.add(c);
    c->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    c->add_option("--target", target, "Target class")->capture_default_str();
    c->add_option("--pool-split", pool_split)->capture_default_str();
    c->add_option("--pool-size", pool_size, "Support pool size")->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--query-split", query_split)->capture_default_str();
    c->add_option("--ks", ks)->delimiter(',')->capture_default_str();
    c->add_option("--runs", runs, "Seeds per K")->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--models", models)->delimiter(',')->capture_default_str();
    c->add_option("--features", features)->capture_default_str()->check(CLI::IsMember({"logmel", "embeddings"}));
    c->add_option("--gru-hidden", cfg.gru_hidden)->capture_default_str();
    c->add_option("--gru-layers", cfg.gru_layers)->capture_default_str();
    c->add_option("--reservoir", cfg.esn_size)->capture_default_str();
    c->add_option("--spectral-radius", cfg.esn.spectral_radius)->capture_default_str();
    c->add_option("--leak", cfg.esn.leak)->capture_default_str();
    c->add_option("--input-scale", cfg.esn.input_scale)->capture_default_str();
    c->add_option("--epochs", cfg.train.max_epochs)->capture_default_str();
    c->add_option("--lr", cfg.train.learning_rate)->capture_default_str();
    c->add_option("--init-from", init_from, "BiGRU checkpoint to adapt from")->check(CLI::ExistingFile);
    c->add_option("--out", out, "Output directory")->required();
    c->callback([this, c] {
      cfg.train.early_stop_patience = cfg.train.max_epochs;
      if (!init_from.empty()) cfg.init_from = init_from;
      const auto classes = dataset_classes(data);
      FrontendConfig fe;
      fe.seed = common.seed;
      const FeatureKind kind = parse_features(features);
      const Dataset pool_all = single_class(load_split(data, pool_split, classes, fe, kind), target);
      const Dataset query = single_class(load_split(data, query_split, classes, fe, kind), target);
      FewShotProtocol p;
      p.target_class = target;
      p.ks = ks;
      p.seeds.clear();
      for (int i = 0; i < runs; ++i) p.seeds.push_back(common.seed + static_cast<std::uint64_t>(i));
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < pool_all.size() && static_cast<int>(idx.size()) < pool_size; ++i)
        if (!pool_all.clips[i].events.empty()) idx.push_back(i);
      if (static_cast<int>(idx.size()) < pool_size)
        throw Error("split '" + pool_split + "' has only " + std::to_string(idx.size()) + " clips with '" + target + "'");
      const Dataset pool = pool_all.subset(idx);
      for (const auto& clip : pool.clips) p.support_pool.push_back(clip.clip_id);
      std::vector<FewShotModel> ms;
      for (const auto& m : models) ms.push_back(parse_fewshot_model(m));
      echo_config(c, out);
      const FewShotResult r = run_protocol(p, ms, pool, query, cfg);
      write_runs_tsv(r, fs::path(out) / "runs.tsv");
      write_summary_tsv(r, fs::path(out) / "summary.tsv");
      std::cout << "model\tK\tmean\tstd\n";
      for (const auto& s : r.summary) std::printf("%s\t%d\t%.4f\t%.4f\n", to_string(s.model).c_str(), s.k, s.mean, s.std);
    });
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sound event detection toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "JSON or TOML file with option values; nested objects name subcommands");
  app.config_formatter(std::make_shared<JsonOrTomlConfig>());

  MakeBank make_bank;
  Synth synth;
  Train train;
  Eval eval;
  Detect detect;
  Hpo hpo;
  FewShot fewshot;
  make_bank.add(app);
  synth.add(app);
  train.add(app);
  eval.add(app);
  detect.add(app);
  hpo.add(app);
  fewshot.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
