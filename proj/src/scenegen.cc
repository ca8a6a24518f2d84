#include "tsed/scenegen.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

namespace tsed {

namespace fs = std::filesystem;

int split_index(const std::string& split) {
  for (int i = 0; i < 3; ++i)
    if (kSplits[i] == split) return i;
  throw Error("unknown split '" + split + "' (expected train, validation or test)");
}

// -------------------------------------------------------------- source bank

namespace {

std::vector<std::string> list_wavs(const fs::path& dir, const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav")
      out.push_back(fs::relative(e.path(), root).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

// Shuffled 3:1:1 cut with every split non-empty when there are >= 3 files.
std::array<std::vector<std::string>, 3> cut_splits(std::vector<std::string> files, Rng& rng) {
  std::shuffle(files.begin(), files.end(), rng);
  const std::size_t n = files.size();
  std::size_t n_val = n / 5, n_test = n / 5;
  if (n >= 3) {
    n_val = std::max<std::size_t>(n_val, 1);
    n_test = std::max<std::size_t>(n_test, 1);
  }
  const std::size_t n_train = n - n_val - n_test;
  std::array<std::vector<std::string>, 3> out;
  out[0].assign(files.begin(), files.begin() + n_train);
  out[1].assign(files.begin() + n_train, files.begin() + n_train + n_val);
  out[2].assign(files.begin() + n_train + n_val, files.end());
  for (auto& s : out) std::sort(s.begin(), s.end());
  return out;
}

}  // namespace

SourceBank SourceBank::scan(const fs::path& root, std::uint64_t seed) {
  if (!fs::is_directory(root)) throw Error("source bank directory not found: " + root.string());
  SourceBank bank;
  bank.root = fs::absolute(root);
  std::map<std::string, std::vector<std::string>> fg;
  const fs::path fg_dir = root / "foreground";
  if (!fs::is_directory(fg_dir)) throw Error("source bank has no foreground directory: " + fg_dir.string());
  for (const auto& e : fs::directory_iterator(fg_dir))
    if (e.is_directory()) fg[e.path().filename().string()] = list_wavs(e.path(), root);
  const std::vector<std::string> bg = list_wavs(root / "background", root);
  if (bg.empty()) throw Error("source bank has no background wav files in " + (root / "background").string());

  const fs::path splits = root / "splits.tsv";
  if (fs::exists(splits)) {
    std::map<std::string, int> assigned;
    std::ifstream in(splits);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || (lineno == 1 && line.rfind("path\t", 0) == 0)) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw Error(splits.string() + ":" + std::to_string(lineno) + ": expected path<TAB>split");
      const std::string path = line.substr(0, tab);
      try {
        if (!assigned.emplace(path, split_index(line.substr(tab + 1))).second)
          throw Error("file listed twice");
      } catch (const Error& e) {
        throw Error(splits.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    auto place = [&](const std::string& f) {
      auto it = assigned.find(f);
      if (it == assigned.end()) throw Error(splits.string() + ": no split for " + f);
      return it->second;
    };
    for (const auto& [cls, files] : fg)
      for (const auto& f : files) bank.foreground[cls][place(f)].push_back(f);
    for (const auto& f : bg) bank.background[place(f)].push_back(f);
  } else {
    Rng rng(seed);
    for (const auto& [cls, files] : fg) bank.foreground[cls] = cut_splits(files, rng);
    bank.background = cut_splits(bg, rng);
  }
  bank.validate();
  return bank;
}

std::vector<std::string> SourceBank::classes() const {
  std::vector<std::string> out;
  for (const auto& [cls, files] : foreground) out.push_back(cls);
  return out;
}

void SourceBank::validate() const {
  std::map<std::string, int> seen;
  auto note = [&](const std::string& f, int split) {
    auto [it, inserted] = seen.emplace(f, split);
    if (!inserted) throw Error("source file " + f + " appears more than once in the bank");
  };
  for (const auto& [cls, splits] : foreground)
    for (int s = 0; s < 3; ++s)
      for (const auto& f : splits[s]) note(f, s);
  for (int s = 0; s < 3; ++s)
    for (const auto& f : background[s]) note(f, s);
}

nlohmann::json SourceBank::to_json() const {
  nlohmann::json j;
  j["root"] = root.string();
  for (const auto& [cls, splits] : foreground)
    for (int s = 0; s < 3; ++s) j["foreground"][cls][kSplits[s]] = splits[s];
  for (int s = 0; s < 3; ++s) j["background"][kSplits[s]] = background[s];
  return j;
}

// ------------------------------------------------------------------ config

void SynthConfig::validate() const {
  if (!(clip_duration > 0.0)) throw Error("clip duration must be positive");
  if (sample_rate < 1) throw Error("sample rate must be positive");
  if (min_events < 0 || max_events < min_events) throw Error("events_per_clip range is invalid");
  if (!(snr_max_db >= snr_min_db)) throw Error("snr range is invalid");
  if (!(pitch_max >= pitch_min)) throw Error("pitch shift range is invalid");
  if (classes.empty()) throw Error("no classes configured");
  for (int c : counts)
    if (c < 1) throw Error("split counts must be positive");
}

nlohmann::json SynthConfig::to_json() const {
  return {{"clip_duration", clip_duration},
          {"sample_rate", sample_rate},
          {"events_per_clip", {min_events, max_events}},
          {"snr_db", {snr_min_db, snr_max_db}},
          {"pitch_shift", {pitch_min, pitch_max}},
          {"classes", classes},
          {"counts", counts},
          {"ref_db", ref_db},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.clip_duration = j.at("clip_duration").get<double>();
  c.sample_rate = j.at("sample_rate").get<int>();
  c.min_events = j.at("events_per_clip")[0].get<int>();
  c.max_events = j.at("events_per_clip")[1].get<int>();
  c.snr_min_db = j.at("snr_db")[0].get<double>();
  c.snr_max_db = j.at("snr_db")[1].get<double>();
  c.pitch_min = j.at("pitch_shift")[0].get<double>();
  c.pitch_max = j.at("pitch_shift")[1].get<double>();
  c.classes = j.at("classes").get<std::vector<std::string>>();
  c.counts = j.at("counts").get<std::array<int, 3>>();
  c.ref_db = j.at("ref_db").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

nlohmann::json SynthSpec::to_json() const {
  nlohmann::json j = {{"clip_id", clip_id},
                      {"background", background},
                      {"background_offset", background_offset},
                      {"seed", seed},
                      {"placements", nlohmann::json::array()}};
  for (const auto& p : placements)
    j["placements"].push_back({{"label", p.label},
                               {"source", p.source},
                               {"source_start", p.source_start},
                               {"source_length", p.source_length},
                               {"onset", p.onset},
                               {"snr_db", p.snr_db},
                               {"pitch_shift", p.pitch_shift}});
  return j;
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.clip_id = j.at("clip_id").get<std::string>();
  s.background = j.at("background").get<std::string>();
  s.background_offset = j.at("background_offset").get<std::int64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& p : j.at("placements")) {
    Placement pl;
    pl.label = p.at("label").get<std::string>();
    pl.source = p.at("source").get<std::string>();
    pl.source_start = p.at("source_start").get<std::int64_t>();
    pl.source_length = p.at("source_length").get<std::int64_t>();
    pl.onset = p.at("onset").get<std::int64_t>();
    pl.snr_db = p.at("snr_db").get<double>();
    pl.pitch_shift = p.at("pitch_shift").get<double>();
    s.placements.push_back(pl);
  }
  return s;
}

// ------------------------------------------------------------ pitch shift

std::int64_t shifted_length(std::int64_t length, double semitones) {
  if (length <= 0) return 0;
  const double rate = std::pow(2.0, semitones / 12.0);
  return static_cast<std::int64_t>(std::floor(static_cast<double>(length - 1) / rate)) + 1;
}

std::vector<float> pitch_shift(const std::vector<float>& x, double semitones) {
  const auto n = static_cast<std::int64_t>(x.size());
  const std::int64_t m = shifted_length(n, semitones);
  const double rate = std::pow(2.0, semitones / 12.0);
  std::vector<float> y(static_cast<std::size_t>(m));
  for (std::int64_t j = 0; j < m; ++j) {
    const double pos = static_cast<double>(j) * rate;
    const auto i = static_cast<std::int64_t>(pos);
    const double frac = pos - static_cast<double>(i);
    const double a = x[static_cast<std::size_t>(i)];
    const double b = i + 1 < n ? x[static_cast<std::size_t>(i + 1)] : a;
    y[static_cast<std::size_t>(j)] = static_cast<float>(a + frac * (b - a));
  }
  return y;
}

// ------------------------------------------------------------------- plan

const Waveform& SourceCache::get(const std::string& rel) {
  auto it = cache_.find(rel);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(rel, load_wav(root_ / rel)).first->second;
}

std::vector<SynthSpec> plan(const SourceBank& bank, const SynthConfig& cfg, const std::string& split,
                            Rng& rng) {
  cfg.validate();
  const int s = split_index(split);
  for (const auto& c : cfg.classes) {
    auto it = bank.foreground.find(c);
    if (it == bank.foreground.end() || it->second[s].empty())
      throw Error("no foreground sources for class '" + c + "' in split '" + split + "'");
  }
  if (bank.background[s].empty()) throw Error("no background sources in split '" + split + "'");

  // Only lengths are needed here.
  std::map<std::string, std::int64_t> lengths;
  auto length_of = [&](const std::string& rel) {
    auto it = lengths.find(rel);
    if (it != lengths.end()) return it->second;
    const Waveform w = load_wav(bank.root / rel);
    if (w.sample_rate != cfg.sample_rate)
      throw Error("source " + rel + " is sampled at " + std::to_string(w.sample_rate) + " Hz, expected " +
                  std::to_string(cfg.sample_rate));
    if (w.samples.empty()) throw Error("source " + rel + " is empty");
    return lengths[rel] = static_cast<std::int64_t>(w.samples.size());
  };
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  auto uniform_int = [&](std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
  };
  auto uniform = [&](double lo, double hi) { return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng); };

  const auto clip_samples = static_cast<std::int64_t>(std::llround(cfg.clip_duration * cfg.sample_rate));
  std::vector<SynthSpec> specs;
  for (int k = 0; k < cfg.counts[s]; ++k) {
    SynthSpec spec;
    spec.seed = rng();
    std::ostringstream id;
    id << split << '_' << std::setw(5) << std::setfill('0') << k << ".wav";
    spec.clip_id = id.str();
    spec.background = bank.background[s][pick(bank.background[s].size())];
    spec.background_offset = uniform_int(0, std::max<std::int64_t>(0, length_of(spec.background) - clip_samples));
    const int n_events = static_cast<int>(uniform_int(cfg.min_events, cfg.max_events));
    for (int e = 0; e < n_events; ++e) {
      Placement p;
      p.label = cfg.classes[pick(cfg.classes.size())];
      const auto& files = bank.foreground.at(p.label)[s];
      p.source = files[pick(files.size())];
      p.pitch_shift = uniform(cfg.pitch_min, cfg.pitch_max);
      p.snr_db = uniform(cfg.snr_min_db, cfg.snr_max_db);
      const std::int64_t len = length_of(p.source);
      // Longest excerpt whose shifted version still fits in the clip.
      const double rate = std::pow(2.0, p.pitch_shift / 12.0);
      std::int64_t take = std::min<std::int64_t>(
          len, static_cast<std::int64_t>(std::floor(static_cast<double>(clip_samples - 1) * rate)) + 1);
      while (take > 1 && shifted_length(take, p.pitch_shift) > clip_samples) --take;
      p.source_length = take;
      p.source_start = uniform_int(0, len - take);
      p.onset = uniform_int(0, clip_samples - shifted_length(take, p.pitch_shift));
      spec.placements.push_back(p);
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

// ------------------------------------------------------------------ render

namespace {

double rms(const std::vector<double>& x, std::size_t a, std::size_t b) {
  if (b <= a) return 0.0;
  double s = 0.0;
  for (std::size_t i = a; i < b; ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(b - a));
}

}  // namespace

Rendered render(const SynthSpec& spec, const SynthConfig& cfg, SourceCache& sources) {
  const auto n = static_cast<std::size_t>(std::llround(cfg.clip_duration * cfg.sample_rate));
  const Waveform& bg = sources.get(spec.background);
  if (bg.samples.empty()) throw Error("background " + spec.background + " is empty");
  std::vector<double> mix(n);
  for (std::size_t i = 0; i < n; ++i)
    mix[i] = bg.samples[(static_cast<std::size_t>(spec.background_offset) + i) % bg.samples.size()];
  const double ref = std::pow(10.0, cfg.ref_db / 20.0);
  const double bg_rms = rms(mix, 0, n);
  if (bg_rms > 0.0)
    for (double& v : mix) v *= ref / bg_rms;
  const std::vector<double> background = mix;

  Rendered out;
  out.labels.clip_id = spec.clip_id;
  out.labels.duration = cfg.clip_duration;
  for (const auto& p : spec.placements) {
    const Waveform& src = sources.get(p.source);
    if (p.source_start < 0 || p.source_start + p.source_length > static_cast<std::int64_t>(src.samples.size()))
      throw Error("placement excerpt exceeds source " + p.source);
    const std::vector<float> excerpt(src.samples.begin() + p.source_start,
                                     src.samples.begin() + p.source_start + p.source_length);
    const std::vector<float> fg = pitch_shift(excerpt, p.pitch_shift);
    const auto a = static_cast<std::size_t>(p.onset);
    const std::size_t b = a + fg.size();
    if (b > n) throw Error("placement of " + p.source + " exceeds the clip in " + spec.clip_id);
    double level = rms(background, a, b);
    if (level <= 0.0) level = ref;
    double fg_level = 0.0;
    for (float v : fg) fg_level += static_cast<double>(v) * v;
    fg_level = std::sqrt(fg_level / static_cast<double>(std::max<std::size_t>(fg.size(), 1)));
    const double gain = fg_level > 0.0 ? level * std::pow(10.0, p.snr_db / 20.0) / fg_level : 0.0;
    for (std::size_t i = 0; i < fg.size(); ++i) mix[a + i] += gain * fg[i];
    out.labels.events.emplace_back(p.label, static_cast<double>(a) / cfg.sample_rate,
                                   static_cast<double>(b) / cfg.sample_rate);
  }
  double peak = 0.0;
  for (double v : mix) peak = std::max(peak, std::abs(v));
  const double scale = peak > 0.99 ? 0.99 / peak : 1.0;
  out.audio.sample_rate = cfg.sample_rate;
  out.audio.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.audio.samples[i] = static_cast<float>(mix[i] * scale);
  std::sort(out.labels.events.begin(), out.labels.events.end(),
            [](const Event& x, const Event& y) { return x.onset < y.onset; });
  return out;
}

// ---------------------------------------------------------------- dataset

std::vector<ClassStats> dataset_stats(const SourceBank& bank, const std::vector<ClipAnnotation>& labels,
                                      const std::vector<std::string>& classes) {
  std::vector<ClassStats> rows;
  ClassStats total;
  total.label = "Total";
  for (const auto& c : classes) {
    ClassStats r;
    r.label = c;
    auto it = bank.foreground.find(c);
    if (it != bank.foreground.end())
      for (const auto& files : it->second) r.source_files += static_cast<int>(files.size());
    for (const auto& clip : labels) {
      bool present = false;
      for (const auto& e : clip.events) {
        if (e.label != c) continue;
        present = true;
        ++r.events;
        r.minutes += e.duration() / 60.0;
      }
      r.clips += present;
    }
    total.source_files += r.source_files;
    total.events += r.events;
    total.minutes += r.minutes;
    rows.push_back(r);
  }
  total.clips = static_cast<int>(labels.size());
  rows.push_back(total);
  return rows;
}

namespace {

void prepare_output(const fs::path& out, bool overwrite) {
  if (fs::exists(out) && !fs::is_directory(out)) throw Error(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!overwrite) throw Error("output directory " + out.string() + " is not empty (use overwrite to replace it)");
    for (const auto& s : kSplits) fs::remove_all(out / s);
    fs::remove(out / "manifest.json");
    fs::remove(out / "stats.tsv");
  }
  fs::create_directories(out);
}

void write_stats(const std::vector<ClassStats>& stats, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "class\tsource_files\tsynthesized_clips\ttotal_events\ttotal_duration_min\n";
  out.setf(std::ios::fixed);
  out.precision(3);
  for (const auto& r : stats)
    out << r.label << '\t' << r.source_files << '\t' << r.clips << '\t' << r.events << '\t' << r.minutes << '\n';
}

std::vector<ClipAnnotation> render_split(const std::vector<SynthSpec>& specs, const SynthConfig& cfg,
                                         SourceCache& sources, const fs::path& dir) {
  fs::create_directories(dir / "audio");
  std::vector<ClipAnnotation> labels;
  for (const auto& spec : specs) {
    Rendered r = render(spec, cfg, sources);
    save_wav(r.audio, dir / "audio" / spec.clip_id, SampleFormat::kFloat32);
    labels.push_back(std::move(r.labels));
  }
  write_strong_tsv(labels, dir / "labels.tsv");
  write_duration_tsv(labels, dir / "durations.tsv");
  return labels;
}

}  // namespace

SynthResult synthesize_dataset(const SourceBank& bank, const SynthConfig& cfg, const fs::path& out,
                               bool overwrite) {
  cfg.validate();
  bank.validate();
  Rng rng(cfg.seed);
  std::array<std::vector<SynthSpec>, 3> specs;
  for (int s = 0; s < 3; ++s) specs[s] = plan(bank, cfg, kSplits[s], rng);
  prepare_output(out, overwrite);

  SynthResult res;
  res.manifest["version"] = 1;
  res.manifest["config"] = cfg.to_json();
  res.manifest["bank"] = bank.to_json();
  SourceCache sources(bank.root);
  std::vector<ClipAnnotation> all;
  for (int s = 0; s < 3; ++s) {
    auto& arr = res.manifest["splits"][kSplits[s]];
    arr = nlohmann::json::array();
    for (const auto& spec : specs[s]) arr.push_back(spec.to_json());
    auto labels = render_split(specs[s], cfg, sources, out / kSplits[s]);
    all.insert(all.end(), labels.begin(), labels.end());
  }
  check_split_hygiene(res.manifest);
  res.stats = dataset_stats(bank, all, cfg.classes);
  write_stats(res.stats, out / "stats.tsv");
  std::ofstream(out / "manifest.json") << res.manifest.dump(1) << '\n';
  return res;
}

void regenerate_from_manifest(const fs::path& manifest, const fs::path& out, bool overwrite) {
  std::ifstream in(manifest);
  if (!in) throw Error("cannot open manifest " + manifest.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(manifest.string() + ": " + e.what());
  }
  if (m.value("version", 0) != 1) throw Error(manifest.string() + ": unsupported manifest version");
  const SynthConfig cfg = SynthConfig::from_json(m.at("config"));
  check_split_hygiene(m);
  prepare_output(out, overwrite);
  SourceCache sources(m.at("bank").at("root").get<std::string>());
  for (const auto& split : kSplits) {
    std::vector<SynthSpec> specs;
    for (const auto& j : m.at("splits").at(split)) specs.push_back(SynthSpec::from_json(j));
    render_split(specs, cfg, sources, out / split);
  }
  std::ofstream(out / "manifest.json") << m.dump(1) << '\n';
}

void check_split_hygiene(const nlohmann::json& manifest) {
  std::map<std::string, std::set<int>> used;
  for (int s = 0; s < 3; ++s) {
    for (const auto& spec : manifest.at("splits").at(kSplits[s])) {
      used[spec.at("background").get<std::string>()].insert(s);
      for (const auto& p : spec.at("placements")) used[p.at("source").get<std::string>()].insert(s);
    }
  }
  for (const auto& [file, splits] : used)
    if (splits.size() > 1) throw Error("source file " + file + " is used by more than one split");
}

// ---------------------------------------------------------------- toy bank

namespace {

// RBJ band-pass biquad, constant peak gain.
std::vector<double> bandpass(const std::vector<double>& x, double f0, double q, int sr) {
  const double w0 = 2.0 * std::numbers::pi * f0 / sr;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  const double b0 = alpha / a0, b2 = -alpha / a0;
  const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
  std::vector<double> y(x.size());
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = b0 * x[i] + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x[i];
    y2 = y1;
    y1 = y[i];
  }
  return y;
}

Waveform to_wave(const std::vector<double>& x, int sr) {
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  Waveform w;
  w.sample_rate = sr;
  w.samples.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) w.samples[i] = static_cast<float>(peak > 0 ? 0.5 * x[i] / peak : 0.0);
  return w;
}

}  // namespace

void make_toy_bank(const fs::path& root, const std::vector<std::string>& classes, int files_per_class,
                   int background_files, std::uint64_t seed, int sr) {
  if (classes.empty() || files_per_class < 1 || background_files < 1)
    throw Error("toy bank needs classes, files and backgrounds");
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const double pi = std::numbers::pi;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const fs::path dir = root / "foreground" / classes[k];
    fs::create_directories(dir);
    // Octave-spaced cores stay apart under +-3 semitone shifts.
    const double core_hz = 250.0 * std::pow(2.0, static_cast<double>(k));
    for (int f = 0; f < files_per_class; ++f) {
      const double pre = 0.25 + 0.2 * u(rng), core = 0.3 + 0.15 * u(rng), post = 0.5 + 0.3 * u(rng);
      const auto n_pre = static_cast<std::size_t>(pre * sr), n_core = static_cast<std::size_t>(core * sr),
                 n_post = static_cast<std::size_t>(post * sr);
      const std::size_t n = n_pre + n_core + n_post;
      std::vector<double> noise(n);
      for (auto& v : noise) v = g(rng);
      noise = bandpass(noise, 3000.0, 1.5, sr);
      double nr = 0.0;
      for (double v : noise) nr += v * v;
      nr = std::sqrt(nr / static_cast<double>(n));
      const double hz = core_hz * (1.0 + 0.04 * (u(rng) - 0.5));
      const double phase = 2.0 * pi * u(rng);
      std::vector<double> x(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double fade = std::min(1.0, std::min(t, static_cast<double>(n - i) / sr) / 0.01);
        if (i >= n_pre && i < n_pre + n_core) {
          double tone = 0.0;
          for (int h = 1; h <= 3; ++h) tone += std::sin(2.0 * pi * h * hz * t + h * phase) / h;
          x[i] = fade * tone;
        } else {
          x[i] = fade * noise[i] / nr * 0.7;
        }
      }
      save_wav(to_wave(x, sr), dir / (classes[k] + "_" + std::to_string(f) + ".wav"), SampleFormat::kFloat32);
    }
  }
  const fs::path bg_dir = root / "background";
  fs::create_directories(bg_dir);
  for (int b = 0; b < background_files; ++b) {
    const auto n = static_cast<std::size_t>(12.0 * sr);
    std::vector<double> x(n);
    double brown = 0.0;
    const double hum = 60.0 + 60.0 * u(rng);
    for (std::size_t i = 0; i < n; ++i) {
      brown = 0.995 * brown + 0.1 * g(rng);
      x[i] = brown + 0.3 * g(rng) + 0.5 * std::sin(2.0 * pi * hum * static_cast<double>(i) / sr);
    }
    save_wav(to_wave(x, sr), bg_dir / ("background_" + std::to_string(b) + ".wav"), SampleFormat::kFloat32);
  }
}

}  // namespace tsed
