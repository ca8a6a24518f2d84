#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "tsed/scenegen.h"

using namespace tsed;
namespace fs = std::filesystem;

namespace {

const fs::path& toy_bank() {
  static const fs::path root = [] {
    const fs::path dir = fs::temp_directory_path() / "tsed_test_scenegen_bank";
    fs::remove_all(dir);
    make_toy_bank(dir, {"c0", "c1", "c2", "c3", "c4", "c5", "c6"}, 5, 5, 11);
    return dir;
  }();
  return root;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tsed_test_scenegen_" + name);
  fs::remove_all(dir);
  return dir;
}

double rms(const std::vector<double>& x, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t i = a; i < b; ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(b - a));
}

std::vector<double> to_double(const Waveform& w) { return {w.samples.begin(), w.samples.end()}; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthConfig small_config(std::vector<std::string> classes) {
  SynthConfig cfg;
  cfg.classes = std::move(classes);
  cfg.counts = {6, 2, 2};
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("bank scan assigns every file to exactly one split") {
  const SourceBank bank = SourceBank::scan(toy_bank(), 3);
  CHECK(bank.classes().size() == 7);
  for (const auto& [cls, splits] : bank.foreground) {
    CHECK(splits[0].size() == 3);
    CHECK(splits[1].size() == 1);
    CHECK(splits[2].size() == 1);
  }
  CHECK(bank.background[0].size() == 3);
  CHECK_NOTHROW(bank.validate());
  CHECK(SourceBank::scan(toy_bank(), 3).to_json() == bank.to_json());
}

TEST_CASE("bank scan honours an explicit split file") {
  const fs::path dir = fresh_dir("splitfile");
  make_toy_bank(dir, {"a"}, 3, 3, 5);
  std::ofstream out(dir / "splits.tsv");
  out << "path\tsplit\n";
  const char* s[] = {"train", "validation", "test"};
  for (int i = 0; i < 3; ++i) out << "foreground/a/a_" << i << ".wav\t" << s[i] << "\n";
  for (int i = 0; i < 3; ++i) out << "background/background_" << i << ".wav\t" << s[i] << "\n";
  out.close();
  const SourceBank bank = SourceBank::scan(dir);
  CHECK(bank.foreground.at("a")[1] == std::vector<std::string>{"foreground/a/a_1.wav"});
  CHECK(bank.background[2] == std::vector<std::string>{"background/background_2.wav"});
}

TEST_CASE("plan with a degenerate event range places exactly one event of the class") {
  const SourceBank bank = SourceBank::scan(toy_bank(), 3);
  SynthConfig cfg = small_config({"c2"});
  cfg.min_events = cfg.max_events = 1;
  Rng rng(1);
  const auto specs = plan(bank, cfg, "train", rng);
  REQUIRE(specs.size() == 6);
  const auto clip = static_cast<std::int64_t>(cfg.clip_duration * cfg.sample_rate);
  for (const auto& s : specs) {
    REQUIRE(s.placements.size() == 1);
    const auto& p = s.placements[0];
    CHECK(p.label == "c2");
    CHECK(p.onset + shifted_length(p.source_length, p.pitch_shift) <= clip);
    CHECK(p.snr_db >= 6.0);
    CHECK(p.snr_db <= 30.0);
    CHECK(std::abs(p.pitch_shift) <= 3.0);
  }
}

TEST_CASE("plan is deterministic in the seed") {
  const SourceBank bank = SourceBank::scan(toy_bank(), 3);
  const SynthConfig cfg = small_config({"c0", "c1", "c2"});
  Rng a(5), b(5), c(6);
  const auto sa = plan(bank, cfg, "validation", a);
  const auto sb = plan(bank, cfg, "validation", b);
  const auto sc = plan(bank, cfg, "validation", c);
  nlohmann::json ja, jb, jc;
  for (const auto& s : sa) ja.push_back(s.to_json());
  for (const auto& s : sb) jb.push_back(s.to_json());
  for (const auto& s : sc) jc.push_back(s.to_json());
  CHECK(ja == jb);
  CHECK(ja != jc);
  CHECK(SynthSpec::from_json(ja[0]).to_json() == ja[0]);
}

TEST_CASE("plan samples classes uniformly with replacement") {
  const SourceBank bank = SourceBank::scan(toy_bank(), 3);
  SynthConfig cfg = small_config(bank.classes());
  cfg.counts = {6000, 1, 1};
  Rng rng(2024);
  const auto specs = plan(bank, cfg, "train", rng);
  const double k = 7.0;
  // P(class present) for an event count uniform on 1..4.
  double p = 0.0;
  for (int n = 1; n <= 4; ++n) p += (1.0 - std::pow((k - 1.0) / k, n)) / 4.0;
  const double n = 6000.0, mean = n * p, sd = std::sqrt(n * p * (1.0 - p));
  std::map<std::string, int> clips;
  for (const auto& s : specs) {
    std::set<std::string> present;
    for (const auto& pl : s.placements) present.insert(pl.label);
    for (const auto& c : present) ++clips[c];
  }
  for (const auto& c : cfg.classes) CHECK(std::abs(clips[c] - mean) <= 3.0 * sd);
}

TEST_CASE("plan names the class and split with no sources") {
  const fs::path dir = fresh_dir("empty_class");
  make_toy_bank(dir, {"a"}, 3, 3, 5);
  SourceBank bank = SourceBank::scan(dir);
  bank.foreground["b"];
  SynthConfig cfg = small_config({"a", "b"});
  Rng rng(0);
  try {
    plan(bank, cfg, "test", rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("'b'") != std::string::npos);
    CHECK(msg.find("'test'") != std::string::npos);
  }
}

TEST_CASE("render without placements returns the scaled background") {
  const SourceBank bank = SourceBank::scan(toy_bank(), 3);
  SynthConfig cfg = small_config({"c0"});
  SourceCache cache(bank.root);
  SynthSpec spec;
  spec.clip_id = "x.wav";
  spec.background = bank.background[0][0];
  spec.background_offset = 1234;
  const Rendered r = render(spec, cfg, cache);
  CHECK(r.labels.events.empty());
  const auto y = to_double(r.audio);
  REQUIRE(y.size() == 160000);
  CHECK(20.0 * std::log10(rms(y, 0, y.size())) == doctest::Approx(-50.0).epsilon(1e-4));
  // Proportional to the source excerpt.
  const Waveform& bg = cache.get(spec.background);
  const double ratio = y[500] / bg.samples[1234 + 500];
  for (std::size_t i = 0; i < y.size(); i += 997)
    CHECK(y[i] == doctest::Approx(ratio * bg.samples[(1234 + i) % bg.samples.size()]).epsilon(1e-5));
}

TEST_CASE("render at 0 dB matches the background level over the event") {
  const SourceBank bank = SourceBank::scan(toy_bank(), 3);
  SynthConfig cfg = small_config({"c0"});
  SourceCache cache(bank.root);
  SynthSpec spec;
  spec.clip_id = "x.wav";
  spec.background = bank.background[0][1];
  const Rendered bg = render(spec, cfg, cache);
  Placement p;
  p.label = "c0";
  p.source = bank.foreground.at("c0")[0][0];
  p.source_length = static_cast<std::int64_t>(cache.get(p.source).samples.size());
  p.onset = 30000;
  p.snr_db = 0.0;
  spec.placements.push_back(p);
  const Rendered mix = render(spec, cfg, cache);
  const auto a = to_double(bg.audio), b = to_double(mix.audio);
  std::vector<double> fg(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) fg[i] = b[i] - a[i];
  const auto lo = static_cast<std::size_t>(p.onset), hi = lo + static_cast<std::size_t>(p.source_length);
  const double snr = 20.0 * std::log10(rms(fg, lo, hi) / rms(a, lo, hi));
  CHECK(std::abs(snr) <= 0.5);
  REQUIRE(mix.labels.events.size() == 1);
  CHECK(mix.labels.events[0].onset == doctest::Approx(30000.0 / 16000.0));
  CHECK(mix.labels.events[0].offset == doctest::Approx(static_cast<double>(hi) / 16000.0));
}

TEST_CASE("pitch shift by an octave halves the duration") {
  std::vector<float> x(16000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(std::sin(0.01 * static_cast<double>(i)));
  const auto y = pitch_shift(x, 12.0);
  const double hop = 0.040 * 16000;
  CHECK(std::abs(static_cast<double>(y.size()) - 8000.0) <= hop);
  CHECK(y[100] == doctest::Approx(x[200]));
  CHECK(shifted_length(16000, 0.0) == 16000);
  CHECK(pitch_shift(x, 0.0) == x);
  CHECK(shifted_length(16000, -12.0) == 31999);
}

TEST_CASE("labeled intervals carry more energy than the background") {
  const SourceBank bank = SourceBank::scan(toy_bank(), 3);
  const SynthConfig cfg = small_config({"c0", "c1"});
  SourceCache cache(bank.root);
  Rng rng(9);
  for (const auto& spec : plan(bank, cfg, "train", rng)) {
    SynthSpec quiet = spec;
    quiet.placements.clear();
    const auto bg = to_double(render(quiet, cfg, cache).audio);
    const Rendered r = render(spec, cfg, cache);
    const auto y = to_double(r.audio);
    for (const auto& e : r.labels.events) {
      const auto lo = static_cast<std::size_t>(std::llround(e.onset * 16000));
      const auto hi = static_cast<std::size_t>(std::llround(e.offset * 16000));
      CHECK(20.0 * std::log10(rms(y, lo, hi) / rms(bg, lo, hi)) >= 1.0);
    }
  }
}

TEST_CASE("dataset synthesis writes splits, stats and a reproducible manifest") {
  const SourceBank bank = SourceBank::scan(toy_bank(), 3);
  const SynthConfig cfg = small_config({"c3"});
  const fs::path out = fresh_dir("dataset");
  const SynthResult res = synthesize_dataset(bank, cfg, out);
  const auto& m = res.manifest;
  CHECK(m["version"] == 1);
  CHECK(m["splits"]["train"].size() == 6);
  CHECK(m["splits"]["validation"].size() == 2);
  CHECK(m["splits"]["test"].size() == 2);
  for (const auto& s : kSplits) {
    CHECK(fs::exists(out / s / "labels.tsv"));
    CHECK(fs::exists(out / s / "durations.tsv"));
  }
  CHECK(fs::exists(out / "train" / "audio" / "train_00005.wav"));
  CHECK_NOTHROW(check_split_hygiene(m));

  std::ifstream stats(out / "stats.tsv");
  std::string header;
  std::getline(stats, header);
  CHECK(header == "class\tsource_files\tsynthesized_clips\ttotal_events\ttotal_duration_min");
  std::vector<std::string> rows;
  for (std::string line; std::getline(stats, line);) rows.push_back(line);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].rfind("c3\t5\t10\t", 0) == 0);
  CHECK(rows[1].rfind("Total\t5\t10\t", 0) == 0);
  int events = 0;
  for (const auto& s : kSplits)
    for (const auto& spec : m["splits"][s]) events += static_cast<int>(spec["placements"].size());
  CHECK(res.stats[0].events == events);

  SUBCASE("regeneration is bit-identical") {
    const fs::path again = fresh_dir("regen");
    regenerate_from_manifest(out / "manifest.json", again);
    for (const auto& s : kSplits)
      for (const auto& e : fs::directory_iterator(out / s / "audio"))
        CHECK(read_file(e.path()) == read_file(again / s / "audio" / e.path().filename()));
    CHECK(read_file(out / "train" / "labels.tsv") == read_file(again / "train" / "labels.tsv"));
  }
  SUBCASE("existing output is refused without overwrite") {
    CHECK_THROWS_AS(synthesize_dataset(bank, cfg, out), Error);
    CHECK_NOTHROW(synthesize_dataset(bank, cfg, out, true));
  }
  SUBCASE("shared sources across splits are reported") {
    nlohmann::json bad = m;
    bad["splits"]["test"][0]["background"] = m["splits"]["train"][0]["background"];
    CHECK_THROWS_AS(check_split_hygiene(bad), Error);
  }
}

TEST_CASE("config validation and roundtrip") {
  SynthConfig cfg = small_config({"a"});
  CHECK(SynthConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  cfg.counts[1] = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_config({});
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_config({"a"});
  cfg.snr_min_db = 40;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK_THROWS_AS(split_index("dev"), Error);
}
