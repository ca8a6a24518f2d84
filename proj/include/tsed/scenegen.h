// Soundscape synthesis: foreground events mixed onto background recordings
// with strong labels taken from the mixing metadata.

#ifndef TSED_SCENEGEN_H_
#define TSED_SCENEGEN_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsed/audio.h"
#include "tsed/temporal.h"
#include "tsed/timeline.h"

namespace tsed {

inline const std::array<std::string, 3> kSplits{"train", "validation", "test"};

/// Index of a split name in kSplits; throws for anything else.
int split_index(const std::string& split);

/// Isolated sources with a split assigned to every file. Paths are relative
/// to `root`.
struct SourceBank {
  std::filesystem::path root;
  /// class -> split -> files
  std::map<std::string, std::array<std::vector<std::string>, 3>> foreground;
  std::array<std::vector<std::string>, 3> background;

  /// Scans `root/foreground/<class>/*.wav` and `root/background/*.wav`.
  /// Splits come from `root/splits.tsv` (`path\tsplit`) when present;
  /// otherwise every class and the backgrounds are shuffled with `seed`
  /// and cut 3:1:1, keeping at least one file per split where possible.
  static SourceBank scan(const std::filesystem::path& root, std::uint64_t seed = 0);
  std::vector<std::string> classes() const;
  /// Every file must sit in exactly one split.
  void validate() const;
  nlohmann::json to_json() const;
};

struct SynthConfig {
  double clip_duration = 10.0;
  int sample_rate = 16000;
  int min_events = 1;
  int max_events = 4;
  double snr_min_db = 6.0;
  double snr_max_db = 30.0;
  double pitch_min = -3.0;
  double pitch_max = 3.0;
  std::vector<std::string> classes;
  std::array<int, 3> counts{6000, 2000, 2000};
  double ref_db = -50.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct Placement {
  std::string label;
  std::string source;
  /// Excerpt of the source, in samples.
  std::int64_t source_start = 0;
  std::int64_t source_length = 0;
  /// Onset in the clip, in samples.
  std::int64_t onset = 0;
  double snr_db = 0.0;
  double pitch_shift = 0.0;
};

struct SynthSpec {
  std::string clip_id;
  std::string background;
  std::int64_t background_offset = 0;
  std::vector<Placement> placements;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
};

/// Samples after pitch shifting by resampling: playback rate 2^(semitones/12).
std::int64_t shifted_length(std::int64_t length, double semitones);
std::vector<float> pitch_shift(const std::vector<float>& x, double semitones);

/// Specs for one split, drawn sequentially from `rng`.
std::vector<SynthSpec> plan(const SourceBank& bank, const SynthConfig& cfg,
                            const std::string& split, Rng& rng);

struct Rendered {
  Waveform audio;
  ClipAnnotation labels;
};

/// Decodes sources on demand and keeps them for reuse.
class SourceCache {
 public:
  explicit SourceCache(std::filesystem::path root) : root_(std::move(root)) {}
  const Waveform& get(const std::string& rel);

 private:
  std::filesystem::path root_;
  std::map<std::string, Waveform> cache_;
};

Rendered render(const SynthSpec& spec, const SynthConfig& cfg, SourceCache& sources);

/// Per-class source and event statistics plus a totals row.
struct ClassStats {
  std::string label;
  int source_files = 0;
  int clips = 0;
  int events = 0;
  double minutes = 0.0;
};
std::vector<ClassStats> dataset_stats(const SourceBank& bank,
                                      const std::vector<ClipAnnotation>& labels,
                                      const std::vector<std::string>& classes);

struct SynthResult {
  nlohmann::json manifest;
  std::vector<ClassStats> stats;
};

/// Writes `<out>/<split>/audio/*.wav`, `<out>/<split>/labels.tsv`,
/// `<out>/<split>/durations.tsv`, `<out>/manifest.json` and `<out>/stats.tsv`.
/// Refuses a non-empty `out` unless `overwrite` is set.
SynthResult synthesize_dataset(const SourceBank& bank, const SynthConfig& cfg,
                               const std::filesystem::path& out, bool overwrite = false);

/// Re-renders every clip listed in a manifest into `out`.
void regenerate_from_manifest(const std::filesystem::path& manifest,
                              const std::filesystem::path& out, bool overwrite = false);

/// Throws unless no source file is shared between splits in the manifest.
void check_split_hygiene(const nlohmann::json& manifest);

/// Procedural demo sources. Every class has the same onset and release
/// texture (band noise) around a class-specific tonal core, so the class is
/// only identifiable from the middle of each event.
void make_toy_bank(const std::filesystem::path& root, const std::vector<std::string>& classes,
                   int files_per_class, int background_files, std::uint64_t seed,
                   int sample_rate = 16000);

}  // namespace tsed

#endif  // TSED_SCENEGEN_H_
