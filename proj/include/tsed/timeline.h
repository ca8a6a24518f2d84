// Events, clips, frame grids and the strong-label TSV interchange.

#ifndef TSED_TIMELINE_H_
#define TSED_TIMELINE_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace tsed {

/// Base error for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Event {
  std::string label;
  double onset = 0.0;
  double offset = 0.0;

  Event() = default;
  /// Throws Error unless 0 <= onset < offset and both are finite.
  Event(std::string label, double onset, double offset);

  double duration() const { return offset - onset; }
  bool operator==(const Event&) const = default;
};

/// Orders by (label, onset, offset); used to compare event multisets.
bool event_less(const Event& a, const Event& b);

struct ClipAnnotation {
  std::string clip_id;
  double duration = 10.0;
  std::vector<Event> events;

  ClipAnnotation() = default;
  ClipAnnotation(std::string clip_id, double duration, std::vector<Event> events);

  /// Throws if an event lies outside [0, duration].
  void validate() const;
};

struct FrameGrid {
  double frame_period = 0.040;
  int num_frames = 250;

  static FrameGrid for_duration(double duration, double frame_period = 0.040);
  double center(int t) const { return (t + 0.5) * frame_period; }
};

using ActivityMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Binary T x C activity for one clip.
struct FrameActivity {
  FrameGrid grid;
  std::vector<std::string> classes;
  ActivityMatrix activity;

  FrameActivity() = default;
  FrameActivity(FrameGrid grid, std::vector<std::string> classes);

  int num_frames() const { return grid.num_frames; }
  int num_classes() const { return static_cast<int>(classes.size()); }
};

/// Frame t is active for class c iff its center lies in [onset, offset) of a
/// class-c event.
FrameActivity rasterize(const ClipAnnotation& ann, const FrameGrid& grid,
                        const std::vector<std::string>& classes);

/// Each maximal run of active frames becomes one event. Clip id and duration
/// are taken from the arguments.
ClipAnnotation decode_events(const FrameActivity& act,
                             const std::string& clip_id = "",
                             double duration = -1.0);

/// Index of `label` in `classes`, or -1.
int class_index(const std::vector<std::string>& classes, const std::string& label);

// Strong-label TSV: header `filename\tonset\toffset\tevent_label`.
// Clips are returned in first-appearance order. When `durations` is given,
// every clip listed there is present in the result (possibly empty) and
// events are checked against the listed duration.
std::vector<ClipAnnotation> read_strong_tsv(
    const std::filesystem::path& path,
    const std::map<std::string, double>* durations = nullptr);
void write_strong_tsv(const std::vector<ClipAnnotation>& anns,
                      const std::filesystem::path& path);

// Duration manifest TSV: header `filename\tduration`.
std::map<std::string, double> read_duration_tsv(const std::filesystem::path& path);
void write_duration_tsv(const std::vector<ClipAnnotation>& anns,
                        const std::filesystem::path& path);

}  // namespace tsed

#endif  // TSED_TIMELINE_H_
