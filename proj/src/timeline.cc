#include "tsed/timeline.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>
#include <unordered_map>

namespace tsed {

Event::Event(std::string label_in, double onset_in, double offset_in)
    : label(std::move(label_in)), onset(onset_in), offset(offset_in) {
  if (!std::isfinite(onset) || !std::isfinite(offset))
    throw Error("event '" + label + "': non-finite boundary");
  if (onset < 0.0)
    throw Error("event '" + label + "': negative onset");
  if (!(offset > onset))
    throw Error("event '" + label + "': offset must exceed onset");
}

bool event_less(const Event& a, const Event& b) {
  return std::tie(a.label, a.onset, a.offset) < std::tie(b.label, b.onset, b.offset);
}

ClipAnnotation::ClipAnnotation(std::string id, double dur, std::vector<Event> evs)
    : clip_id(std::move(id)), duration(dur), events(std::move(evs)) {
  validate();
}

void ClipAnnotation::validate() const {
  if (!(duration > 0.0) || !std::isfinite(duration))
    throw Error("clip '" + clip_id + "': duration must be positive");
  for (const Event& e : events) {
    if (e.onset < 0.0 || !(e.offset > e.onset) || e.offset > duration + 1e-9) {
      std::ostringstream msg;
      msg << "clip '" << clip_id << "': event '" << e.label << "' [" << e.onset
          << ", " << e.offset << ") outside [0, " << duration << "]";
      throw Error(msg.str());
    }
  }
}

FrameGrid FrameGrid::for_duration(double duration, double frame_period) {
  if (!(frame_period > 0.0)) throw Error("frame period must be positive");
  FrameGrid grid;
  grid.frame_period = frame_period;
  // Tolerance absorbs representation error in e.g. 10 / 0.04.
  grid.num_frames = static_cast<int>(std::ceil(duration / frame_period - 1e-9));
  return grid;
}

FrameActivity::FrameActivity(FrameGrid g, std::vector<std::string> cls)
    : grid(g), classes(std::move(cls)),
      activity(ActivityMatrix::Zero(g.num_frames, static_cast<Eigen::Index>(classes.size()))) {}

int class_index(const std::vector<std::string>& classes, const std::string& label) {
  auto it = std::find(classes.begin(), classes.end(), label);
  return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
}

FrameActivity rasterize(const ClipAnnotation& ann, const FrameGrid& grid,
                        const std::vector<std::string>& classes) {
  FrameActivity act(grid, classes);
  for (const Event& e : ann.events) {
    const int c = class_index(classes, e.label);
    if (c < 0) throw Error("rasterize: unknown label '" + e.label + "' in clip '" + ann.clip_id + "'");
    // First frame whose center is >= onset, then walk while center < offset.
    int t = std::max(0, static_cast<int>(std::floor(e.onset / grid.frame_period - 0.5)));
    for (; t < grid.num_frames; ++t) {
      const double center = grid.center(t);
      if (center >= e.offset) break;
      if (center >= e.onset) act.activity(t, c) = 1;
    }
  }
  return act;
}

ClipAnnotation decode_events(const FrameActivity& act, const std::string& clip_id,
                             double duration) {
  ClipAnnotation ann;
  ann.clip_id = clip_id;
  ann.duration = duration > 0.0 ? duration : act.grid.num_frames * act.grid.frame_period;
  const double p = act.grid.frame_period;
  const int frames = static_cast<int>(act.activity.rows());
  for (int c = 0; c < act.num_classes(); ++c) {
    int t = 0;
    while (t < frames) {
      if (!act.activity(t, c)) {
        ++t;
        continue;
      }
      const int start = t;
      while (t < frames && act.activity(t, c)) ++t;
      const double offset = std::min(t * p, ann.duration);
      ann.events.emplace_back(act.classes[c], start * p, offset);
    }
  }
  std::sort(ann.events.begin(), ann.events.end(), [](const Event& a, const Event& b) {
    return std::tie(a.onset, a.label, a.offset) < std::tie(b.onset, b.label, b.offset);
  });
  return ann;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

double parse_double(const std::string& s, const std::filesystem::path& path, int line_no) {
  double v = 0.0;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw Error(path.string() + ":" + std::to_string(line_no) + ": bad number '" + s + "'");
  }
  return v;
}

// Shortest round-trip representation, padded to at least 3 decimals.
std::string format_time(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  std::string s(buf, ptr);
  const auto dot = s.find('.');
  if (dot == std::string::npos) {
    s += ".000";
  } else {
    const std::size_t decimals = s.size() - dot - 1;
    if (decimals < 3) s.append(3 - decimals, '0');
  }
  return s;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace

std::vector<ClipAnnotation> read_strong_tsv(const std::filesystem::path& path,
                                            const std::map<std::string, double>* durations) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open label file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(path.string() + ": missing header row");
  const auto header = split_tabs(strip_cr(line));
  if (header != std::vector<std::string>{"filename", "onset", "offset", "event_label"})
    throw Error(path.string() + ":1: expected header filename\\tonset\\toffset\\tevent_label");

  std::vector<ClipAnnotation> clips;
  std::unordered_map<std::string, std::size_t> index;
  auto clip_for = [&](const std::string& id) -> ClipAnnotation& {
    auto it = index.find(id);
    if (it != index.end()) return clips[it->second];
    ClipAnnotation ann;
    ann.clip_id = id;
    if (durations) {
      auto d = durations->find(id);
      if (d == durations->end())
        throw Error(path.string() + ": clip '" + id + "' missing from duration manifest");
      ann.duration = d->second;
    }
    index.emplace(id, clips.size());
    clips.push_back(std::move(ann));
    return clips.back();
  };

  if (durations) {
    for (const auto& [id, dur] : *durations) clip_for(id);
  }

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    // A row with only a filename marks a clip without events.
    if (fields.size() == 1 || (fields.size() == 4 && fields[1].empty() && fields[2].empty() &&
                               fields[3].empty())) {
      clip_for(fields[0]);
      continue;
    }
    if (fields.size() != 4 || fields[0].empty() || fields[3].empty()) {
      throw Error(path.string() + ":" + std::to_string(line_no) +
                  ": expected 4 tab-separated fields");
    }
    const double onset = parse_double(fields[1], path, line_no);
    const double offset = parse_double(fields[2], path, line_no);
    if (!(offset > onset) || onset < 0.0) {
      throw Error(path.string() + ":" + std::to_string(line_no) +
                  ": offset must exceed onset and onset must be >= 0");
    }
    ClipAnnotation& clip = clip_for(fields[0]);
    clip.events.emplace_back(fields[3], onset, offset);
  }
  for (const auto& clip : clips) clip.validate();
  return clips;
}

void write_strong_tsv(const std::vector<ClipAnnotation>& anns,
                      const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write label file " + path.string());
  out << "filename\tonset\toffset\tevent_label\n";
  for (const auto& ann : anns) {
    for (const Event& e : ann.events) {
      out << ann.clip_id << '\t' << format_time(e.onset) << '\t' << format_time(e.offset)
          << '\t' << e.label << '\n';
    }
  }
  if (!out) throw Error("write failed for " + path.string());
}

std::map<std::string, double> read_duration_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open duration file " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      split_tabs(strip_cr(line)) != std::vector<std::string>{"filename", "duration"}) {
    throw Error(path.string() + ":1: expected header filename\\tduration");
  }
  std::map<std::string, double> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 2)
      throw Error(path.string() + ":" + std::to_string(line_no) + ": expected 2 fields");
    const double d = parse_double(fields[1], path, line_no);
    if (!(d > 0.0))
      throw Error(path.string() + ":" + std::to_string(line_no) + ": duration must be positive");
    out[fields[0]] = d;
  }
  return out;
}

void write_duration_tsv(const std::vector<ClipAnnotation>& anns,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write duration file " + path.string());
  out << "filename\tduration\n";
  for (const auto& ann : anns) out << ann.clip_id << '\t' << format_time(ann.duration) << '\n';
}

}  // namespace tsed
