#include "tsed/audio.h"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <random>

#include <boost/crc.hpp>
#include <fftw3.h>

namespace tsed {
namespace {

template <typename T>
void put_le(std::ostream& out, T v) {
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(const unsigned char* p) {
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

std::vector<unsigned char> read_all(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(std::string("cannot open ") + what + " " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

// FFTW planning is not thread-safe; execution on distinct buffers is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

Waveform load_wav(const std::filesystem::path& path) {
  const auto data = read_all(path, "wav file");
  const std::string where = path.string();
  if (data.size() < 12 || std::memcmp(data.data(), "RIFF", 4) != 0 ||
      std::memcmp(data.data() + 8, "WAVE", 4) != 0) {
    throw Error(where + ": not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* payload = nullptr;
  std::size_t payload_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= data.size()) {
    const unsigned char* chunk = data.data() + pos;
    const std::uint32_t size = get_le<std::uint32_t>(chunk + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = std::min<std::size_t>(size, data.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) throw Error(where + ": truncated fmt chunk");
      format = get_le<std::uint16_t>(chunk + 8);
      channels = get_le<std::uint16_t>(chunk + 10);
      rate = get_le<std::uint32_t>(chunk + 12);
      bits = get_le<std::uint16_t>(chunk + 22);
      if (format == kFormatExtensible) {
        if (avail < 26) throw Error(where + ": truncated extensible fmt chunk");
        format = get_le<std::uint16_t>(chunk + 32);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      payload = chunk + 8;
      payload_size = avail;
    }
    pos = body + size + (size & 1u);
  }
  if (channels == 0 || rate == 0) throw Error(where + ": missing or invalid fmt chunk");
  if (!payload) throw Error(where + ": missing data chunk");
  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw Error(where + ": unsupported sample format (format tag " + std::to_string(format) +
                ", " + std::to_string(bits) + " bits); need 16-bit PCM or 32-bit float");
  }
  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frames = payload_size / (bytes_per_sample * channels);
  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const unsigned char* p = payload + (i * channels + ch) * bytes_per_sample;
      acc += pcm16 ? get_le<std::int16_t>(p) / 32768.0 : static_cast<double>(get_le<float>(p));
    }
    const float v = channels == 1 ? static_cast<float>(acc) : static_cast<float>(acc / channels);
    if (!std::isfinite(v)) throw Error(where + ": non-finite sample at index " + std::to_string(i));
    w.samples[i] = v;
  }
  return w;
}

void save_wav(const Waveform& w, const std::filesystem::path& path, SampleFormat format) {
  if (w.sample_rate <= 0) throw Error("save_wav: sample rate must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write wav file " + path.string());
  const bool f32 = format == SampleFormat::kFloat32;
  const std::uint16_t bits = f32 ? 32 : 16;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * bits / 8);
  out.write("RIFF", 4);
  put_le<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  put_le<std::uint32_t>(out, 16);
  put_le<std::uint16_t>(out, f32 ? kFormatFloat : kFormatPcm);
  put_le<std::uint16_t>(out, 1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate) * bits / 8);
  put_le<std::uint16_t>(out, bits / 8);
  put_le<std::uint16_t>(out, bits);
  out.write("data", 4);
  put_le<std::uint32_t>(out, data_bytes);
  for (float s : w.samples) {
    if (f32) {
      put_le<float>(out, s);
    } else {
      const double scaled = std::round(std::clamp(static_cast<double>(s), -1.0, 1.0) * 32768.0);
      put_le<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0)));
    }
  }
  if (!out) throw Error("write failed for " + path.string());
}

std::string to_string(FeatureSource s) {
  switch (s) {
    case FeatureSource::kLogMel: return "logmel";
    case FeatureSource::kLogMelProjected: return "logmel+randproj";
    case FeatureSource::kImported: return "imported";
  }
  return "unknown";
}

void FeatureSequence::validate() const {
  if (frames.rows() < 1) throw Error("feature sequence has no frames");
  if (frames.cols() < 1) throw Error("feature sequence has zero dimension");
  if (!frames.allFinite()) throw Error("feature sequence contains non-finite values");
}

FrontendConfig FrontendConfig::for_rate(int sample_rate, double frame_period) {
  FrontendConfig cfg;
  cfg.sample_rate = sample_rate;
  cfg.hop = static_cast<int>(std::lround(sample_rate * frame_period));
  return cfg;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Eigen::MatrixXd mel_filterbank(int n_mels, int n_fft, int sample_rate) {
  const int bins = n_fft / 2 + 1;
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i) edges[i] = mel_to_hz(top * i / (n_mels + 1));
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      if (f > lo && f < hi) fb(m, k) = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
    }
  }
  return fb;
}

FeatureSequence logmel(const Waveform& w, const FrontendConfig& cfg,
                       std::optional<int> num_frames) {
  if (cfg.n_fft < 2 || cfg.hop < 1 || cfg.n_mels < 1) throw Error("logmel: invalid frontend config");
  if (w.sample_rate != cfg.sample_rate) {
    throw Error("logmel: waveform rate " + std::to_string(w.sample_rate) +
                " Hz differs from frontend rate " + std::to_string(cfg.sample_rate) + " Hz");
  }
  const auto len = static_cast<long>(w.samples.size());
  if (len < cfg.n_fft) {
    throw Error("logmel: input has " + std::to_string(len) + " samples, need at least n_fft=" +
                std::to_string(cfg.n_fft));
  }
  const int frames = num_frames ? *num_frames : static_cast<int>(len / cfg.hop);
  if (frames < 1) throw Error("logmel: zero frames requested");

  const int bins = cfg.n_fft / 2 + 1;
  const Eigen::MatrixXd fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate);
  std::vector<double> window(cfg.n_fft);
  for (int i = 0; i < cfg.n_fft; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / cfg.n_fft);

  double* in = fftw_alloc_real(cfg.n_fft);
  fftw_complex* spec = fftw_alloc_complex(bins);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(cfg.n_fft, in, spec, FFTW_ESTIMATE);
  }

  FeatureSequence out;
  out.frame_period = cfg.frame_period();
  out.source = FeatureSource::kLogMel;
  out.frames.resize(frames, cfg.n_mels);
  Eigen::VectorXd mag(bins);
  for (int t = 0; t < frames; ++t) {
    const long center = static_cast<long>(t) * cfg.hop + cfg.hop / 2;
    const long start = center - cfg.n_fft / 2;
    for (int i = 0; i < cfg.n_fft; ++i) {
      const long idx = start + i;
      in[i] = (idx >= 0 && idx < len) ? window[i] * w.samples[idx] : 0.0;
    }
    fftw_execute(plan);
    for (int k = 0; k < bins; ++k) mag[k] = std::hypot(spec[k][0], spec[k][1]);
    const Eigen::VectorXd mel = fb * mag;
    for (int m = 0; m < cfg.n_mels; ++m)
      out.frames(t, m) = static_cast<float>(std::log(mel[m] + 1e-5));
  }
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(spec);
  return out;
}

Eigen::MatrixXf projection_matrix(const FrontendConfig& cfg) {
  if (!cfg.projection_dim || *cfg.projection_dim < 1)
    throw Error("projection requested without a positive projection_dim");
  std::mt19937_64 rng(cfg.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.n_mels));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Eigen::MatrixXf p(*cfg.projection_dim, cfg.n_mels);
  for (int r = 0; r < p.rows(); ++r)
    for (int c = 0; c < p.cols(); ++c) p(r, c) = static_cast<float>(dist(rng));
  return p;
}

FeatureSequence apply_frozen_projection(const FeatureSequence& f, const FrontendConfig& cfg) {
  if (f.feature_dim() != cfg.n_mels) {
    throw Error("projection expects " + std::to_string(cfg.n_mels) + "-dim input, got " +
                std::to_string(f.feature_dim()));
  }
  const Eigen::MatrixXf p = projection_matrix(cfg);
  FeatureSequence out;
  out.frame_period = f.frame_period;
  out.source = FeatureSource::kLogMelProjected;
  out.frames = (f.frames * p.transpose()).array().tanh().matrix();
  return out;
}

FeatureSequence extract_features(const Waveform& w, const FrontendConfig& cfg,
                                 std::optional<int> num_frames) {
  FeatureSequence f = logmel(w, cfg, num_frames);
  if (cfg.projection_dim) return apply_frozen_projection(f, cfg);
  return f;
}

std::uint64_t crc64(const void* data, std::size_t size) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  crc.process_bytes(data, size);
  return crc.checksum();
}

std::uint64_t fnv1a64(const void* data, std::size_t size) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {
constexpr char kEmbeddingMagic[8] = {'T', 'S', 'E', 'D', 'E', 'M', 'B', '1'};
constexpr std::uint32_t kEmbeddingVersion = 1;
constexpr std::size_t kEmbeddingHeader = 8 + 4 + 4 + 4 + 4;
}  // namespace

void write_embeddings(const FeatureSequence& f, const std::filesystem::path& path) {
  f.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write embedding file " + path.string());
  out.write(kEmbeddingMagic, 8);
  put_le<std::uint32_t>(out, kEmbeddingVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.num_frames()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.feature_dim()));
  put_le<float>(out, static_cast<float>(f.frame_period));
  std::vector<unsigned char> payload(static_cast<std::size_t>(f.frames.size()) * 4);
  for (Eigen::Index i = 0; i < f.frames.size(); ++i) {
    const float v = f.frames.data()[i];
    std::memcpy(payload.data() + i * 4, &v, 4);
    if constexpr (std::endian::native == std::endian::big)
      std::reverse(payload.begin() + i * 4, payload.begin() + i * 4 + 4);
  }
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  put_le<std::uint64_t>(out, crc64(payload.data(), payload.size()));
  if (!out) throw Error("write failed for " + path.string());
}

FeatureSequence read_embeddings(const std::filesystem::path& path) {
  const auto data = read_all(path, "embedding file");
  const std::string where = path.string();
  if (data.size() < kEmbeddingHeader) throw Error(where + ": truncated header");
  if (std::memcmp(data.data(), kEmbeddingMagic, 8) != 0) throw Error(where + ": bad magic, expected TSEDEMB1");
  const auto version = get_le<std::uint32_t>(data.data() + 8);
  if (version != kEmbeddingVersion)
    throw Error(where + ": unsupported version " + std::to_string(version));
  const auto frames = get_le<std::uint32_t>(data.data() + 12);
  const auto dim = get_le<std::uint32_t>(data.data() + 16);
  const float period = get_le<float>(data.data() + 20);
  if (frames == 0) throw Error(where + ": zero frames (T must be >= 1)");
  if (dim == 0) throw Error(where + ": zero feature dimension");
  if (!(period > 0.0f)) throw Error(where + ": non-positive frame period");
  const std::uint64_t payload_bytes = static_cast<std::uint64_t>(frames) * dim * 4;
  if (data.size() < kEmbeddingHeader + payload_bytes + 8) {
    throw Error(where + ": truncated payload, header declares " + std::to_string(frames) + "x" +
                std::to_string(dim) + " values but file has " + std::to_string(data.size()) +
                " bytes");
  }
  if (data.size() != kEmbeddingHeader + payload_bytes + 8)
    throw Error(where + ": trailing bytes after checksum");
  const unsigned char* payload = data.data() + kEmbeddingHeader;
  const auto stored = get_le<std::uint64_t>(payload + payload_bytes);
  if (crc64(payload, payload_bytes) != stored) throw Error(where + ": CRC mismatch");
  FeatureSequence f;
  f.frame_period = period;
  f.source = FeatureSource::kImported;
  f.frames.resize(frames, dim);
  for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(frames) * dim; ++i)
    f.frames.data()[i] = get_le<float>(payload + i * 4);
  f.validate();
  return f;
}

}  // namespace tsed
