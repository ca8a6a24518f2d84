// Waveforms, WAV I/O and the frozen feature frontend.

#ifndef TSED_AUDIO_H_
#define TSED_AUDIO_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tsed/timeline.h"

namespace tsed {

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 16000;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

enum class SampleFormat { kPcm16, kFloat32 };

/// Reads 16-bit PCM or 32-bit float WAV; multi-channel input is averaged to mono.
Waveform load_wav(const std::filesystem::path& path);
void save_wav(const Waveform& w, const std::filesystem::path& path,
              SampleFormat format = SampleFormat::kFloat32);

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class FeatureSource { kLogMel, kLogMelProjected, kImported };
std::string to_string(FeatureSource s);

/// T x D frame embeddings on a fixed frame grid.
struct FeatureSequence {
  FeatureMatrix frames;
  double frame_period = 0.040;
  FeatureSource source = FeatureSource::kLogMel;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int feature_dim() const { return static_cast<int>(frames.cols()); }
  /// Throws unless T >= 1, D >= 1 and every value is finite.
  void validate() const;
};

struct FrontendConfig {
  int sample_rate = 16000;
  int n_fft = 1024;
  int hop = 640;  // sample_rate * 0.040
  int n_mels = 64;
  std::optional<int> projection_dim;
  std::uint64_t seed = 0;

  static FrontendConfig for_rate(int sample_rate, double frame_period = 0.040);
  double frame_period() const { return static_cast<double>(hop) / sample_rate; }
};

/// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// n_mels x (n_fft/2 + 1) triangular filters spanning 0 Hz to Nyquist.
Eigen::MatrixXd mel_filterbank(int n_mels, int n_fft, int sample_rate);

/// Magnitude STFT (Hann window centered on each frame) -> mel -> log(x + 1e-5).
/// Produces floor(len / hop) frames, or exactly `num_frames` when given
/// (trailing frames padded with silence, extra frames dropped).
FeatureSequence logmel(const Waveform& w, const FrontendConfig& cfg,
                       std::optional<int> num_frames = std::nullopt);

/// Seed-generated projection_dim x n_mels matrix, entries uniform in
/// [-1/sqrt(n_mels), 1/sqrt(n_mels)].
Eigen::MatrixXf projection_matrix(const FrontendConfig& cfg);

/// tanh(P x) per frame with the frozen projection matrix.
FeatureSequence apply_frozen_projection(const FeatureSequence& f, const FrontendConfig& cfg);

/// logmel followed by the projection when one is configured.
FeatureSequence extract_features(const Waveform& w, const FrontendConfig& cfg,
                                 std::optional<int> num_frames = std::nullopt);

// Embedding container, little-endian:
//   "TSEDEMB1" | u32 version=1 | u32 T | u32 D | f32 frame_period |
//   T*D f32 row-major | u64 CRC-64/XZ of the T*D payload bytes
FeatureSequence read_embeddings(const std::filesystem::path& path);
void write_embeddings(const FeatureSequence& f, const std::filesystem::path& path);

/// CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xorout).
std::uint64_t crc64(const void* data, std::size_t size);

/// FNV-1a over raw bytes; used to fingerprint frozen tensors.
std::uint64_t fnv1a64(const void* data, std::size_t size);

}  // namespace tsed

#endif  // TSED_AUDIO_H_
