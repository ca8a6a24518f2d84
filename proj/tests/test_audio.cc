#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "doctest.h"
#include "tsed/audio.h"

using namespace tsed;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tsed_test_audio";
  fs::create_directories(dir);
  return dir / name;
}

Waveform tone(double hz, double seconds, double amp, int rate = 16000) {
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(static_cast<std::size_t>(seconds * rate));
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * hz * i / rate));
  return w;
}

// Minimal stereo 16-bit writer, independent of save_wav.
void write_stereo_pcm16(const fs::path& p, const std::vector<std::int16_t>& left,
                        const std::vector<std::int16_t>& right, std::uint32_t rate) {
  std::ofstream out(p, std::ios::binary);
  auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  const std::uint32_t bytes = static_cast<std::uint32_t>(left.size() * 4);
  out.write("RIFF", 4);
  u32(36 + bytes);
  out.write("WAVEfmt ", 8);
  u32(16);
  u16(1);
  u16(2);
  u32(rate);
  u32(rate * 4);
  u16(4);
  u16(16);
  out.write("data", 4);
  u32(bytes);
  for (std::size_t i = 0; i < left.size(); ++i) {
    out.write(reinterpret_cast<const char*>(&left[i]), 2);
    out.write(reinterpret_cast<const char*>(&right[i]), 2);
  }
}

}  // namespace

TEST_CASE("wav io") {
  SUBCASE("one second of silence") {
    Waveform w;
    w.samples.assign(16000, 0.0f);
    const fs::path p = temp_path("silence.wav");
    save_wav(w, p, SampleFormat::kPcm16);
    const Waveform back = load_wav(p);
    CHECK(back.sample_rate == 16000);
    REQUIRE(back.samples.size() == 16000);
    CHECK(std::all_of(back.samples.begin(), back.samples.end(), [](float s) { return s == 0.0f; }));
  }
  SUBCASE("stereo (x, -x) mixes to silence") {
    std::vector<std::int16_t> l(1000), r(1000);
    std::mt19937 rng(1);
    std::uniform_int_distribution<int> d(-30000, 30000);
    for (std::size_t i = 0; i < l.size(); ++i) {
      l[i] = static_cast<std::int16_t>(d(rng));
      r[i] = static_cast<std::int16_t>(-l[i]);
    }
    const fs::path p = temp_path("stereo.wav");
    write_stereo_pcm16(p, l, r, 8000);
    const Waveform w = load_wav(p);
    CHECK(w.sample_rate == 8000);
    REQUIRE(w.samples.size() == 1000);
    for (float s : w.samples) CHECK(s == 0.0f);
  }
  SUBCASE("float32 roundtrip is bit-identical") {
    Waveform w;
    std::mt19937 rng(2);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    w.samples.resize(4321);
    for (auto& s : w.samples) s = d(rng);
    const fs::path p = temp_path("noise32.wav");
    save_wav(w, p, SampleFormat::kFloat32);
    const Waveform back = load_wav(p);
    REQUIRE(back.samples.size() == w.samples.size());
    CHECK(std::memcmp(back.samples.data(), w.samples.data(), w.samples.size() * 4) == 0);
  }
  SUBCASE("pcm16 roundtrip within one LSB") {
    Waveform w;
    std::mt19937 rng(3);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    w.samples.resize(3000);
    for (auto& s : w.samples) s = d(rng);
    const fs::path p = temp_path("noise16.wav");
    save_wav(w, p, SampleFormat::kPcm16);
    const Waveform back = load_wav(p);
    for (std::size_t i = 0; i < w.samples.size(); ++i)
      CHECK(std::abs(back.samples[i] - w.samples[i]) <= 1.0f / 32768.0f);
  }
  SUBCASE("unsupported and unreadable files") {
    const fs::path p = temp_path("garbage.wav");
    std::ofstream(p) << "definitely not a wav";
    CHECK_THROWS_AS(load_wav(p), Error);
    CHECK_THROWS_AS(load_wav(temp_path("missing.wav")), Error);
  }
}

TEST_CASE("log-mel frontend") {
  FrontendConfig cfg;
  SUBCASE("10 s clip gives 250 frames; silence is the log floor") {
    Waveform w;
    w.samples.assign(160000, 0.0f);
    const FeatureSequence f = logmel(w, cfg);
    CHECK(f.num_frames() == 250);
    CHECK(f.feature_dim() == 64);
    CHECK(f.frame_period == doctest::Approx(0.04));
    CHECK((f.frames.array() == static_cast<float>(std::log(1e-5))).all());
  }
  SUBCASE("1 kHz tone peaks in the band around 1 kHz") {
    const FeatureSequence f = logmel(tone(1000.0, 2.0, 0.5), cfg);
    // Band m spans mel edges m..m+2 of n_mels+2 equally spaced points.
    const double step = hz_to_mel(8000.0) / 65.0;
    const int expected = static_cast<int>(std::lround(hz_to_mel(1000.0) / step)) - 1;
    for (int t = 2; t < f.num_frames() - 2; ++t) {
      Eigen::Index arg;
      f.frames.row(t).maxCoeff(&arg);
      CHECK(std::abs(static_cast<int>(arg) - expected) <= 1);
    }
  }
  SUBCASE("doubling amplitude raises every value by at most log 4") {
    std::mt19937 rng(5);
    std::normal_distribution<float> n(0.0f, 0.1f);
    Waveform w;
    w.samples.resize(32000);
    for (auto& s : w.samples) s = n(rng);
    Waveform w2 = w;
    for (auto& s : w2.samples) s *= 2.0f;
    const FeatureSequence a = logmel(w, cfg), b = logmel(w2, cfg);
    const Eigen::ArrayXXf diff = (b.frames - a.frames).array();
    CHECK(diff.minCoeff() >= -1e-5f);
    CHECK(diff.maxCoeff() <= static_cast<float>(std::log(4.0)) + 1e-5f);
  }
  SUBCASE("too-short input is rejected") {
    Waveform w;
    w.samples.assign(100, 0.0f);
    CHECK_THROWS_AS(logmel(w, cfg), Error);
  }
  SUBCASE("explicit frame count pads to the clip grid") {
    Waveform w = tone(440.0, 9.99, 0.3);
    CHECK(logmel(w, cfg, 250).num_frames() == 250);
  }
}

TEST_CASE("frozen projection") {
  FrontendConfig cfg;
  cfg.projection_dim = 32;
  cfg.seed = 99;
  FeatureSequence f;
  f.frames = FeatureMatrix::Zero(5, 64);
  const FeatureSequence z = apply_frozen_projection(f, cfg);
  CHECK(z.feature_dim() == 32);
  CHECK((z.frames.array() == 0.0f).all());
  CHECK(z.source == FeatureSource::kLogMelProjected);

  f.frames = FeatureMatrix::Random(5, 64);
  const FeatureSequence a = apply_frozen_projection(f, cfg);
  const FeatureSequence b = apply_frozen_projection(f, cfg);
  CHECK(a.frames == b.frames);
  const Eigen::MatrixXf p = projection_matrix(cfg);
  CHECK(p.cwiseAbs().maxCoeff() <= 1.0f / 8.0f);
  cfg.seed = 100;
  CHECK(projection_matrix(cfg) != p);
}

TEST_CASE("embedding container") {
  SUBCASE("T=250, D=960 roundtrip is bit-exact") {
    FeatureSequence f;
    f.frames = FeatureMatrix::Random(250, 960);
    f.source = FeatureSource::kImported;
    const fs::path p = temp_path("emb.bin");
    write_embeddings(f, p);
    const FeatureSequence back = read_embeddings(p);
    CHECK(back.num_frames() == 250);
    CHECK(back.feature_dim() == 960);
    CHECK(back.frame_period == doctest::Approx(0.04));
    CHECK(std::memcmp(back.frames.data(), f.frames.data(), 250 * 960 * 4) == 0);
    CHECK(fs::file_size(p) == 24 + 250 * 960 * 4 + 8);
  }
  SUBCASE("zero frames rejected") {
    const fs::path p = temp_path("zero.bin");
    std::ofstream out(p, std::ios::binary);
    const std::uint32_t version = 1, t = 0, d = 4;
    const float period = 0.04f;
    const std::uint64_t crc = crc64(nullptr, 0);
    out.write("TSEDEMB1", 8);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&t), 4);
    out.write(reinterpret_cast<const char*>(&d), 4);
    out.write(reinterpret_cast<const char*>(&period), 4);
    out.write(reinterpret_cast<const char*>(&crc), 8);
    out.close();
    CHECK_THROWS_WITH_AS(read_embeddings(p), doctest::Contains("zero frames"), Error);
  }
  SUBCASE("truncated payload, bad magic, bad version, corrupted data") {
    FeatureSequence f;
    f.frames = FeatureMatrix::Random(10, 3);
    const fs::path p = temp_path("trunc.bin");
    write_embeddings(f, p);
    fs::resize_file(p, fs::file_size(p) - 20);
    CHECK_THROWS_WITH_AS(read_embeddings(p), doctest::Contains("truncated"), Error);

    write_embeddings(f, p);
    {
      std::fstream io(p, std::ios::in | std::ios::out | std::ios::binary);
      io.seekp(0);
      io.write("XXXX", 4);
    }
    CHECK_THROWS_WITH_AS(read_embeddings(p), doctest::Contains("magic"), Error);

    write_embeddings(f, p);
    {
      std::fstream io(p, std::ios::in | std::ios::out | std::ios::binary);
      io.seekp(8);
      const std::uint32_t v = 7;
      io.write(reinterpret_cast<const char*>(&v), 4);
    }
    CHECK_THROWS_WITH_AS(read_embeddings(p), doctest::Contains("version"), Error);

    write_embeddings(f, p);
    {
      std::fstream io(p, std::ios::in | std::ios::out | std::ios::binary);
      io.seekp(30);
      io.put('\x5a');
    }
    CHECK_THROWS_WITH_AS(read_embeddings(p), doctest::Contains("CRC"), Error);
  }
}

TEST_CASE("crc64 check value") {
  const char* s = "123456789";
  CHECK(crc64(s, 9) == 0x995DC9BBDF1939FAULL);
}
