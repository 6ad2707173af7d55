#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "scatterbench/ingest.hpp"
#include "scatterbench/manifest.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/stimulus.hpp"
#include "scatterbench/text.hpp"
#include "scatterbench/wav_io.hpp"

using namespace scatterbench;
using namespace scatterbench::ingest;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

Waveform sine(double f, double rate, std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(2 * kPi * f * static_cast<double>(i) / rate);
  return Waveform(std::move(x), rate);
}

// Shift by k samples keeping the length; negative k advances.
Waveform delayed(const Waveform& x, long long k, std::size_t out_len) {
  std::vector<double> y(out_len, 0.0);
  for (long long i = 0; i < static_cast<long long>(out_len); ++i) {
    const long long j = i - k;
    if (j >= 0 && j < static_cast<long long>(x.size())) y[i] = x[j];
  }
  return Waveform(std::move(y), x.sample_rate());
}

Waveform add_noise(const Waveform& x, double snr_db, std::uint64_t seed) {
  Rng rng(seed);
  const double sigma = rms(x.samples()) * std::pow(10.0, -snr_db / 20.0);
  std::vector<double> y(x.data());
  for (double& v : y) v += sigma * standard_normal(rng);
  return Waveform(std::move(y), x.sample_rate());
}

Waveform short_sweep() { return stimulus::generate_ess({100.0, 8000.0, 0.1, 16000.0, 1.0, 0.0}); }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("scatterbench_ingest_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("resample with equal rates is bit-exact") {
  const Waveform x = sine(440.0, 48000.0, 1000);
  CHECK(resample(x, 48000.0) == x);
}

TEST_CASE("resample 96k to 48k keeps a 1 kHz sine within 0.1% RMS") {
  const Waveform x = sine(1000.0, 96000.0, 96000);
  const Waveform y = resample(x, 48000.0);
  REQUIRE(y.size() == 48000);
  const Waveform ref = sine(1000.0, 48000.0, 48000);
  double err = 0, sig = 0;
  for (std::size_t i = 128; i + 128 < y.size(); ++i) {
    err += (y[i] - ref[i]) * (y[i] - ref[i]);
    sig += ref[i] * ref[i];
  }
  CHECK(std::sqrt(err / sig) <= 1e-3);
}

TEST_CASE("resample output length follows the rate ratio") {
  CHECK(resample(Waveform(std::vector<double>(240000, 0.0), 24000.0), 48000.0).size() == 480000);
  CHECK(resample(Waveform(std::vector<double>(1001, 0.0), 44100.0), 48000.0).size() == 1090);
  CHECK(resample(sine(300.0, 44100.0, 4410), 16000.0).size() == 1600);
  CHECK_THROWS_AS(resample(sine(1.0, 10, 10), 0.0), UsageError);
}

TEST_CASE("resample upsampling 24k to 48k tracks a 2 kHz sine") {
  const Waveform y = resample(sine(2000.0, 24000.0, 24000), 48000.0);
  const Waveform ref = sine(2000.0, 48000.0, 48000);
  double err = 0, sig = 0;
  for (std::size_t i = 128; i + 128 < y.size(); ++i) {
    err += (y[i] - ref[i]) * (y[i] - ref[i]);
    sig += ref[i] * ref[i];
  }
  CHECK(std::sqrt(err / sig) <= 1e-3);
}

TEST_CASE("identical signals align at lag 0 with unit correlation") {
  const Waveform x = short_sweep();
  const auto r = align_offset(x, x);
  CHECK(r.lag == 0);
  CHECK(r.peak_correlation == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("delay of 777 samples is found by FFT and brute-force search") {
  const Waveform x = short_sweep();
  const Waveform y = delayed(x, 777, x.size() + 777);
  CHECK(align_offset(y, x).lag == 777);
  CHECK(align_offset_direct(y, x).lag == 777);
  CHECK(align_offset(y, x).peak_correlation == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("alignment survives 0 dB SNR in at least 95% of seeds") {
  const Waveform x = short_sweep();
  const Waveform y = delayed(x, 777, x.size() + 777);
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = align_offset(add_noise(y, 0.0, seed), x);
    if (std::llabs(r.lag - 777) <= 1) ++ok;
  }
  CHECK(ok >= 19);
}

TEST_CASE("alignment is gain invariant and rejects silence") {
  const Waveform x = short_sweep();
  std::vector<double> scaled(x.data());
  for (double& v : scaled) v *= 1e-3;
  const auto y = delayed(Waveform(scaled, x.sample_rate()), 50, x.size() + 100);
  CHECK(align_offset(y, x).lag == 50);
  CHECK(align_offset(y, x).peak_correlation == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_AS(align_offset(Waveform(std::vector<double>(100, 0.0), 16000.0), x),
                  DegenerateInputError);
  CHECK_THROWS_AS(align_offset(Waveform(std::vector<double>(100, 1.0), 8000.0), x), UsageError);
}

TEST_CASE("property: delay(x, k) aligns at exactly k") {
  Rng rng(2024);
  const Waveform x = short_sweep();
  const auto len = static_cast<long long>(x.size());
  for (int trial = 0; trial < 25; ++trial) {
    const long long k = static_cast<long long>(std::floor(uniform(rng, -len / 2.0, len / 2.0 + 1)));
    const Waveform y = delayed(x, k, x.size());
    const auto fast = align_offset(y, x);
    CHECK(fast.lag == k);
    if (trial < 5) CHECK(align_offset_direct(y, x).lag == fast.lag);
  }
}

TEST_CASE("ties prefer the smallest absolute lag, then the negative side") {
  // Reference [1] against [1, 0, 1]: lags 0 and 2 tie.
  const Waveform ref(std::vector<double>{1.0}, 1.0);
  CHECK(align_offset(Waveform({1.0, 0.0, 1.0}, 1.0), ref).lag == 0);
  CHECK(align_offset(Waveform({0.0, 1.0, 0.0, 1.0}, 1.0), ref).lag == 1);
  // Recording [1] inside reference [1, 0, 1]: lags -2 and 0 tie; then
  // [0, 1] against reference [1, 0, 1]: lags -1 and +1 tie, -1 wins.
  CHECK(align_offset(Waveform({1.0, 0.0}, 1.0), Waveform({0.0, 1.0, 0.0}, 1.0)).lag == -1);
  CHECK(align_offset_direct(Waveform({0.0, 1.0, 0.0}, 1.0), Waveform({1.0, 0.0, 1.0}, 1.0))
            .lag == -1);
  CHECK(align_offset(Waveform({0.0, 1.0, 0.0}, 1.0), Waveform({1.0, 0.0, 1.0}, 1.0)).lag == -1);
}

TEST_CASE("detect_onsets recovers separated repetitions") {
  const Waveform x = short_sweep();
  const std::vector<std::size_t> truth{300, 2500, 4100, 7000};
  std::vector<double> rec(9000, 0.0);
  for (std::size_t o : truth) {
    for (std::size_t i = 0; i < x.size(); ++i) rec[o + i] += x[i];
  }
  const Waveform noisy = add_noise(Waveform(rec, x.sample_rate()), 10.0, 3);
  CHECK(detect_onsets(noisy, x, 4) == truth);
  CHECK_THROWS_AS(detect_onsets(noisy, x, 20), DegenerateInputError);
}

TEST_CASE("segment_trials cuts fixed-length clips") {
  const Waveform rec(std::vector<double>(48000 * 11, 0.25), 48000.0);
  std::vector<std::size_t> onsets;
  for (std::size_t k = 0; k < 100; ++k) onsets.push_back(k * 2000);
  const auto clips = segment_trials(rec, onsets, 5.0);
  REQUIRE(clips.size() == 100);
  for (const auto& c : clips) CHECK(c.size() == 240000);

  const Waveform small = sine(10.0, 1000.0, 1000);
  const auto whole = segment_trials(small, {0}, 1.0);
  CHECK(whole.at(0) == small);

  const auto overlap = segment_trials(rec, {0, 1000}, 5.0);
  CHECK(overlap.size() == 2);

  try {
    segment_trials(rec, {0, 400000}, 5.0);
    FAIL("expected bounds error");
  } catch (const BoundsError& e) {
    CHECK(std::string(e.what()).find("400000") != std::string::npos);
  }
  CHECK_THROWS_AS(segment_trials(rec, {5, 5}, 1.0), UsageError);
}

TEST_CASE("trim_silence removes digital silence around a tone") {
  const double fs = 48000.0;
  const Waveform tone = sine(1000.0, fs, 48000);
  std::vector<double> padded(24000, 0.0);
  padded.insert(padded.end(), tone.data().begin(), tone.data().end());
  padded.insert(padded.end(), 24000, 0.0);
  const Waveform t = trim_silence(Waveform(padded, fs));
  const double frame = 0.030 * fs;
  CHECK(std::abs(static_cast<double>(t.size()) - 48000.0) <= 2 * frame);
  CHECK(t.size() >= 48000);

  CHECK(trim_silence(tone) == tone);

  const Waveform silent(std::vector<double>(10000, 0.0), fs);
  CHECK(trim_silence(silent).size() == 1440);
  CHECK_THROWS_AS(trim_silence(tone, 0.0), UsageError);
  CHECK_THROWS_AS(trim_silence(tone, 35.0, -1.0), UsageError);
}

TEST_CASE("property: trim_silence is idempotent") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto lead = static_cast<std::size_t>(uniform(rng, 0, 5000));
    const auto body = static_cast<std::size_t>(uniform(rng, 100, 8000));
    const auto tail = static_cast<std::size_t>(uniform(rng, 0, 5000));
    std::vector<double> x(lead + body + tail, 0.0);
    for (std::size_t i = 0; i < body; ++i) x[lead + i] = standard_normal(rng);
    for (std::size_t i = 0; i < lead; ++i) x[i] = 1e-4 * standard_normal(rng);
    const Waveform once = trim_silence(Waveform(x, 16000.0));
    CHECK(trim_silence(once) == once);
  }
}

TEST_CASE("manifest save/load round trip of 24 entries") {
  const fs::path dir = scratch("roundtrip");
  DatasetManifest m;
  m.root = dir;
  const char* conds[] = {"dry", "shampoo", "cream"};
  const char* heads[] = {"A", "B", "MAMI", "MINAYO"};
  for (int c = 0; c < 3; ++c) {
    for (int h = 0; h < 4; ++h) {
      for (int k = 0; k < 2; ++k) {
        ManifestEntry e;
        e.clip_path = std::string(conds[c]) + "/" + heads[h] + "/" + std::to_string(c * 10 + 1) +
                      "/clip_" + std::to_string(k) + ".wav";
        e.hair_type = heads[h];
        e.condition = conds[c];
        e.round_id = c * 10 + 1;
        e.head_id = heads[h];
        e.duration_s = 0.1;
        e.sample_rate = 16000.0;
        write_wav(dir / e.clip_path, Waveform(std::vector<double>(1600, 0.1), 16000.0));
        m.entries.push_back(e);
      }
    }
  }
  save_manifest(m, dir / "manifest.csv");
  const auto loaded = load_manifest(dir / "manifest.csv");
  CHECK(loaded == m);
  CHECK(loaded.entries.size() == 24);
  CHECK_NOTHROW(validate_manifest(loaded));
  CHECK(text::read_lines(dir / "manifest.csv").at(0) == kManifestHeader);

  const auto scanned = build_manifest(dir);
  CHECK(scanned.entries.size() == 24);
  auto counts = cell_counts(scanned);
  CHECK(counts.at({"cream", "MINAYO"}) == 2);
  fs::remove_all(dir);
}

TEST_CASE("validation reports bad labels, duplicates and missing files") {
  const fs::path dir = scratch("invalid");
  DatasetManifest m;
  m.root = dir;
  ManifestEntry e{"a.wav", "Z", "dry", 1, "A", 5.0, 48000.0, 0};
  m.entries.push_back(e);
  e.hair_type = "A";
  m.entries.push_back(e);
  try {
    validate_manifest(m);
    FAIL("expected validation error");
  } catch (const ValidationError& err) {
    const std::string msg = err.what();
    CHECK(msg.find("Z") != std::string::npos);
    CHECK(msg.find("duplicate") != std::string::npos);
    CHECK(msg.find("missing") != std::string::npos);
  }
  fs::remove_all(dir);
}
