#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "scatterbench/features.hpp"
#include "scatterbench/scatterlab.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/text.hpp"

using namespace scatterbench;
using namespace scatterbench::features;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

Waveform tone(double f, double rate, std::size_t n, double amp = 0.5) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2 * kPi * f * static_cast<double>(i) / rate);
  return Waveform(std::move(x), rate);
}

Waveform noise(std::size_t n, double rate, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = 0.1 * standard_normal(rng);
  return Waveform(std::move(x), rate);
}

double mean_of(const Matrix& m) {
  double s = 0;
  for (double v : m.values) s += v;
  return s / static_cast<double>(m.values.size());
}

double std_of(const Matrix& m) {
  const double mu = mean_of(m);
  double s = 0;
  for (double v : m.values) s += (v - mu) * (v - mu);
  return std::sqrt(s / static_cast<double>(m.values.size()));
}

std::size_t row_argmax(const Matrix& m, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < m.cols; ++c) if (m(r, c) > m(r, best)) best = c;
  return best;
}

}  // namespace

TEST_CASE("five seconds at 48 kHz gives 40 x 1872") {
  const auto spec = mel_spectrogram(Waveform(std::vector<double>(240000, 0.0), 48000.0), {});
  CHECK(spec.n_mels() == 40);
  CHECK(spec.n_frames() == 1872);
}

TEST_CASE("digital silence maps to ln(log_floor) everywhere") {
  FeatureConfig cfg;
  const auto spec = mel_spectrogram(Waveform(std::vector<double>(4096, 0.0), 48000.0), cfg);
  for (double v : spec.values.values) REQUIRE(v == std::log(cfg.log_floor));
}

TEST_CASE("a 1 kHz tone peaks in the band centred nearest 1 kHz") {
  FeatureConfig cfg;
  const auto centres = mel_centres(cfg, 48000.0);
  std::size_t nearest = 0;
  for (std::size_t m = 1; m < centres.size(); ++m) {
    if (std::abs(centres[m] - 1000.0) < std::abs(centres[nearest] - 1000.0)) nearest = m;
  }
  const auto spec = mel_spectrogram(tone(1000.0, 48000.0, 24000), cfg);
  for (std::size_t t = 0; t < spec.n_frames(); ++t) {
    std::size_t best = 0;
    for (std::size_t m = 1; m < spec.n_mels(); ++m) {
      if (spec.values(m, t) > spec.values(best, t)) best = m;
    }
    REQUIRE(best == nearest);
  }
}

TEST_CASE("short clips are rejected") {
  CHECK_THROWS_AS(mel_spectrogram(Waveform(std::vector<double>(511, 0.0), 48000.0), {}),
                  InputTooShortError);
  CHECK(mel_spectrogram(Waveform(std::vector<double>(512, 0.0), 48000.0), {}).n_frames() == 1);
}

TEST_CASE("filterbank shape invariants") {
  for (double fs : {16000.0, 44100.0, 48000.0}) {
    FeatureConfig cfg;
    const auto centres = mel_centres(cfg, fs);
    for (std::size_t m = 1; m < centres.size(); ++m) CHECK(centres[m] > centres[m - 1]);
    const Matrix fb = mel_filterbank(cfg, fs);
    REQUIRE(fb.rows == 40);
    REQUIRE(fb.cols == 257);
    for (double w : fb.values) CHECK(w >= 0.0);
    for (std::size_t m = 0; m < fb.rows; ++m) {
      double peak = 0;
      for (std::size_t k = 0; k < fb.cols; ++k) peak = std::max(peak, fb(m, k));
      CHECK(peak <= 1.0);
    }
    for (std::size_t k = 0; k < fb.cols; ++k) {
      const double hz = static_cast<double>(k) * fs / 512.0;
      if (hz < cfg.f_low || hz > cfg.upper_hz(fs)) continue;
      double total = 0;
      for (std::size_t m = 0; m < fb.rows; ++m) total += fb(m, k);
      CHECK(total > 0.0);
    }
  }
  FeatureConfig band;
  band.f_low = 300;
  band.f_high = 8000;
  const Matrix fb = mel_filterbank(band, 48000.0);
  for (std::size_t m = 0; m < fb.rows; ++m) CHECK(fb(m, 1) == 0.0);
}

TEST_CASE("config invariants") {
  FeatureConfig c;
  c.hop = 1024;
  CHECK_THROWS_AS(c.validate(48000), SpecError);
  c = {};
  c.n_mels = 0;
  CHECK_THROWS_AS(c.validate(48000), SpecError);
  c = {};
  c.f_low = 30000;
  CHECK_THROWS_AS(c.validate(48000), SpecError);
  c = {};
  c.log_floor = 0;
  CHECK_THROWS_AS(c.validate(48000), SpecError);
}

TEST_CASE("property: log-domain gain equivariance") {
  const Waveform x = noise(8192, 48000.0, 1);
  for (double alpha : {0.1, 2.0, 7.5}) {
    std::vector<double> y(x.data());
    for (double& v : y) v *= alpha;
    const auto a = mel_spectrogram(x, {});
    const auto b = mel_spectrogram(Waveform(y, 48000.0), {});
    for (std::size_t i = 0; i < a.values.values.size(); ++i) {
      REQUIRE(b.values.values[i] - a.values.values[i] == doctest::Approx(2 * std::log(alpha)).epsilon(1e-9));
    }
    for (std::size_t m = 0; m < a.n_mels(); ++m) CHECK(row_argmax(a.values, m) == row_argmax(b.values, m));
  }
}

TEST_CASE("property: frame count formula on random lengths") {
  Rng rng(5);
  for (int i = 0; i < 30; ++i) {
    const auto len = static_cast<std::size_t>(uniform(rng, 512, 20000));
    FeatureConfig cfg;
    cfg.hop = static_cast<std::size_t>(uniform(rng, 1, 512));
    const auto spec = mel_spectrogram(Waveform(std::vector<double>(len, 0.0), 16000.0), cfg);
    CHECK(spec.n_frames() == (len - 512) / cfg.hop + 1);
  }
}

TEST_CASE("normalize hits the target moments") {
  Rng rng(3);
  MelSpectrogram s{Matrix(40, 100)};
  for (double& v : s.values.values) v = 3.0 + 2.0 * standard_normal(rng);
  const auto n = normalize(s);
  CHECK(std::abs(mean_of(n.values)) <= 1e-9);
  CHECK(std::abs(std_of(n.values) - 0.5) <= 1e-9);
  for (std::size_t m = 0; m < 40; ++m) CHECK(row_argmax(n.values, m) == row_argmax(s.values, m));

  const auto twice = normalize(n);
  for (std::size_t i = 0; i < n.values.values.size(); ++i) {
    REQUIRE(twice.values.values[i] == doctest::Approx(n.values.values[i]).epsilon(1e-12));
  }

  MelSpectrogram c{Matrix(4, 4, 7.0)};
  for (double v : normalize(c).values.values) CHECK(v == 0.0);
}

TEST_CASE("pad_or_truncate") {
  MelSpectrogram s{Matrix(40, 1872, 1.0)};
  const auto t = pad_or_truncate(s, 1024);
  CHECK(t.n_frames() == 1024);
  CHECK(t.n_mels() == 40);
  MelSpectrogram e{Matrix(40, 1024, 2.0)};
  CHECK(pad_or_truncate(e, 1024) == e);
  MelSpectrogram small{Matrix(3, 10, 1.0)};
  const auto p = pad_or_truncate(small, 16);
  for (std::size_t m = 0; m < 3; ++m) {
    for (std::size_t f = 10; f < 16; ++f) CHECK(p.values(m, f) == 0.0);
    CHECK(p.values(m, 9) == 1.0);
  }
}

TEST_CASE("time_pool averages groups of frames") {
  MelSpectrogram s{Matrix(1, 5)};
  s.values.values = {1, 3, 5, 7, 9};
  const auto p = time_pool(s, 2);
  CHECK(p.values.values == std::vector<double>{2, 6, 9});
  CHECK(time_pool(s, 1) == s);
}

TEST_CASE("embed_stats contract") {
  MelSpectrogram c{Matrix(40, 50, 1.25)};
  const auto e = embed_stats(c);
  REQUIRE(e.values.size() == 128);
  for (std::size_t m = 0; m < 40; ++m) {
    CHECK(e.values[m] == 1.25);
    CHECK(e.values[40 + m] == 0.0);
    CHECK(e.values[80 + m] == 0.0);
  }

  Rng rng(8);
  MelSpectrogram r{Matrix(40, 200)};
  for (double& v : r.values.values) v = standard_normal(rng);
  const auto a = embed_stats(r);
  const auto b = embed_stats(pad_or_truncate(r, 220));
  for (std::size_t m = 0; m < 120; ++m) CHECK(a.values[m] == doctest::Approx(b.values[m]).epsilon(1e-12));
  for (double v : a.values) CHECK(std::isfinite(v));
  CHECK(embed_stats(r).values == a.values);
  CHECK_THROWS_AS(embed_stats(MelSpectrogram{Matrix(20, 5)}), ShapeError);
}

TEST_CASE("identical scenes give identical embeddings") {
  const auto stim = stimulus::generate_ess({100.0, 24000.0, 0.2, 48000.0, 1.0, 0.0});
  const auto profiles = scatterlab::default_profiles(0.8);
  const auto scene = scatterlab::instantiate(profiles.at(HairType::A, Condition::dry), 4, 5, 48000.0);
  const auto e1 = embed_stats(prepare(scatterlab::render_trial(scene, stim), {}));
  const auto e2 = embed_stats(prepare(scatterlab::render_trial(scene, stim), {}));
  CHECK(e1 == e2);
}

TEST_CASE("external embedding import") {
  const fs::path dir = fs::temp_directory_path() / "scatterbench_features_emb";
  fs::create_directories(dir);
  std::vector<LabeledEmbedding> set;
  for (int i = 0; i < 3; ++i) {
    LabeledEmbedding le{"clip_" + std::to_string(i) + ".wav", {std::vector<double>(128, 0.1 * i), "x"}};
    set.push_back(le);
  }
  save_embeddings(set, dir / "emb.csv");
  const auto back = load_external_embeddings(dir / "emb.csv");
  REQUIRE(back.size() == 3);
  CHECK(back[2].embedding.values == set[2].embedding.values);
  CHECK(back[1].clip_path == "clip_1.wav");

  text::write_file(dir / "bad.csv", "a.wav,1,2,3\nb.wav,1,2\n");
  try {
    load_external_embeddings(dir / "bad.csv");
    FAIL("expected format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("row 2") != std::string::npos);
  }
  text::write_file(dir / "empty.csv", "");
  CHECK(load_external_embeddings(dir / "empty.csv").empty());
  fs::remove_all(dir);
}

TEST_CASE("matrix container and feature set round trip") {
  const fs::path dir = fs::temp_directory_path() / "scatterbench_features_bin";
  fs::remove_all(dir);
  FeatureSet set;
  for (int i = 0; i < 3; ++i) {
    MelSpectrogram s{Matrix(4, 6)};
    for (std::size_t k = 0; k < s.values.values.size(); ++k) s.values.values[k] = 0.25 * (k + i);
    set.specs.push_back(s);
    set.clip_paths.push_back("c" + std::to_string(i) + ".wav");
  }
  save_feature_set(set, dir / "features.bin");
  const auto back = load_feature_set(dir / "features.bin");
  CHECK(back.clip_paths == set.clip_paths);
  CHECK(back.specs == set.specs);
  CHECK(fs::file_size(dir / "features.bin") == 28 + 3 * 24 * 4);
  text::write_file(dir / "junk.bin", "not a matrix at all, definitely not");
  CHECK_THROWS_AS(read_matrix(dir / "junk.bin"), FormatError);
  fs::remove_all(dir);
}
