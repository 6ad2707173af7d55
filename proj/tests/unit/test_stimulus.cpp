#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "scatterbench/fft.hpp"
#include "scatterbench/stimulus.hpp"

using namespace scatterbench;
using namespace scatterbench::stimulus;

namespace {

StimulusSpec reference_sweep() { return StimulusSpec{100.0, 24000.0, 5.0, 48000.0, 1.0, 0.0}; }

// Instantaneous frequency from a finite difference of the closed-form phase.
double phase_derivative_hz(const StimulusSpec& s, double t, double dt) {
  const double lo = std::max(0.0, t - dt);
  const double hi = std::min(s.duration, t + dt);
  return (ess_phase(s, hi) - ess_phase(s, lo)) / (hi - lo) / (2.0 * std::numbers::pi);
}

std::vector<double> random_signal(std::size_t n, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> x(n);
  for (double& v : x) v = u(rng);
  return x;
}

}  // namespace

TEST_CASE("ess has duration x rate samples and starts at zero") {
  const Waveform w = generate_ess(reference_sweep());
  CHECK(w.size() == 240000);
  CHECK(w[0] == 0.0);
  CHECK(w.sample_rate() == 48000.0);
  CHECK(peak_abs(w.samples()) <= 1.0 + 1e-12);
}

TEST_CASE("ess instantaneous frequency hits both endpoints") {
  const StimulusSpec s = reference_sweep();
  const double dt = 1e-6;
  CHECK(phase_derivative_hz(s, 0.0, dt) == doctest::Approx(100.0).epsilon(0.005));
  CHECK(phase_derivative_hz(s, s.duration, dt) == doctest::Approx(24000.0).epsilon(0.005));
  // Sweep is exponential: halfway in time is the geometric mean frequency.
  CHECK(phase_derivative_hz(s, s.duration / 2, dt) ==
        doctest::Approx(std::sqrt(100.0 * 24000.0)).epsilon(0.005));
}

TEST_CASE("ess phase is strictly increasing and zero crossings track it") {
  const StimulusSpec s = reference_sweep();
  double prev = ess_phase(s, 0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double p = ess_phase(s, s.duration * i / 1000.0);
    REQUIRE(p > prev);
    prev = p;
  }
  // Modest end frequency so every crossing is resolvable at the sample rate.
  StimulusSpec low{50.0, 4000.0, 2.0, 48000.0, 0.8, 0.0};
  const Waveform w = generate_ess(low);
  std::size_t crossings = 0;
  for (std::size_t i = 1; i < w.size(); ++i) {
    if ((w[i - 1] < 0.0) != (w[i] < 0.0)) ++crossings;
  }
  const double expected = ess_phase(low, low.duration) / std::numbers::pi;
  CHECK(std::abs(static_cast<double>(crossings) - expected) <= 0.01 * expected);
  CHECK(peak_abs(w.samples()) <= 0.8 + 1e-12);
}

TEST_CASE("invalid stimulus specs name the violated invariant") {
  StimulusSpec s = reference_sweep();
  s.f_end = 30000.0;
  CHECK_THROWS_WITH_AS(generate_ess(s), doctest::Contains("f_end <= sample_rate / 2"), SpecError);
  s = reference_sweep();
  s.f_start = 0.0;
  CHECK_THROWS_WITH_AS(generate_ess(s), doctest::Contains("0 < f_start"), SpecError);
  s = reference_sweep();
  s.f_start = 30000.0;
  CHECK_THROWS_AS(inverse_filter(s), SpecError);
  s = reference_sweep();
  s.duration = -1.0;
  CHECK_THROWS_WITH_AS(generate_ess(s), doctest::Contains("duration > 0"), SpecError);
  s = reference_sweep();
  s.amplitude = 1.5;
  CHECK_THROWS_AS(generate_ess(s), SpecError);
}

TEST_CASE("fade shapes the sweep ends only when requested") {
  StimulusSpec s = reference_sweep();
  s.fade_ms = 10.0;
  const Waveform faded = generate_ess(s);
  const Waveform plain = generate_ess(reference_sweep());
  CHECK(faded[faded.size() - 1] == 0.0);
  CHECK(faded[120000] == plain[120000]);
  CHECK(std::abs(faded[1]) < std::abs(plain[1]) + 1e-15);
}

TEST_CASE("inverse filter has sweep length and a clean deconvolved pulse") {
  const StimulusSpec s = reference_sweep();
  const Waveform sweep = generate_ess(s);
  const Waveform inv = inverse_filter(s);
  CHECK(inv.size() == sweep.size());

  const Waveform pulse = convolve(sweep, inv);
  std::size_t peak = 0;
  for (std::size_t i = 0; i < pulse.size(); ++i) {
    if (std::abs(pulse[i]) > std::abs(pulse[peak])) peak = i;
  }
  CHECK(std::abs(pulse[peak]) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(peak == sweep.size() - 1);
  double sidelobe = 0.0;
  for (std::size_t i = 0; i < pulse.size(); ++i) {
    if (i + 256 < peak || i > peak + 256) sidelobe = std::max(sidelobe, std::abs(pulse[i]));
  }
  const double ratio_db = 20.0 * std::log10(std::abs(pulse[peak]) / sidelobe);
  MESSAGE("peak-to-sidelobe ratio: " << ratio_db << " dB");
  CHECK(ratio_db >= 40.0);
}

TEST_CASE("inverse filter envelope falls 6 dB per octave") {
  const StimulusSpec s = reference_sweep();
  const Waveform inv = inverse_filter(s);
  const std::size_t n = inv.size();
  // Local RMS over a few periods around the sample where the (reversed)
  // sweep passes through f; samples are too coarse at high f for peaks.
  auto local_level = [&](double f) {
    const double t = ess_time_at_frequency(s, f);
    const auto centre = static_cast<long>(n - 1) - std::lround(t * s.sample_rate);
    const long half = std::lround(3.0 * s.sample_rate / f);
    double e = 0.0;
    for (long i = centre - half; i <= centre + half; ++i) e += inv[i] * inv[i];
    return std::sqrt(e / static_cast<double>(2 * half + 1));
  };
  for (double f : {250.0, 1000.0, 4000.0}) {
    CHECK(local_level(2.0 * f) / local_level(f) == doctest::Approx(2.0).epsilon(0.02));
  }
}

TEST_CASE("convolve hand cases") {
  const Waveform a({1, 2, 3}, 48000);
  const Waveform one({1}, 48000);
  CHECK(convolve(a, one).data() == std::vector<double>{1, 2, 3});
  const Waveform ones({1, 1}, 48000);
  CHECK(convolve(ones, ones).data() == std::vector<double>{1, 2, 1});
  CHECK(convolve_fft(ones, ones).size() == 3);
  CHECK_THROWS_AS(convolve(a, Waveform({1}, 44100)), UsageError);
}

TEST_CASE("fft convolution agrees with direct convolution") {
  for (std::uint32_t seed = 0; seed < 8; ++seed) {
    const auto x = random_signal(1000, seed);
    const auto y = random_signal(1000 - 97 * seed, 100 + seed);
    const auto direct = fft::convolve_direct(x, y);
    const auto fast = fft::convolve_fft(x, y);
    REQUIRE(direct.size() == fast.size());
    CHECK(relative_l2(fast, direct) <= 1e-9);
  }
  const auto x = random_signal(4096, 11);
  const auto y = random_signal(4096, 12);
  CHECK(relative_l2(fft::convolve_fft(x, y), fft::convolve_direct(x, y)) <= 1e-9);
}

TEST_CASE("convolve is commutative and linear") {
  const Waveform a(random_signal(300, 1), 48000);
  const Waveform b(random_signal(77, 2), 48000);
  const auto ab = convolve(a, b);
  const auto ba = convolve(b, a);
  CHECK(relative_l2(ab.samples(), ba.samples()) <= 1e-12);
  std::vector<double> scaled(a.data());
  for (double& v : scaled) v *= -2.5;
  const auto sab = convolve(Waveform(scaled, 48000), b);
  for (std::size_t i = 0; i < ab.size(); ++i) {
    CHECK(sab[i] == doctest::Approx(-2.5 * ab[i]).epsilon(1e-12));
  }
}

TEST_CASE("deconvolution of the bare sweep is a unit pulse") {
  const StimulusSpec s = reference_sweep();
  const Waveform ir = deconvolve_ir(generate_ess(s), s);
  std::vector<double> ideal(512, 0.0);
  ideal[0] = 1.0;
  std::vector<double> head(ir.data().begin(), ir.data().begin() + 512);
  CHECK(normalized_correlation(head, ideal) >= 0.99);
}

TEST_CASE("deconvolution recovers a known three-tap system") {
  const StimulusSpec s = reference_sweep();
  const Waveform sweep = generate_ess(s);
  const Waveform h({1.0, 0.0, -0.5}, s.sample_rate);
  const Waveform ir = deconvolve_ir(convolve(sweep, h), s);
  std::vector<double> head(ir.data().begin(), ir.data().begin() + 3);
  CHECK(normalized_correlation(head, h.data()) >= 0.99);
  CHECK(head[0] == doctest::Approx(1.0).epsilon(0.02));
  CHECK(head[2] == doctest::Approx(-0.5).epsilon(0.05));
}

TEST_CASE("deconvolution locates a delayed recording") {
  const StimulusSpec s = reference_sweep();
  const Waveform sweep = generate_ess(s);
  std::vector<double> delayed(480, 0.0);
  delayed.insert(delayed.end(), sweep.data().begin(), sweep.data().end());
  const auto r = deconvolve_response(Waveform(delayed, s.sample_rate), s);
  CHECK(r.peak_lag() == 480);
  CHECK_THROWS_AS(deconvolve_ir(Waveform(delayed, 44100.0), s), UsageError);
}

TEST_CASE("deconvolution round trip over random FIR systems") {
  const StimulusSpec s = reference_sweep();
  const Waveform sweep = generate_ess(s);
  std::mt19937 rng(2024);
  std::uniform_int_distribution<int> taps(1, 64);
  for (int trial = 0; trial < 6; ++trial) {
    const auto h = random_signal(static_cast<std::size_t>(taps(rng)), 500 + trial);
    const auto r = deconvolve_response(convolve(sweep, Waveform(h, s.sample_rate)), s);
    const auto resp = r.response.samples();
    std::vector<double> prefix(resp.begin() + static_cast<long>(r.zero_lag_index),
                               resp.begin() + static_cast<long>(r.zero_lag_index + h.size()));
    CHECK(normalized_correlation(prefix, h) >= 0.99);
  }
}
