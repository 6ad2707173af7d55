#include "scatterbench/stimulus.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "scatterbench/fft.hpp"

namespace scatterbench::stimulus {
namespace {

double sweep_rate(const StimulusSpec& spec) { return std::log(spec.f_end / spec.f_start); }

void require_same_rate(const Waveform& a, const Waveform& b, const char* op) {
  if (a.sample_rate() != b.sample_rate()) {
    std::ostringstream os;
    os << op << ": sample rates differ (" << a.sample_rate() << " vs " << b.sample_rate() << ")";
    throw UsageError(os.str());
  }
}

}  // namespace

void StimulusSpec::validate() const {
  auto fail = [](const std::string& what) { throw SpecError("invalid stimulus: " + what); };
  if (!(sample_rate > 0.0) || !std::isfinite(sample_rate)) fail("sample_rate > 0");
  if (!(duration > 0.0) || !std::isfinite(duration)) fail("duration > 0");
  if (!(f_start > 0.0)) fail("0 < f_start");
  if (!(f_start < f_end)) fail("f_start < f_end");
  if (!(f_end <= sample_rate / 2.0)) fail("f_end <= sample_rate / 2");
  if (!(amplitude > 0.0 && amplitude <= 1.0)) fail("amplitude in (0, 1]");
  if (!(fade_ms >= 0.0) || fade_ms * 2e-3 > duration) fail("0 <= fade_ms <= duration / 2");
  if (num_samples() < 2) fail("duration * sample_rate >= 2");
}

std::size_t StimulusSpec::num_samples() const {
  return static_cast<std::size_t>(std::llround(duration * sample_rate));
}

double ess_phase(const StimulusSpec& spec, double t) {
  const double L = sweep_rate(spec);
  const double K = 2.0 * std::numbers::pi * spec.f_start * spec.duration / L;
  return K * std::expm1(t * L / spec.duration);
}

double ess_instantaneous_frequency(const StimulusSpec& spec, double t) {
  return spec.f_start * std::exp(t * sweep_rate(spec) / spec.duration);
}

double ess_time_at_frequency(const StimulusSpec& spec, double f) {
  return spec.duration * std::log(f / spec.f_start) / sweep_rate(spec);
}

Waveform generate_ess(const StimulusSpec& spec) {
  spec.validate();
  const std::size_t n = spec.num_samples();
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / spec.sample_rate;
    x[i] = spec.amplitude * std::sin(ess_phase(spec, t));
  }
  const auto fade = static_cast<std::size_t>(std::llround(spec.fade_ms * 1e-3 * spec.sample_rate));
  for (std::size_t i = 0; i < fade && i < n; ++i) {
    const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) /
                                          static_cast<double>(fade));
    x[i] *= g;
    x[n - 1 - i] *= g;
  }
  return Waveform(std::move(x), spec.sample_rate);
}

Waveform inverse_filter(const StimulusSpec& spec) {
  const Waveform sweep = generate_ess(spec);
  const std::size_t n = sweep.size();
  const double L = sweep_rate(spec);
  std::vector<double> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = n - 1 - i;
    const double t = static_cast<double>(src) / spec.sample_rate;
    // Proportional to f_inst(t): over reversed time the envelope falls 6 dB
    // per octave as the sweep descends, whitening the pink sweep spectrum.
    inv[i] = sweep[src] * std::exp(t * L / spec.duration);
  }
  const auto pulse = fft::convolve_fft(sweep.samples(), inv);
  const double peak = peak_abs(pulse);
  for (double& v : inv) v /= peak;
  return Waveform(std::move(inv), spec.sample_rate);
}

Waveform convolve_direct(const Waveform& a, const Waveform& b) {
  require_same_rate(a, b, "convolve");
  return Waveform(fft::convolve_direct(a.samples(), b.samples()), a.sample_rate());
}

Waveform convolve_fft(const Waveform& a, const Waveform& b) {
  require_same_rate(a, b, "convolve");
  return Waveform(fft::convolve_fft(a.samples(), b.samples()), a.sample_rate());
}

Waveform convolve(const Waveform& a, const Waveform& b) {
  require_same_rate(a, b, "convolve");
  return Waveform(fft::convolve_auto(a.samples(), b.samples()), a.sample_rate());
}

DeconvolutionResult deconvolve_response(const Waveform& recording, const StimulusSpec& spec) {
  spec.validate();
  if (recording.sample_rate() != spec.sample_rate) {
    throw UsageError("deconvolve_ir: recording rate differs from stimulus rate");
  }
  const Waveform inv = inverse_filter(spec);
  Waveform full = convolve(recording, inv);
  std::size_t peak = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    const double m = std::abs(full[i]);
    if (m > best) {
      best = m;
      peak = i;
    }
  }
  return DeconvolutionResult{std::move(full), inv.size() - 1, peak};
}

Waveform deconvolve_ir(const Waveform& recording, const StimulusSpec& spec) {
  const DeconvolutionResult r = deconvolve_response(recording, spec);
  const auto s = r.response.samples();
  return Waveform(std::vector<double>(s.begin() + static_cast<long>(r.peak_index), s.end()),
                  spec.sample_rate);
}

}  // namespace scatterbench::stimulus
