#pragma once

#include <cstddef>

#include "scatterbench/core.hpp"

namespace scatterbench::stimulus {

/// Parameters of an exponential sine sweep. Frequencies are in Hz; the
/// sweep phase is computed with the equivalent angular frequencies 2*pi*f.
struct StimulusSpec {
  double f_start = 100.0;
  double f_end = 24000.0;
  double duration = 5.0;
  double sample_rate = 48000.0;
  double amplitude = 1.0;
  /// Raised-cosine fade applied at both ends, in milliseconds. 0 = none.
  double fade_ms = 0.0;

  /// Throws SpecError naming the first violated invariant.
  void validate() const;
  std::size_t num_samples() const;
};

/// Closed-form sweep phase K (exp(t L / T) - 1), with L = ln(f_end/f_start)
/// and K = 2 pi f_start T / L.
double ess_phase(const StimulusSpec& spec, double t);
/// Instantaneous frequency f_start exp(t L / T) in Hz.
double ess_instantaneous_frequency(const StimulusSpec& spec, double t);
/// Time (s) at which the sweep passes through `f` Hz.
double ess_time_at_frequency(const StimulusSpec& spec, double f);

Waveform generate_ess(const StimulusSpec& spec);

/// Time-reversed sweep with an amplitude envelope that falls 6 dB per octave
/// of swept frequency, scaled so that generate_ess(spec) convolved with it
/// peaks at exactly 1.
Waveform inverse_filter(const StimulusSpec& spec);

/// Full linear convolution. Uses the FFT path for large inputs; both paths
/// are exposed for cross-checking.
Waveform convolve(const Waveform& a, const Waveform& b);
Waveform convolve_direct(const Waveform& a, const Waveform& b);
Waveform convolve_fft(const Waveform& a, const Waveform& b);

/// Untrimmed deconvolution output together with the index that corresponds
/// to zero system lag (num_samples - 1) and the global peak (earliest on ties).
struct DeconvolutionResult {
  Waveform response;
  std::size_t zero_lag_index;
  std::size_t peak_index;

  long peak_lag() const {
    return static_cast<long>(peak_index) - static_cast<long>(zero_lag_index);
  }
};

DeconvolutionResult deconvolve_response(const Waveform& recording, const StimulusSpec& spec);

/// Recording convolved with the inverse filter, trimmed to start at the
/// recovered pulse peak.
Waveform deconvolve_ir(const Waveform& recording, const StimulusSpec& spec);

}  // namespace scatterbench::stimulus
