#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "scatterbench/core.hpp"

namespace scatterbench::ingest {

/// Windowed-sinc (Kaiser) resampler. Output length is
/// round(len * target / source); equal rates return the input untouched.
struct ResampleOptions {
  std::size_t taps_per_phase = 64;
  double kaiser_beta = 8.6;
  /// Cutoff as a fraction of the lower Nyquist frequency.
  double rolloff = 0.94;
};

Waveform resample(const Waveform& w, double target_rate, const ResampleOptions& opt = {});

struct AlignmentResult {
  /// Samples by which the recording is delayed relative to the reference.
  long long lag = 0;
  double peak_correlation = 0.0;
};

/// Maximizes c(lag) / (|recording| |reference|) with
/// c(lag) = sum_n recording[n + lag] * reference[n], over every lag with
/// any overlap. Ties: smallest |lag|, then the smaller lag.
AlignmentResult align_offset(const Waveform& recording, const Waveform& reference);

/// Same search by explicit dot products; O(N M), used to check the FFT path.
AlignmentResult align_offset_direct(const Waveform& recording, const Waveform& reference);

/// Locates `count` occurrences of `reference` in `recording` by greedy
/// peak picking on the cross-correlation, keeping picks at least one
/// reference length apart. Returned in increasing order.
std::vector<std::size_t> detect_onsets(const Waveform& recording, const Waveform& reference,
                                       std::size_t count);

/// One clip of round(duration * rate) samples per onset. Onsets must be
/// strictly increasing; clips may overlap.
std::vector<Waveform> segment_trials(const Waveform& recording,
                                     const std::vector<std::size_t>& onsets, double duration);

inline constexpr double kDefaultTrimThresholdDb = 35.0;
inline constexpr double kDefaultTrimFrameMs = 30.0;

/// Drops leading and trailing frames whose RMS is more than `threshold_db`
/// below the loudest frame. A silent clip keeps its first frame.
Waveform trim_silence(const Waveform& clip, double threshold_db = kDefaultTrimThresholdDb,
                      double frame_ms = kDefaultTrimFrameMs);

}  // namespace scatterbench::ingest
