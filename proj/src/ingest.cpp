#include "scatterbench/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "scatterbench/fft.hpp"

namespace scatterbench::ingest {
namespace {

constexpr double kPi = 3.14159265358979323846;

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  return std::sin(kPi * x) / (kPi * x);
}

double kaiser(double x, double half, double beta) {
  const double r = x / half;
  if (std::abs(r) > 1.0) return 0.0;
  return std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - r * r)) / std::cyl_bessel_i(0.0, beta);
}

// Taps for an output sample whose position in source samples is
// base + frac, base = floor(position). Tap j multiplies source sample
// base - half + 1 + j.
void phase_taps(double frac, double cutoff, const ResampleOptions& opt, std::vector<double>& taps) {
  const auto n = opt.taps_per_phase;
  const double half = static_cast<double>(n) / 2.0;
  taps.resize(n);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = static_cast<double>(j) - half + 1.0 - frac;
    taps[j] = 2.0 * cutoff * sinc(2.0 * cutoff * d) * kaiser(d, half, opt.kaiser_beta);
    sum += taps[j];
  }
  for (double& t : taps) t /= sum;
}

bool integral(double x) { return x == std::floor(x) && x > 0 && x < 1e9; }

// Candidates with equal scores are ordered by |lag| then lag.
bool better(double score, long long lag, double best_score, long long best_lag) {
  if (score != best_score) return score > best_score;
  const long long a = std::llabs(lag), b = std::llabs(best_lag);
  if (a != b) return a < b;
  return lag < best_lag;
}

double dot_at_lag(std::span<const double> rec, std::span<const double> ref, long long lag) {
  // sum_n rec[n + lag] ref[n]
  const long long n_lo = std::max<long long>(0, -lag);
  const long long n_hi = std::min<long long>(static_cast<long long>(ref.size()),
                                             static_cast<long long>(rec.size()) - lag);
  double acc = 0.0;
  for (long long n = n_lo; n < n_hi; ++n) acc += rec[n + lag] * ref[n];
  return acc;
}

double norm_product(const Waveform& rec, const Waveform& ref) {
  if (rec.sample_rate() != ref.sample_rate()) throw UsageError("align: sample rates differ");
  const double nr = std::sqrt(energy(rec.samples()));
  const double nf = std::sqrt(energy(ref.samples()));
  if (nr == 0.0 || nf == 0.0) throw DegenerateInputError("align: silent input (RMS = 0)");
  return nr * nf;
}

}  // namespace

Waveform resample(const Waveform& w, double target_rate, const ResampleOptions& opt) {
  if (!(target_rate > 0.0) || !std::isfinite(target_rate)) {
    throw UsageError("resample: target_rate must be > 0");
  }
  if (opt.taps_per_phase < 2 || opt.taps_per_phase % 2 != 0) {
    throw UsageError("resample: taps_per_phase must be even and >= 2");
  }
  const double src = w.sample_rate();
  if (target_rate == src) return w;
  const double ratio = target_rate / src;
  const auto out_len = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(static_cast<double>(w.size()) * ratio)));
  const double cutoff = 0.5 * std::min(1.0, ratio) * opt.rolloff;
  const auto n = static_cast<long long>(opt.taps_per_phase);
  const long long len = static_cast<long long>(w.size());
  const auto x = w.samples();

  // Rational ratio up/down: position of output m is m * down / up, whose
  // fractional part cycles through `up` phases.
  long long up = 0, down = 0;
  if (integral(src) && integral(target_rate)) {
    const auto s = static_cast<long long>(src), t = static_cast<long long>(target_rate);
    const long long g = std::gcd(s, t);
    up = t / g;
    down = s / g;
  }
  std::vector<std::vector<double>> table;
  if (up > 0 && up <= 4096) {
    table.resize(static_cast<std::size_t>(up));
    for (long long p = 0; p < up; ++p) {
      phase_taps(static_cast<double>(p) / static_cast<double>(up), cutoff, opt,
                 table[static_cast<std::size_t>(p)]);
    }
  }

  std::vector<double> out(out_len, 0.0);
  std::vector<double> scratch;
  for (std::size_t m = 0; m < out_len; ++m) {
    long long base;
    const std::vector<double>* taps;
    if (!table.empty()) {
      const long long num = static_cast<long long>(m) * down;
      base = num / up;
      taps = &table[static_cast<std::size_t>(num % up)];
    } else {
      const double pos = static_cast<double>(m) / ratio;
      base = static_cast<long long>(std::floor(pos));
      phase_taps(pos - static_cast<double>(base), cutoff, opt, scratch);
      taps = &scratch;
    }
    const long long first = base - n / 2 + 1;
    double acc = 0.0;
    for (long long j = 0; j < n; ++j) {
      const long long k = first + j;
      if (k >= 0 && k < len) acc += (*taps)[static_cast<std::size_t>(j)] * x[k];
    }
    out[m] = acc;
  }
  return Waveform(std::move(out), target_rate);
}

AlignmentResult align_offset(const Waveform& recording, const Waveform& reference) {
  const double scale = norm_product(recording, reference);
  const auto rec = recording.samples();
  const auto ref = reference.samples();
  const auto c = fft::xcorr_fft(rec, ref);
  const long long offset = static_cast<long long>(ref.size()) - 1;
  const double cmax = *std::max_element(c.begin(), c.end());
  // FFT rounding is ~1e-12 of the energy scale; every lag within that band
  // of the maximum is re-scored exactly.
  const double band = 1e-9 * scale + 1e-12 * std::abs(cmax);
  AlignmentResult best{0, -2.0};
  bool have = false;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i] < cmax - band) continue;
    const long long lag = static_cast<long long>(i) - offset;
    const double score = dot_at_lag(rec, ref, lag) / scale;
    if (!have || better(score, lag, best.peak_correlation, best.lag)) {
      best = {lag, score};
      have = true;
    }
  }
  best.peak_correlation = std::clamp(best.peak_correlation, -1.0, 1.0);
  return best;
}

AlignmentResult align_offset_direct(const Waveform& recording, const Waveform& reference) {
  const double scale = norm_product(recording, reference);
  const auto rec = recording.samples();
  const auto ref = reference.samples();
  AlignmentResult best{0, -2.0};
  bool have = false;
  for (long long lag = -(static_cast<long long>(ref.size()) - 1);
       lag < static_cast<long long>(rec.size()); ++lag) {
    const double score = dot_at_lag(rec, ref, lag) / scale;
    if (!have || better(score, lag, best.peak_correlation, best.lag)) {
      best = {lag, score};
      have = true;
    }
  }
  best.peak_correlation = std::clamp(best.peak_correlation, -1.0, 1.0);
  return best;
}

std::vector<std::size_t> detect_onsets(const Waveform& recording, const Waveform& reference,
                                       std::size_t count) {
  norm_product(recording, reference);
  const auto rec = recording.samples();
  const auto ref = reference.samples();
  if (ref.size() > rec.size()) throw BoundsError("detect_onsets: reference longer than recording");
  const auto c = fft::xcorr_fft(rec, ref);
  const std::size_t offset = ref.size() - 1;
  // Non-negative lags whose window fits inside the recording.
  const std::size_t n_lags = rec.size() - ref.size() + 1;
  std::vector<std::size_t> order(n_lags);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return c[a + offset] > c[b + offset];
  });
  std::vector<std::size_t> picks;
  for (std::size_t lag : order) {
    if (picks.size() == count) break;
    const bool clear = std::all_of(picks.begin(), picks.end(), [&](std::size_t p) {
      return (p > lag ? p - lag : lag - p) >= ref.size();
    });
    if (clear) picks.push_back(lag);
  }
  if (picks.size() < count) {
    throw DegenerateInputError("detect_onsets: found " + std::to_string(picks.size()) + " of " +
                               std::to_string(count) + " trials");
  }
  std::sort(picks.begin(), picks.end());
  return picks;
}

std::vector<Waveform> segment_trials(const Waveform& recording,
                                     const std::vector<std::size_t>& onsets, double duration) {
  if (!(duration > 0.0)) throw UsageError("segment_trials: duration must be > 0");
  const auto len = static_cast<std::size_t>(std::llround(duration * recording.sample_rate()));
  if (len == 0) throw UsageError("segment_trials: duration shorter than one sample");
  std::vector<Waveform> clips;
  clips.reserve(onsets.size());
  for (std::size_t i = 0; i < onsets.size(); ++i) {
    if (i > 0 && onsets[i] <= onsets[i - 1]) {
      throw UsageError("segment_trials: onsets not strictly increasing at index " +
                       std::to_string(i));
    }
    if (onsets[i] + len > recording.size()) {
      throw BoundsError("segment_trials: onset " + std::to_string(onsets[i]) + " + " +
                        std::to_string(len) + " samples exceeds recording length " +
                        std::to_string(recording.size()));
    }
    const auto first = recording.data().begin() + static_cast<std::ptrdiff_t>(onsets[i]);
    clips.emplace_back(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(len)),
                       recording.sample_rate());
  }
  return clips;
}

Waveform trim_silence(const Waveform& clip, double threshold_db, double frame_ms) {
  if (!(threshold_db > 0.0)) throw UsageError("trim_silence: threshold_db must be > 0");
  if (!(frame_ms > 0.0)) throw UsageError("trim_silence: frame must be > 0 ms");
  const std::size_t frame = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(frame_ms * 1e-3 * clip.sample_rate())));
  const std::size_t n = clip.size();
  const std::size_t n_frames = (n + frame - 1) / frame;
  std::vector<double> level(n_frames);
  for (std::size_t f = 0; f < n_frames; ++f) {
    const std::size_t a = f * frame, b = std::min(n, a + frame);
    level[f] = rms(clip.samples().subspan(a, b - a));
  }
  const double peak = *std::max_element(level.begin(), level.end());
  std::size_t first = 0, last = 0;
  if (peak == 0.0) {
    first = last = 0;
  } else {
    const double floor = peak * std::pow(10.0, -threshold_db / 20.0);
    while (level[first] < floor) ++first;
    last = n_frames - 1;
    while (level[last] < floor) --last;
  }
  if (first == 0 && last == n_frames - 1) return clip;
  const std::size_t a = first * frame, b = std::min(n, (last + 1) * frame);
  return Waveform(std::vector<double>(clip.data().begin() + static_cast<std::ptrdiff_t>(a),
                                      clip.data().begin() + static_cast<std::ptrdiff_t>(b)),
                  clip.sample_rate());
}

}  // namespace scatterbench::ingest
