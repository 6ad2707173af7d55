#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "scatterbench/core.hpp"
#include "scatterbench/fft.hpp"
#include "scatterbench/labels.hpp"
#include "scatterbench/manifest.hpp"
#include "scatterbench/stimulus.hpp"

namespace scatterbench::scatterlab {

inline constexpr double kNoNoise = std::numeric_limits<double>::infinity();
inline constexpr std::size_t kMaxScatterTaps = 2048;

/// Concrete acoustic scene for one trial. The microphone signal is
///
///   u = direct_gain * x(t - direct_delay)          (incident field)
///     + scatter_gain * (x * scatter_fir)(t)        (scattered field)
///     + reverb_wet * (x * room)(t)                 (room response)
///     + white noise at noise_snr_db
///
/// truncated to the stimulus length. `seed` drives the room's noise
/// excitation and the additive noise.
struct ScatterScene {
  HairType hair_type = HairType::A;
  Condition condition = Condition::dry;
  double direct_gain = 1.0;
  double direct_delay = 0.0;
  std::vector<double> scatter_fir{1.0};
  double scatter_gain = 0.0;
  double reverb_rt60 = 0.0;
  double reverb_wet = 0.0;
  double noise_snr_db = kNoNoise;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Exponentially decaying lightly low-passed Gaussian noise with unit
/// energy; amplitude falls 60 dB over `rt60` seconds. Length 1.5 * rt60.
std::vector<double> room_response(double rt60, double sample_rate, std::uint64_t seed);

/// Renders scenes against one fixed stimulus; the stimulus spectrum is
/// computed once and shared by every render.
class TrialRenderer {
 public:
  explicit TrialRenderer(Waveform stimulus, double max_rt60 = 2.0);

  Waveform render(const ScatterScene& scene) const;
  const Waveform& stimulus() const noexcept { return stimulus_; }

 private:
  Waveform stimulus_;
  std::size_t max_kernel_;
  fft::FixedSignalConvolver convolver_;
};

Waveform render_trial(const ScatterScene& scene, const Waveform& stimulus);

// --- class templates -------------------------------------------------------

/// Gaussian bump in log-frequency: gain_db * exp(-d^2 / (2 width^2)) with d
/// the distance from centre_hz in octaves.
struct SpectralBand {
  double centre_hz;
  double gain_db;
  double width_oct;
};

/// Magnitude-response recipe for a scattering filter.
struct ResponseDesign {
  std::vector<SpectralBand> bands;
  /// dB per octave above `tilt_corner_hz` (negative = high-frequency loss).
  double tilt_db_per_oct = 0.0;
  double tilt_corner_hz = 1000.0;

  double gain_db(double f_hz) const;
};

/// Linear-phase FIR (Hann-windowed frequency sampling) realizing `design`.
std::vector<double> design_fir(const ResponseDesign& design, std::size_t taps, double sample_rate);

/// Relative perturbation magnitudes, drawn uniformly in [-m, m].
struct Jitter {
  double gain_rel = 0.0;
  double delay_s = 0.0;
  double band_gain_db = 0.0;
  double band_centre_rel = 0.0;
};

/// Scene template for one (hair type, condition) cell.
struct ClassProfile {
  HairType hair_type = HairType::A;
  Condition condition = Condition::dry;
  ResponseDesign response;
  std::size_t fir_taps = 1024;
  double direct_gain = 0.5;
  double direct_delay = 0.003;
  double scatter_gain = 0.7;
  double reverb_rt60 = 0.5;
  double reverb_wet = 0.2;
  double noise_snr_db = 20.0;
  /// Per recording round (head re-placed, hair re-combed).
  Jitter round_jitter;
  /// Per stimulus repetition.
  Jitter trial_jitter;
};

/// Draws a concrete scene: round-level perturbation from `round_seed`,
/// trial-level perturbation and the scene seed from `trial_seed`.
ScatterScene instantiate(const ClassProfile& profile, std::uint64_t round_seed,
                         std::uint64_t trial_seed, double sample_rate);

struct ClassProfileSet {
  std::map<std::pair<HairType, Condition>, ClassProfile> profiles;

  const ClassProfile& at(HairType t, Condition c) const;
  /// Throws SpecError unless all 12 cells exist with pairwise distinct
  /// scattering responses.
  void validate(double sample_rate) const;
};

/// Twelve templates whose spectral signatures scale with `separation` in
/// (0, 1]: each hair type owns a resonance band, each condition a
/// consistent modification shared across hair types.
ClassProfileSet default_profiles(double separation = 1.0);

/// Mean magnitude response in dB of `fir` over third-octave bands from
/// 100 Hz to 20 kHz (band centres returned alongside).
std::vector<std::pair<double, double>> third_octave_levels(std::span<const double> fir,
                                                           double sample_rate);

// --- sessions ----------------------------------------------------------------

struct SessionPlan {
  int trials_per_sample = 100;
  double trial_duration = 5.0;
  double gap_min = 0.5;
  double gap_max = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SessionRecording {
  Waveform recording;
  std::vector<std::size_t> onsets;
};

/// Concatenates rendered trials separated by random silent gaps. Trial k
/// uses a scene instantiated from (plan.seed, k).
SessionRecording render_session(const ClassProfile& profile, const SessionPlan& plan,
                                const Waveform& stimulus);

// --- corpus ----------------------------------------------------------------

struct CellKey {
  Condition condition;
  int round_id;
  HairType head;
  auto operator<=>(const CellKey&) const = default;
};

using CorpusCounts = std::map<CellKey, int>;

/// Rounds used for each condition in the reference layout: dry 1-6,
/// shampoo 11-16, cream 21-26.
std::vector<int> rounds_for(Condition c);

/// Reference per-(condition, head) totals spread over that condition's six
/// rounds, earlier rounds taking the remainder.
CorpusCounts table1_counts();
/// Reference per-(condition, head) totals.
int table1_total(Condition c, HairType head);

/// `per_cell` clips for every (condition, round, head) requested.
CorpusCounts uniform_counts(int per_cell, const std::vector<Condition>& conditions,
                            int rounds_per_condition = 6);

struct CorpusOptions {
  stimulus::StimulusSpec stimulus;
  std::uint64_t seed = 7;
  /// Overrides every profile's SNR when set.
  std::optional<double> snr_db;
  int jobs = 1;
};

struct CorpusClip {
  CellKey cell;
  int index;
};

/// Clips in manifest order: cells ascending, then index.
std::vector<CorpusClip> corpus_clips(const CorpusCounts& counts);

/// Manifest that synth_corpus would write, without rendering audio.
ingest::DatasetManifest plan_corpus(const CorpusCounts& counts, const CorpusOptions& options,
                                    const std::filesystem::path& out_dir);

/// Renders every clip to out_dir/<condition>/<head>/<round>/clip_<n>.wav and
/// writes out_dir/manifest.csv. Output is independent of `jobs`.
ingest::DatasetManifest synth_corpus(const ClassProfileSet& profiles, const CorpusCounts& counts,
                                     const CorpusOptions& options,
                                     const std::filesystem::path& out_dir);

/// In-memory rendering of clip `index` of `cell`; synth_corpus writes this
/// waveform narrowed to float-32.
Waveform render_corpus_clip(const ClassProfileSet& profiles, const TrialRenderer& renderer,
                            const CorpusOptions& options, const CellKey& cell, int index);

}  // namespace scatterbench::scatterlab
