#include "scatterbench/scatterlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "scatterbench/parallel.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/wav_io.hpp"

namespace fs = std::filesystem;

namespace scatterbench::scatterlab {
namespace {

constexpr double kLn1000 = 6.907755278982137;

// One-pole smoothing coefficient applied to the room's noise excitation.
constexpr double kRoomLowpass = 0.4;

// Kernels at or below this length are convolved directly.
constexpr std::size_t kDirectKernelLimit = 64;

double jitter_draw(Rng& rng, double magnitude) {
  return magnitude == 0.0 ? 0.0 : uniform(rng, -magnitude, magnitude);
}

std::size_t room_length(double rt60, double sample_rate) {
  return static_cast<std::size_t>(std::ceil(1.5 * rt60 * sample_rate)) + 1;
}

}  // namespace

void ScatterScene::validate() const {
  auto fail = [](const std::string& what) { throw SpecError("invalid scene: " + what); };
  if (!(std::abs(direct_gain) <= 1.0)) fail("|direct_gain| <= 1");
  if (!(std::abs(scatter_gain) <= 1.0)) fail("|scatter_gain| <= 1");
  if (!(direct_delay >= 0.0) || !std::isfinite(direct_delay)) fail("direct_delay >= 0");
  if (!(reverb_rt60 >= 0.0 && reverb_rt60 <= 2.0)) fail("reverb_rt60 in [0, 2]");
  if (!(reverb_wet >= 0.0 && reverb_wet <= 1.0)) fail("reverb_wet in [0, 1]");
  if (std::isnan(noise_snr_db)) fail("noise_snr_db is NaN");
  if (scatter_fir.empty()) fail("scatter_fir non-empty");
  if (scatter_fir.size() > kMaxScatterTaps) fail("scatter_fir has at most 2048 taps");
  for (double v : scatter_fir) {
    if (!std::isfinite(v)) fail("scatter_fir taps finite");
  }
}

std::vector<double> room_response(double rt60, double sample_rate, std::uint64_t seed) {
  if (rt60 <= 0.0) return {};
  Rng rng(derive_seed(seed, "room"));
  const std::size_t n = room_length(rt60, sample_rate);
  std::vector<double> h(n);
  double state = 0.0;
  double e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    state = (1.0 - kRoomLowpass) * standard_normal(rng) + kRoomLowpass * state;
    const double t = static_cast<double>(i) / sample_rate;
    h[i] = state * std::exp(-kLn1000 * t / rt60);
    e += h[i] * h[i];
  }
  const double norm = 1.0 / std::sqrt(e);
  for (double& v : h) v *= norm;
  return h;
}

TrialRenderer::TrialRenderer(Waveform stimulus, double max_rt60)
    : stimulus_(std::move(stimulus)),
      max_kernel_(std::max(kMaxScatterTaps, room_length(max_rt60, stimulus_.sample_rate()))),
      convolver_(stimulus_.samples(), max_kernel_) {}

Waveform TrialRenderer::render(const ScatterScene& scene) const {
  scene.validate();
  const double fs = stimulus_.sample_rate();
  const std::size_t n = stimulus_.size();
  const auto x = stimulus_.samples();
  std::vector<double> out(n, 0.0);

  if (scene.direct_gain != 0.0) {
    const auto d = static_cast<std::size_t>(std::llround(scene.direct_delay * fs));
    for (std::size_t i = d; i < n; ++i) out[i] = scene.direct_gain * x[i - d];
  }

  std::vector<double> kernel;
  if (scene.scatter_gain != 0.0) {
    kernel.resize(scene.scatter_fir.size());
    for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = scene.scatter_gain * scene.scatter_fir[i];
  }
  if (scene.reverb_wet != 0.0 && scene.reverb_rt60 > 0.0) {
    const auto room = room_response(scene.reverb_rt60, fs, scene.seed);
    if (room.size() > max_kernel_) throw SpecError("reverb_rt60 exceeds renderer capacity");
    if (kernel.size() < room.size()) kernel.resize(room.size(), 0.0);
    for (std::size_t i = 0; i < room.size(); ++i) kernel[i] += scene.reverb_wet * room[i];
  }
  if (!kernel.empty()) {
    if (kernel.size() <= kDirectKernelLimit) {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        const std::size_t kmax = std::min(kernel.size(), i + 1);
        for (std::size_t k = 0; k < kmax; ++k) acc += kernel[k] * x[i - k];
        out[i] += acc;
      }
    } else {
      const auto wet = convolver_.convolve(kernel, n);
      for (std::size_t i = 0; i < n; ++i) out[i] += wet[i];
    }
  }

  if (std::isfinite(scene.noise_snr_db)) {
    // Signal power over the active region: first to last sample above
    // -60 dB of the clean peak.
    const double peak = peak_abs(out);
    if (peak > 0.0) {
      std::size_t first = 0, last = n - 1;
      while (std::abs(out[first]) < 1e-3 * peak) ++first;
      while (std::abs(out[last]) < 1e-3 * peak) --last;
      const double power =
          energy(std::span<const double>(out).subspan(first, last - first + 1)) /
          static_cast<double>(last - first + 1);
      const double sigma = std::sqrt(power / std::pow(10.0, scene.noise_snr_db / 10.0));
      Rng rng(derive_seed(scene.seed, "noise"));
      for (double& v : out) v += sigma * standard_normal(rng);
    }
  }
  return Waveform(std::move(out), fs);
}

Waveform render_trial(const ScatterScene& scene, const Waveform& stimulus) {
  return TrialRenderer(stimulus, std::max(scene.reverb_rt60, 1e-3)).render(scene);
}

double ResponseDesign::gain_db(double f_hz) const {
  const double f = std::max(f_hz, 1.0);
  double g = 0.0;
  for (const SpectralBand& b : bands) {
    const double d = std::log2(f / b.centre_hz);
    g += b.gain_db * std::exp(-d * d / (2.0 * b.width_oct * b.width_oct));
  }
  if (f > tilt_corner_hz) g += tilt_db_per_oct * std::log2(f / tilt_corner_hz);
  return g;
}

std::vector<double> design_fir(const ResponseDesign& design, std::size_t taps, double sample_rate) {
  if (taps < 2 || taps % 2 != 0 || taps > kMaxScatterTaps) {
    throw SpecError("design_fir: taps must be even and in [2, 2048]");
  }
  const std::size_t n = taps;
  std::vector<std::complex<double>> spectrum(n / 2 + 1);
  for (std::size_t k = 0; k <= n / 2; ++k) {
    const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n);
    spectrum[k] = std::pow(10.0, design.gain_db(f) / 20.0);
  }
  const auto circular = fft::irfft(spectrum, n);
  std::vector<double> h(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                          static_cast<double>(n));
    h[i] = circular[(i + n / 2) % n] * w;
  }
  return h;
}

ScatterScene instantiate(const ClassProfile& p, std::uint64_t round_seed, std::uint64_t trial_seed,
                         double sample_rate) {
  Rng round_rng(derive_seed(round_seed, "jitter"));
  Rng trial_rng(derive_seed(trial_seed, "jitter"));
  auto both = [&](auto draw) { return draw(round_rng, p.round_jitter) + draw(trial_rng, p.trial_jitter); };

  ScatterScene s;
  s.hair_type = p.hair_type;
  s.condition = p.condition;
  auto gain = [&](double base) {
    const double r = 1.0 + jitter_draw(round_rng, p.round_jitter.gain_rel);
    const double t = 1.0 + jitter_draw(trial_rng, p.trial_jitter.gain_rel);
    return std::clamp(base * r * t, -1.0, 1.0);
  };
  s.direct_gain = gain(p.direct_gain);
  s.scatter_gain = gain(p.scatter_gain);
  s.direct_delay = std::max(
      0.0, p.direct_delay + both([](Rng& r, const Jitter& j) { return jitter_draw(r, j.delay_s); }));

  ResponseDesign design = p.response;
  for (SpectralBand& b : design.bands) {
    b.centre_hz *= 1.0 + both([](Rng& r, const Jitter& j) { return jitter_draw(r, j.band_centre_rel); });
    b.gain_db += both([](Rng& r, const Jitter& j) { return jitter_draw(r, j.band_gain_db); });
  }
  s.scatter_fir = design_fir(design, p.fir_taps, sample_rate);
  s.reverb_rt60 = p.reverb_rt60;
  s.reverb_wet = p.reverb_wet;
  s.noise_snr_db = p.noise_snr_db;
  s.seed = derive_seed(trial_seed, "scene");
  return s;
}

const ClassProfile& ClassProfileSet::at(HairType t, Condition c) const {
  const auto it = profiles.find({t, c});
  if (it == profiles.end()) {
    throw SpecError("profile set lacks cell (" + std::string(to_string(t)) + ", " +
                    std::string(to_string(c)) + ")");
  }
  return it->second;
}

void ClassProfileSet::validate(double sample_rate) const {
  std::vector<std::vector<double>> firs;
  for (HairType t : kHairTypes) {
    for (Condition c : kConditions) {
      const ClassProfile& p = at(t, c);
      if (p.hair_type != t || p.condition != c) throw SpecError("profile labels disagree with key");
      firs.push_back(design_fir(p.response, p.fir_taps, sample_rate));
    }
  }
  for (std::size_t i = 0; i < firs.size(); ++i) {
    for (std::size_t j = i + 1; j < firs.size(); ++j) {
      if (firs[i] == firs[j]) throw SpecError("two profile cells share a scattering filter");
    }
  }
}

ClassProfileSet default_profiles(double separation) {
  if (!(separation > 0.0 && separation <= 1.0)) throw SpecError("separation must be in (0, 1]");
  const double s = separation;
  // One resonance per hair type.
  const std::map<HairType, SpectralBand> type_band = {
      {HairType::A, {700.0, 12.0 * s, 0.35}},
      {HairType::B, {1600.0, 12.0 * s, 0.35}},
      {HairType::MAMI, {3800.0, 12.0 * s, 0.35}},
      {HairType::MINAYO, {8500.0, 12.0 * s, 0.35}},
  };
  // Conditions add the same modification on every head.
  const std::map<Condition, std::vector<SpectralBand>> condition_bands = {
      {Condition::dry, {}},
      {Condition::shampoo, {{2600.0, -10.0 * s, 0.3}, {13000.0, 8.0 * s, 0.4}}},
      {Condition::cream, {{450.0, 8.0 * s, 0.4}, {6000.0, -9.0 * s, 0.5}}},
  };
  const std::map<Condition, double> condition_gain = {
      {Condition::dry, 0.6}, {Condition::shampoo, 0.7}, {Condition::cream, 0.75}};

  ClassProfileSet set;
  for (HairType t : kHairTypes) {
    for (Condition c : kConditions) {
      ClassProfile p;
      p.hair_type = t;
      p.condition = c;
      p.response.bands.push_back(type_band.at(t));
      for (const SpectralBand& b : condition_bands.at(c)) p.response.bands.push_back(b);
      p.response.tilt_db_per_oct = -1.5;
      p.response.tilt_corner_hz = 2000.0;
      p.scatter_gain = condition_gain.at(c);
      p.round_jitter = Jitter{0.08, 4e-4, 1.5, 0.05};
      p.trial_jitter = Jitter{0.02, 5e-5, 0.3, 0.01};
      set.profiles.emplace(std::make_pair(t, c), p);
    }
  }
  return set;
}

std::vector<std::pair<double, double>> third_octave_levels(std::span<const double> fir,
                                                           double sample_rate) {
  const std::size_t n = 16384;
  const auto spectrum = fft::rfft(fir, n);
  std::vector<std::pair<double, double>> levels;
  for (int k = 0;; ++k) {
    const double centre = 100.0 * std::pow(2.0, k / 3.0);
    if (centre > 20000.0 || centre * std::pow(2.0, 1.0 / 6.0) > sample_rate / 2) break;
    const double lo = centre * std::pow(2.0, -1.0 / 6.0);
    const double hi = centre * std::pow(2.0, 1.0 / 6.0);
    double power = 0.0;
    int bins = 0;
    for (std::size_t b = 0; b < spectrum.size(); ++b) {
      const double f = static_cast<double>(b) * sample_rate / static_cast<double>(n);
      if (f >= lo && f < hi) {
        power += std::norm(spectrum[b]);
        ++bins;
      }
    }
    levels.emplace_back(centre, 10.0 * std::log10(std::max(power / std::max(bins, 1), 1e-30)));
  }
  return levels;
}

void SessionPlan::validate() const {
  if (trials_per_sample < 1) throw SpecError("invalid session plan: trials_per_sample >= 1");
  if (!(trial_duration > 0.0)) throw SpecError("invalid session plan: trial_duration > 0");
  if (!(gap_min >= 0.0) || !(gap_min <= gap_max)) {
    throw SpecError("invalid session plan: 0 <= gap_range.min <= gap_range.max");
  }
}

SessionRecording render_session(const ClassProfile& profile, const SessionPlan& plan,
                                const Waveform& stimulus) {
  plan.validate();
  const double fs = stimulus.sample_rate();
  const auto trial_len = static_cast<std::size_t>(std::llround(plan.trial_duration * fs));
  TrialRenderer renderer(stimulus, std::max(profile.reverb_rt60, 1e-3));
  Rng gap_rng(derive_seed(plan.seed, "gaps"));
  const std::uint64_t round_seed = derive_seed(plan.seed, "round");

  std::vector<std::size_t> onsets;
  std::size_t cursor = 0;
  for (int k = 0; k < plan.trials_per_sample; ++k) {
    if (k > 0) {
      cursor += static_cast<std::size_t>(std::llround(uniform(gap_rng, plan.gap_min, plan.gap_max) * fs));
    }
    onsets.push_back(cursor);
    cursor += trial_len;
  }
  std::vector<double> out(cursor, 0.0);
  for (int k = 0; k < plan.trials_per_sample; ++k) {
    const ScatterScene scene = instantiate(
        profile, round_seed, derive_seed(plan.seed, {static_cast<std::uint64_t>(k)}), fs);
    const Waveform trial = renderer.render(scene);
    const std::size_t m = std::min(trial_len, trial.size());
    std::copy_n(trial.data().begin(), m, out.begin() + static_cast<long>(onsets[k]));
  }
  return SessionRecording{Waveform(std::move(out), fs), std::move(onsets)};
}

std::vector<int> rounds_for(Condition c) {
  const int base = 10 * index_of(c);
  return {base + 1, base + 2, base + 3, base + 4, base + 5, base + 6};
}

int table1_total(Condition c, HairType head) {
  static constexpr int kTotals[3][4] = {
      {434, 511, 468, 463},  // dry
      {507, 526, 508, 514},  // shampoo
      {699, 704, 709, 724},  // cream
  };
  return kTotals[index_of(c)][index_of(head)];
}

CorpusCounts table1_counts() {
  CorpusCounts counts;
  for (Condition c : kConditions) {
    const auto rounds = rounds_for(c);
    const int n_rounds = static_cast<int>(rounds.size());
    for (HairType h : kHairTypes) {
      const int total = table1_total(c, h);
      for (int r = 0; r < n_rounds; ++r) {
        counts[{c, rounds[r], h}] = total / n_rounds + (r < total % n_rounds ? 1 : 0);
      }
    }
  }
  return counts;
}

CorpusCounts uniform_counts(int per_cell, const std::vector<Condition>& conditions,
                            int rounds_per_condition) {
  if (per_cell < 0) throw SpecError("per-cell count must be >= 0");
  if (rounds_per_condition < 1 || rounds_per_condition > 9) {
    throw SpecError("rounds per condition must be in [1, 9]");
  }
  CorpusCounts counts;
  for (Condition c : conditions) {
    for (int r = 1; r <= rounds_per_condition; ++r) {
      for (HairType h : kHairTypes) counts[{c, 10 * index_of(c) + r, h}] = per_cell;
    }
  }
  return counts;
}

namespace {

std::string clip_relpath(const CellKey& cell, int index) {
  char name[32];
  std::snprintf(name, sizeof name, "clip_%04d.wav", index);
  std::ostringstream os;
  os << to_string(cell.condition) << '/' << to_string(cell.head) << '/' << cell.round_id << '/'
     << name;
  return os.str();
}

}  // namespace

std::vector<CorpusClip> corpus_clips(const CorpusCounts& counts) {
  std::vector<CorpusClip> jobs;
  for (const auto& [cell, count] : counts) {
    if (count < 0) throw SpecError("corpus counts must be >= 0");
    if (cell.round_id < 1) throw SpecError("corpus round ids must be >= 1");
    for (int i = 0; i < count; ++i) jobs.push_back({cell, i});
  }
  return jobs;
}

ingest::DatasetManifest plan_corpus(const CorpusCounts& counts, const CorpusOptions& options,
                                    const fs::path& out_dir) {
  options.stimulus.validate();
  ingest::DatasetManifest m;
  m.root = fs::absolute(out_dir).lexically_normal();
  const double duration =
      static_cast<double>(options.stimulus.num_samples()) / options.stimulus.sample_rate;
  for (const CorpusClip& job : corpus_clips(counts)) {
    ingest::ManifestEntry e;
    e.clip_path = clip_relpath(job.cell, job.index);
    e.hair_type = std::string(to_string(job.cell.head));
    e.condition = std::string(to_string(job.cell.condition));
    e.round_id = job.cell.round_id;
    e.head_id = std::string(to_string(job.cell.head));
    e.duration_s = duration;
    e.sample_rate = options.stimulus.sample_rate;
    e.channel = 0;
    m.entries.push_back(std::move(e));
  }
  return m;
}

Waveform render_corpus_clip(const ClassProfileSet& profiles, const TrialRenderer& renderer,
                            const CorpusOptions& options, const CellKey& cell, int index) {
  ClassProfile profile = profiles.at(cell.head, cell.condition);
  if (options.snr_db) profile.noise_snr_db = *options.snr_db;
  const auto c = static_cast<std::uint64_t>(index_of(cell.condition));
  const auto r = static_cast<std::uint64_t>(cell.round_id);
  const auto h = static_cast<std::uint64_t>(index_of(cell.head));
  const std::uint64_t round_seed = derive_seed(derive_seed(options.seed, "round"), {c, r, h});
  const std::uint64_t trial_seed =
      derive_seed(derive_seed(options.seed, "clip"), {c, r, h, static_cast<std::uint64_t>(index)});
  return renderer.render(
      instantiate(profile, round_seed, trial_seed, renderer.stimulus().sample_rate()));
}

ingest::DatasetManifest synth_corpus(const ClassProfileSet& profiles, const CorpusCounts& counts,
                                     const CorpusOptions& options, const fs::path& out_dir) {
  profiles.validate(options.stimulus.sample_rate);
  ingest::DatasetManifest m = plan_corpus(counts, options, out_dir);
  std::error_code ec;
  fs::create_directories(m.root, ec);
  if (ec || !fs::is_directory(m.root)) throw IoError("cannot create output directory: " + out_dir.string());
  const auto jobs = corpus_clips(counts);
  const TrialRenderer renderer(stimulus::generate_ess(options.stimulus));
  for (const auto& e : m.entries) fs::create_directories(m.resolve(e).parent_path());
  parallel_for(jobs.size(), options.jobs, [&](std::size_t i) {
    const Waveform clip = render_corpus_clip(profiles, renderer, options, jobs[i].cell, jobs[i].index);
    write_wav(m.resolve(m.entries[i]), clip);
  });
  ingest::save_manifest(m, m.root / "manifest.csv");
  return m;
}

}  // namespace scatterbench::scatterlab
