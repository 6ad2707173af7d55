#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "scatterbench/core.hpp"

namespace scatterbench::features {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct FeatureConfig {
  std::size_t n_fft = 512;
  std::size_t hop = 128;
  std::size_t n_mels = 40;
  double f_low = 0.0;
  /// 0 means sample_rate / 2.
  double f_high = 0.0;
  double log_floor = 1e-10;
  /// Pad or truncate to this many frames after normalization.
  std::optional<std::size_t> target_frames;
  double norm_mean = 0.0;
  double norm_std = 0.5;
  /// Average non-overlapping groups of this many frames (last step).
  std::size_t time_pool = 1;

  double upper_hz(double sample_rate) const { return f_high > 0.0 ? f_high : sample_rate / 2.0; }
  /// Throws SpecError naming the first violated constraint.
  void validate(double sample_rate) const;
};

/// n_mels x n_frames log-mel values.
struct MelSpectrogram {
  Matrix values;

  std::size_t n_mels() const noexcept { return values.rows; }
  std::size_t n_frames() const noexcept { return values.cols; }

  friend bool operator==(const MelSpectrogram&, const MelSpectrogram&) = default;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Centre frequencies of the filterbank: n_mels points evenly spaced in mel
/// from f_low to f_high inclusive.
std::vector<double> mel_centres(const FeatureConfig& cfg, double sample_rate);

/// Triangular filters (peak 1 at each centre, feet at the neighbouring
/// centres one mel step beyond), n_mels x (n_fft / 2 + 1).
Matrix mel_filterbank(const FeatureConfig& cfg, double sample_rate);

inline std::size_t frame_count(std::size_t len, std::size_t n_fft, std::size_t hop) {
  return len < n_fft ? 0 : (len - n_fft) / hop + 1;
}

/// Periodic-Hann power spectra of fully contained frames, mapped through
/// the filterbank, natural log with log_floor.
MelSpectrogram mel_spectrogram(const Waveform& clip, const FeatureConfig& cfg);

/// Affine map to the requested matrix-wide mean and (population) std;
/// a constant input maps to all `mean`.
MelSpectrogram normalize(const MelSpectrogram& spec, double mean = 0.0, double std = 0.5);

/// Right-pads with `pad_value` or right-truncates to `target_frames`.
MelSpectrogram pad_or_truncate(const MelSpectrogram& spec, std::size_t target_frames,
                               double pad_value = 0.0);

/// Frame-averaging by `factor`; a trailing partial group is averaged over
/// its own members.
MelSpectrogram time_pool(const MelSpectrogram& spec, std::size_t factor);

/// mel -> normalize -> pad/truncate -> time_pool, as configured.
MelSpectrogram prepare(const Waveform& clip, const FeatureConfig& cfg);

inline constexpr std::size_t kEmbeddingDim = 128;
inline constexpr const char* kStatsExtractor = "stats128";

struct EmbeddingVector {
  std::vector<double> values;
  std::string extractor;

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

/// Statistics over active frames (trailing all-zero frames excluded):
///   [0, 40)    per-band mean
///   [40, 80)   per-band std
///   [80, 120)  per-band mean |x[t+1] - x[t]|
///   [120, 128) global: mean, std, min, max, mean frame max, mean frame std,
///              mean spectral centroid (band index), active-frame fraction
/// Requires n_mels == 40.
EmbeddingVector embed_stats(const MelSpectrogram& spec);

struct LabeledEmbedding {
  std::string clip_path;
  EmbeddingVector embedding;
};

/// CSV `clip_path,e0,...,e<d-1>`, optional header row starting with
/// `clip_path`.
std::vector<LabeledEmbedding> load_external_embeddings(const std::filesystem::path& path);
void save_embeddings(const std::vector<LabeledEmbedding>& set, const std::filesystem::path& path);

// --- binary matrix container ------------------------------------------------
//
//   offset  size  field
//   0       8     magic "SBMATRX\0"
//   8       4     dtype (uint32 LE, 1 = float32)
//   12      8     rows (uint64 LE)
//   20      8     cols (uint64 LE)
//   28      4*r*c payload, row-major float32 LE

void write_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix(const std::filesystem::path& path);

/// Equal-shape spectrograms stored one per row of a container, with a
/// sidecar index CSV `row,clip_path,n_mels,n_frames`.
struct FeatureSet {
  std::vector<std::string> clip_paths;
  std::vector<MelSpectrogram> specs;
};

void save_feature_set(const FeatureSet& set, const std::filesystem::path& bin_path);
FeatureSet load_feature_set(const std::filesystem::path& bin_path);
std::filesystem::path index_path_for(const std::filesystem::path& bin_path);

}  // namespace scatterbench::features
