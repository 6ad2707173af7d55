#include "scatterbench/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <sstream>

#include "scatterbench/binio.hpp"
#include "scatterbench/fft.hpp"
#include "scatterbench/text.hpp"

namespace scatterbench::features {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr char kMagic[8] = {'S', 'B', 'M', 'A', 'T', 'R', 'X', '\0'};
constexpr std::uint32_t kDtypeF32 = 1;

void require(bool ok, const std::string& what) {
  if (!ok) throw SpecError("invalid feature config: " + what);
}

}  // namespace

void FeatureConfig::validate(double sample_rate) const {
  require(n_fft >= 2, "n_fft >= 2");
  require(hop >= 1, "hop >= 1");
  require(hop <= n_fft, "hop <= n_fft");
  require(n_mels >= 1, "n_mels >= 1");
  require(f_low >= 0.0, "f_low >= 0");
  require(f_low < upper_hz(sample_rate), "f_low < f_high");
  require(upper_hz(sample_rate) <= sample_rate / 2.0, "f_high <= sample_rate / 2");
  require(log_floor > 0.0, "log_floor > 0");
  require(!target_frames || *target_frames >= 1, "target_frames >= 1");
  require(norm_std > 0.0, "norm_std > 0");
  require(time_pool >= 1, "time_pool >= 1");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_centres(const FeatureConfig& cfg, double sample_rate) {
  const double lo = hz_to_mel(cfg.f_low), hi = hz_to_mel(cfg.upper_hz(sample_rate));
  std::vector<double> c(cfg.n_mels);
  if (cfg.n_mels == 1) {
    c[0] = mel_to_hz(0.5 * (lo + hi));
    return c;
  }
  const double step = (hi - lo) / static_cast<double>(cfg.n_mels - 1);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) c[m] = mel_to_hz(lo + step * static_cast<double>(m));
  return c;
}

Matrix mel_filterbank(const FeatureConfig& cfg, double sample_rate) {
  cfg.validate(sample_rate);
  const double lo = hz_to_mel(cfg.f_low), hi = hz_to_mel(cfg.upper_hz(sample_rate));
  const double step = cfg.n_mels == 1 ? (hi - lo) / 2.0 : (hi - lo) / static_cast<double>(cfg.n_mels - 1);
  const double first = cfg.n_mels == 1 ? lo + step : lo;
  const std::size_t n_bins = cfg.n_fft / 2 + 1;
  Matrix fb(cfg.n_mels, n_bins);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double centre = first + step * static_cast<double>(m);
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double hz = static_cast<double>(k) * sample_rate / static_cast<double>(cfg.n_fft);
      if (hz < cfg.f_low || hz > cfg.upper_hz(sample_rate)) continue;
      const double d = std::abs(hz_to_mel(hz) - centre) / step;
      if (d < 1.0) fb(m, k) = 1.0 - d;
    }
  }
  return fb;
}

MelSpectrogram mel_spectrogram(const Waveform& clip, const FeatureConfig& cfg) {
  const double fs = clip.sample_rate();
  cfg.validate(fs);
  const std::size_t n_frames = frame_count(clip.size(), cfg.n_fft, cfg.hop);
  if (n_frames == 0) {
    throw InputTooShortError("clip of " + std::to_string(clip.size()) +
                             " samples is shorter than one " + std::to_string(cfg.n_fft) +
                             "-sample frame");
  }
  const Matrix fb = mel_filterbank(cfg, fs);
  const std::size_t n_bins = cfg.n_fft / 2 + 1;
  // Nonzero span of each filter.
  std::vector<std::pair<std::size_t, std::size_t>> span(cfg.n_mels, {0, 0});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    std::size_t a = n_bins, b = 0;
    for (std::size_t k = 0; k < n_bins; ++k) {
      if (fb(m, k) > 0.0) {
        a = std::min(a, k);
        b = k + 1;
      }
    }
    span[m] = a < b ? std::make_pair(a, b) : std::make_pair(std::size_t{0}, std::size_t{0});
  }
  std::vector<double> window(cfg.n_fft);
  for (std::size_t i = 0; i < cfg.n_fft; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(cfg.n_fft));
  }
  MelSpectrogram out{Matrix(cfg.n_mels, n_frames)};
  std::vector<double> frame(cfg.n_fft), power(n_bins);
  const auto x = clip.samples();
  for (std::size_t t = 0; t < n_frames; ++t) {
    const std::size_t off = t * cfg.hop;
    for (std::size_t i = 0; i < cfg.n_fft; ++i) frame[i] = x[off + i] * window[i];
    const auto spec = fft::rfft(frame, cfg.n_fft);
    for (std::size_t k = 0; k < n_bins; ++k) power[k] = std::norm(spec[k]);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double acc = 0.0;
      for (std::size_t k = span[m].first; k < span[m].second; ++k) acc += fb(m, k) * power[k];
      out.values(m, t) = std::log(std::max(acc, cfg.log_floor));
    }
  }
  return out;
}

MelSpectrogram normalize(const MelSpectrogram& spec, double mean, double std) {
  const auto& v = spec.values.values;
  MelSpectrogram out = spec;
  if (v.empty()) return out;
  const double n = static_cast<double>(v.size());
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  const double sd = std::sqrt(var / n);
  auto& o = out.values.values;
  if (sd < 1e-12) {
    std::fill(o.begin(), o.end(), mean);
    return out;
  }
  const double scale = std / sd;
  for (double& x : o) x = mean + (x - mu) * scale;
  return out;
}

MelSpectrogram pad_or_truncate(const MelSpectrogram& spec, std::size_t target_frames,
                               double pad_value) {
  if (target_frames == 0) throw UsageError("pad_or_truncate: target_frames must be >= 1");
  MelSpectrogram out{Matrix(spec.n_mels(), target_frames, pad_value)};
  const std::size_t keep = std::min(target_frames, spec.n_frames());
  for (std::size_t m = 0; m < spec.n_mels(); ++m) {
    for (std::size_t t = 0; t < keep; ++t) out.values(m, t) = spec.values(m, t);
  }
  return out;
}

MelSpectrogram time_pool(const MelSpectrogram& spec, std::size_t factor) {
  if (factor == 0) throw UsageError("time_pool: factor must be >= 1");
  if (factor == 1) return spec;
  const std::size_t n_out = (spec.n_frames() + factor - 1) / factor;
  MelSpectrogram out{Matrix(spec.n_mels(), n_out)};
  for (std::size_t m = 0; m < spec.n_mels(); ++m) {
    for (std::size_t j = 0; j < n_out; ++j) {
      const std::size_t a = j * factor, b = std::min(spec.n_frames(), a + factor);
      double acc = 0.0;
      for (std::size_t t = a; t < b; ++t) acc += spec.values(m, t);
      out.values(m, j) = acc / static_cast<double>(b - a);
    }
  }
  return out;
}

MelSpectrogram prepare(const Waveform& clip, const FeatureConfig& cfg) {
  auto spec = normalize(mel_spectrogram(clip, cfg), cfg.norm_mean, cfg.norm_std);
  if (cfg.target_frames) spec = pad_or_truncate(spec, *cfg.target_frames, cfg.norm_mean);
  return time_pool(spec, cfg.time_pool);
}

EmbeddingVector embed_stats(const MelSpectrogram& spec) {
  const std::size_t n_mels = spec.n_mels();
  if (n_mels != 40) throw ShapeError("embed_stats: expected 40 mel bands, got " + std::to_string(n_mels));
  if (spec.n_frames() == 0) throw ShapeError("embed_stats: empty spectrogram");
  const auto& v = spec.values;
  std::size_t active = spec.n_frames();
  while (active > 1) {
    bool zero = true;
    for (std::size_t m = 0; m < n_mels && zero; ++m) zero = v(m, active - 1) == 0.0;
    if (!zero) break;
    --active;
  }
  const double na = static_cast<double>(active);
  std::vector<double> e(kEmbeddingDim, 0.0);
  double gsum = 0, gsq = 0, gmin = v(0, 0), gmax = v(0, 0);
  for (std::size_t m = 0; m < n_mels; ++m) {
    double s = 0, sq = 0, d = 0;
    for (std::size_t t = 0; t < active; ++t) {
      const double x = v(m, t);
      s += x;
      sq += x * x;
      gmin = std::min(gmin, x);
      gmax = std::max(gmax, x);
      if (t > 0) d += std::abs(x - v(m, t - 1));
    }
    const double mu = s / na;
    e[m] = mu;
    e[40 + m] = std::sqrt(std::max(0.0, sq / na - mu * mu));
    e[80 + m] = active > 1 ? d / (na - 1.0) : 0.0;
    gsum += s;
    gsq += sq;
  }
  const double n = na * static_cast<double>(n_mels);
  const double gmu = gsum / n;
  double frame_max = 0, frame_std = 0, centroid = 0;
  for (std::size_t t = 0; t < active; ++t) {
    double mx = v(0, t), mn = v(0, t), s = 0, sq = 0;
    for (std::size_t m = 0; m < n_mels; ++m) {
      const double x = v(m, t);
      mx = std::max(mx, x);
      mn = std::min(mn, x);
      s += x;
      sq += x * x;
    }
    const double mu = s / static_cast<double>(n_mels);
    frame_max += mx;
    frame_std += std::sqrt(std::max(0.0, sq / static_cast<double>(n_mels) - mu * mu));
    double w = 0, wi = 0;
    for (std::size_t m = 0; m < n_mels; ++m) {
      const double x = v(m, t) - mn;
      w += x;
      wi += x * static_cast<double>(m);
    }
    centroid += w > 0 ? wi / w : 0.5 * static_cast<double>(n_mels - 1);
  }
  e[120] = gmu;
  e[121] = std::sqrt(std::max(0.0, gsq / n - gmu * gmu));
  e[122] = gmin;
  e[123] = gmax;
  e[124] = frame_max / na;
  e[125] = frame_std / na;
  e[126] = centroid / na;
  e[127] = na / static_cast<double>(spec.n_frames());
  return {std::move(e), kStatsExtractor};
}

std::vector<LabeledEmbedding> load_external_embeddings(const std::filesystem::path& path) {
  const auto lines = text::read_lines(path);
  std::vector<LabeledEmbedding> out;
  std::size_t dim = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = text::split_csv(lines[i]);
    if (out.empty() && dim == 0 && f[0] == "clip_path") {
      dim = f.size() - 1;
      continue;
    }
    const std::string where = path.string() + " row " + std::to_string(i + 1);
    if (f.size() < 2) throw FormatError(where + ": no embedding values");
    if (dim == 0) dim = f.size() - 1;
    if (f.size() - 1 != dim) {
      throw FormatError(where + ": expected " + std::to_string(dim) + " values, found " +
                        std::to_string(f.size() - 1));
    }
    LabeledEmbedding le{f[0], {std::vector<double>(dim), "external"}};
    for (std::size_t k = 0; k < dim; ++k) le.embedding.values[k] = text::parse_double(f[k + 1], where);
    out.push_back(std::move(le));
  }
  return out;
}

void save_embeddings(const std::vector<LabeledEmbedding>& set, const std::filesystem::path& path) {
  std::ostringstream os;
  const std::size_t dim = set.empty() ? kEmbeddingDim : set.front().embedding.values.size();
  os << "clip_path";
  for (std::size_t k = 0; k < dim; ++k) os << ",e" << k;
  os << '\n';
  for (const auto& le : set) {
    if (le.embedding.values.size() != dim) throw ShapeError("save_embeddings: ragged dimensions");
    os << le.clip_path;
    for (double x : le.embedding.values) os << ',' << text::format_double(x);
    os << '\n';
  }
  text::write_file(path, os.str());
}

void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  binio::Writer w(path);
  w.put_bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kDtypeF32);
  w.put<std::uint64_t>(m.rows);
  w.put<std::uint64_t>(m.cols);
  std::vector<float> payload(m.values.begin(), m.values.end());
  w.put_bytes(payload.data(), payload.size() * sizeof(float));
  w.close();
}

Matrix read_matrix(const std::filesystem::path& path) {
  binio::Reader r(path);
  char magic[8];
  r.get_bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError("not a matrix container: " + path.string());
  }
  if (r.get<std::uint32_t>() != kDtypeF32) throw FormatError("unsupported dtype in " + path.string());
  const auto rows = r.get<std::uint64_t>();
  const auto cols = r.get<std::uint64_t>();
  const auto expect = std::filesystem::file_size(path);
  if (rows * cols * sizeof(float) + 28 != expect) {
    throw FormatError("matrix payload size mismatch in " + path.string());
  }
  std::vector<float> payload(rows * cols);
  r.get_bytes(payload.data(), payload.size() * sizeof(float));
  Matrix m;
  m.rows = rows;
  m.cols = cols;
  m.values.assign(payload.begin(), payload.end());
  return m;
}

std::filesystem::path index_path_for(const std::filesystem::path& bin_path) {
  auto p = bin_path;
  p.replace_extension(".index.csv");
  return p;
}

void save_feature_set(const FeatureSet& set, const std::filesystem::path& bin_path) {
  if (set.clip_paths.size() != set.specs.size()) throw ShapeError("feature set: path/spec count mismatch");
  const std::size_t n_mels = set.specs.empty() ? 0 : set.specs[0].n_mels();
  const std::size_t n_frames = set.specs.empty() ? 0 : set.specs[0].n_frames();
  Matrix all(set.specs.size(), n_mels * n_frames);
  std::ostringstream idx;
  idx << "row,clip_path,n_mels,n_frames\n";
  for (std::size_t i = 0; i < set.specs.size(); ++i) {
    const auto& s = set.specs[i];
    if (s.n_mels() != n_mels || s.n_frames() != n_frames) {
      throw ShapeError("feature set: clip " + set.clip_paths[i] + " has shape " +
                       std::to_string(s.n_mels()) + "x" + std::to_string(s.n_frames()) +
                       ", expected " + std::to_string(n_mels) + "x" + std::to_string(n_frames));
    }
    std::copy(s.values.values.begin(), s.values.values.end(),
              all.values.begin() + static_cast<std::ptrdiff_t>(i * n_mels * n_frames));
    idx << i << ',' << set.clip_paths[i] << ',' << n_mels << ',' << n_frames << '\n';
  }
  write_matrix(bin_path, all);
  text::write_file(index_path_for(bin_path), idx.str());
}

FeatureSet load_feature_set(const std::filesystem::path& bin_path) {
  const Matrix all = read_matrix(bin_path);
  const auto lines = text::read_lines(index_path_for(bin_path));
  FeatureSet set;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = text::split_csv(lines[i]);
    const std::string where = "feature index row " + std::to_string(i + 1);
    if (f.size() != 4) throw FormatError(where + ": expected 4 fields");
    const auto row = static_cast<std::size_t>(text::parse_int(f[0], where));
    const auto n_mels = static_cast<std::size_t>(text::parse_int(f[2], where));
    const auto n_frames = static_cast<std::size_t>(text::parse_int(f[3], where));
    if (row >= all.rows || n_mels * n_frames != all.cols) throw FormatError(where + ": out of range");
    MelSpectrogram s{Matrix(n_mels, n_frames)};
    std::copy_n(all.values.begin() + static_cast<std::ptrdiff_t>(row * all.cols), all.cols,
                s.values.values.begin());
    set.clip_paths.push_back(f[1]);
    set.specs.push_back(std::move(s));
  }
  if (set.specs.size() != all.rows) throw FormatError("feature index does not cover every row");
  return set;
}

}  // namespace scatterbench::features
