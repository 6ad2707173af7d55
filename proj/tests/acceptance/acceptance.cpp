// Acceptance run: one PASS/FAIL line per criterion.
//
//   scatterbench_acceptance [--only 1,5,10] [--work DIR] [--jobs N]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "../support/oracles.hpp"
#include "scatterbench/cnn.hpp"
#include "scatterbench/eval.hpp"
#include "scatterbench/experiment.hpp"
#include "scatterbench/features.hpp"
#include "scatterbench/ingest.hpp"
#include "scatterbench/manifest.hpp"
#include "scatterbench/scatterlab.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/stimulus.hpp"
#include "scatterbench/text.hpp"
#include "scatterbench/train.hpp"

using namespace scatterbench;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

stimulus::StimulusSpec reference_sweep() { return {100.0, 24000.0, 5.0, 48000.0, 1.0, 0.0}; }

fs::path work_dir;
int jobs = 1;

// --- 1 ----------------------------------------------------------------------

Outcome stimulus_endpoints() {
  const auto s = reference_sweep();
  const auto t0 = Clock::now();
  const Waveform w = stimulus::generate_ess(s);
  const double elapsed = seconds_since(t0);
  // The waveform must be the sine of the closed-form phase, so the phase
  // derivative describes the generated samples.
  double max_dev = 0.0;
  for (std::size_t i = 0; i < w.size(); i += 7) {
    const double t = static_cast<double>(i) / s.sample_rate;
    max_dev = std::max(max_dev, std::abs(w[i] - s.amplitude * std::sin(stimulus::ess_phase(s, t))));
  }
  const double dt = 1.0 / s.sample_rate;
  const double f0 = (stimulus::ess_phase(s, dt) - stimulus::ess_phase(s, 0.0)) / dt / (2 * std::numbers::pi);
  const double f1 =
      (stimulus::ess_phase(s, s.duration) - stimulus::ess_phase(s, s.duration - dt)) / dt / (2 * std::numbers::pi);
  const double e0 = std::abs(f0 - s.f_start) / s.f_start, e1 = std::abs(f1 - s.f_end) / s.f_end;
  return {e0 <= 0.005 && e1 <= 0.005 && max_dev < 1e-9 && elapsed < 1.0,
          "f(0)=" + fmt(f0, 2) + " Hz (" + fmt(100 * e0, 3) + "%), f(T)=" + fmt(f1, 1) + " Hz (" + fmt(100 * e1, 3) +
              "%), generation " + fmt(elapsed, 3) + " s"};
}

// --- 2 ----------------------------------------------------------------------

Outcome deconvolution_round_trip() {
  const auto s = reference_sweep();
  const auto t0 = Clock::now();
  const Waveform sweep = stimulus::generate_ess(s);
  std::mt19937_64 rng(20);
  std::uniform_int_distribution<int> taps(1, 64);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst = 1.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> h(static_cast<std::size_t>(taps(rng)));
    for (double& v : h) v = g(rng);
    const Waveform rec = stimulus::convolve(sweep, Waveform(h, s.sample_rate));
    const auto r = stimulus::deconvolve_response(rec, s);
    const auto resp = r.response.samples();
    std::vector<double> prefix(resp.begin() + static_cast<long>(r.zero_lag_index),
                               resp.begin() + static_cast<long>(r.zero_lag_index + h.size()));
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < h.size(); ++i) {
      ab += prefix[i] * h[i];
      aa += prefix[i] * prefix[i];
      bb += h[i] * h[i];
    }
    worst = std::min(worst, ab / std::sqrt(aa * bb));
  }
  const double elapsed = seconds_since(t0);
  return {worst >= 0.99 && elapsed < 10.0, "worst correlation " + fmt(worst, 6) + " over 20 systems, " +
                                               fmt(elapsed, 2) + " s"};
}

// --- 3 ----------------------------------------------------------------------

double rel_l2(const Waveform& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

Outcome superposition() {
  const Waveform x = stimulus::generate_ess({100.0, 24000.0, 0.5, 48000.0, 1.0, 0.0});
  const auto profiles = scatterlab::default_profiles(0.8);
  double worst = 0.0;
  for (double wet : {0.0, 0.3}) {
    auto both = scatterlab::instantiate(profiles.at(HairType::MINAYO, Condition::cream), 11, 12, 48000.0);
    both.noise_snr_db = scatterlab::kNoNoise;
    both.reverb_wet = wet;
    auto direct = both;
    direct.scatter_gain = 0.0;
    // Room reflections of the stimulus never touch the object, so they
    // belong to the incident field.
    auto scatter = both;
    scatter.direct_gain = 0.0;
    scatter.reverb_wet = 0.0;
    const Waveform u = scatterlab::render_trial(both, x);
    const Waveform ui = scatterlab::render_trial(direct, x);
    const Waveform us = scatterlab::render_trial(scatter, x);
    std::vector<double> sum(u.size());
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = ui[i] + us[i];
    worst = std::max(worst, rel_l2(u, sum));
  }
  return {worst <= 1e-12, "relative L2 " + [&] {
            std::ostringstream os;
            os << worst;
            return os.str();
          }() + " (dry and reverberant scenes)"};
}

// --- 4 ----------------------------------------------------------------------

Outcome rt60_fidelity() {
  const double rate = 48000.0;
  std::vector<double> impulse(static_cast<std::size_t>(rate), 0.0);
  impulse[0] = 1.0;
  scatterlab::ScatterScene s;
  s.direct_gain = 0.0;
  s.scatter_gain = 0.0;
  s.reverb_rt60 = 0.5;
  s.reverb_wet = 1.0;
  s.seed = 4;
  const Waveform y = scatterlab::render_trial(s, Waveform(impulse, rate));
  const double rt = oracles::schroeder_rt60(y.samples(), rate);
  return {std::abs(rt - 0.5) <= 0.05, "Schroeder RT60 " + fmt(rt, 4) + " s for a 0.5 s target"};
}

// --- 5 ----------------------------------------------------------------------

Waveform delayed_noisy(const Waveform& x, long long k, double snr_db, std::uint64_t seed) {
  std::vector<double> y(x.size() + 13000, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) y[i + static_cast<std::size_t>(k)] = x[i];
  Rng rng(seed);
  const double sigma = rms(x.samples()) * std::pow(10.0, -snr_db / 20.0);
  for (double& v : y) v += sigma * standard_normal(rng);
  return Waveform(std::move(y), x.sample_rate());
}

Outcome alignment() {
  const Waveform ref = stimulus::generate_ess({100.0, 24000.0, 0.5, 48000.0, 1.0, 0.0});
  bool exact = true;
  for (long long k : {0LL, 777LL, 12345LL}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      exact = exact && ingest::align_offset(delayed_noisy(ref, k, 20.0, seed), ref).lag == k;
    }
  }
  int within = 0;
  const long long offsets[] = {0, 777, 12345};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const long long k = offsets[seed % 3];
    if (std::llabs(ingest::align_offset(delayed_noisy(ref, k, 0.0, 100 + seed), ref).lag - k) <= 1) ++within;
  }
  return {exact && within >= 19, std::string("20 dB exact: ") + (exact ? "yes" : "no") + ", 0 dB within 1 sample: " +
                                     std::to_string(within) + "/20"};
}

// --- 6 ----------------------------------------------------------------------

Outcome feature_shape() {
  features::FeatureConfig cfg;
  const Waveform clip = stimulus::generate_ess(reference_sweep());
  const auto spec = features::mel_spectrogram(clip, cfg);
  const auto norm = features::normalize(spec, 0.0, 0.5);
  double sum = 0, sq = 0;
  for (double v : norm.values.values) sum += v;
  const double n = static_cast<double>(norm.values.values.size()), mean = sum / n;
  for (double v : norm.values.values) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / n);
  // 1872 frames truncate to 1024; a 2 s clip (747 frames) pads up to 1024.
  const auto cut = features::pad_or_truncate(norm, 1024);
  bool prefix = cut.n_frames() == 1024;
  for (std::size_t r = 0; prefix && r < 40; ++r) {
    for (std::size_t c = 0; c < 1024; ++c) prefix = prefix && cut.values(r, c) == norm.values(r, c);
  }
  const auto short_spec = features::mel_spectrogram(stimulus::generate_ess({100.0, 24000.0, 2.0, 48000.0, 1.0, 0.0}), cfg);
  const auto padded = features::pad_or_truncate(short_spec, 1024);
  bool pad_ok = padded.n_frames() == 1024 && short_spec.n_frames() == 747;
  for (std::size_t r = 0; pad_ok && r < 40; ++r) {
    for (std::size_t c = 747; c < 1024; ++c) pad_ok = pad_ok && padded.values(r, c) == 0.0;
  }
  const bool shape = spec.n_mels() == 40 && spec.n_frames() == 1872;
  return {shape && std::abs(mean) <= 1e-9 && std::abs(sd - 0.5) <= 1e-9 && prefix && pad_ok,
          std::to_string(spec.n_mels()) + "x" + std::to_string(spec.n_frames()) + ", mean " + [&] {
            std::ostringstream os;
            os << mean << ", std-0.5 " << (sd - 0.5);
            return os.str();
          }() + ", 1024-frame pad/truncate " + (prefix && pad_ok ? "ok" : "wrong")};
}

// --- 7 ----------------------------------------------------------------------

Outcome gradient_check() {
  models::CnnConfig c;
  c.in_mels = 8;
  c.in_frames = 12;
  c.stem_channels = 4;
  c.blocks = {{4, 1}, {6, 2}};
  c.n_classes = 3;
  c.init_seed = 3;
  c.residual_init_scale = 1.0;
  const auto t0 = Clock::now();
  const double e64 = models::grad_check<double>(c, 11);
  const double e32 = models::grad_check<float>(c, 11);
  const double elapsed = seconds_since(t0);
  std::ostringstream os;
  os << c.parameter_count() << " parameters, 64-bit " << e64 << ", 32-bit " << e32 << ", " << fmt(elapsed, 2) << " s";
  return {c.parameter_count() <= 5000 && e64 < 1e-5 && e32 < 1e-3 && elapsed < 30.0, os.str()};
}

// --- 8 ----------------------------------------------------------------------

Outcome auc_oracle() {
  const auto hand = eval::roc_curve({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1});
  std::mt19937_64 rng(8);
  double worst = 0.0;
  int checked = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng() % 199;
    std::vector<double> s(n);
    std::vector<int> y(n);
    const int levels = 1 + static_cast<int>(rng() % 10);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % static_cast<std::uint64_t>(levels)) / levels;
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    const auto c = eval::roc_curve(s, y);
    worst = std::max(worst, std::abs(*c.auc - oracles::pair_counting_auc(s, y)));
    ++checked;
  }
  std::ostringstream os;
  os << "hand case " << hand.auc.value_or(-1) << ", max |trapezoid - pairs| " << worst << " over " << checked << " sets";
  return {hand.auc && std::abs(*hand.auc - 0.75) < 1e-12 && worst <= 1e-9, os.str()};
}

// --- 9 ----------------------------------------------------------------------

Outcome table1_structure() {
  const std::map<std::pair<std::string, std::string>, int> expected = {
      {{"dry", "A"}, 434},     {{"dry", "B"}, 511},     {{"dry", "MAMI"}, 468},     {{"dry", "MINAYO"}, 463},
      {{"shampoo", "A"}, 507}, {{"shampoo", "B"}, 526}, {{"shampoo", "MAMI"}, 508}, {{"shampoo", "MINAYO"}, 514},
      {{"cream", "A"}, 699},   {{"cream", "B"}, 704},   {{"cream", "MAMI"}, 709},   {{"cream", "MINAYO"}, 724}};
  const auto m = scatterlab::plan_corpus(scatterlab::table1_counts(), {}, work_dir / "table1");
  const auto cells = ingest::cell_counts(m);
  int matched = 0;
  for (const auto& [k, v] : expected) {
    const auto it = cells.find(k);
    if (it != cells.end() && it->second == v) ++matched;
  }
  return {matched == 12 && cells.size() == 12,
          std::to_string(matched) + "/12 cells match, " + std::to_string(m.entries.size()) + " clips"};
}

// --- 10 / 12 ----------------------------------------------------------------

json task1_config(const std::string& family, const fs::path& out) {
  json model = {{"family", family}};
  if (family == "cnn") model["cnn"] = {{"stem_channels", 8}, {"blocks", {{8, 1}, {16, 2}, {32, 2}}}};
  return {{"task", "hair_type_4class"},
          {"seed", 1},
          {"output_dir", out.string()},
          {"corpus",
           {{"clips_per_cell", 40}, {"rounds_per_condition", 6}, {"separation", 0.8}, {"snr_db", 20}, {"write_audio", false}}},
          {"model", model}};
}

experiment::RunResult run(const json& raw) {
  experiment::RunOptions opt;
  opt.jobs = jobs;
  return experiment::run_experiment(experiment::parse_config(raw, work_dir), opt);
}

Outcome surrogate_task1() {
  const auto t0 = Clock::now();
  const auto cnn = run(task1_config("cnn", work_dir / "task1-cnn"));
  const double t_cnn = seconds_since(t0);
  const auto gbt = run(task1_config("gbt", work_dir / "task1-gbt"));
  const double total = seconds_since(t0);
  const double acc = cnn.report.accuracy.mean, auc = cnn.report.auc_avg.mean, gacc = gbt.report.accuracy.mean;
  return {cnn.report.folds.size() == 6 && acc >= 0.90 && auc >= 0.95 && gacc >= 0.75 && total <= 900.0,
          "CNN accuracy " + eval::format_mean_std(cnn.report.accuracy, 3) + ", AUC " +
              eval::format_mean_std(cnn.report.auc_avg, 3) + "; GBT accuracy " +
              eval::format_mean_std(gbt.report.accuracy, 3) + "; " + fmt(t_cnn, 0) + " s + " + fmt(total - t_cnn, 0) +
              " s with " + std::to_string(jobs) + " worker(s)"};
}

Outcome determinism() {
  const fs::path first = work_dir / "task1-cnn" / "metrics.csv";
  if (!fs::exists(first)) run(task1_config("cnn", work_dir / "task1-cnn"));
  run(task1_config("cnn", work_dir / "task1-cnn-rerun"));
  const std::string a = text::read_file(first), b = text::read_file(work_dir / "task1-cnn-rerun" / "metrics.csv");
  return {!a.empty() && a == b, a == b ? "metrics.csv identical (" + std::to_string(a.size()) + " bytes)"
                                       : "metrics.csv differs"};
}

// --- 11 ---------------------------------------------------------------------

json task2_config(std::uint64_t seed, const fs::path& out, const json& corpus) {
  return {{"task", "hair_condition_3class"},
          {"seed", seed},
          {"output_dir", out.string()},
          {"corpus", corpus},
          {"model", {{"family", "cnn"}, {"cnn", {{"stem_channels", 8}, {"blocks", {{8, 1}, {16, 2}, {32, 2}}}}}}}};
}

bool same_bytes(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome finetune_ordering() {
  std::vector<double> partial, complete;
  bool frozen = true;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const fs::path a = work_dir / ("task2-partial-" + std::to_string(seed));
    const fs::path b = work_dir / ("task2-complete-" + std::to_string(seed));
    // Run A pretrains on dry hair types and renders the condition corpus;
    // run B starts from A's checkpoint on the same clips.
    json pa = task2_config(seed, a, {{"clips_per_cell", 20}, {"rounds_per_condition", 3}});
    pa["finetune"] = {{"strategy", "partial"},
                      {"pretrain_corpus", {{"clips_per_cell", 20}, {"rounds_per_condition", 6}, {"write_audio", false}}}};
    const auto ra = run(pa);
    json pb = task2_config(seed, b, {{"source", "manifest"}, {"manifest", (a / "corpus" / "manifest.csv").string()}});
    pb["finetune"] = {{"strategy", "complete"}, {"checkpoint", (a / "pretrain" / "model.ckpt").string()}};
    const auto rb = run(pb);
    partial.push_back(ra.report.accuracy.mean);
    complete.push_back(rb.report.accuracy.mean);
    per_seed << " " << fmt(ra.report.accuracy.mean, 3) << "/" << fmt(rb.report.accuracy.mean, 3);

    const auto pre = models::load_checkpoint(a / "pretrain" / "model.ckpt");
    const auto tuned = models::load_checkpoint(a / "folds" / "head_holdout" / "model.ckpt");
    for (std::size_t i = 0; i < pre.params().size(); ++i) {
      if (models::is_feature_extractor(pre.params()[i].name)) {
        frozen = frozen && same_bytes(pre.params()[i].value, tuned.params()[i].value);
      }
    }
    for (const auto& e : fs::directory_iterator(a / "corpus")) {
      if (e.is_directory()) fs::remove_all(e.path());
    }
  }
  const double mp = median(partial), mc = median(complete);
  return {mc >= mp && frozen, "median accuracy complete " + fmt(mc, 3) + " vs partial " + fmt(mp, 3) +
                                  " (partial/complete per seed:" + per_seed.str() + "); frozen parameters " +
                                  (frozen ? "byte-identical" : "CHANGED")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "scatterbench_acceptance").string();
  jobs = std::max(experiment::default_jobs(), static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--jobs", jobs);
  CLI11_PARSE(app, argc, argv);
  work_dir = work;
  fs::create_directories(work_dir);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, stimulus_endpoints}, {2, deconvolution_round_trip}, {3, superposition},   {4, rt60_fidelity},
      {5, alignment},          {6, feature_shape},            {7, gradient_check},  {8, auc_oracle},
      {9, table1_structure},   {10, surrogate_task1},         {11, finetune_ordering}, {12, determinism}};
  const std::set<int> wanted(only.begin(), only.end());
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << " [" << fmt(seconds_since(t0), 1)
              << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
