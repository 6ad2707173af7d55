// scatterbench command-line entry point.

#include <CLI11.hpp>

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "scatterbench/experiment.hpp"
#include "scatterbench/ingest.hpp"
#include "scatterbench/labels.hpp"
#include "scatterbench/manifest.hpp"
#include "scatterbench/scatterlab.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/stimulus.hpp"
#include "scatterbench/text.hpp"
#include "scatterbench/wav_io.hpp"

namespace fs = std::filesystem;
using namespace scatterbench;
using nlohmann::json;

namespace {

struct Action {
  std::string stage;
  std::function<void()> run;
};

Action chosen;

void on_select(CLI::App* sub, std::string stage, std::function<void()> fn) {
  sub->callback([stage = std::move(stage), fn = std::move(fn)] { chosen = {stage, fn}; });
}

// --- shared option groups ----------------------------------------------------

void add_sweep_options(CLI::App* sub, stimulus::StimulusSpec& s) {
  sub->add_option("--f1", s.f_start, "Start frequency (Hz)")->capture_default_str();
  sub->add_option("--f2", s.f_end, "End frequency (Hz)")->capture_default_str();
  sub->add_option("--dur", s.duration, "Sweep duration (s)")->capture_default_str();
  sub->add_option("--rate", s.sample_rate, "Sample rate (Hz)")->capture_default_str();
  sub->add_option("--amp", s.amplitude, "Peak amplitude")->capture_default_str();
  sub->add_option("--fade-ms", s.fade_ms, "Raised-cosine fade at both ends (ms)")->capture_default_str();
}

void add_feature_options(CLI::App* sub, features::FeatureConfig& f, experiment::IngestSpec& in) {
  f.time_pool = 16;
  sub->add_option("--n-fft", f.n_fft)->capture_default_str();
  sub->add_option("--hop", f.hop)->capture_default_str();
  sub->add_option("--n-mels", f.n_mels)->capture_default_str();
  sub->add_option("--f-low", f.f_low)->capture_default_str();
  sub->add_option("--f-high", f.f_high, "0 means Nyquist")->capture_default_str();
  sub->add_option("--time-pool", f.time_pool)->capture_default_str();
  sub->add_option_function<std::size_t>("--target-frames", [&f](std::size_t n) { f.target_frames = n; },
                                         "Pad or truncate to this many frames");
  sub->add_option("--target-rate", in.target_rate, "Resample clips to this rate")->capture_default_str();
  sub->add_flag("--trim", in.trim_silence, "Trim leading and trailing silence");
  sub->add_option("--trim-db", in.trim_threshold_db)->capture_default_str();
}

struct CnnFlags {
  std::size_t stem_channels = 22;
  std::string blocks = "22:1,44:2,88:2";
  models::TrainConfig train;
  std::string optimizer = "sgd";
  double dev_fraction = 0.2;
};

void add_training_options(CLI::App* sub, CnnFlags& c, bool architecture) {
  if (architecture) {
    sub->add_option("--stem-channels", c.stem_channels)->capture_default_str();
    sub->add_option("--blocks", c.blocks, "Residual blocks as channels:stride,...")->capture_default_str();
  }
  sub->add_option("--epochs", c.train.max_epochs)->capture_default_str();
  sub->add_option("--batch", c.train.batch_size)->capture_default_str();
  sub->add_option("--lr", c.train.learning_rate)->capture_default_str();
  sub->add_option("--optimizer", c.optimizer)->check(CLI::IsMember({"sgd", "adam"}))->capture_default_str();
  sub->add_option("--patience", c.train.patience)->capture_default_str();
  sub->add_option("--dev-fraction", c.dev_fraction, "Stratified dev share of the clips")->capture_default_str();
  sub->add_option("--seed", c.train.seed)->capture_default_str();
}

models::CnnConfig cnn_from_flags(const CnnFlags& c) {
  models::CnnConfig cfg;
  cfg.stem_channels = c.stem_channels;
  cfg.blocks.clear();
  for (const auto& part : text::split_csv(c.blocks)) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) throw UsageError("--blocks expects channels:stride pairs, got '" + part + "'");
    cfg.blocks.push_back({static_cast<std::size_t>(text::parse_int(part.substr(0, colon), "--blocks channels")),
                          static_cast<std::size_t>(text::parse_int(part.substr(colon + 1), "--blocks stride"))});
  }
  return cfg;
}

int jobs_default() { return experiment::default_jobs(); }

// --- labeled data ------------------------------------------------------------

struct Labeled {
  std::vector<std::string> clip_paths;
  std::vector<int> labels;
};

Labeled label_clips(const std::vector<std::string>& clip_paths, const fs::path& manifest_path, eval::Task task) {
  const auto m = ingest::load_manifest(manifest_path);
  std::map<std::string, const ingest::ManifestEntry*> by_path;
  for (const auto& e : m.entries) by_path[e.clip_path] = &e;
  Labeled out;
  for (const auto& p : clip_paths) {
    const auto it = by_path.find(p);
    if (it == by_path.end()) throw LabelError("clip " + p + " is not in the manifest");
    out.clip_paths.push_back(p);
    out.labels.push_back(eval::label_of(*it->second, task));
  }
  return out;
}

models::SpecDataset take(const features::FeatureSet& fs_in, const std::vector<int>& labels,
                         const std::vector<std::size_t>& idx) {
  models::SpecDataset d;
  for (std::size_t i : idx) {
    d.specs.push_back(fs_in.specs[i]);
    d.labels.push_back(labels[i]);
  }
  return d;
}

fs::path history_path_for(const fs::path& model) {
  fs::path h = model;
  h.replace_extension(".history.csv");
  return h;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

models::FeatureRows embedding_rows(const std::vector<features::LabeledEmbedding>& set, std::vector<std::string>& paths) {
  models::FeatureRows rows;
  for (const auto& e : set) {
    rows.push_back(e.embedding.values);
    paths.push_back(e.clip_path);
  }
  return rows;
}

void write_report(const eval::PredictionSet& p, const std::vector<std::string>& names, const std::string& task,
                  const std::string& model, const fs::path& out) {
  const auto fm = eval::fold_metrics("all", p);
  const auto report = eval::aggregate_report(task, model, names, {fm}, p);
  eval::export_report(report, out);
  std::cout << eval::summary_table({report});
}

/// Rebuilds the fold rows of a metrics.csv into a report (no ROC curves).
eval::ExperimentReport report_from_metrics(const fs::path& path) {
  const auto rows = eval::read_metrics_csv(path);
  eval::ExperimentReport r;
  std::vector<eval::FoldMetrics> folds;
  auto value = [](const std::string& s) {
    return s == "NA" ? std::optional<double>{} : std::optional<double>{text::parse_double(s, "metrics.csv")};
  };
  for (const auto& row : rows) {
    std::map<std::string, std::string> cols(row.begin(), row.end());
    if (cols["fold"] == "mean" || cols["fold"] == "std") continue;
    r.task = cols["task"];
    r.model = cols["model"];
    eval::FoldMetrics f;
    f.fold = cols["fold"];
    f.accuracy = value(cols["accuracy"]).value_or(0.0);
    f.macro_f1 = value(cols["macro_f1"]).value_or(0.0);
    f.auc_avg = value(cols["auc_avg"]).value_or(std::nan(""));
    if (r.class_names.empty()) {
      for (const auto& [k, v] : row) {
        if (k.rfind("auc_", 0) == 0 && k != "auc_avg") r.class_names.push_back(k.substr(4));
      }
    }
    for (const auto& c : r.class_names) f.auc.push_back(value(cols["auc_" + c]));
    folds.push_back(f);
  }
  if (folds.empty()) throw FormatError(path.string() + ": no fold rows");
  std::vector<double> acc, f1, auc;
  for (const auto& f : folds) {
    acc.push_back(f.accuracy);
    f1.push_back(f.macro_f1);
    auc.push_back(f.auc_avg);
  }
  r.accuracy = eval::summarize(acc);
  r.macro_f1 = eval::summarize(f1);
  r.auc_avg = eval::summarize(auc);
  r.folds = folds;
  return r;
}

// --- subcommands -------------------------------------------------------------

void add_stimulus(CLI::App& app) {
  auto* cmd = app.add_subcommand("stimulus", "Exponential sine sweeps and deconvolution");
  cmd->require_subcommand(1);

  auto spec = std::make_shared<stimulus::StimulusSpec>();
  auto out = std::make_shared<std::string>();
  auto* ess = cmd->add_subcommand("ess", "Write a sweep to a WAV file");
  add_sweep_options(ess, *spec);
  ess->add_option("--out", *out)->required();
  on_select(ess, "stimulus", [spec, out] {
    spec->validate();
    write_wav(*out, stimulus::generate_ess(*spec));
  });

  auto dspec = std::make_shared<stimulus::StimulusSpec>();
  auto rec = std::make_shared<std::string>();
  auto dout = std::make_shared<std::string>();
  auto* deconv = cmd->add_subcommand("deconv", "Recover an impulse response from a sweep recording");
  add_sweep_options(deconv, *dspec);
  deconv->add_option("--rec", *rec)->required();
  deconv->add_option("--out", *dout)->required();
  on_select(deconv, "stimulus", [dspec, rec, dout] {
    dspec->validate();
    write_wav(*dout, stimulus::deconvolve_ir(read_wav(*rec), *dspec));
  });
}

void add_scatterlab(CLI::App& app) {
  auto* cmd = app.add_subcommand("scatterlab", "Synthetic scattering recordings");
  cmd->require_subcommand(1);

  struct Synth {
    std::string profile = "default", preset = "table1", out;
    double separation = 0.8;
    std::optional<double> snr;
    int clips_per_cell = 40, rounds = 6, jobs = jobs_default();
    std::vector<std::string> conditions{"dry", "shampoo", "cream"};
    std::uint64_t seed = 7;
    stimulus::StimulusSpec stimulus;
    bool plan_only = false;
  };
  auto s = std::make_shared<Synth>();
  auto* synth = cmd->add_subcommand("synth", "Render a labeled corpus and its manifest");
  synth->add_option("--profile", s->profile)->check(CLI::IsMember({"default"}))->capture_default_str();
  synth->add_option("--separation", s->separation)->capture_default_str();
  synth->add_option("--preset", s->preset)->check(CLI::IsMember({"table1", "uniform"}))->capture_default_str();
  synth->add_option("--clips-per-cell", s->clips_per_cell, "uniform preset")->capture_default_str();
  synth->add_option("--rounds", s->rounds, "uniform preset: rounds per condition")->capture_default_str();
  synth->add_option("--conditions", s->conditions)->delimiter(',')->capture_default_str();
  synth->add_option_function<double>("--snr", [s](double v) { s->snr = v; }, "Override every profile's SNR (dB)");
  synth->add_option("--seed", s->seed)->capture_default_str();
  synth->add_option("--jobs", s->jobs)->capture_default_str();
  synth->add_flag("--plan-only", s->plan_only, "Write the manifest without rendering audio");
  add_sweep_options(synth, s->stimulus);
  synth->add_option("--out", s->out)->required();
  on_select(synth, "scatterlab", [s] {
    experiment::CorpusSpec c;
    c.preset = s->preset;
    c.clips_per_cell = s->clips_per_cell;
    c.rounds_per_condition = s->rounds;
    c.conditions = s->conditions;
    c.separation = s->separation;
    c.snr_db = s->snr;
    c.stimulus = s->stimulus;
    c.write_audio = !s->plan_only;
    const auto m = experiment::materialize_corpus(c, s->seed, s->out, s->jobs);
    std::cout << m.entries.size() << " clips, manifest " << (fs::path(s->out) / "manifest.csv").string() << "\n";
  });

  struct Session {
    std::string head = "A", condition = "dry", out, truth;
    double separation = 0.8;
    std::optional<double> snr;
    scatterlab::SessionPlan plan;
    stimulus::StimulusSpec stimulus;
  };
  auto r = std::make_shared<Session>();
  r->plan.trials_per_sample = 10;
  auto* session = cmd->add_subcommand("session", "Render one long session recording with known trial onsets");
  session->add_option("--head", r->head)->capture_default_str();
  session->add_option("--condition", r->condition)->capture_default_str();
  session->add_option("--separation", r->separation)->capture_default_str();
  session->add_option_function<double>("--snr", [r](double v) { r->snr = v; });
  session->add_option("--trials", r->plan.trials_per_sample)->capture_default_str();
  session->add_option("--gap-min", r->plan.gap_min)->capture_default_str();
  session->add_option("--gap-max", r->plan.gap_max)->capture_default_str();
  session->add_option("--seed", r->plan.seed)->capture_default_str();
  add_sweep_options(session, r->stimulus);
  session->add_option("--out", r->out)->required();
  session->add_option("--truth", r->truth, "Write the onsets (one sample index per line)");
  on_select(session, "scatterlab", [r] {
    const auto head = parse_hair_type(r->head);
    const auto cond = parse_condition(r->condition);
    if (!head) throw UsageError("unknown head '" + r->head + "'");
    if (!cond) throw UsageError("unknown condition '" + r->condition + "'");
    auto profile = scatterlab::default_profiles(r->separation).at(*head, *cond);
    if (r->snr) profile.noise_snr_db = *r->snr;
    r->plan.trial_duration = r->stimulus.duration;
    r->plan.validate();
    const auto sess = scatterlab::render_session(profile, r->plan, stimulus::generate_ess(r->stimulus));
    write_wav(r->out, sess.recording);
    if (!r->truth.empty()) {
      std::ostringstream os;
      os << "onset\n";
      for (auto o : sess.onsets) os << o << "\n";
      text::write_file(r->truth, os.str());
    }
  });
}

std::vector<std::size_t> read_onsets(const fs::path& path) {
  std::vector<std::size_t> out;
  for (const auto& line : text::read_lines(path)) {
    if (line.empty() || line == "onset") continue;
    out.push_back(static_cast<std::size_t>(text::parse_int(line, "onset")));
  }
  return out;
}

void add_ingest(CLI::App& app) {
  auto* cmd = app.add_subcommand("ingest", "Alignment, segmentation and manifests");
  cmd->require_subcommand(1);

  auto a = std::make_shared<std::pair<std::string, std::string>>();
  auto* align = cmd->add_subcommand("align", "Lag of a reference inside a recording");
  align->add_option("--rec", a->first)->required();
  align->add_option("--ref", a->second)->required();
  on_select(align, "ingest", [a] {
    const auto r = ingest::align_offset(read_wav(a->first), read_wav(a->second));
    std::cout << "lag=" << r.lag << " peak_correlation=" << text::format_double(r.peak_correlation) << "\n";
  });

  struct Segment {
    std::string rec, onsets = "truth", truth, ref, out;
    std::size_t count = 0;
    double duration = 5.0, trim_db = ingest::kDefaultTrimThresholdDb;
    bool trim = false;
  };
  auto s = std::make_shared<Segment>();
  auto* segment = cmd->add_subcommand("segment", "Cut a session recording into trial clips");
  segment->add_option("--rec", s->rec)->required();
  segment->add_option("--onsets", s->onsets)->check(CLI::IsMember({"truth", "xcorr"}))->capture_default_str();
  segment->add_option("--truth", s->truth, "Onset file for --onsets truth");
  segment->add_option("--ref", s->ref, "Stimulus WAV for --onsets xcorr");
  segment->add_option("--count", s->count, "Trials to locate for --onsets xcorr");
  segment->add_option("--dur", s->duration)->capture_default_str();
  segment->add_flag("--trim", s->trim);
  segment->add_option("--trim-db", s->trim_db)->capture_default_str();
  segment->add_option("--out", s->out)->required();
  on_select(segment, "ingest", [s] {
    const Waveform rec = read_wav(s->rec);
    std::vector<std::size_t> onsets;
    if (s->onsets == "truth") {
      if (s->truth.empty()) throw UsageError("--onsets truth needs --truth");
      onsets = read_onsets(s->truth);
    } else {
      if (s->ref.empty() || s->count == 0) throw UsageError("--onsets xcorr needs --ref and --count");
      onsets = ingest::detect_onsets(rec, read_wav(s->ref), s->count);
    }
    const auto clips = ingest::segment_trials(rec, onsets, s->duration);
    fs::create_directories(s->out);
    for (std::size_t i = 0; i < clips.size(); ++i) {
      const Waveform c = s->trim ? ingest::trim_silence(clips[i], s->trim_db) : clips[i];
      write_wav(fs::path(s->out) / ("clip_" + std::to_string(i) + ".wav"), c);
    }
    std::cout << clips.size() << " clips\n";
  });

  struct Manifest {
    std::string root, out, mapping;
    bool check = false;
  };
  auto m = std::make_shared<Manifest>();
  auto* manifest = cmd->add_subcommand("manifest", "Scan <condition>/<head>/<round>/*.wav into a manifest");
  manifest->add_option("--root", m->root)->required();
  manifest->add_option("--out", m->out, "Defaults to <root>/manifest.csv");
  manifest->add_option("--mapping", m->mapping, "CSV mapping head ids to hair types");
  manifest->add_flag("--check", m->check, "Validate an existing manifest instead");
  on_select(manifest, "ingest", [m] {
    const fs::path out = m->out.empty() ? fs::path(m->root) / "manifest.csv" : fs::path(m->out);
    if (m->check) {
      const auto issues = ingest::manifest_issues(ingest::load_manifest(out), true);
      for (const auto& i : issues) std::cout << i << "\n";
      if (!issues.empty()) throw ValidationError(std::to_string(issues.size()) + " manifest issues");
      return;
    }
    ingest::LabelingRule rule;
    if (!m->mapping.empty()) rule.mapping_file = m->mapping;
    const auto built = ingest::build_manifest(m->root, rule);
    ingest::save_manifest(built, out);
    std::cout << built.entries.size() << " clips\n";
  });
}

void add_featurize(CLI::App& app) {
  struct Featurize {
    std::string manifest, out, embeddings;
    features::FeatureConfig feat;
    experiment::IngestSpec ingest;
    int jobs = jobs_default();
  };
  auto f = std::make_shared<Featurize>();
  auto* cmd = app.add_subcommand("featurize", "Log-mel spectrograms (and stats embeddings) for a manifest");
  cmd->add_option("--manifest", f->manifest)->required();
  cmd->add_option("--out", f->out, "Feature container (.bin)")->required();
  cmd->add_option("--embeddings", f->embeddings, "Also write stats128 embeddings to this CSV");
  add_feature_options(cmd, f->feat, f->ingest);
  cmd->add_option("--jobs", f->jobs)->capture_default_str();
  on_select(cmd, "featurize", [f] {
    const auto m = ingest::load_manifest(f->manifest);
    const auto specs = experiment::featurize_manifest(m, f->ingest, f->feat, f->jobs);
    features::FeatureSet set;
    for (const auto& e : m.entries) set.clip_paths.push_back(e.clip_path);
    set.specs = specs;
    features::save_feature_set(set, f->out);
    if (!f->embeddings.empty()) {
      std::vector<features::LabeledEmbedding> emb;
      for (std::size_t i = 0; i < specs.size(); ++i) emb.push_back({set.clip_paths[i], features::embed_stats(specs[i])});
      features::save_embeddings(emb, f->embeddings);
    }
    std::cout << specs.size() << " clips, " << specs.front().n_mels() << "x" << specs.front().n_frames() << "\n";
  });
}

struct TrainJob {
  std::string features, manifest, task = "hair_type_4class", out, checkpoint, strategy = "partial";
  CnnFlags cnn;
  int jobs = jobs_default();
};

void run_train(const TrainJob& j, bool tuning) {
  const auto task = eval::parse_task(j.task);
  const auto set = features::load_feature_set(j.features);
  if (set.specs.empty()) throw ConfigError("feature set is empty");
  const auto lab = label_clips(set.clip_paths, j.manifest, task);
  std::vector<std::size_t> tr, dv;
  eval::stratified_dev_split(iota(set.specs.size()), lab.labels, j.cnn.dev_fraction, derive_seed(j.cnn.train.seed, "split"),
                             tr, dv);
  auto t = j.cnn.train;
  t.optimizer = models::parse_optimizer(j.cnn.optimizer);
  t.jobs = j.jobs;
  const auto names = eval::class_names(task);
  models::TrainResult<float> res = [&] {
    if (tuning) {
      const auto pre = models::load_checkpoint(j.checkpoint);
      const auto cfg = experiment::shaped_cnn(pre.config(), set.specs.front(), names.size(), derive_seed(t.seed, "cnn"));
      return models::finetune(pre, models::parse_strategy(j.strategy), t, cfg, take(set, lab.labels, tr),
                              take(set, lab.labels, dv));
    }
    const auto cfg =
        experiment::shaped_cnn(cnn_from_flags(j.cnn), set.specs.front(), names.size(), derive_seed(t.seed, "cnn"));
    return models::train<float>(t, cfg, take(set, lab.labels, tr), take(set, lab.labels, dv));
  }();
  models::save_checkpoint(res.model, j.out);
  models::write_history(res.history, history_path_for(j.out));
  const auto& best = res.history.epochs.at(static_cast<std::size_t>(res.history.best_epoch - 1));
  std::cout << "best epoch " << res.history.best_epoch << " dev_loss " << text::format_fixed(best.dev_loss, 4)
            << " dev_acc " << text::format_fixed(best.dev_acc, 3) << "\n";
}

void add_models(CLI::App& parent) {
  {
    auto j = std::make_shared<TrainJob>();
    auto* cmd = parent.add_subcommand("train", "Train the CNN on a feature container");
    cmd->add_option("--features", j->features)->required();
    cmd->add_option("--manifest", j->manifest)->required();
    cmd->add_option("--task", j->task)->capture_default_str();
    cmd->add_option("--out", j->out, "Checkpoint path")->required();
    add_training_options(cmd, j->cnn, true);
    cmd->add_option("--jobs", j->jobs)->capture_default_str();
    on_select(cmd, "train", [j] { run_train(*j, false); });
  }
  {
    auto j = std::make_shared<TrainJob>();
    j->cnn.train.max_epochs = 20;
    auto* cmd = parent.add_subcommand("finetune", "Fine-tune a pretrained checkpoint");
    cmd->add_option("--checkpoint", j->checkpoint)->required();
    cmd->add_option("--strategy", j->strategy)->check(CLI::IsMember({"partial", "complete"}))->capture_default_str();
    cmd->add_option("--features", j->features)->required();
    cmd->add_option("--manifest", j->manifest)->required();
    cmd->add_option("--task", j->task)->capture_default_str();
    cmd->add_option("--out", j->out, "Checkpoint path")->required();
    add_training_options(cmd, j->cnn, false);
    cmd->add_option("--jobs", j->jobs)->capture_default_str();
    on_select(cmd, "finetune", [j] { run_train(*j, true); });
  }
  {
    struct Gbt {
      std::string embeddings, manifest, task = "hair_type_4class", grid, out, scores;
      std::uint64_t seed = 0;
      int jobs = jobs_default();
    };
    auto g = std::make_shared<Gbt>();
    auto* cmd = parent.add_subcommand("gbt-fit", "Grid-searched gradient-boosted trees on embeddings");
    cmd->add_option("--embeddings", g->embeddings)->required();
    cmd->add_option("--manifest", g->manifest)->required();
    cmd->add_option("--task", g->task)->capture_default_str();
    cmd->add_option("--grid", g->grid, "Grid JSON; built-in grid when omitted");
    cmd->add_option("--seed", g->seed)->capture_default_str();
    cmd->add_option("--out", g->out, "Model JSON")->required();
    cmd->add_option("--scores", g->scores, "Write the CV score of every grid point to this CSV");
    cmd->add_option("--jobs", g->jobs)->capture_default_str();
    on_select(cmd, "gbt-fit", [g] {
      const auto task = eval::parse_task(g->task);
      std::vector<std::string> paths;
      const auto x = embedding_rows(features::load_external_embeddings(g->embeddings), paths);
      const auto lab = label_clips(paths, g->manifest, task);
      const auto grid = g->grid.empty() ? models::GbtGrid{} : models::load_grid(g->grid);
      const auto fit = models::gbt_fit(x, lab.labels, eval::class_names(task).size(), grid, g->seed, g->jobs);
      models::save_gbt(fit.model, g->out);
      std::ostringstream os;
      os << "n_rounds,max_depth,learning_rate,subsample,cv_accuracy\n";
      for (const auto& s : fit.scores) {
        os << s.params.n_rounds << ',' << s.params.max_depth << ',' << text::format_double(s.params.learning_rate)
           << ',' << text::format_double(s.params.subsample) << ',' << text::format_double(s.cv_accuracy) << '\n';
      }
      if (!g->scores.empty()) text::write_file(g->scores, os.str());
      std::cout << "selected n_rounds=" << fit.best.n_rounds << " max_depth=" << fit.best.max_depth
                << " learning_rate=" << text::format_double(fit.best.learning_rate) << " subsample="
                << text::format_double(fit.best.subsample) << "\n";
    });
  }
}

void add_evaluate(CLI::App& app) {
  struct Evaluate {
    std::string model, features, embeddings, manifest, predictions, task = "hair_type_4class", out, name = "predictions";
    int jobs = jobs_default();
  };
  auto e = std::make_shared<Evaluate>();
  auto* cmd = app.add_subcommand("evaluate", "Metrics and ROC curves for a model or a predictions CSV");
  cmd->add_option("--model", e->model, "CNN checkpoint or GBT model JSON");
  cmd->add_option("--features", e->features, "Feature container for a CNN");
  cmd->add_option("--embeddings", e->embeddings, "Embedding CSV for a GBT model");
  cmd->add_option("--manifest", e->manifest, "Labels for --model");
  cmd->add_option("--predictions", e->predictions, "Evaluate an existing predictions CSV");
  cmd->add_option("--task", e->task)->capture_default_str();
  cmd->add_option("--name", e->name, "Model name for --predictions reports")->capture_default_str();
  cmd->add_option("--out", e->out, "Report directory")->required();
  cmd->add_option("--jobs", e->jobs)->capture_default_str();
  on_select(cmd, "evaluate", [e] {
    const auto task = eval::parse_task(e->task);
    if (!e->predictions.empty()) {
      std::vector<std::string> names;
      const auto p = eval::load_predictions(e->predictions, &names);
      write_report(p, names, eval::to_string(task), e->name, e->out);
      return;
    }
    if (e->model.empty() || e->manifest.empty()) throw UsageError("evaluate needs --predictions or --model and --manifest");
    const auto names = eval::class_names(task);
    eval::PredictionSet p;
    std::vector<std::string> paths;
    std::string family;
    if (fs::path(e->model).extension() == ".json") {
      if (e->embeddings.empty()) throw UsageError("a GBT model needs --embeddings");
      const auto model = models::load_gbt(e->model);
      const auto x = embedding_rows(features::load_external_embeddings(e->embeddings), paths);
      p = experiment::predict_gbt(model, x, label_clips(paths, e->manifest, task).labels);
      family = "gbt";
    } else {
      if (e->features.empty()) throw UsageError("a CNN checkpoint needs --features");
      const auto net = models::load_checkpoint(e->model);
      const auto set = features::load_feature_set(e->features);
      paths = set.clip_paths;
      p = experiment::predict_cnn(net, set.specs, label_clips(paths, e->manifest, task).labels, e->jobs);
      family = "cnn";
    }
    fs::create_directories(e->out);
    eval::save_predictions(p, paths, names, fs::path(e->out) / "predictions.csv");
    write_report(p, names, eval::to_string(task), family, e->out);
  });
}

json load_raw_config(const std::string& path, const std::vector<std::string>& sets) {
  json raw = json::parse(text::read_file(path));
  for (const auto& s : sets) experiment::apply_override(raw, s);
  return raw;
}

experiment::ExperimentConfig checked_config(const json& raw, const fs::path& base) {
  const auto r = experiment::validate_config(raw, base);
  if (!r.config) {
    for (const auto& e : r.errors) std::cerr << e << "\n";
    throw ConfigError(std::to_string(r.errors.size()) + " config error(s), first: " + r.errors.front());
  }
  return *r.config;
}

void add_run(CLI::App& app) {
  struct Run {
    std::string config, output_dir;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    int jobs = jobs_default();
    bool quiet = false;
  };
  auto r = std::make_shared<Run>();
  auto* cmd = app.add_subcommand("run", "Run an experiment from a config file");
  cmd->add_option("--config", r->config)->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", r->sets, "Override a config field: a.b.c=value (repeatable)");
  cmd->add_option_function<std::uint64_t>("--seed", [r](std::uint64_t s) { r->seed = s; }, "Master seed");
  cmd->add_option("--output-dir", r->output_dir);
  cmd->add_option("--jobs", r->jobs)->capture_default_str();
  cmd->add_flag("--quiet", r->quiet, "No progress lines");
  on_select(cmd, "validate", [r] {
    json raw = load_raw_config(r->config, r->sets);
    if (r->seed) raw["seed"] = *r->seed;
    if (!r->output_dir.empty()) raw["output_dir"] = fs::absolute(r->output_dir).string();
    const auto cfg = checked_config(raw, fs::absolute(r->config).parent_path());
    experiment::RunOptions opt;
    opt.jobs = r->jobs;
    opt.log = r->quiet ? nullptr : &std::cerr;
    const auto result = experiment::run_experiment(cfg, opt);
    std::cout << eval::summary_table({result.report});
    std::cout << "output: " << cfg.output_dir.string() << "\n";
  });
}

void add_validate(CLI::App& app) {
  auto r = std::make_shared<std::pair<std::string, std::vector<std::string>>>();
  auto* cmd = app.add_subcommand("validate", "Check a config and print its normalized form");
  cmd->add_option("--config", r->first)->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", r->second, "Override a config field: a.b.c=value (repeatable)");
  on_select(cmd, "validate", [r] {
    const auto cfg = checked_config(load_raw_config(r->first, r->second), fs::absolute(r->first).parent_path());
    std::cout << experiment::to_json(cfg).dump(2) << "\n";
  });
}

void add_report(CLI::App& app) {
  auto dirs = std::make_shared<std::vector<std::string>>();
  auto* cmd = app.add_subcommand("report", "Summary table over finished run directories");
  cmd->add_option("runs", *dirs, "Run directories (or metrics.csv files)")->required();
  on_select(cmd, "report", [dirs] {
    std::vector<eval::ExperimentReport> reports;
    for (const auto& d : *dirs) {
      const fs::path p = fs::is_directory(d) ? fs::path(d) / "metrics.csv" : fs::path(d);
      reports.push_back(report_from_metrics(p));
    }
    std::cout << eval::summary_table(reports);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acoustic hair-scattering benchmark toolkit"};
  app.set_version_flag("--version", experiment::kVersion);
  app.require_subcommand(1);
  add_stimulus(app);
  add_scatterlab(app);
  add_ingest(app);
  add_featurize(app);
  add_models(app);
  auto* models_cmd = app.add_subcommand("models", "train, finetune and gbt-fit under one group");
  models_cmd->require_subcommand(1);
  add_models(*models_cmd);
  add_evaluate(app);
  add_run(app);
  add_validate(app);
  add_report(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0) std::cerr << "error: stage=cli kind=usage cause=" << e.what() << "\n";
    return code == 0 ? 0 : 2;
  }
  try {
    chosen.run();
    return 0;
  } catch (const experiment::StageError& e) {
    std::cerr << "error: stage=" << e.stage() << " kind=" << e.kind() << " cause=" << e.what() << "\n";
  } catch (const Error& e) {
    std::cerr << "error: stage=" << chosen.stage << " kind=" << e.kind() << " cause=" << e.what() << "\n";
    return e.kind() == std::string("usage") ? 2 : 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: stage=" << chosen.stage << " kind=format cause=" << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: stage=" << chosen.stage << " kind=internal cause=" << e.what() << "\n";
  }
  return 1;
}
