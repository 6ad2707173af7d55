#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scatterbench/cnn.hpp"
#include "scatterbench/eval.hpp"
#include "scatterbench/features.hpp"
#include "scatterbench/gbt.hpp"
#include "scatterbench/manifest.hpp"
#include "scatterbench/scatterlab.hpp"
#include "scatterbench/stimulus.hpp"
#include "scatterbench/train.hpp"

// Config-driven experiments: corpus -> ingest -> featurize -> per-fold
// training -> evaluation -> report, with every artifact under one output
// directory.
namespace scatterbench::experiment {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kVersion = "0.1.0";

enum class Split { round_robin, head_holdout };

struct CorpusSpec {
  enum class Source { synth, manifest };
  Source source = Source::synth;
  /// synth: "uniform" (clips_per_cell for every cell) or "table1".
  std::string preset = "uniform";
  int clips_per_cell = 40;
  std::vector<std::string> conditions{"dry"};
  int rounds_per_condition = 6;
  double separation = 0.8;
  /// Overrides every class profile's SNR; empty keeps the profile value.
  std::optional<double> snr_db = 20.0;
  /// Render WAV files under corpus/; otherwise clips stay in memory.
  bool write_audio = true;
  stimulus::StimulusSpec stimulus;
  /// manifest source only.
  std::filesystem::path manifest;
};

struct IngestSpec {
  double target_rate = 48000.0;
  bool trim_silence = false;
  double trim_threshold_db = 35.0;
  double trim_frame_ms = 30.0;
};

struct ModelSpec {
  /// "cnn" or "gbt".
  std::string family = "cnn";
  /// Input shape and class count are filled in from the data.
  models::CnnConfig cnn;
  models::TrainConfig train;
  models::GbtGrid grid;
  /// "stats128" or a CSV of precomputed embeddings keyed by clip_path.
  std::string embeddings = features::kStatsExtractor;
};

struct FinetuneSpec {
  models::FinetuneStrategy strategy = models::FinetuneStrategy::partial;
  /// Reuse a pretrained network instead of pretraining here.
  std::optional<std::filesystem::path> checkpoint;
  eval::Task pretrain_task = eval::Task::hair_type_4class;
  CorpusSpec pretrain_corpus;
  models::TrainConfig pretrain_train;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  eval::Task task = eval::Task::hair_type_4class;
  Split split = Split::round_robin;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  CorpusSpec corpus;
  IngestSpec ingest;
  features::FeatureConfig features;
  ModelSpec model;
  std::optional<FinetuneSpec> finetune;
};

const char* to_string(Split s);

struct ValidationResult {
  std::optional<ExperimentConfig> config;
  /// "field.path: problem", one per issue.
  std::vector<std::string> errors;
};

/// Fills defaults and checks every field and cross-field rule. Relative
/// paths resolve against `base_dir`.
ValidationResult validate_config(const nlohmann::json& raw, const std::filesystem::path& base_dir);
/// Reads and validates a config file.
ValidationResult validate_config_file(const std::filesystem::path& path);
/// As validate_config, throwing ConfigError listing every issue.
ExperimentConfig parse_config(const nlohmann::json& raw, const std::filesystem::path& base_dir);

/// Fully explicit form; validate_config(to_json(c)) reproduces c.
nlohmann::json to_json(const ExperimentConfig& c);
std::uint64_t config_digest(const ExperimentConfig& c);

/// Applies "a.b.c=value" overrides to a raw config. The value is parsed as
/// JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& raw, const std::string& assignment);

/// Error carrying the pipeline stage it came from.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), cause.what()), stage_(std::move(stage)) {}
  StageError(std::string stage, const std::string& kind, const std::string& what)
      : Error(kind, what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct RunOptions {
  int jobs = 1;
  /// Progress lines; null for silence.
  std::ostream* log = nullptr;
};

struct RunResult {
  eval::ExperimentReport report;
  std::vector<std::filesystem::path> files;
};

/// Runs the whole pipeline. Work happens in output_dir/partial/ and is
/// moved into output_dir on success; on failure the partial directory is
/// kept and a StageError is thrown.
RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

// --- building blocks shared with the CLI -----------------------------------

/// Counts for a synth corpus spec.
scatterlab::CorpusCounts corpus_counts(const CorpusSpec& spec);
/// Renders (or plans) a synth corpus, or loads a manifest.
ingest::DatasetManifest materialize_corpus(const CorpusSpec& spec, std::uint64_t seed,
                                           const std::filesystem::path& dir, int jobs);
/// Entries usable for `task` (hair-type runs keep dry clips only).
ingest::DatasetManifest task_subset(const ingest::DatasetManifest& m, eval::Task task);

/// Spectrograms for every entry, in entry order.
std::vector<features::MelSpectrogram> featurize_manifest(const ingest::DatasetManifest& m, const IngestSpec& ingest,
                                                          const features::FeatureConfig& feat, int jobs);
/// Same for the clips of `task`, rendered in memory instead of read from
/// files.
std::vector<features::MelSpectrogram> featurize_synth(const CorpusSpec& spec, std::uint64_t seed, eval::Task task,
                                                       const IngestSpec& ingest, const features::FeatureConfig& feat,
                                                       int jobs);

/// CNN config with the input shape taken from `example` and n_classes set.
models::CnnConfig shaped_cnn(const models::CnnConfig& base, const features::MelSpectrogram& example,
                             std::size_t n_classes, std::uint64_t init_seed);

/// Log-probabilities of a network as a PredictionSet.
eval::PredictionSet predict_cnn(const models::Cnn<float>& net, const std::vector<features::MelSpectrogram>& specs,
                                const std::vector<int>& labels, int jobs);
eval::PredictionSet predict_gbt(const models::GbtModel& model, const models::FeatureRows& x,
                                const std::vector<int>& labels);

/// `SCATTERBENCH_JOBS` when set to a positive integer, else 1.
int default_jobs();

}  // namespace scatterbench::experiment
