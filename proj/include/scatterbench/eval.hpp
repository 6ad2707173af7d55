#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "scatterbench/manifest.hpp"

namespace scatterbench::eval {

enum class Task { hair_type_4class, hair_condition_3class };

const char* to_string(Task t);
/// Throws ConfigError for anything but the two task tokens.
Task parse_task(const std::string& s);
/// Hair types A, B, MAMI, MINAYO or conditions dry, shampoo, cream.
std::vector<std::string> class_names(Task t);
/// Class index of one entry; throws LabelError for an unknown label.
int label_of(const ingest::ManifestEntry& e, Task t);
std::vector<int> labels_for(const ingest::DatasetManifest& m, Task t);

// --- splits ----------------------------------------------------------------

/// Indices into the entry list the fold was built from.
struct FoldSpec {
  int fold_id = 0;
  std::string name;
  std::vector<std::size_t> train, dev, test;
};

/// Stratified dev slice: for every label, round(fraction * count) of its
/// members (chosen by a seeded shuffle) go to dev, the rest to train. A
/// label with two or more members keeps at least one on each side.
void stratified_dev_split(const std::vector<std::size_t>& pool, const std::vector<int>& labels, double fraction,
                          std::uint64_t seed, std::vector<std::size_t>& train, std::vector<std::size_t>& dev);

/// One fold per distinct key (ascending). Fold k tests on key k, uses the
/// next key (cyclically) as dev and trains on the rest. With only two keys
/// the dev set is a stratified 20% slice of the training key instead.
/// Throws ConfigError with fewer than two keys.
std::vector<FoldSpec> round_robin_folds(const std::vector<int>& keys, const std::vector<int>& labels,
                                        std::uint64_t seed, double dev_fraction = 0.2);
std::vector<FoldSpec> round_robin_folds(const ingest::DatasetManifest& m, Task t, std::uint64_t seed);

/// Heads A and B form train/dev (stratified 20% dev by condition); MAMI
/// and MINAYO are the test set. Throws ConfigError when any of the four
/// heads has no clips.
FoldSpec head_holdout_split(const ingest::DatasetManifest& m, std::uint64_t seed, double dev_fraction = 0.2);

// --- metrics ---------------------------------------------------------------

/// Per-clip class scores; `log_probs` marks log-probabilities.
struct PredictionSet {
  std::size_t n_classes = 0;
  std::vector<std::vector<double>> scores;
  std::vector<int> labels;
  bool log_probs = false;

  /// Throws ShapeError / LabelError on arity or range problems.
  void validate() const;
  void append(const PredictionSet& other);
};

struct ClassificationMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> f1;
  /// Classes that were neither true nor predicted; they count as F1 = 0.
  std::vector<int> absent_classes;
};

ClassificationMetrics accuracy_macro_f1(const PredictionSet& p);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  /// Scores >= threshold are called positive; +inf at the origin.
  double threshold = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;
  /// Empty when the class has no positives or no negatives.
  std::optional<double> auc;
};

/// Descending-threshold sweep with tied scores collapsed into one step;
/// AUC by the trapezoid rule.
RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& positive);

struct RocReport {
  std::vector<RocCurve> curves;
  /// Mean over classes with a defined AUC; NaN when none is defined.
  double average_auc = 0.0;
  std::vector<int> undefined_classes;
  std::vector<std::string> warnings;
};

RocReport roc_auc_ovr(const PredictionSet& p);

// --- reports ---------------------------------------------------------------

struct FoldMetrics {
  std::string fold;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::optional<double>> auc;
  double auc_avg = 0.0;
};

FoldMetrics fold_metrics(const std::string& fold, const PredictionSet& p);

struct Summary {
  double mean = 0.0;
  /// Population standard deviation.
  double std = 0.0;
  std::size_t count = 0;
};

/// Order-independent: values are summed in sorted order. NaNs are skipped.
Summary summarize(std::vector<double> values);
/// "0.844 ± 0.130" with `digits` decimals.
std::string format_mean_std(const Summary& s, int digits);

struct ExperimentReport {
  std::string task;
  std::string model;
  std::vector<std::string> class_names;
  std::vector<FoldMetrics> folds;
  Summary accuracy, macro_f1, auc_avg;
  std::vector<Summary> auc;
  /// Curves over the pooled test predictions of every fold.
  RocReport roc;
};

/// Pools predictions[i] (fold i's test set) for the ROC curves.
ExperimentReport aggregate_report(const std::string& task, const std::string& model,
                                  const std::vector<std::string>& class_names, const std::vector<FoldMetrics>& folds,
                                  const PredictionSet& pooled);

/// metrics.csv: one row per fold, then `mean` and `std` rows formatted to
/// 3 decimals (accuracy, F1) and 2 decimals (AUC).
std::string metrics_csv(const ExperimentReport& r);
/// Reads back the rows of metrics.csv as strings keyed by column name.
std::vector<std::vector<std::pair<std::string, std::string>>> read_metrics_csv(const std::filesystem::path& path);

std::string roc_csv(const RocCurve& c);
/// Self-contained SVG with one polyline per class and an AUC legend.
std::string roc_svg(const RocReport& r, const std::vector<std::string>& class_names);

/// Writes metrics.csv, roc_<class>.csv for every class, roc.svg and
/// summary.txt; returns the files written.
std::vector<std::filesystem::path> export_report(const ExperimentReport& r, const std::filesystem::path& out_dir);

/// Accuracy / F1 / Average AUC table line in the "mean ± std" layout.
std::string summary_table(const std::vector<ExperimentReport>& reports);

/// CSV `clip_path,label,<class>...` with probability scores.
void save_predictions(const PredictionSet& p, const std::vector<std::string>& clip_paths,
                      const std::vector<std::string>& class_names, const std::filesystem::path& path);
PredictionSet load_predictions(const std::filesystem::path& path, std::vector<std::string>* class_names = nullptr,
                               std::vector<std::string>* clip_paths = nullptr);

}  // namespace scatterbench::eval
