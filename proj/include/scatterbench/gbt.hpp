#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace scatterbench::models {

/// Rows of a dense design matrix.
using FeatureRows = std::vector<std::vector<double>>;

struct GbtParams {
  int n_rounds = 100;
  int max_depth = 3;
  double learning_rate = 0.1;
  /// Fraction of rows drawn (without replacement) for each round.
  double subsample = 1.0;
  /// L2 penalty on leaf weights.
  double lambda = 1.0;
  /// Minimum hessian sum on each side of a split.
  double min_child_weight = 1e-3;

  /// Throws ConfigError naming the field.
  void validate() const;
  friend bool operator==(const GbtParams&, const GbtParams&) = default;
};

/// Cartesian grid searched by gbt_fit; every vector must be non-empty.
struct GbtGrid {
  std::vector<int> n_rounds{25, 50, 100};
  std::vector<int> max_depth{2, 3};
  std::vector<double> learning_rate{0.1, 0.3};
  std::vector<double> subsample{1.0};
  double lambda = 1.0;
  double min_child_weight = 1e-3;
  /// Stratified folds used to score each grid point.
  int cv_folds = 3;

  void validate() const;
  /// Points in grid order: rounds, then depth, then learning rate, then
  /// subsample (last index varies fastest).
  std::vector<GbtParams> points() const;
};

/// Regression tree; node 0 is the root. A node with feature < 0 is a leaf.
/// Rows go left when x[feature] < threshold.
struct GbtTree {
  struct Node {
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
    friend bool operator==(const Node&, const Node&) = default;
  };
  std::vector<Node> nodes;

  double predict(std::span<const double> x) const;
  std::size_t depth() const;
  friend bool operator==(const GbtTree&, const GbtTree&) = default;
};

/// Softmax-linked additive ensemble: trees[round][class].
struct GbtModel {
  std::size_t n_features = 0;
  std::size_t n_classes = 0;
  GbtParams params;
  std::vector<std::vector<GbtTree>> trees;

  friend bool operator==(const GbtModel&, const GbtModel&) = default;
};

/// Trains one ensemble with fixed parameters. Labels must lie in
/// [0, n_classes) and at least two classes must be present.
GbtModel gbt_train(const FeatureRows& x, const std::vector<int>& labels, std::size_t n_classes,
                   const GbtParams& params, std::uint64_t seed);

/// Raw margins after the first `rounds` rounds (all rounds by default).
std::vector<double> gbt_margins(const GbtModel& model, std::span<const double> x,
                                std::size_t rounds = static_cast<std::size_t>(-1));
/// Class probabilities; throws ShapeError on a dimension mismatch.
std::vector<double> gbt_predict(const GbtModel& model, std::span<const double> x);
int gbt_predict_label(const GbtModel& model, std::span<const double> x);

/// Mean softmax cross-entropy on (x, labels) after each round; entry 0 is
/// the zero-round loss ln(n_classes).
std::vector<double> gbt_staged_loss(const GbtModel& model, const FeatureRows& x,
                                    const std::vector<int>& labels);

struct GridScore {
  GbtParams params;
  double cv_accuracy = 0.0;
};

struct GbtFitResult {
  GbtModel model;
  GbtParams best;
  std::vector<GridScore> scores;
};

/// Scores every grid point by stratified k-fold accuracy and refits the
/// winner on all rows. Ties go to fewer rounds, then shallower trees, then
/// grid order. Deterministic for a seed regardless of `jobs`.
GbtFitResult gbt_fit(const FeatureRows& x, const std::vector<int>& labels, std::size_t n_classes,
                     const GbtGrid& grid, std::uint64_t seed, int jobs = 1);

/// Stratified assignment of rows to `k` folds (fold index per row).
std::vector<int> stratified_folds(const std::vector<int>& labels, int k, std::uint64_t seed);

/// JSON container {"format": "scatterbench-gbt", "version": 1, ...}.
void save_gbt(const GbtModel& model, const std::filesystem::path& path);
GbtModel load_gbt(const std::filesystem::path& path);

/// Grid file: any subset of the GbtGrid fields as a JSON object.
GbtGrid load_grid(const std::filesystem::path& path);

}  // namespace scatterbench::models
