#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "scatterbench/cnn.hpp"
#include "scatterbench/features.hpp"

namespace scatterbench::models {

enum class Optimizer { sgd, adam };
enum class FinetuneStrategy { partial, complete };

const char* to_string(Optimizer o);
const char* to_string(FinetuneStrategy s);
Optimizer parse_optimizer(const std::string& s);
FinetuneStrategy parse_strategy(const std::string& s);

struct TrainConfig {
  std::size_t batch_size = 16;
  int max_epochs = 40;
  Optimizer optimizer = Optimizer::sgd;
  double learning_rate = 0.01;
  /// Multiplies the learning rate after every epoch.
  double lr_decay = 1.0;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Consecutive non-improving dev evaluations tolerated before stopping.
  int patience = 5;
  /// Dev loss must drop by more than this to count as an improvement.
  double min_delta = 0.0;
  std::uint64_t seed = 0;
  int jobs = 1;

  /// Throws ConfigError naming the field.
  void validate() const;
};

struct SpecDataset {
  std::vector<features::MelSpectrogram> specs;
  std::vector<int> labels;

  std::size_t size() const noexcept { return specs.size(); }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double dev_acc = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

/// Dev-loss early stopping with dev accuracy breaking exact loss ties.
class EarlyStopping {
 public:
  EarlyStopping(int patience, double min_delta = 0.0);

  /// Records one evaluation; returns true when it is the new best.
  bool update(double dev_loss, double dev_acc);
  bool should_stop() const noexcept { return bad_ >= patience_; }
  int evaluations() const noexcept { return evaluations_; }

 private:
  int patience_;
  double min_delta_;
  double best_loss_;
  double best_acc_ = -1.0;
  int bad_ = 0;
  int evaluations_ = 0;
};

template <typename T>
struct TrainResult {
  Cnn<T> model;
  TrainHistory history;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

template <typename T>
Evaluation evaluate(const Cnn<T>& net, const SpecDataset& data, int jobs = 1);

/// Mini-batch training from `cnn.init_seed`; returns the best-dev-loss
/// parameters. Bit-reproducible for a given seed regardless of jobs.
template <typename T>
TrainResult<T> train(const TrainConfig& config, const CnnConfig& cnn, const SpecDataset& train_set,
                     const SpecDataset& dev_set);

/// Continues training `init`, updating only parameters for which
/// `trainable(name)` holds.
template <typename T>
TrainResult<T> train_from(Cnn<T> init, const TrainConfig& config, const SpecDataset& train_set,
                          const SpecDataset& dev_set, const std::function<bool(const std::string&)>& trainable);

/// Stem and residual blocks; everything before the head.
bool is_feature_extractor(const std::string& param_name);

/// Starts from `pretrained` (tensors whose names and shapes match `target`
/// are copied, the rest keep target's initialization) and trains with the
/// given strategy. Under `partial` only non-feature-extractor tensors move.
TrainResult<float> finetune(const Cnn<float>& pretrained, FinetuneStrategy strategy, const TrainConfig& config,
                            const CnnConfig& target, const SpecDataset& train_set, const SpecDataset& dev_set);

/// `epoch,train_loss,dev_loss,dev_acc`
std::string history_csv(const TrainHistory& h);
void write_history(const TrainHistory& h, const std::filesystem::path& path);

}  // namespace scatterbench::models
