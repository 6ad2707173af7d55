#include "scatterbench/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "scatterbench/parallel.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/text.hpp"

namespace scatterbench::models {

const char* to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }
const char* to_string(FinetuneStrategy s) { return s == FinetuneStrategy::partial ? "partial" : "complete"; }

Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd|adam)");
}

FinetuneStrategy parse_strategy(const std::string& s) {
  if (s == "partial") return FinetuneStrategy::partial;
  if (s == "complete") return FinetuneStrategy::complete;
  throw ConfigError("unknown finetune strategy '" + s + "' (expected partial|complete)");
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("train config: ") + what);
  };
  need(batch_size >= 1, "batch_size must be >= 1");
  need(max_epochs >= 1, "max_epochs must be >= 1");
  need(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be > 0");
  need(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must be in (0, 1]");
  need(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  need(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must be in [0, 1)");
  need(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must be in [0, 1)");
  need(adam_eps > 0.0, "adam_eps must be > 0");
  need(patience >= 1, "patience must be >= 1");
  need(min_delta >= 0.0, "min_delta must be >= 0");
  need(jobs >= 1, "jobs must be >= 1");
}

EarlyStopping::EarlyStopping(int patience, double min_delta)
    : patience_(patience), min_delta_(min_delta), best_loss_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("early stopping: patience must be >= 1");
}

bool EarlyStopping::update(double dev_loss, double dev_acc) {
  ++evaluations_;
  const bool better = dev_loss < best_loss_ - min_delta_ || (dev_loss == best_loss_ && dev_acc > best_acc_);
  if (better) {
    best_loss_ = dev_loss;
    best_acc_ = dev_acc;
    bad_ = 0;
  } else {
    ++bad_;
  }
  return better;
}

template <typename T>
Evaluation evaluate(const Cnn<T>& net, const SpecDataset& data, int jobs) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  const auto lp = predict_log_probs(net, data.specs, jobs);
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const int y = data.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= lp[i].size()) {
      throw LabelError("evaluate: label " + std::to_string(y) + " out of range at row " + std::to_string(i));
    }
    loss -= static_cast<double>(lp[i][static_cast<std::size_t>(y)]);
    const auto arg = static_cast<int>(std::max_element(lp[i].begin(), lp[i].end()) - lp[i].begin());
    if (arg == y) ++correct;
  }
  const double n = static_cast<double>(lp.size());
  return {loss / n, static_cast<double>(correct) / n};
}

template Evaluation evaluate(const Cnn<float>&, const SpecDataset&, int);
template Evaluation evaluate(const Cnn<double>&, const SpecDataset&, int);

namespace {

void check_split(const SpecDataset& d, const char* name) {
  if (d.size() == 0) throw ConfigError(std::string("train: empty ") + name + " split");
  if (d.labels.size() != d.specs.size()) {
    throw ConfigError(std::string("train: ") + name + " split has mismatched labels");
  }
}

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m, v;
  long long step = 0;
};

}  // namespace

template <typename T>
TrainResult<T> train_from(Cnn<T> net, const TrainConfig& config, const SpecDataset& train_set,
                          const SpecDataset& dev_set, const std::function<bool(const std::string&)>& trainable) {
  config.validate();
  check_split(train_set, "train");
  check_split(dev_set, "dev");
  const auto& cfg = net.config();
  std::vector<std::vector<T>> inputs(train_set.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i] = to_input<T>(train_set.specs[i], cfg);
  for (int y : train_set.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.n_classes) {
      throw LabelError("train: label " + std::to_string(y) + " outside [0, " + std::to_string(cfg.n_classes) + ")");
    }
  }

  auto& params = net.params();
  std::vector<bool> update(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) update[i] = trainable(params[i].name);

  OptimizerState<T> opt;
  opt.m.resize(params.size());
  opt.v.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!update[i]) continue;
    opt.m[i].assign(params[i].value.size(), T(0));
    if (config.optimizer == Optimizer::adam) opt.v[i].assign(params[i].value.size(), T(0));
  }

  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  EarlyStopping stopper(config.patience, config.min_delta);
  TrainResult<T> result{net, {}};
  double lr = config.learning_rate;
  std::vector<Gradients<T>> slots;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform01(shuffle_rng) * static_cast<double>(i));
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t B = std::min(config.batch_size, order.size() - start);
      const T scale = T(1) / static_cast<T>(B);
      slots.resize(B);
      std::vector<T> losses(B);
      parallel_for(B, config.jobs, [&](std::size_t b) {
        slots[b] = net.zero_gradients();
        const std::size_t idx = order[start + b];
        losses[b] = net.forward_backward(inputs[idx], train_set.labels[idx], slots[b], scale);
      });
      for (std::size_t b = 0; b < B; ++b) epoch_loss += static_cast<double>(losses[b]);
      ++opt.step;
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (!update[p]) continue;
        auto& w = params[p].value;
        for (std::size_t k = 0; k < w.size(); ++k) {
          T g = T(0);
          for (std::size_t b = 0; b < B; ++b) g += slots[b][p][k];
          if (config.optimizer == Optimizer::sgd) {
            T& m = opt.m[p][k];
            m = static_cast<T>(config.momentum) * m + g;
            w[k] -= static_cast<T>(lr) * m;
          } else {
            T& m = opt.m[p][k];
            T& v = opt.v[p][k];
            const T b1 = static_cast<T>(config.adam_beta1), b2 = static_cast<T>(config.adam_beta2);
            m = b1 * m + (T(1) - b1) * g;
            v = b2 * v + (T(1) - b2) * g * g;
            const T mhat = m / static_cast<T>(1.0 - std::pow(config.adam_beta1, static_cast<double>(opt.step)));
            const T vhat = v / static_cast<T>(1.0 - std::pow(config.adam_beta2, static_cast<double>(opt.step)));
            w[k] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(config.adam_eps));
          }
        }
      }
    }
    const Evaluation dev = evaluate(net, dev_set, config.jobs);
    result.history.epochs.push_back({epoch, epoch_loss / static_cast<double>(order.size()), dev.loss, dev.accuracy});
    if (!std::isfinite(dev.loss)) throw DegenerateInputError("train: dev loss is not finite at epoch " + std::to_string(epoch));
    if (stopper.update(dev.loss, dev.accuracy)) {
      result.model = net;
      result.history.best_epoch = epoch;
    }
    if (stopper.should_stop()) {
      result.history.stopped_early = epoch < config.max_epochs;
      break;
    }
    lr *= config.lr_decay;
  }
  return result;
}

template TrainResult<float> train_from(Cnn<float>, const TrainConfig&, const SpecDataset&, const SpecDataset&,
                                       const std::function<bool(const std::string&)>&);
template TrainResult<double> train_from(Cnn<double>, const TrainConfig&, const SpecDataset&, const SpecDataset&,
                                        const std::function<bool(const std::string&)>&);

template <typename T>
TrainResult<T> train(const TrainConfig& config, const CnnConfig& cnn, const SpecDataset& train_set,
                     const SpecDataset& dev_set) {
  return train_from(Cnn<T>(cnn), config, train_set, dev_set, [](const std::string&) { return true; });
}

template TrainResult<float> train(const TrainConfig&, const CnnConfig&, const SpecDataset&, const SpecDataset&);
template TrainResult<double> train(const TrainConfig&, const CnnConfig&, const SpecDataset&, const SpecDataset&);

bool is_feature_extractor(const std::string& name) {
  return name.starts_with("stem.") || name.starts_with("blocks.");
}

TrainResult<float> finetune(const Cnn<float>& pretrained, FinetuneStrategy strategy, const TrainConfig& config,
                            const CnnConfig& target, const SpecDataset& train_set, const SpecDataset& dev_set) {
  Cnn<float> net(target);
  std::size_t copied_extractor = 0, extractor_total = 0;
  for (auto& p : net.params()) {
    if (is_feature_extractor(p.name)) ++extractor_total;
    for (const auto& q : pretrained.params()) {
      if (q.name == p.name && q.shape == p.shape) {
        p.value = q.value;
        if (is_feature_extractor(p.name)) ++copied_extractor;
        break;
      }
    }
  }
  if (copied_extractor != extractor_total) {
    throw ShapeError("finetune: pretrained feature extractor is not shape-compatible with the target network");
  }
  if (strategy == FinetuneStrategy::partial) {
    return train_from(std::move(net), config, train_set, dev_set,
                      [](const std::string& name) { return !is_feature_extractor(name); });
  }
  return train_from(std::move(net), config, train_set, dev_set, [](const std::string&) { return true; });
}

std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "epoch,train_loss,dev_loss,dev_acc\n";
  for (const auto& e : h.epochs) {
    os << e.epoch << ',' << text::format_double(e.train_loss) << ',' << text::format_double(e.dev_loss) << ','
       << text::format_double(e.dev_acc) << '\n';
  }
  return os.str();
}

void write_history(const TrainHistory& h, const std::filesystem::path& path) { text::write_file(path, history_csv(h)); }

}  // namespace scatterbench::models
