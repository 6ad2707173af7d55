#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "scatterbench/features.hpp"

namespace scatterbench::models {

struct BlockSpec {
  std::size_t channels = 16;
  std::size_t stride = 1;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// Residual CNN over a single-channel n_mels x n_frames input:
///
///   stem conv (k x k, stride, padding) + ReLU [+ 3x3/2 max pool]
///   -> residual blocks: conv3x3(stride) ReLU conv3x3 + skip, ReLU
///      (skip is a strided 1x1 projection when the shape changes)
///   -> global average pool -> linear head -> log-softmax
struct CnnConfig {
  std::size_t in_mels = 40;
  std::size_t in_frames = 117;
  std::size_t stem_channels = 22;
  std::size_t stem_kernel = 7;
  std::size_t stem_stride = 2;
  std::size_t stem_padding = 3;
  bool stem_pool = true;
  std::vector<BlockSpec> blocks{{22, 1}, {44, 2}, {88, 2}};
  std::size_t n_classes = 4;
  std::uint64_t init_seed = 0;
  /// Multiplier on the initial weights of each block's second convolution.
  double residual_init_scale = 0.1;

  /// Throws ConfigError when a dimension does not compose.
  void validate() const;
  std::size_t parameter_count() const;
  /// Canonical single-line text form; parse(serialize()) == *this.
  std::string serialize() const;
  static CnnConfig parse(const std::string& text);

  friend bool operator==(const CnnConfig&, const CnnConfig&) = default;
};

template <typename T>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
};

template <typename T>
using Gradients = std::vector<std::vector<T>>;

template <typename T>
class Cnn {
 public:
  /// He-normal convolution weights, zero biases, head ~ N(0, 1/fan_in),
  /// all drawn from config.init_seed.
  explicit Cnn(CnnConfig config);

  const CnnConfig& config() const noexcept { return config_; }
  std::vector<Param<T>>& params() noexcept { return params_; }
  const std::vector<Param<T>>& params() const noexcept { return params_; }
  Param<T>& param(const std::string& name);
  const Param<T>& param(const std::string& name) const;

  std::size_t input_size() const noexcept { return config_.in_mels * config_.in_frames; }

  /// Log-probabilities for one row-major n_mels x n_frames input.
  std::vector<T> forward(std::span<const T> input) const;

  /// Adds scale * d(-log p[label])/d(theta) into `grads` and returns the
  /// unscaled loss.
  T forward_backward(std::span<const T> input, int label, Gradients<T>& grads, T scale) const;

  Gradients<T> zero_gradients() const;

  template <typename U>
  Cnn<U> cast() const;

 private:
  CnnConfig config_;
  std::vector<Param<T>> params_;
  template <typename U>
  friend class Cnn;
};

extern template class Cnn<float>;
extern template class Cnn<double>;

/// Mean of -log_probs[i][labels[i]]; throws LabelError for labels outside
/// [0, n_classes).
template <typename T>
T nll_loss(const std::vector<std::vector<T>>& log_probs, const std::vector<int>& labels);

/// Input tensor for a spectrogram; throws ShapeError on a size mismatch.
template <typename T>
std::vector<T> to_input(const features::MelSpectrogram& spec, const CnnConfig& cfg);

/// Log-probabilities for each spectrogram, computed on up to `jobs` threads.
template <typename T>
std::vector<std::vector<T>> predict_log_probs(const Cnn<T>& net,
                                              const std::vector<features::MelSpectrogram>& specs,
                                              int jobs = 1);

struct GradCheckOptions {
  double epsilon = 1e-4;
  /// Pairs whose magnitudes are both below this are compared absolutely.
  double magnitude_floor = 1e-3;
  std::size_t batch = 2;
  /// Applied to the analytic gradient before comparison (fault injection).
  std::function<void(Gradients<double>&)> corrupt;
};

/// Max relative error between backprop in precision T and 64-bit central
/// differences over every parameter, on random inputs and labels drawn
/// from `seed`.
template <typename T>
double grad_check(const CnnConfig& cfg, std::uint64_t seed, const GradCheckOptions& opt = {});

// --- checkpoints --------------------------------------------------------
//
//   magic "SBCKPT\0\0", uint32 version (1), uint64 FNV-1a digest of the
//   serialized config, string config, uint32 tensor count, then per tensor:
//   string name, uint32 rank, uint64 dims..., float32 payload. Strings are
//   uint32 length + bytes; integers little-endian.

void save_checkpoint(const Cnn<float>& net, const std::filesystem::path& path);
Cnn<float> load_checkpoint(const std::filesystem::path& path);
std::uint64_t config_digest(const CnnConfig& cfg);

}  // namespace scatterbench::models
