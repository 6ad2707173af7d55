#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace scatterbench {

/// Base of every error raised by the library. `kind()` is a short stable
/// token ("spec", "usage", "io", ...) used in machine-readable CLI output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SCATTERBENCH_DEFINE_ERROR(Name, token) \
  class Name : public Error {                  \
   public:                                     \
    explicit Name(const std::string& what) : Error(token, what) {} \
  };

SCATTERBENCH_DEFINE_ERROR(SpecError, "spec")
SCATTERBENCH_DEFINE_ERROR(UsageError, "usage")
SCATTERBENCH_DEFINE_ERROR(DegenerateInputError, "degenerate")
SCATTERBENCH_DEFINE_ERROR(BoundsError, "bounds")
SCATTERBENCH_DEFINE_ERROR(ValidationError, "validation")
SCATTERBENCH_DEFINE_ERROR(FormatError, "format")
SCATTERBENCH_DEFINE_ERROR(ShapeError, "shape")
SCATTERBENCH_DEFINE_ERROR(LabelError, "label")
SCATTERBENCH_DEFINE_ERROR(ConfigError, "config")
SCATTERBENCH_DEFINE_ERROR(IoError, "io")
SCATTERBENCH_DEFINE_ERROR(InputTooShortError, "too_short")

#undef SCATTERBENCH_DEFINE_ERROR

/// Mono sampled signal. Construction validates that the signal is non-empty,
/// every sample is finite, and the rate is positive; afterwards the value is
/// immutable.
class Waveform {
 public:
  Waveform(std::vector<double> samples, double sample_rate);

  std::span<const double> samples() const noexcept { return samples_; }
  const std::vector<double>& data() const noexcept { return samples_; }
  double sample_rate() const noexcept { return sample_rate_; }
  std::size_t size() const noexcept { return samples_.size(); }
  double operator[](std::size_t i) const noexcept { return samples_[i]; }
  double duration() const noexcept {
    return static_cast<double>(samples_.size()) / sample_rate_;
  }

  friend bool operator==(const Waveform&, const Waveform&) = default;

 private:
  std::vector<double> samples_;
  double sample_rate_;
};

double rms(std::span<const double> x);
double peak_abs(std::span<const double> x);
double energy(std::span<const double> x);

/// sqrt(sum (a-b)^2) / sqrt(sum b^2). Lengths must agree.
double relative_l2(std::span<const double> a, std::span<const double> b);

/// Pearson-free normalized correlation <a,b>/(|a||b|) over the common prefix.
double normalized_correlation(std::span<const double> a,
                              std::span<const double> b);

}  // namespace scatterbench
