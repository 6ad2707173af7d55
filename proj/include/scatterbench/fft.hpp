#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace scatterbench::fft {

/// Smallest power of two >= n (n >= 1).
std::size_t next_pow2(std::size_t n);

/// Forward real-to-complex transform of `x` zero-padded to `n` points.
/// Returns n/2 + 1 bins. Thread-safe.
std::vector<std::complex<double>> rfft(std::span<const double> x, std::size_t n);

/// Inverse of rfft for an n-point signal, including the 1/n scale.
std::vector<double> irfft(std::span<const std::complex<double>> spectrum, std::size_t n);

/// Full linear convolution by direct summation; length |a| + |b| - 1.
std::vector<double> convolve_direct(std::span<const double> a, std::span<const double> b);

/// Full linear convolution through zero-padded FFTs.
std::vector<double> convolve_fft(std::span<const double> a, std::span<const double> b);

/// Picks direct or FFT convolution by estimated cost.
std::vector<double> convolve_auto(std::span<const double> a, std::span<const double> b);

/// Cross-correlation c[k] = sum_n a[n + k] b[n] for k in
/// [-(|b| - 1), |a| - 1]; element i holds lag i - (|b| - 1).
std::vector<double> xcorr_fft(std::span<const double> a, std::span<const double> b);

/// Holds the spectrum of one fixed signal so it can be convolved with many
/// kernels whose length stays below `max_kernel`.
class FixedSignalConvolver {
 public:
  FixedSignalConvolver(std::span<const double> signal, std::size_t max_kernel);

  /// Full convolution of the held signal with `kernel`, truncated to
  /// `out_len` samples.
  std::vector<double> convolve(std::span<const double> kernel, std::size_t out_len) const;

  std::size_t signal_size() const noexcept { return signal_size_; }

 private:
  std::size_t signal_size_;
  std::size_t max_kernel_;
  std::size_t n_;
  std::vector<std::complex<double>> spectrum_;
};

}  // namespace scatterbench::fft
