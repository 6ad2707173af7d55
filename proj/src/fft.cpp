#include "scatterbench/fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>

#include "scatterbench/core.hpp"

namespace scatterbench::fft {
namespace {

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

// FFTW planning is not thread-safe; execution of an existing plan on fresh
// aligned buffers is.
std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

struct FftwBuffer {
  explicit FftwBuffer(std::size_t bytes) : ptr(fftw_malloc(bytes)) {
    if (ptr == nullptr) throw std::bad_alloc();
  }
  ~FftwBuffer() { fftw_free(ptr); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  void* ptr;
};

const PlanPair& plans_for(std::size_t n) {
  static std::map<std::size_t, PlanPair> cache;
  std::lock_guard<std::mutex> lock(plan_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  FftwBuffer real(sizeof(double) * n);
  FftwBuffer cplx(sizeof(fftw_complex) * (n / 2 + 1));
  PlanPair p;
  const int size = static_cast<int>(n);
  p.forward = fftw_plan_dft_r2c_1d(size, static_cast<double*>(real.ptr),
                                   static_cast<fftw_complex*>(cplx.ptr), FFTW_ESTIMATE);
  p.inverse = fftw_plan_dft_c2r_1d(size, static_cast<fftw_complex*>(cplx.ptr),
                                   static_cast<double*>(real.ptr), FFTW_ESTIMATE);
  return cache.emplace(n, p).first->second;
}

}  // namespace

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::vector<std::complex<double>> rfft(std::span<const double> x, std::size_t n) {
  const PlanPair& plan = plans_for(n);
  FftwBuffer in(sizeof(double) * n);
  FftwBuffer out(sizeof(fftw_complex) * (n / 2 + 1));
  auto* inp = static_cast<double*>(in.ptr);
  const std::size_t m = std::min(n, x.size());
  std::copy_n(x.begin(), m, inp);
  std::fill(inp + m, inp + n, 0.0);
  fftw_execute_dft_r2c(plan.forward, inp, static_cast<fftw_complex*>(out.ptr));
  std::vector<std::complex<double>> result(n / 2 + 1);
  std::memcpy(result.data(), out.ptr, sizeof(fftw_complex) * (n / 2 + 1));
  return result;
}

std::vector<double> irfft(std::span<const std::complex<double>> spectrum, std::size_t n) {
  if (spectrum.size() != n / 2 + 1) throw UsageError("irfft: spectrum size mismatch");
  const PlanPair& plan = plans_for(n);
  FftwBuffer in(sizeof(fftw_complex) * (n / 2 + 1));
  FftwBuffer out(sizeof(double) * n);
  std::memcpy(in.ptr, spectrum.data(), sizeof(fftw_complex) * (n / 2 + 1));
  // c2r destroys its input; the buffer is scratch.
  fftw_execute_dft_c2r(plan.inverse, static_cast<fftw_complex*>(in.ptr),
                       static_cast<double*>(out.ptr));
  const auto* o = static_cast<const double*>(out.ptr);
  std::vector<double> result(o, o + n);
  const double scale = 1.0 / static_cast<double>(n);
  for (double& v : result) v *= scale;
  return result;
}

std::vector<double> convolve_direct(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  std::vector<double> out(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ai = a[i];
    double* dst = out.data() + i;
    for (std::size_t j = 0; j < b.size(); ++j) dst[j] += ai * b[j];
  }
  return out;
}

std::vector<double> convolve_fft(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t len = a.size() + b.size() - 1;
  const std::size_t n = next_pow2(len);
  auto fa = rfft(a, n);
  const auto fb = rfft(b, n);
  for (std::size_t k = 0; k < fa.size(); ++k) fa[k] *= fb[k];
  auto full = irfft(fa, n);
  full.resize(len);
  return full;
}

std::vector<double> convolve_auto(std::span<const double> a, std::span<const double> b) {
  const double direct_cost = static_cast<double>(a.size()) * static_cast<double>(b.size());
  const double n = static_cast<double>(next_pow2(a.size() + b.size()));
  const double fft_cost = 6.0 * n * std::max(1.0, std::log2(n));
  return direct_cost <= fft_cost ? convolve_direct(a, b) : convolve_fft(a, b);
}

std::vector<double> xcorr_fft(std::span<const double> a, std::span<const double> b) {
  std::vector<double> rev(b.rbegin(), b.rend());
  return convolve_fft(a, rev);
}

FixedSignalConvolver::FixedSignalConvolver(std::span<const double> signal, std::size_t max_kernel)
    : signal_size_(signal.size()),
      max_kernel_(std::max<std::size_t>(1, max_kernel)),
      n_(next_pow2(signal.size() + max_kernel_ - 1)),
      spectrum_(rfft(signal, n_)) {}

std::vector<double> FixedSignalConvolver::convolve(std::span<const double> kernel,
                                                   std::size_t out_len) const {
  if (kernel.size() > max_kernel_) throw UsageError("FixedSignalConvolver: kernel too long");
  auto fk = rfft(kernel, n_);
  for (std::size_t k = 0; k < fk.size(); ++k) fk[k] *= spectrum_[k];
  auto full = irfft(fk, n_);
  full.resize(std::min(out_len, signal_size_ + kernel.size() - 1));
  full.resize(out_len, 0.0);
  return full;
}

}  // namespace scatterbench::fft
