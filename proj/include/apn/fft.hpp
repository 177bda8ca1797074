#pragma once

// Thin wrapper over FFTW's 2-D complex transform. Plans are created with
// FFTW_ESTIMATE (deterministic, no timing-dependent planning) and cached per
// thread; the planner itself is serialized by a process-wide mutex.

#include <fftw3.h>

#include <complex>
#include <cstring>
#include <map>
#include <mutex>
#include <utility>

namespace apn::fft {

inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

namespace detail {

template <class T>
struct Api;

template <>
struct Api<double> {
  using Plan = fftw_plan;
  using Complex = fftw_complex;
  static Complex* alloc(std::size_t n) { return fftw_alloc_complex(n); }
  static void free(Complex* p) { fftw_free(p); }
  static Plan plan(int m, int n, Complex* buf, int sign) {
    return fftw_plan_dft_2d(m, n, buf, buf, sign, FFTW_ESTIMATE);
  }
  static void execute(Plan p) { fftw_execute(p); }
  static void destroy(Plan p) { fftw_destroy_plan(p); }
};

template <>
struct Api<float> {
  using Plan = fftwf_plan;
  using Complex = fftwf_complex;
  static Complex* alloc(std::size_t n) { return fftwf_alloc_complex(n); }
  static void free(Complex* p) { fftwf_free(p); }
  static Plan plan(int m, int n, Complex* buf, int sign) {
    return fftwf_plan_dft_2d(m, n, buf, buf, sign, FFTW_ESTIMATE);
  }
  static void execute(Plan p) { fftwf_execute(p); }
  static void destroy(Plan p) { fftwf_destroy_plan(p); }
};

template <class T>
class PlanCache {
 public:
  struct Entry {
    typename Api<T>::Plan plan;
    typename Api<T>::Complex* buffer;
  };

  ~PlanCache() {
    std::lock_guard lock(planner_mutex());
    for (auto& [key, e] : entries_) {
      Api<T>::destroy(e.plan);
      Api<T>::free(e.buffer);
    }
  }

  Entry& get(int m, int n, int sign) {
    auto key = std::tuple{m, n, sign};
    auto it = entries_.find(key);
    if (it != entries_.end()) return it->second;
    std::lock_guard lock(planner_mutex());
    auto* buf = Api<T>::alloc(std::size_t(m) * n);
    Entry e{Api<T>::plan(m, n, buf, sign), buf};
    return entries_.emplace(key, e).first->second;
  }

 private:
  std::map<std::tuple<int, int, int>, Entry> entries_;
};

template <class T>
PlanCache<T>& cache() {
  thread_local PlanCache<T> c;
  return c;
}

}  // namespace detail

/// In-place unnormalized 2-D DFT of an m x n row-major array. Forward uses
/// exp(-2*pi*i*(u*x/m + v*y/n)); inverse uses the positive exponent.
template <class T>
void dft2d(std::complex<T>* data, std::size_t m, std::size_t n, bool inverse) {
  auto& e = detail::cache<T>().get(int(m), int(n), inverse ? FFTW_BACKWARD : FFTW_FORWARD);
  const std::size_t bytes = sizeof(std::complex<T>) * m * n;
  std::memcpy(static_cast<void*>(e.buffer), static_cast<const void*>(data), bytes);
  detail::Api<T>::execute(e.plan);
  std::memcpy(static_cast<void*>(data), static_cast<const void*>(e.buffer), bytes);
}

}  // namespace apn::fft
