#pragma once

// Half-plane spectral kernel: forward DFT restricted to the non-redundant rows
// 0 <= u <= floor(M/2), amplitude/phase split, cross-shaped band masks,
// component separation and Hermitian-completed reassembly.
//
// Arrays are indexed (x, y) -> x * N + y with x along the first axis of length
// M (frequency u) and y along the second axis of length N (frequency v).
//
// Phase convention: reassembly forms Re = A sin(P), Im = A cos(P), so the
// forward transform stores P = atan2(Re F, Im F). With that choice the pair is
// an exact inverse.

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "apn/errors.hpp"
#include "apn/fft.hpp"
#include "apn/proposal_set.hpp"

namespace apn::spectral {

template <class T>
struct ImageTensor {
  std::size_t channels = 0, M = 0, N = 0;
  std::vector<T> data;  // [c][x][y]

  ImageTensor() = default;
  ImageTensor(std::size_t c, std::size_t m, std::size_t n) : channels(c), M(m), N(n), data(c * m * n, T(0)) {}

  std::size_t plane() const { return M * N; }
  std::span<T> channel(std::size_t c) { return {data.data() + c * plane(), plane()}; }
  std::span<const T> channel(std::size_t c) const { return {data.data() + c * plane(), plane()}; }
  T& at(std::size_t c, std::size_t x, std::size_t y) { return data[(c * M + x) * N + y]; }
  T at(std::size_t c, std::size_t x, std::size_t y) const { return data[(c * M + x) * N + y]; }

  void validate() const {
    if (M < 2 || N < 2) throw DomainError("image must be at least 2x2");
    if (data.size() != channels * M * N) throw DomainError("image buffer size mismatch");
    for (T v : data)
      if (!std::isfinite(v)) throw DomainError("image contains non-finite values");
  }
};

template <class T>
struct HalfPlaneSpectrum {
  std::size_t M = 0, N = 0;
  std::vector<T> amplitude;  // (M/2+1) x N
  std::vector<T> phase;

  HalfPlaneSpectrum() = default;
  HalfPlaneSpectrum(std::size_t m, std::size_t n) : M(m), N(n), amplitude(rows() * n, T(0)), phase(rows() * n, T(0)) {}

  std::size_t rows() const { return M / 2 + 1; }
  std::size_t cols() const { return N; }
  std::size_t size() const { return rows() * cols(); }
};

enum class MaskMode { Hard, Soft };

inline constexpr double kDefaultSharpness = 50.0;

template <class T>
struct CrossMask {
  std::size_t rows = 0, cols = 0;
  MaskMode mode = MaskMode::Hard;
  Band band_u, band_v;
  std::vector<T> values;

  T at(std::size_t u, std::size_t v) const { return values[u * cols + v]; }
};

/// Normalized position of half-plane row u and column v.
inline double u_position(std::size_t u, std::size_t M) { return double(u) / double(M / 2); }
inline double v_position(std::size_t v, std::size_t N) { return double(v) / double(N - 1); }

/// Membership of each position along one axis, with derivatives w.r.t. the
/// band edges (zero in hard mode).
template <class T>
struct AxisMembership {
  std::vector<T> value, d_start, d_end;
};

template <class T>
T logistic(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

/// Soft: sigma(tau (x - start)) * sigma(tau (end - x)). Hard: start <= x <= end.
template <class T>
AxisMembership<T> axis_membership(Band band, std::size_t count, double denom, MaskMode mode, double sharpness) {
  AxisMembership<T> m{std::vector<T>(count), std::vector<T>(count, T(0)), std::vector<T>(count, T(0))};
  for (std::size_t k = 0; k < count; ++k) {
    const double x = double(k) / denom;
    if (mode == MaskMode::Hard) {
      m.value[k] = band.contains(x) ? T(1) : T(0);
      continue;
    }
    const double a = logistic(sharpness * (x - band.start));
    const double b = logistic(sharpness * (band.end - x));
    m.value[k] = T(a * b);
    m.d_start[k] = T(-sharpness * a * (1 - a) * b);
    m.d_end[k] = T(sharpness * a * b * (1 - b));
  }
  return m;
}

/// Cross mask: union of a u-band (rows) and a v-band (columns) over the half plane.
/// Soft combination is 1 - (1 - m_u)(1 - m_v), which is the OR of the hard case.
template <class T>
CrossMask<T> build_cross_mask(Band band_u, Band band_v, std::size_t M, std::size_t N, MaskMode mode,
                              double sharpness = kDefaultSharpness) {
  if (M < 2 || N < 2) throw DomainError("mask dims must be at least 2x2");
  CrossMask<T> mask{M / 2 + 1, N, mode, band_u, band_v, {}};
  const auto mu = axis_membership<T>(band_u, mask.rows, double(M / 2), mode, sharpness);
  const auto mv = axis_membership<T>(band_v, mask.cols, double(N - 1), mode, sharpness);
  mask.values.resize(mask.rows * mask.cols);
  for (std::size_t u = 0; u < mask.rows; ++u)
    for (std::size_t v = 0; v < mask.cols; ++v)
      mask.values[u * mask.cols + v] = T(1) - (T(1) - mu.value[u]) * (T(1) - mv.value[v]);
  return mask;
}

template <class T>
HalfPlaneSpectrum<T> forward_dft_half(std::span<const T> channel, std::size_t M, std::size_t N) {
  if (M < 2 || N < 2 || channel.size() != M * N) throw DomainError("forward_dft_half: bad channel dimensions");
  for (T v : channel)
    if (!std::isfinite(v)) throw DomainError("forward_dft_half: non-finite input");
  std::vector<std::complex<T>> buf(M * N);
  for (std::size_t i = 0; i < M * N; ++i) buf[i] = {channel[i], T(0)};
  fft::dft2d(buf.data(), M, N, false);
  HalfPlaneSpectrum<T> s(M, N);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const T re = buf[i].real(), im = buf[i].imag();
    s.amplitude[i] = std::hypot(re, im);
    if (re == T(0) && im == T(0)) {
      s.phase[i] = T(0);
    } else {
      T p = std::atan2(re, im);
      if (p <= -std::numbers::pi_v<T>) p = std::numbers::pi_v<T>;
      s.phase[i] = p;
    }
  }
  return s;
}

/// Builds the full M x N spectrum from half-plane rows. Rows 0 < u < ceil(M/2)
/// are mirrored to (M-u, -v) as conjugates. On the self-symmetric rows (u = 0
/// and, for even M, u = M/2) columns v in (0, ceil(N/2)) are kept and their
/// partners (N - v) overwritten with conjugates; self-paired cells keep only
/// the real part.
template <class T>
std::vector<std::complex<T>> complete_hermitian(std::span<const T> re, std::span<const T> im, std::size_t M,
                                                std::size_t N) {
  const std::size_t rows = M / 2 + 1;
  std::vector<std::complex<T>> full(M * N);
  for (std::size_t u = 0; u < rows; ++u) {
    const bool self_row = (u == 0) || (M % 2 == 0 && u == M / 2);
    for (std::size_t v = 0; v < N; ++v) {
      const std::size_t vm = (N - v) % N;
      const std::complex<T> h{re[u * N + v], im[u * N + v]};
      if (self_row) {
        if (v == vm)
          full[u * N + v] = {h.real(), T(0)};
        else if (v < vm) {
          full[u * N + v] = h;
          full[u * N + vm] = std::conj(h);
        }
      } else {
        full[u * N + v] = h;
        full[(M - u) * N + vm] = std::conj(h);
      }
    }
  }
  return full;
}

/// Adjoint of x = Re(iDFT(complete_hermitian(re, im))) / (M N) applied to a real
/// image gradient g: returns d/d(re) and d/d(im) over the half plane.
template <class T>
std::pair<std::vector<T>, std::vector<T>> hermitian_adjoint(std::span<const T> g, std::size_t M, std::size_t N) {
  std::vector<std::complex<T>> G(M * N);
  for (std::size_t i = 0; i < M * N; ++i) G[i] = {g[i], T(0)};
  fft::dft2d(G.data(), M, N, false);
  const std::size_t rows = M / 2 + 1;
  const T inv = T(1) / T(M * N);
  std::vector<T> gre(rows * N, T(0)), gim(rows * N, T(0));
  for (std::size_t u = 0; u < rows; ++u) {
    const bool self_row = (u == 0) || (M % 2 == 0 && u == M / 2);
    for (std::size_t v = 0; v < N; ++v) {
      const std::size_t vm = (N - v) % N, i = u * N + v;
      if (self_row && v == vm) {
        gre[i] = G[i].real() * inv;
      } else if (!self_row || v < vm) {
        gre[i] = T(2) * G[i].real() * inv;
        gim[i] = T(2) * G[i].imag() * inv;
      }
    }
  }
  return {std::move(gre), std::move(gim)};
}

template <class T>
T realness_tolerance() {
  return std::max(T(1e-6), T(1000) * std::numeric_limits<T>::epsilon());
}

/// Inverse transform of Hermitian-completed half-plane coefficients; checks that
/// the imaginary residual is negligible relative to sum|F| / (M N).
template <class T>
std::vector<T> inverse_half_plane(std::span<const T> re, std::span<const T> im, std::size_t M, std::size_t N,
                                  T* residual_out = nullptr) {
  auto full = complete_hermitian(re, im, M, N);
  T ref = T(0);
  for (const auto& c : full) ref += std::abs(c);
  fft::dft2d(full.data(), M, N, true);
  const T inv = T(1) / T(M * N);
  ref *= inv;
  std::vector<T> out(M * N);
  T residual = T(0);
  for (std::size_t i = 0; i < M * N; ++i) {
    out[i] = full[i].real() * inv;
    residual = std::max(residual, std::abs(full[i].imag() * inv));
  }
  if (residual_out) *residual_out = ref > T(0) ? residual / ref : residual;
  if (residual > realness_tolerance<T>() * ref)
    throw ConsistencyError("inverse DFT imaginary residual " + std::to_string(double(residual)) +
                           " exceeds tolerance");
  return out;
}

/// Re = A sin P, Im = A cos P, then Hermitian completion and inverse DFT.
template <class T>
std::vector<T> reassemble_idft(const HalfPlaneSpectrum<T>& s, T* residual_out = nullptr) {
  std::vector<T> re(s.size()), im(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    re[i] = s.amplitude[i] * std::sin(s.phase[i]);
    im[i] = s.amplitude[i] * std::cos(s.phase[i]);
  }
  return inverse_half_plane<T>(re, im, s.M, s.N, residual_out);
}

/// Elementwise split: related = mask * (A, P), irrelated = (1 - mask) * (A, P).
template <class T>
std::pair<HalfPlaneSpectrum<T>, HalfPlaneSpectrum<T>> separate_components(const HalfPlaneSpectrum<T>& s,
                                                                          const CrossMask<T>& amplitude_mask,
                                                                          const CrossMask<T>& phase_mask) {
  if (amplitude_mask.values.size() != s.size() || phase_mask.values.size() != s.size() ||
      amplitude_mask.rows != s.rows() || phase_mask.rows != s.rows())
    throw DomainError("separate_components: mask shape does not match spectrum");
  HalfPlaneSpectrum<T> rel(s.M, s.N), irr(s.M, s.N);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const T ma = amplitude_mask.values[i], mp = phase_mask.values[i];
    rel.amplitude[i] = ma * s.amplitude[i];
    irr.amplitude[i] = (T(1) - ma) * s.amplitude[i];
    rel.phase[i] = mp * s.phase[i];
    irr.phase[i] = (T(1) - mp) * s.phase[i];
  }
  return {std::move(rel), std::move(irr)};
}

template <class T>
std::pair<HalfPlaneSpectrum<T>, HalfPlaneSpectrum<T>> separate_components(const HalfPlaneSpectrum<T>& s,
                                                                          const CrossMask<T>& mask) {
  return separate_components(s, mask, mask);
}

/// Splits every channel of `image` with the amplitude and phase cross masks of
/// proposal i, returning the (related, irrelated) reconstructions.
template <class T>
std::pair<ImageTensor<T>, ImageTensor<T>> separate_image(const ImageTensor<T>& image, const ProposalSet& proposals,
                                                         std::size_t i, MaskMode mode = MaskMode::Hard,
                                                         double sharpness = kDefaultSharpness) {
  image.validate();
  if (i >= proposals.K) throw DomainError("separate_image: proposal index out of range");
  if (image.channels != kColorChannels) throw DomainError("separate_image: expected a 3-channel image");
  ImageTensor<T> rel(image.channels, image.M, image.N), irr(image.channels, image.M, image.N);
  for (std::size_t c = 0; c < image.channels; ++c) {
    const auto spec = forward_dft_half<T>(image.channel(c), image.M, image.N);
    const auto ma = build_cross_mask<T>(proposals.band(c, Part::Amplitude, Axis::U, i),
                                        proposals.band(c, Part::Amplitude, Axis::V, i), image.M, image.N, mode,
                                        sharpness);
    const auto mp = build_cross_mask<T>(proposals.band(c, Part::Phase, Axis::U, i),
                                        proposals.band(c, Part::Phase, Axis::V, i), image.M, image.N, mode, sharpness);
    auto [sr, si] = separate_components(spec, ma, mp);
    auto xr = reassemble_idft(sr), xi = reassemble_idft(si);
    std::copy(xr.begin(), xr.end(), rel.channel(c).begin());
    std::copy(xi.begin(), xi.end(), irr.channel(c).begin());
  }
  return {std::move(rel), std::move(irr)};
}

template <class T>
double energy(std::span<const T> x) {
  double e = 0;
  for (T v : x) e += double(v) * double(v);
  return e;
}

}  // namespace apn::spectral
