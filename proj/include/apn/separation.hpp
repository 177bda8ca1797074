#pragma once

// Batched, differentiable frequency-band separation. Given precomputed
// half-plane spectra and a proposal tensor, produces the related and
// irrelated reconstructions for every proposal. Gradients flow into the
// proposal edges through the soft masks; the spectra are constants.

#include <memory>

#include "apn/autograd.hpp"
#include "apn/proposal_set.hpp"
#include "apn/spectral.hpp"

namespace apn {

template <class T>
struct SpectraBatch {
  std::size_t batch = 0, M = 0, N = 0;
  std::vector<spectral::HalfPlaneSpectrum<T>> spectra;  // [b][c]

  const spectral::HalfPlaneSpectrum<T>& at(std::size_t b, std::size_t c) const {
    return spectra[b * kColorChannels + c];
  }
};

/// images (B, 3, M, N) -> per-channel half-plane spectra.
template <class T>
std::shared_ptr<const SpectraBatch<T>> compute_spectra(const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != kColorChannels)
    throw DomainError("compute_spectra: expected (B,3,M,N), got " + shape_str(images.shape()));
  auto out = std::make_shared<SpectraBatch<T>>();
  out->batch = images.dim(0);
  out->M = images.dim(2);
  out->N = images.dim(3);
  const std::size_t plane = out->M * out->N;
  for (std::size_t b = 0; b < out->batch; ++b)
    for (std::size_t c = 0; c < kColorChannels; ++c)
      out->spectra.push_back(spectral::forward_dft_half<T>(
          std::span<const T>(images.data() + (b * kColorChannels + c) * plane, plane), out->M, out->N));
  return out;
}

namespace detail {

template <class T>
struct PartMask {
  spectral::AxisMembership<T> u, v;
  std::vector<T> values;
};

template <class T>
PartMask<T> part_mask(const T* edges_u, const T* edges_v, std::size_t M, std::size_t N, spectral::MaskMode mode,
                      double sharpness) {
  PartMask<T> pm;
  const std::size_t rows = M / 2 + 1;
  pm.u = spectral::axis_membership<T>({double(edges_u[0]), double(edges_u[1])}, rows, double(M / 2), mode, sharpness);
  pm.v = spectral::axis_membership<T>({double(edges_v[0]), double(edges_v[1])}, N, double(N - 1), mode, sharpness);
  pm.values.resize(rows * N);
  for (std::size_t u = 0; u < rows; ++u)
    for (std::size_t v = 0; v < N; ++v) pm.values[u * N + v] = T(1) - (T(1) - pm.u.value[u]) * (T(1) - pm.v.value[v]);
  return pm;
}

// Chains a per-cell mask gradient into the four band-edge gradients
// (start_u, end_u, start_v, end_v).
template <class T>
void mask_edge_grads(const PartMask<T>& pm, const std::vector<T>& gmask, std::size_t rows, std::size_t N, T* g_u,
                     T* g_v) {
  for (std::size_t u = 0; u < rows; ++u) {
    T gmu = T(0);
    for (std::size_t v = 0; v < N; ++v) gmu += gmask[u * N + v] * (T(1) - pm.v.value[v]);
    g_u[0] += gmu * pm.u.d_start[u];
    g_u[1] += gmu * pm.u.d_end[u];
  }
  for (std::size_t v = 0; v < N; ++v) {
    T gmv = T(0);
    for (std::size_t u = 0; u < rows; ++u) gmv += gmask[u * N + v] * (T(1) - pm.u.value[u]);
    g_v[0] += gmv * pm.v.d_start[v];
    g_v[1] += gmv * pm.v.d_end[v];
  }
}

}  // namespace detail

/// proposals (B, 3, 2, 2, K, 2) -> (2, B*K, 3, M, N); slot 0 holds the related
/// images, slot 1 the irrelated ones, ordered [b][i].
template <class T>
ad::Var<T> separate_bands(std::shared_ptr<const SpectraBatch<T>> spectra, const ad::Var<T>& proposals,
                          spectral::MaskMode mode, double sharpness = spectral::kDefaultSharpness) {
  const std::size_t B = spectra->batch, M = spectra->M, N = spectra->N, rows = M / 2 + 1, cells = rows * N;
  if (proposals.value().rank() != 6 || proposals.dim(0) != B || proposals.dim(1) != kColorChannels ||
      proposals.dim(2) != kParts || proposals.dim(3) != kAxes || proposals.dim(5) != 2)
    throw DomainError("separate_bands: proposal tensor shape " + shape_str(proposals.shape()));
  const std::size_t K = proposals.dim(4), per_image = kBandMaps * K * 2, plane = M * N;
  auto edge = [K](std::size_t c, Part p, Axis a, std::size_t i) {
    return ((((c * kParts) + std::size_t(p)) * kAxes + std::size_t(a)) * K + i) * 2;
  };

  Tensor<T> y({2, B * K, kColorChannels, M, N});
  const std::size_t slot = B * K * kColorChannels * plane;
  std::vector<T> re(cells), im(cells);
  for (std::size_t b = 0; b < B; ++b) {
    const T* pp = proposals.value().data() + b * per_image;
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t c = 0; c < kColorChannels; ++c) {
        const auto& s = spectra->at(b, c);
        const auto ma = detail::part_mask(pp + edge(c, Part::Amplitude, Axis::U, i),
                                          pp + edge(c, Part::Amplitude, Axis::V, i), M, N, mode, sharpness);
        const auto mp = detail::part_mask(pp + edge(c, Part::Phase, Axis::U, i), pp + edge(c, Part::Phase, Axis::V, i),
                                          M, N, mode, sharpness);
        const std::size_t off = ((b * K + i) * kColorChannels + c) * plane;
        for (int which = 0; which < 2; ++which) {
          for (std::size_t j = 0; j < cells; ++j) {
            const T a = which == 0 ? ma.values[j] : T(1) - ma.values[j];
            const T p = which == 0 ? mp.values[j] : T(1) - mp.values[j];
            const T amp = a * s.amplitude[j], ph = p * s.phase[j];
            re[j] = amp * std::sin(ph);
            im[j] = amp * std::cos(ph);
          }
          auto x = spectral::inverse_half_plane<T>(re, im, M, N);
          std::copy(x.begin(), x.end(), y.data() + which * slot + off);
        }
      }
  }

  return ad::make_op<T>(std::move(y), {proposals}, [=, pp_node = proposals.node()](ad::Node<T>& self) {
    auto& gp = pp_node->grad_ref();
    std::vector<T> gma(cells), gmp(cells);
    for (std::size_t b = 0; b < B; ++b) {
      const T* pp = pp_node->value.data() + b * per_image;
      T* gpp = gp.data() + b * per_image;
      for (std::size_t i = 0; i < K; ++i)
        for (std::size_t c = 0; c < kColorChannels; ++c) {
          const auto& s = spectra->at(b, c);
          const auto ma = detail::part_mask(pp + edge(c, Part::Amplitude, Axis::U, i),
                                            pp + edge(c, Part::Amplitude, Axis::V, i), M, N, mode, sharpness);
          const auto mp = detail::part_mask(pp + edge(c, Part::Phase, Axis::U, i),
                                            pp + edge(c, Part::Phase, Axis::V, i), M, N, mode, sharpness);
          const std::size_t off = ((b * K + i) * kColorChannels + c) * plane;
          std::fill(gma.begin(), gma.end(), T(0));
          std::fill(gmp.begin(), gmp.end(), T(0));
          for (int which = 0; which < 2; ++which) {
            auto [gre, gim] =
                spectral::hermitian_adjoint<T>(std::span<const T>(self.grad.data() + which * slot + off, plane), M, N);
            const T sign = which == 0 ? T(1) : T(-1);
            for (std::size_t j = 0; j < cells; ++j) {
              const T a = which == 0 ? ma.values[j] : T(1) - ma.values[j];
              const T p = which == 0 ? mp.values[j] : T(1) - mp.values[j];
              const T A = s.amplitude[j], P = s.phase[j];
              const T sn = std::sin(p * P), cs = std::cos(p * P);
              gma[j] += sign * (gre[j] * A * sn + gim[j] * A * cs);
              gmp[j] += sign * (gre[j] * a * A * cs - gim[j] * a * A * sn) * P;
            }
          }
          detail::mask_edge_grads(ma, gma, rows, N, gpp + edge(c, Part::Amplitude, Axis::U, i),
                                  gpp + edge(c, Part::Amplitude, Axis::V, i));
          detail::mask_edge_grads(mp, gmp, rows, N, gpp + edge(c, Part::Phase, Axis::U, i),
                                  gpp + edge(c, Part::Phase, Axis::V, i));
        }
    }
  });
}

}  // namespace apn
