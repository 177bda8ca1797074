#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "apn/errors.hpp"

namespace apn {

/// Normalized closed interval on one frequency axis; start > end selects nothing.
struct Band {
  double start = 0.0;
  double end = 0.0;

  bool empty() const { return start > end; }
  bool contains(double x) const { return start <= x && x <= end; }
  double width() const { return end - start; }
};

enum class Part : std::size_t { Amplitude = 0, Phase = 1 };
enum class Axis : std::size_t { U = 0, V = 1 };

inline constexpr std::size_t kColorChannels = 3;
inline constexpr std::size_t kParts = 2;
inline constexpr std::size_t kAxes = 2;
/// (channel, part, axis) maps per image.
inline constexpr std::size_t kBandMaps = kColorChannels * kParts * kAxes;

/// Equal-division prior position of proposal i among K.
inline double proposal_prior(std::size_t i, std::size_t K) {
  return K == 1 ? 0.5 : double(i) / double(K - 1);
}

/// Proposal bands for one image, indexed (channel, part, axis, proposal).
/// Flat layout matches the network's output tensor: [c][part][axis][i][start,end].
struct ProposalSet {
  std::size_t K = 0;
  std::vector<double> values;  // kBandMaps * K * 2

  ProposalSet() = default;
  explicit ProposalSet(std::size_t k) : K(k), values(kBandMaps * k * 2, 0.0) {}

  static ProposalSet uniform(std::size_t k, Band b) {
    ProposalSet p(k);
    for (std::size_t j = 0; j < p.values.size(); j += 2) {
      p.values[j] = b.start;
      p.values[j + 1] = b.end;
    }
    return p;
  }

  std::size_t offset(std::size_t c, Part part, Axis axis, std::size_t i) const {
    if (c >= kColorChannels || i >= K) throw DomainError("proposal index out of range");
    return ((((c * kParts) + std::size_t(part)) * kAxes + std::size_t(axis)) * K + i) * 2;
  }
  Band band(std::size_t c, Part part, Axis axis, std::size_t i) const {
    const auto o = offset(c, part, axis, i);
    return {values[o], values[o + 1]};
  }
  void set(std::size_t c, Part part, Axis axis, std::size_t i, Band b) {
    const auto o = offset(c, part, axis, i);
    values[o] = b.start;
    values[o + 1] = b.end;
  }
  std::size_t band_count() const { return values.size() / 2; }
};

}  // namespace apn
