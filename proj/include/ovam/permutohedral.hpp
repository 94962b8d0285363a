#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "ovam/error.hpp"

namespace ovam {

/// High-dimensional Gaussian filtering on the permutohedral lattice
/// (splat, blur along each of the d+1 lattice axes, slice).
/// Features are expected pre-scaled by the inverse kernel widths.
class PermutohedralLattice {
 public:
  PermutohedralLattice() = default;

  PermutohedralLattice(const std::vector<double>& features, std::size_t dims, std::size_t n_points) {
    init(features, dims, n_points);
  }

  void init(const std::vector<double>& features, std::size_t dims, std::size_t n_points) {
    require(dims >= 1 && features.size() == dims * n_points, ErrorKind::dimension, "lattice feature size mismatch");
    d_ = dims;
    n_ = n_points;
    const std::size_t d1 = d_ + 1;
    offsets_.assign(n_ * d1, 0);
    weights_.assign(n_ * d1, 0.0);
    keys_.clear();
    table_.clear();

    std::vector<double> scale(d_);
    const double inv_std = std::sqrt(2.0 / 3.0) * static_cast<double>(d1);
    for (std::size_t i = 0; i < d_; ++i)
      scale[i] = inv_std / std::sqrt(static_cast<double>((i + 1) * (i + 2)));

    std::vector<double> elevated(d1), bary(d_ + 2);
    std::vector<long> rem0(d1), rank(d1);
    std::vector<std::int32_t> key(d_);
    const double down = 1.0 / static_cast<double>(d1);
    const long dl = static_cast<long>(d_), d1l = static_cast<long>(d1);

    for (std::size_t k = 0; k < n_; ++k) {
      const double* f = &features[k * d_];
      double sm = 0.0;
      for (std::size_t j = d_; j > 0; --j) {
        const double cf = f[j - 1] * scale[j - 1];
        elevated[j] = sm - static_cast<double>(j) * cf;
        sm += cf;
      }
      elevated[0] = sm;

      long sum = 0;
      for (std::size_t j = 0; j <= d_; ++j) {
        const double v = down * elevated[j];
        const double up = std::ceil(v) * static_cast<double>(d1);
        const double dn = std::floor(v) * static_cast<double>(d1);
        rem0[j] = static_cast<long>(up - elevated[j] < elevated[j] - dn ? up : dn);
        sum += rem0[j];
      }
      sum /= d1l;

      std::fill(rank.begin(), rank.end(), 0);
      for (std::size_t i = 0; i < d_; ++i) {
        const double di = elevated[i] - static_cast<double>(rem0[i]);
        for (std::size_t j = i + 1; j <= d_; ++j) {
          if (di < elevated[j] - static_cast<double>(rem0[j]))
            ++rank[i];
          else
            ++rank[j];
        }
      }
      if (sum > 0) {
        for (std::size_t i = 0; i <= d_; ++i) {
          if (rank[i] >= d1l - sum) {
            rem0[i] -= d1l;
            rank[i] += sum - d1l;
          } else {
            rank[i] += sum;
          }
        }
      } else if (sum < 0) {
        for (std::size_t i = 0; i <= d_; ++i) {
          if (rank[i] < -sum) {
            rem0[i] += d1l;
            rank[i] += d1l + sum;
          } else {
            rank[i] += sum;
          }
        }
      }

      std::fill(bary.begin(), bary.end(), 0.0);
      for (std::size_t i = 0; i <= d_; ++i) {
        const double v = (elevated[i] - static_cast<double>(rem0[i])) * down;
        bary[static_cast<std::size_t>(dl - rank[i])] += v;
        bary[static_cast<std::size_t>(dl + 1 - rank[i])] -= v;
      }
      bary[0] += 1.0 + bary[d_ + 1];

      for (std::size_t r = 0; r <= d_; ++r) {
        for (std::size_t i = 0; i < d_; ++i) {
          long c = rem0[i] + static_cast<long>(r);
          if (rank[i] > dl - static_cast<long>(r)) c -= d1l;
          key[i] = static_cast<std::int32_t>(c);
        }
        offsets_[k * d1 + r] = insert(key);
        weights_[k * d1 + r] = bary[r];
      }
    }
  }

  std::size_t lattice_points() const { return keys_.size() / (d_ ? d_ : 1); }

  /// out[k * channels + c] = sum_j w(k, j) in[j * channels + c]; in and out may alias.
  void filter(const double* in, double* out, std::size_t channels) const {
    const std::size_t d1 = d_ + 1;
    const std::size_t m = lattice_points();
    std::vector<double> values((m + 1) * channels, 0.0), next((m + 1) * channels, 0.0);
    // Slot 0 is the empty neighbour; lattice point i lives at slot i + 1.
    for (std::size_t k = 0; k < n_; ++k)
      for (std::size_t r = 0; r < d1; ++r) {
        const double w = weights_[k * d1 + r];
        double* v = &values[(offsets_[k * d1 + r] + 1) * channels];
        for (std::size_t c = 0; c < channels; ++c) v[c] += w * in[k * channels + c];
      }

    std::vector<std::int32_t> n1(d_), n2(d_);
    for (std::size_t j = 0; j <= d_; ++j) {
      for (std::size_t i = 0; i < m; ++i) {
        const std::int32_t* key = &keys_[i * d_];
        for (std::size_t k = 0; k < d_; ++k) {
          n1[k] = key[k] - 1;
          n2[k] = key[k] + 1;
        }
        if (j < d_) {
          n1[j] = key[j] + static_cast<std::int32_t>(d_);
          n2[j] = key[j] - static_cast<std::int32_t>(d_);
        }
        const std::size_t s1 = find(n1) + 1, s2 = find(n2) + 1;  // npos + 1 == 0
        const double* v0 = &values[(i + 1) * channels];
        const double* v1 = &values[s1 * channels];
        const double* v2 = &values[s2 * channels];
        double* o = &next[(i + 1) * channels];
        for (std::size_t c = 0; c < channels; ++c) o[c] = v0[c] + 0.5 * (v1[c] + v2[c]);
      }
      std::swap(values, next);
    }

    const double alpha = 1.0 / (1.0 + std::pow(2.0, -static_cast<double>(d_)));
    for (std::size_t k = 0; k < n_; ++k) {
      for (std::size_t c = 0; c < channels; ++c) out[k * channels + c] = 0.0;
      for (std::size_t r = 0; r < d1; ++r) {
        const double w = weights_[k * d1 + r] * alpha;
        const double* v = &values[(offsets_[k * d1 + r] + 1) * channels];
        for (std::size_t c = 0; c < channels; ++c) out[k * channels + c] += w * v[c];
      }
    }
  }

 private:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  struct KeyHash {
    std::size_t operator()(const std::vector<std::int32_t>& k) const noexcept {
      std::size_t h = 0;
      for (auto v : k) h = (h + static_cast<std::size_t>(static_cast<std::uint32_t>(v))) * 2531011u;
      return h;
    }
  };

  std::size_t insert(const std::vector<std::int32_t>& key) {
    auto [it, fresh] = table_.try_emplace(key, table_.size());
    if (fresh) keys_.insert(keys_.end(), key.begin(), key.end());
    return it->second;
  }

  std::size_t find(const std::vector<std::int32_t>& key) const {
    auto it = table_.find(key);
    return it == table_.end() ? npos : it->second;
  }

  std::size_t d_ = 0, n_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<double> weights_;
  std::vector<std::int32_t> keys_;
  std::unordered_map<std::vector<std::int32_t>, std::size_t, KeyHash> table_;
};

}  // namespace ovam
