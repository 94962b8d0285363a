#pragma once

// Reference implementations used only by tests. They are written straight
// from the defining formulas, favour obviousness over speed and share no code
// with the library beyond its plain data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ovam/backend.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Counter PRNG
// ---------------------------------------------------------------------------

inline std::uint64_t sm(std::uint64_t z) {
  z = z + 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < s.size(); ++i) {
    h = h ^ static_cast<unsigned char>(s[i]);
    h = h * 1099511628211ull;
  }
  return h;
}

inline std::uint64_t bits(std::uint64_t seed, const std::string& stream, std::int64_t step, std::uint64_t i) {
  const std::uint64_t key = sm(sm(sm(seed) ^ fnv(stream)) ^ static_cast<std::uint64_t>(step));
  return sm(key ^ sm(i));
}

inline double u_signed(std::uint64_t seed, const std::string& stream, std::int64_t step, std::uint64_t i) {
  return std::ldexp(static_cast<double>(bits(seed, stream, step, i) >> 11), -52) - 1.0;
}

inline double u_unit(std::uint64_t seed, const std::string& stream, std::int64_t step, std::uint64_t i) {
  return std::ldexp(static_cast<double>(bits(seed, stream, step, i) >> 11), -53);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// softmax over tokens of q.k / sqrt(d), no max subtraction, long double sums.
/// q: [n_pix][heads][d], k: [n_tok][heads][d] -> [n_pix][heads][n_tok]
inline std::vector<std::vector<std::vector<double>>> naive_attention(
    const std::vector<std::vector<std::vector<double>>>& q, const std::vector<std::vector<std::vector<double>>>& k) {
  const std::size_t n_pix = q.size(), heads = q[0].size(), d = q[0][0].size(), n_tok = k.size();
  std::vector<std::vector<std::vector<double>>> out(n_pix, std::vector<std::vector<double>>(heads, std::vector<double>(n_tok)));
  for (std::size_t p = 0; p < n_pix; ++p)
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<long double> e(n_tok);
      long double z = 0;
      for (std::size_t t = 0; t < n_tok; ++t) {
        long double dot = 0;
        for (std::size_t i = 0; i < d; ++i) dot += static_cast<long double>(q[p][h][i]) * k[t][h][i];
        e[t] = std::exp(dot / std::sqrt(static_cast<long double>(d)));
        z += e[t];
      }
      for (std::size_t t = 0; t < n_tok; ++t) out[p][h][t] = static_cast<double>(e[t] / z);
    }
  return out;
}

template <typename T>
std::vector<std::vector<std::vector<double>>> nested(const ovam::Tensor<T>& t) {
  std::vector<std::vector<std::vector<double>>> out(t.dim(0), std::vector<std::vector<double>>(t.dim(1), std::vector<double>(t.dim(2))));
  for (std::size_t a = 0; a < t.dim(0); ++a)
    for (std::size_t b = 0; b < t.dim(1); ++b)
      for (std::size_t c = 0; c < t.dim(2); ++c) out[a][b][c] = static_cast<double>(t(a, b, c));
  return out;
}

/// K[k][h][d] = sum_e W[h][d][e] X[k][e]
inline std::vector<std::vector<std::vector<double>>> keys(const ovam::TokenEmbeddingMatrix& x, const ovam::Tensor<float>& w) {
  std::vector<std::vector<std::vector<double>>> out(x.n_tokens(), std::vector<std::vector<double>>(w.dim(0), std::vector<double>(w.dim(1), 0.0)));
  for (std::size_t k = 0; k < x.n_tokens(); ++k)
    for (std::size_t h = 0; h < w.dim(0); ++h)
      for (std::size_t d = 0; d < w.dim(1); ++d)
        for (std::size_t e = 0; e < w.dim(2); ++e) out[k][h][d] += static_cast<double>(w(h, d, e)) * x.tokens(k, e);
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear resize, half-pixel centres
// ---------------------------------------------------------------------------

/// Weight of source sample i for destination o: a tent around the source
/// coordinate (o + 0.5) * in / out - 0.5 clamped to [0, in - 1].
inline double tent(std::size_t o, std::size_t i, std::size_t in, std::size_t out) {
  double s = (o + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  s = std::clamp(s, 0.0, static_cast<double>(in - 1));
  return std::max(0.0, 1.0 - std::abs(s - static_cast<double>(i)));
}

inline ovam::Map resize(const ovam::Map& in, std::size_t ow, std::size_t oh) {
  ovam::Map out(ow, oh, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < in.height; ++i)
        for (std::size_t j = 0; j < in.width; ++j) acc += tent(y, i, in.height, oh) * tent(x, j, in.width, ow) * in.at(i, j);
      out.at(y, x) = acc;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Heatmap aggregation
// ---------------------------------------------------------------------------

struct Slice {
  std::string block;
  int t;
  int head;
};

/// Every (cross block, t, head) of the trace in block -> timestep -> head order.
inline std::vector<Slice> all_slices(const ovam::DenoisingTrace& tr) {
  std::vector<Slice> out;
  for (const auto& b : tr.blocks)
    if (b.kind == ovam::BlockKind::cross)
      for (int t : tr.timesteps)
        for (int h = 0; h < b.heads; ++h) out.push_back({b.id, t, h});
  return out;
}

/// Attention slice for token k recomputed from scratch and resized.
inline ovam::Map slice_map(const ovam::DenoisingTrace& tr, const ovam::TokenEmbeddingMatrix& x, const Slice& s,
                           std::size_t k, std::size_t ow, std::size_t oh) {
  const auto& b = tr.block(s.block);
  const auto a = naive_attention(nested(tr.query(s.block, s.t)), keys(x, tr.key_weight(s.block)));
  const std::size_t sw = b.side(tr.latent_w), sh = b.side(tr.latent_h);
  ovam::Map m(sw, sh);
  for (std::size_t p = 0; p < sw * sh; ++p) m.data[p] = a[p][s.head][k];
  return resize(m, ow, oh);
}

inline std::vector<ovam::Map> brute_ovam(const ovam::DenoisingTrace& tr, const ovam::TokenEmbeddingMatrix& x,
                                         const std::vector<Slice>& slices, std::size_t ow, std::size_t oh,
                                         bool mean = false) {
  std::vector<ovam::Map> out(x.n_tokens(), ovam::Map(ow, oh, 0.0));
  for (const auto& s : slices)
    for (std::size_t k = 0; k < x.n_tokens(); ++k) {
      const auto m = slice_map(tr, x, s, k, ow, oh);
      for (std::size_t i = 0; i < m.size(); ++i) out[k].data[i] += m.data[i];
    }
  if (mean)
    for (auto& m : out)
      for (auto& v : m.data) v /= static_cast<double>(slices.size());
  return out;
}

inline double max_abs_diff(const ovam::Map& a, const ovam::Map& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data[i] - b.data[i]));
  return d;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// sum_k mean_i [ -g log p - (1 - g) log(1 - p) ], p clamped to [eps, 1 - eps]
inline double bce(const std::vector<ovam::Map>& maps, const std::vector<ovam::Raster<std::uint8_t>>& gt, double eps) {
  double total = 0;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    double s = 0;
    for (std::size_t i = 0; i < maps[k].size(); ++i) {
      double p = maps[k].data[i];
      if (p < eps) p = eps;
      if (p > 1 - eps) p = 1 - eps;
      const double g = gt[k].data[i];
      s += -(g * std::log(p) + (1 - g) * std::log(1 - p));
    }
    total += s / maps[k].size();
  }
  return total;
}

// ---------------------------------------------------------------------------
// Fusion and binarization
// ---------------------------------------------------------------------------

inline std::vector<double> min_max(const std::vector<double>& v, double alpha) {
  const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  std::vector<double> out;
  for (double x : v) out.push_back(hi == lo ? 1.0 : alpha + (1 - alpha) * (x - lo) / (hi - lo));
  return out;
}

/// score[q] = sum over self blocks, t, heads, p of A[p, q, h]
inline std::vector<double> column_sums(const ovam::DenoisingTrace& tr) {
  const std::size_t n = tr.latent_w * tr.latent_h;
  std::vector<double> s(n, 0.0);
  for (const auto& [key, a] : tr.self_attn)
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = 0; q < n; ++q)
        for (std::size_t h = 0; h < a.dim(2); ++h) s[q] += a(p, q, h);
  return s;
}

inline std::vector<std::uint8_t> indicator(const std::vector<double>& v, double tau) {
  const double m = *std::max_element(v.begin(), v.end());
  std::vector<std::uint8_t> out;
  for (double x : v) out.push_back(m > 0 && x >= tau * m);
  return out;
}

// ---------------------------------------------------------------------------
// IoU
// ---------------------------------------------------------------------------

/// Per class: sum tp / sum (tp + fp + fn) over the class's images, 1 if the
/// union is empty; mean over classes present.
struct IouOracle {
  std::map<std::string, std::array<long, 3>> counts;  // tp, fp, fn

  void add(const std::string& cls, const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
    auto& c = counts[cls];
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] && gt[i]) c[0]++;
      if (pred[i] && !gt[i]) c[1]++;
      if (!pred[i] && gt[i]) c[2]++;
    }
  }
  double iou(const std::string& cls) const {
    const auto& c = counts.at(cls);
    const long u = c[0] + c[1] + c[2];
    return u == 0 ? 1.0 : static_cast<double>(c[0]) / u;
  }
  double miou() const {
    double s = 0;
    for (const auto& [cls, c] : counts) s += iou(cls);
    return s / counts.size();
  }
};

}  // namespace oracle
