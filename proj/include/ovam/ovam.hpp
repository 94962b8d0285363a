#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ovam/array.hpp"
#include "ovam/backend.hpp"
#include "ovam/error.hpp"

namespace ovam {

// ---------------------------------------------------------------------------
// Attribution keys and attention
// ---------------------------------------------------------------------------

/// Projects attribution tokens through a block's key map.
/// weights: [heads, head_dim, l_E]; result: [n_tokens, heads, head_dim].
template <typename W>
Tensor<double> project_attribution_keys(const TokenEmbeddingMatrix& tokens, const Tensor<W>& weights) {
  require(weights.rank() == 3, ErrorKind::dimension,
          "key weights must be [heads, head_dim, l_E], got " + weights.shape_string());
  const std::size_t heads = weights.dim(0), hd = weights.dim(1), width = weights.dim(2);
  require(tokens.dim() == width, ErrorKind::dimension,
          "attribution embedding width " + std::to_string(tokens.dim()) +
              " does not match key-projection input width " + std::to_string(width));
  const std::size_t n = tokens.n_tokens();
  Tensor<double> keys({n, heads, hd});
  for (std::size_t k = 0; k < n; ++k) {
    const auto x = tokens.row(k);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t d = 0; d < hd; ++d) {
        const W* w = &weights(h, d, 0);
        double acc = 0.0;
        for (std::size_t e = 0; e < width; ++e) acc += static_cast<double>(w[e]) * x[e];
        keys(k, h, d) = acc;
      }
  }
  return keys;
}

template <typename W>
Tensor<double> project_attribution_keys(const TokenEmbeddingMatrix& tokens, const BlockSpec& block,
                                        const Tensor<W>& weights) {
  require(weights.rank() == 3 && weights.dim(0) == std::size_t(block.heads) &&
              weights.dim(1) == std::size_t(block.head_dim),
          ErrorKind::dimension,
          "key weights " + weights.shape_string() + " do not match block '" + block.id + "'");
  return project_attribution_keys(tokens, weights);
}

/// softmax(Q K^T / sqrt(d)) over the token axis, computed per pixel and head.
/// queries: [n_pix, heads, d]; keys: [n_tokens, heads, d]; result: [n_pix, heads, n_tokens].
template <typename Q>
Tensor<double> attention_matrix(const Tensor<Q>& queries, const Tensor<double>& keys) {
  require(queries.rank() == 3 && keys.rank() == 3, ErrorKind::dimension,
          "attention inputs must be rank 3, got " + queries.shape_string() + " and " + keys.shape_string());
  const std::size_t n_pix = queries.dim(0), heads = queries.dim(1), hd = queries.dim(2);
  const std::size_t n_tok = keys.dim(0);
  require(keys.dim(1) == heads && keys.dim(2) == hd, ErrorKind::dimension,
          "queries " + queries.shape_string() + " and keys " + keys.shape_string() +
              " disagree on heads/head_dim");
  require(n_tok >= 1, ErrorKind::dimension, "attention needs at least one key token");
  require(queries.all_finite(), ErrorKind::numeric_input, "queries contain NaN or Inf");
  require(keys.all_finite(), ErrorKind::numeric_input, "keys contain NaN or Inf");

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor<double> out({n_pix, heads, n_tok});
  std::vector<double> logits(n_tok);
  for (std::size_t p = 0; p < n_pix; ++p)
    for (std::size_t h = 0; h < heads; ++h) {
      const Q* q = &queries(p, h, 0);
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n_tok; ++k) {
        const double* kv = &keys(k, h, 0);
        double dot = 0.0;
        for (std::size_t d = 0; d < hd; ++d) dot += static_cast<double>(q[d]) * kv[d];
        logits[k] = dot * inv_sqrt_d;
        peak = std::max(peak, logits[k]);
      }
      double sum = 0.0;
      for (std::size_t k = 0; k < n_tok; ++k) {
        logits[k] = std::exp(logits[k] - peak);
        sum += logits[k];
      }
      double* row = &out(p, h, 0);
      for (std::size_t k = 0; k < n_tok; ++k) row[k] = logits[k] / sum;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

/// Separable bilinear resampling with half-pixel centres (align_corners = false):
/// source coordinate = (dst + 0.5) * in / out - 0.5, clamped at 0, upper
/// neighbour clamped to the last sample. Same convention as torch's
/// F.interpolate(mode="bilinear", align_corners=False).
class BilinearResizer {
 public:
  BilinearResizer(std::size_t in_w, std::size_t in_h, std::size_t out_w, std::size_t out_h)
      : in_w_(in_w), in_h_(in_h), out_w_(out_w), out_h_(out_h) {
    require(in_w >= 1 && in_h >= 1, ErrorKind::argument, "resize source must be at least 1x1");
    require(out_w >= 1 && out_h >= 1, ErrorKind::argument,
            "resize target must be at least 1x1, got " + dims_string(out_w, out_h));
    x_ = axis(in_w, out_w);
    y_ = axis(in_h, out_h);
  }

  bool identity() const { return in_w_ == out_w_ && in_h_ == out_h_; }
  std::size_t out_w() const { return out_w_; }
  std::size_t out_h() const { return out_h_; }

  /// Reads a strided source (element (y, x) at src[(y * in_w + x) * stride]) and
  /// accumulates scale * resized into dst.
  void accumulate(const double* src, std::size_t stride, double* dst) const {
    if (identity()) {
      for (std::size_t i = 0; i < out_w_ * out_h_; ++i) dst[i] += src[i * stride];
      return;
    }
    for (std::size_t y = 0; y < out_h_; ++y) {
      const auto& ay = y_[y];
      const double* r0 = src + ay.i0 * in_w_ * stride;
      const double* r1 = src + ay.i1 * in_w_ * stride;
      for (std::size_t x = 0; x < out_w_; ++x) {
        const auto& ax = x_[x];
        const double top = ax.w0 * r0[ax.i0 * stride] + ax.w1 * r0[ax.i1 * stride];
        const double bottom = ax.w0 * r1[ax.i0 * stride] + ax.w1 * r1[ax.i1 * stride];
        dst[y * out_w_ + x] += ay.w0 * top + ay.w1 * bottom;
      }
    }
  }

  Map apply(const Map& in) const {
    require(in.width == in_w_ && in.height == in_h_, ErrorKind::dimension,
            "resizer expects " + dims_string(in_w_, in_h_) + " input, got " + dims_string(in.width, in.height));
    Map out(out_w_, out_h_, 0.0);
    if (identity()) return in;
    accumulate(in.data.data(), 1, out.data.data());
    return out;
  }

  /// Adjoint of apply(): scatters an output-space gradient back to the source
  /// grid, dst[(y * in_w + x) * stride] += ...
  void accumulate_transpose(const double* grad_out, double* dst, std::size_t stride) const {
    if (identity()) {
      for (std::size_t i = 0; i < out_w_ * out_h_; ++i) dst[i * stride] += grad_out[i];
      return;
    }
    for (std::size_t y = 0; y < out_h_; ++y) {
      const auto& ay = y_[y];
      for (std::size_t x = 0; x < out_w_; ++x) {
        const auto& ax = x_[x];
        const double g = grad_out[y * out_w_ + x];
        dst[(ay.i0 * in_w_ + ax.i0) * stride] += ay.w0 * ax.w0 * g;
        dst[(ay.i0 * in_w_ + ax.i1) * stride] += ay.w0 * ax.w1 * g;
        dst[(ay.i1 * in_w_ + ax.i0) * stride] += ay.w1 * ax.w0 * g;
        dst[(ay.i1 * in_w_ + ax.i1) * stride] += ay.w1 * ax.w1 * g;
      }
    }
  }

  Map transpose(const Map& grad) const {
    require(grad.width == out_w_ && grad.height == out_h_, ErrorKind::dimension, "adjoint input has wrong dims");
    Map out(in_w_, in_h_, 0.0);
    accumulate_transpose(grad.data.data(), out.data.data(), 1);
    return out;
  }

 private:
  struct Tap {
    std::size_t i0, i1;
    double w0, w1;
  };

  static std::vector<Tap> axis(std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      std::size_t i0 = static_cast<std::size_t>(src);
      if (i0 > in - 1) i0 = in - 1;
      const std::size_t i1 = i0 < in - 1 ? i0 + 1 : i0;
      const double lambda = i1 == i0 ? 0.0 : src - static_cast<double>(i0);
      taps[o] = {i0, i1, 1.0 - lambda, lambda};
    }
    return taps;
  }

  std::size_t in_w_, in_h_, out_w_, out_h_;
  std::vector<Tap> x_, y_;
};

inline Map resize_bilinear(const Map& map, std::size_t out_w, std::size_t out_h) {
  return BilinearResizer(map.width, map.height, out_w, out_h).apply(map);
}

// ---------------------------------------------------------------------------
// Selection and aggregation
// ---------------------------------------------------------------------------

enum class TimestepStrategy { all, single, early, late };
enum class HeatmapNormalization { raw_sum, mean_over_slices };

inline std::string to_string(TimestepStrategy s) {
  switch (s) {
    case TimestepStrategy::all: return "all";
    case TimestepStrategy::single: return "single";
    case TimestepStrategy::early: return "early";
    case TimestepStrategy::late: return "late";
  }
  return "all";
}

inline TimestepStrategy parse_timestep_strategy(const std::string& s) {
  if (s == "all") return TimestepStrategy::all;
  if (s == "single") return TimestepStrategy::single;
  if (s == "early") return TimestepStrategy::early;
  if (s == "late") return TimestepStrategy::late;
  throw Error(ErrorKind::configuration, "unknown timestep strategy '" + s + "'");
}

inline std::string to_string(HeatmapNormalization n) {
  return n == HeatmapNormalization::raw_sum ? "raw_sum" : "mean_over_slices";
}

inline HeatmapNormalization parse_normalization(const std::string& s) {
  if (s == "raw_sum") return HeatmapNormalization::raw_sum;
  if (s == "mean_over_slices") return HeatmapNormalization::mean_over_slices;
  throw Error(ErrorKind::configuration, "unknown heatmap normalization '" + s + "'");
}

/// Which (block, timestep, head) slices contribute to a heatmap.
/// Timestep strategies compare against the trace's step indices:
/// single keeps t == pivot, early keeps t <= pivot, late keeps t >= pivot.
struct SelectionConfig {
  std::vector<std::string> blocks;  // empty: every cross block
  TimestepStrategy timesteps = TimestepStrategy::all;
  int pivot = 0;
  std::vector<int> heads;  // empty: every head of each block
  std::size_t output_w = 0, output_h = 0;  // 0: latent resolution
  HeatmapNormalization normalization = HeatmapNormalization::raw_sum;
};

struct ResolvedSlices {
  struct BlockPlan {
    const BlockSpec* block;
    std::vector<int> timesteps;
    std::vector<int> heads;
  };
  std::vector<BlockPlan> plan;  // trace block order
  std::size_t out_w = 0, out_h = 0;
  std::size_t slice_count = 0;
};

inline bool timestep_selected(const SelectionConfig& sel, int t) {
  switch (sel.timesteps) {
    case TimestepStrategy::all: return true;
    case TimestepStrategy::single: return t == sel.pivot;
    case TimestepStrategy::early: return t <= sel.pivot;
    case TimestepStrategy::late: return t >= sel.pivot;
  }
  return true;
}

inline ResolvedSlices resolve_selection(const DenoisingTrace& trace, const SelectionConfig& sel) {
  ResolvedSlices r;
  r.out_w = sel.output_w ? sel.output_w : trace.latent_w;
  r.out_h = sel.output_h ? sel.output_h : trace.latent_h;
  for (const auto& wanted : sel.blocks) {
    const auto& b = trace.block(wanted);
    require(b.kind == BlockKind::cross, ErrorKind::configuration,
            "block '" + wanted + "' is not a cross-attention block");
  }
  std::vector<int> ts;
  for (int t : trace.timesteps)
    if (timestep_selected(sel, t)) ts.push_back(t);
  for (const BlockSpec* b : trace.cross_blocks()) {
    if (!sel.blocks.empty() && std::find(sel.blocks.begin(), sel.blocks.end(), b->id) == sel.blocks.end())
      continue;
    std::vector<int> heads = sel.heads;
    if (heads.empty())
      for (int h = 0; h < b->heads; ++h) heads.push_back(h);
    for (int h : heads)
      require(h >= 0 && h < b->heads, ErrorKind::configuration,
              "head " + std::to_string(h) + " does not exist in block '" + b->id + "'");
    r.plan.push_back({b, ts, heads});
    r.slice_count += ts.size() * heads.size();
  }
  require(r.slice_count > 0, ErrorKind::configuration, "selection is empty: no (block, timestep, head) slices");
  return r;
}

/// One map per attribution token, all at the selection's output resolution.
struct OvamHeatmap {
  std::vector<Map> maps;
  std::vector<std::string> labels;
  HeatmapNormalization normalization = HeatmapNormalization::raw_sum;
  std::size_t slice_count = 0;

  std::size_t width() const { return maps.empty() ? 0 : maps.front().width; }
  std::size_t height() const { return maps.empty() ? 0 : maps.front().height; }
};

/// Sums resized per-head attention slices over the selected blocks, timesteps
/// and heads (in that nesting order). With normalization = mean_over_slices the
/// sum is divided by the slice count.
inline OvamHeatmap compute_ovam(const DenoisingTrace& trace, const TokenEmbeddingMatrix& tokens,
                                const SelectionConfig& sel = {}) {
  require(tokens.dim() == trace.embedding_dim, ErrorKind::dimension,
          "attribution embedding width " + std::to_string(tokens.dim()) + " does not match trace width " +
              std::to_string(trace.embedding_dim));
  const auto slices = resolve_selection(trace, sel);
  const std::size_t n_tok = tokens.n_tokens();

  OvamHeatmap out;
  out.labels = tokens.labels;
  out.normalization = sel.normalization;
  out.slice_count = slices.slice_count;
  out.maps.assign(n_tok, Map(slices.out_w, slices.out_h, 0.0));

  for (const auto& plan : slices.plan) {
    const BlockSpec& b = *plan.block;
    const auto keys = project_attribution_keys(tokens, b, trace.key_weight(b.id));
    const BilinearResizer resize(b.side(trace.latent_w), b.side(trace.latent_h), slices.out_w, slices.out_h);
    for (int t : plan.timesteps) {
      const auto attn = attention_matrix(trace.query(b.id, t), keys);
      const std::size_t heads = attn.dim(1);
      for (int h : plan.heads)
        for (std::size_t k = 0; k < n_tok; ++k)
          resize.accumulate(&attn(0, h, k), heads * n_tok, out.maps[k].data.data());
    }
  }
  if (sel.normalization == HeatmapNormalization::mean_over_slices) {
    const double s = static_cast<double>(slices.slice_count);
    for (auto& m : out.maps)
      for (auto& v : m.data) v /= s;
  }
  return out;
}

}  // namespace ovam
