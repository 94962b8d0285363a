#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovam/backend.hpp"
#include "ovam/crf.hpp"
#include "ovam/image.hpp"
#include "ovam/ovam.hpp"

namespace ovam {

struct BinarizationParams {
  double tau = 0.4;
  double alpha = 0.85;
  bool use_self_attention = true;
  bool use_crf = false;
  bool threshold_at_latent = false;  // ablation: threshold before upscaling

  /// Defaults for natural-language attribution prompts.
  static BinarizationParams natural() { return {0.4, 0.85, true, false, false}; }
  /// Defaults for optimized tokens.
  static BinarizationParams optimized() { return {0.8, 0.95, true, false, false}; }

  void validate() const {
    require(tau > 0.0 && tau <= 1.0, ErrorKind::argument, "tau must be in (0, 1], got " + std::to_string(tau));
    require(alpha > 0.0 && alpha <= 1.0, ErrorKind::argument,
            "alpha must be in (0, 1], got " + std::to_string(alpha));
  }
};

struct BinaryMask {
  MaskGrid grid;  // 0/1
  std::string class_label;

  std::size_t width() const { return grid.width; }
  std::size_t height() const { return grid.height; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(grid.data.begin(), grid.data.end(), [](auto v) { return v != 0; }));
  }
  double area_fraction() const {
    return grid.size() ? static_cast<double>(count()) / static_cast<double>(grid.size()) : 0.0;
  }
};

/// Affine min-max rescale into [alpha, 1]; a constant input maps to all ones.
inline std::vector<double> rescale_min_max(const std::vector<double>& v, double alpha) {
  std::vector<double> out(v.size(), 1.0);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == *hi) continue;  // pin the top endpoint exactly
    out[i] = alpha + (1.0 - alpha) * (v[i] - *lo) / range;
  }
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] == *lo) out[i] = alpha;
  return out;
}

/// Attention received by each latent pixel (column sums of every
/// full-resolution self-attention matrix), summed over blocks, timesteps and
/// heads, then rescaled to [alpha, 1].
inline Map fuse_self_attention(const DenoisingTrace& trace, double alpha) {
  require(alpha > 0.0 && alpha <= 1.0, ErrorKind::argument, "alpha must be in (0, 1]");
  require(!trace.self_attn.empty(), ErrorKind::configuration,
          "trace has no self-attention; disable use_self_attention");
  const std::size_t n = trace.latent_w * trace.latent_h;
  std::vector<double> score(n, 0.0);
  for (const BlockSpec* b : trace.self_blocks())
    for (int t : trace.timesteps) {
      auto it = trace.self_attn.find({b->id, t});
      if (it == trace.self_attn.end()) continue;
      const auto& a = it->second;
      const std::size_t heads = a.dim(2);
      require(a.dim(0) == n && a.dim(1) == n, ErrorKind::dimension,
              "self-attention of '" + b->id + "' is not at latent resolution");
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t p = 0; p < n; ++p) {
          const float* row = &a(p, 0, h);
          for (std::size_t q = 0; q < n; ++q) score[q] += static_cast<double>(row[q * heads]);
        }
    }
  return Map(trace.latent_w, trace.latent_h, rescale_min_max(score, alpha));
}

/// Pixels at or above tau times the peak; an all-zero map gives an empty mask.
inline MaskGrid threshold_peak(const Map& combined, double tau) {
  require(tau > 0.0 && tau <= 1.0, ErrorKind::argument, "tau must be in (0, 1]");
  MaskGrid out(combined.width, combined.height, 0);
  const double peak = combined.data.empty() ? 0.0 : *std::max_element(combined.data.begin(), combined.data.end());
  if (!(peak > 0.0)) return out;
  const double cut = tau * peak;
  for (std::size_t i = 0; i < combined.size(); ++i) out.data[i] = combined.data[i] >= cut ? 1 : 0;
  return out;
}

inline Map elementwise_product(const Map& a, const Map& b) {
  require(a.same_dims(b), ErrorKind::dimension,
          "maps differ in size: " + dims_string(a.width, a.height) + " vs " + dims_string(b.width, b.height));
  Map out(a.width, a.height);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return out;
}

inline BinaryMask binarize(const Map& heatmap, const Map& fused, double tau, std::string label = {}) {
  return {threshold_peak(elementwise_product(fused, heatmap), tau), std::move(label)};
}

/// Nearest-neighbour upscale of a mask grid.
inline MaskGrid upscale_nearest(const MaskGrid& m, std::size_t w, std::size_t h) {
  MaskGrid out(w, h, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.at(y, x) = m.at(y * m.height / h, x * m.width / w);
  return out;
}

/// compute_ovam -> optional self-attention fusion -> bilinear upscale of the
/// combined map to image size -> peak-relative threshold -> optional refiner.
/// `fused` may be passed to reuse a precomputed fusion map.
inline BinaryMask make_pseudo_mask(const DenoisingTrace& trace, const TokenEmbeddingMatrix& tokens, std::size_t k,
                                   const BinarizationParams& params, const MaskRefiner* refiner = nullptr,
                                   const SelectionConfig& sel = {}) {
  params.validate();
  require(k < tokens.n_tokens(), ErrorKind::argument,
          "token index " + std::to_string(k) + " out of range for " + std::to_string(tokens.n_tokens()) + " tokens");
  SelectionConfig latent_sel = sel;
  latent_sel.output_w = trace.latent_w;
  latent_sel.output_h = trace.latent_h;
  const auto heat = compute_ovam(trace, tokens, latent_sel);
  Map combined = heat.maps[k];
  if (params.use_self_attention) combined = elementwise_product(fuse_self_attention(trace, params.alpha), combined);

  const std::size_t iw = trace.image.width, ih = trace.image.height;
  MaskGrid grid = params.threshold_at_latent ? upscale_nearest(threshold_peak(combined, params.tau), iw, ih)
                                             : threshold_peak(resize_bilinear(combined, iw, ih), params.tau);
  if (params.use_crf) {
    static const IdentityRefiner identity;
    grid = (refiner ? refiner : &identity)->refine(trace.image, grid);
  }
  return {std::move(grid), tokens.labels[k]};
}

// Mask files: 8-bit grayscale PNG (0 background, 255 class) plus a JSON
// sidecar next to it with the same stem.

inline std::vector<std::uint8_t> encode_mask_png(const BinaryMask& m) {
  MaskGrid g = m.grid;
  for (auto& v : g.data) v = v ? 255 : 0;
  return png::encode_gray(g);
}

inline nlohmann::json mask_sidecar(const BinaryMask& m, const BinarizationParams& params) {
  return {{"class", m.class_label},
          {"tau", params.tau},
          {"alpha", params.alpha},
          {"self_attention", params.use_self_attention},
          {"crf", params.use_crf},
          {"width", m.width()},
          {"height", m.height()},
          {"area_fraction", m.area_fraction()}};
}

inline void write_mask(const std::filesystem::path& png_path, const BinaryMask& m, const BinarizationParams& params) {
  write_file_bytes(png_path, encode_mask_png(m));
  auto side = png_path;
  side.replace_extension(".json");
  write_file_text(side, mask_sidecar(m, params).dump(2) + "\n");
}

/// Reads a mask PNG; any non-zero pixel is class.
inline BinaryMask read_mask(const std::filesystem::path& png_path, std::string label = {}) {
  auto g = png::decode_gray(read_file_bytes(png_path));
  for (auto& v : g.data) v = v ? 1 : 0;
  return {std::move(g), std::move(label)};
}

}  // namespace ovam
