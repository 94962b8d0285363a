#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "ovam/image.hpp"
#include "ovam/io_util.hpp"
#include "ovam/ovam.hpp"

namespace ovam {

// False-colour map for inspection PNGs. A value v is first divided by the
// map's maximum (an all-zero map renders as the first stop), then linearly
// interpolated between five equally spaced stops:
//   0.00 (0, 0, 4)   0.25 (87, 16, 110)   0.50 (188, 55, 84)
//   0.75 (249, 142, 9)   1.00 (252, 255, 164)
namespace colormap {

inline constexpr std::array<std::array<double, 3>, 5> kStops = {{
    {0, 0, 4}, {87, 16, 110}, {188, 55, 84}, {249, 142, 9}, {252, 255, 164},
}};

inline std::array<std::uint8_t, 3> color(double u) {
  u = std::clamp(std::isfinite(u) ? u : 0.0, 0.0, 1.0);
  const double pos = u * static_cast<double>(kStops.size() - 1);
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(pos), kStops.size() - 2);
  const double f = pos - static_cast<double>(i);
  std::array<std::uint8_t, 3> out{};
  for (std::size_t c = 0; c < 3; ++c)
    out[c] = static_cast<std::uint8_t>(std::lround(kStops[i][c] + f * (kStops[i + 1][c] - kStops[i][c])));
  return out;
}

inline RgbImage render(const Map& m) {
  RgbImage img(m.width, m.height);
  const double peak = m.data.empty() ? 0.0 : *std::max_element(m.data.begin(), m.data.end());
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const auto c = color(peak > 0 ? m.at(y, x) / peak : 0.0);
      std::copy(c.begin(), c.end(), img.at(y, x));
    }
  return img;
}

}  // namespace colormap

struct HeatmapStats {
  double max = 0.0;
  double area_at_tau = 0.0;  // fraction of pixels >= tau * max
};

inline HeatmapStats heatmap_stats(const Map& m, double tau) {
  HeatmapStats s;
  if (m.data.empty()) return s;
  s.max = *std::max_element(m.data.begin(), m.data.end());
  if (!(s.max > 0)) return s;
  std::size_t n = 0;
  for (double v : m.data) n += v >= tau * s.max;
  s.area_at_tau = static_cast<double>(n) / static_cast<double>(m.size());
  return s;
}

/// Raw float32 raster (height rows of width values).
inline std::vector<std::uint8_t> encode_heatmap_f32(const Map& m) {
  std::vector<float> tmp(m.data.begin(), m.data.end());
  const auto* p = reinterpret_cast<const std::uint8_t*>(tmp.data());
  return {p, p + tmp.size() * sizeof(float)};
}

inline nlohmann::json heatmap_metadata(const OvamHeatmap& h, std::size_t k) {
  return {{"label", h.labels.at(k)},
          {"token_index", k},
          {"width", h.maps.at(k).width},
          {"height", h.maps.at(k).height},
          {"dtype", "float32"},
          {"endianness", "little"},
          {"normalization", to_string(h.normalization)},
          {"slice_count", h.slice_count}};
}

/// Writes <prefix>.f32, <prefix>.png and <prefix>.json for token k.
inline void write_heatmap(const std::filesystem::path& prefix, const OvamHeatmap& h, std::size_t k) {
  require(k < h.maps.size(), ErrorKind::argument, "token index " + std::to_string(k) + " out of range");
  auto with = [&](const char* ext) {
    auto p = prefix;
    p += ext;
    return p;
  };
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  write_file_bytes(with(".f32"), encode_heatmap_f32(h.maps[k]));
  write_file_bytes(with(".png"), png::encode_rgb(colormap::render(h.maps[k])));
  write_file_text(with(".json"), heatmap_metadata(h, k).dump(2) + "\n");
}

}  // namespace ovam
