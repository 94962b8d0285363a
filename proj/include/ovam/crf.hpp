#pragma once

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "ovam/array.hpp"
#include "ovam/image.hpp"
#include "ovam/permutohedral.hpp"

namespace ovam {

using MaskGrid = Raster<std::uint8_t>;  // 0 = background, 1 = class

/// Dense CRF parameters, named after SimpleCRF's densecrf() tuple
/// (w1, alpha, beta, w2, gamma, it).
struct CrfParams {
  double w1 = 10.0;     // bilateral weight
  double alpha = 80.0;  // bilateral spatial std (pixels)
  double beta = 13.0;   // bilateral colour std
  double w2 = 3.0;      // spatial weight
  double gamma = 3.0;   // spatial std (pixels)
  int iterations = 5;
  double unary_confidence = 0.9998;  // P(label) assigned to the input mask's label

  void validate() const {
    require(w1 >= 0 && w2 >= 0, ErrorKind::configuration, "CRF weights must be non-negative");
    require(alpha > 0 && beta > 0 && gamma > 0, ErrorKind::configuration, "CRF kernel widths must be positive");
    require(iterations >= 0, ErrorKind::configuration, "CRF iterations must be non-negative");
    require(unary_confidence > 0.5 && unary_confidence < 1.0, ErrorKind::configuration,
            "CRF unary confidence must be in (0.5, 1)");
  }
};

/// Refines a binary mask against its image. Implementations never change dims.
class MaskRefiner {
 public:
  virtual ~MaskRefiner() = default;
  virtual std::string name() const = 0;
  virtual MaskGrid refine(const RgbImage& image, const MaskGrid& mask) const = 0;
};

class IdentityRefiner final : public MaskRefiner {
 public:
  std::string name() const override { return "identity"; }
  MaskGrid refine(const RgbImage& image, const MaskGrid& mask) const override {
    require(image.width == mask.width && image.height == mask.height, ErrorKind::dimension,
            "mask " + dims_string(mask.width, mask.height) + " vs image " + dims_string(image.width, image.height));
    return mask;
  }
};

/// Two-label fully connected CRF with Potts compatibility: one Gaussian
/// spatial kernel and one bilateral kernel, each normalized per pixel, solved
/// by mean-field iterations.
class DenseCrfRefiner final : public MaskRefiner {
 public:
  explicit DenseCrfRefiner(CrfParams params = {}) : params_(params) { params_.validate(); }

  std::string name() const override { return "dcrf"; }
  const CrfParams& params() const { return params_; }

  /// Per-pixel class probability after inference.
  std::vector<double> marginals(const RgbImage& image, const MaskGrid& mask) const {
    require(image.width == mask.width && image.height == mask.height, ErrorKind::dimension,
            "mask " + dims_string(mask.width, mask.height) + " vs image " + dims_string(image.width, image.height));
    const std::size_t w = image.width, h = image.height, n = w * h;
    std::vector<double> fs(2 * n), fb(5 * n);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        fs[2 * i] = static_cast<double>(x) / params_.gamma;
        fs[2 * i + 1] = static_cast<double>(y) / params_.gamma;
        fb[5 * i] = static_cast<double>(x) / params_.alpha;
        fb[5 * i + 1] = static_cast<double>(y) / params_.alpha;
        const std::uint8_t* px = image.at(y, x);
        for (std::size_t c = 0; c < 3; ++c) fb[5 * i + 2 + c] = static_cast<double>(px[c]) / params_.beta;
      }
    const PermutohedralLattice spatial(fs, 2, n), bilateral(fb, 5, n);
    const auto norm_s = normalizer(spatial, n), norm_b = normalizer(bilateral, n);

    const double hi = -std::log(params_.unary_confidence), lo = -std::log(1.0 - params_.unary_confidence);
    std::vector<double> unary(2 * n), q(2 * n), next(2 * n), tmp(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      unary[2 * i] = mask.data[i] ? lo : hi;
      unary[2 * i + 1] = mask.data[i] ? hi : lo;
    }
    softmax_pairs(unary, -1.0, q);
    for (int it = 0; it < params_.iterations; ++it) {
      for (std::size_t i = 0; i < 2 * n; ++i) next[i] = -unary[i];
      spatial.filter(q.data(), tmp.data(), 2);
      for (std::size_t i = 0; i < 2 * n; ++i) next[i] += params_.w2 * norm_s[i / 2] * tmp[i];
      bilateral.filter(q.data(), tmp.data(), 2);
      for (std::size_t i = 0; i < 2 * n; ++i) next[i] += params_.w1 * norm_b[i / 2] * tmp[i];
      softmax_pairs(next, 1.0, q);
    }
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = q[2 * i + 1];
    return p;
  }

  MaskGrid refine(const RgbImage& image, const MaskGrid& mask) const override {
    const auto p = marginals(image, mask);
    MaskGrid out(mask.width, mask.height, 0);
    for (std::size_t i = 0; i < p.size(); ++i) out.data[i] = p[i] > 0.5 ? 1 : 0;
    return out;
  }

 private:
  static std::vector<double> normalizer(const PermutohedralLattice& lattice, std::size_t n) {
    std::vector<double> ones(n, 1.0), out(n);
    lattice.filter(ones.data(), out.data(), 1);
    for (auto& v : out) v = 1.0 / (v + 1e-20);
    return out;
  }

  static void softmax_pairs(const std::vector<double>& in, double scale, std::vector<double>& out) {
    for (std::size_t i = 0; i + 1 < in.size(); i += 2) {
      const double a = scale * in[i], b = scale * in[i + 1];
      const double m = std::max(a, b);
      const double ea = std::exp(a - m), eb = std::exp(b - m);
      out[i] = ea / (ea + eb);
      out[i + 1] = eb / (ea + eb);
    }
  }

  CrfParams params_;
};

/// Runs an external program as the refiner. The command template may use
/// {image}, {mask} and {out}; paths point at PNG files in a scratch directory.
/// A failing command leaves the mask unrefined and logs a warning.
class CommandRefiner final : public MaskRefiner {
 public:
  explicit CommandRefiner(std::string command_template) : template_(std::move(command_template)) {}

  std::string name() const override { return "command"; }

  MaskGrid refine(const RgbImage& image, const MaskGrid& mask) const override {
    namespace fs = std::filesystem;
    require(image.width == mask.width && image.height == mask.height, ErrorKind::dimension,
            "mask " + dims_string(mask.width, mask.height) + " vs image " + dims_string(image.width, image.height));
    const fs::path dir = fs::temp_directory_path() / ("ovam-refine-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
    fs::create_directories(dir);
    MaskGrid scaled = mask;
    for (auto& v : scaled.data) v = v ? 255 : 0;
    write_png_rgb(dir / "image.png", image);
    write_file_bytes(dir / "mask.png", png::encode_gray(scaled));
    std::string cmd = template_;
    replace_all(cmd, "{image}", (dir / "image.png").string());
    replace_all(cmd, "{mask}", (dir / "mask.png").string());
    replace_all(cmd, "{out}", (dir / "out.png").string());
    const int rc = std::system(cmd.c_str());
    MaskGrid out;
    if (rc == 0 && fs::exists(dir / "out.png")) out = png::decode_gray(read_file_bytes(dir / "out.png"));
    fs::remove_all(dir);
    if (rc != 0 || out.data.empty()) {
      std::cerr << "warning: refiner command failed with status " << rc << ", using identity refinement\n";
      return mask;
    }
    require(out.width == mask.width && out.height == mask.height, ErrorKind::dimension,
            "refiner command changed the mask dims");
    for (auto& v : out.data) v = v >= 128 ? 1 : 0;
    return out;
  }

 private:
  static std::atomic<std::size_t>& counter() {
    static std::atomic<std::size_t> c{0};
    return c;
  }
  static void replace_all(std::string& s, const std::string& from, const std::string& to) {
    for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
  }

  std::string template_;
};

/// "identity", "dcrf" or "command:<template>". Anything that cannot be set up
/// degrades to the identity refiner with a warning on `log`.
inline std::shared_ptr<const MaskRefiner> make_refiner(const std::string& spec, const CrfParams& params = {},
                                                       std::ostream& log = std::cerr) {
  if (spec == "dcrf") return std::make_shared<DenseCrfRefiner>(params);
  if (spec == "identity") return std::make_shared<IdentityRefiner>();
  if (spec.rfind("command:", 0) == 0 && spec.size() > 8) return std::make_shared<CommandRefiner>(spec.substr(8));
  log << "warning: refiner '" << spec << "' is not available, using identity refinement\n";
  return std::make_shared<IdentityRefiner>();
}

}  // namespace ovam
