#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "ovam/backend.hpp"
#include "ovam/ovam.hpp"

namespace ovam {

/// One {0,1} channel per attribution token, each at image resolution.
struct GroundTruthMask {
  std::vector<Raster<std::uint8_t>> channels;

  std::size_t width() const { return channels.empty() ? 0 : channels.front().width; }
  std::size_t height() const { return channels.empty() ? 0 : channels.front().height; }

  /// Two-channel ground truth from a foreground mask: [background, foreground].
  static GroundTruthMask from_foreground(const Raster<std::uint8_t>& fg) {
    Raster<std::uint8_t> bg(fg.width, fg.height), cls(fg.width, fg.height);
    for (std::size_t i = 0; i < fg.size(); ++i) {
      cls.data[i] = fg.data[i] ? 1 : 0;
      bg.data[i] = fg.data[i] ? 0 : 1;
    }
    return {{std::move(bg), std::move(cls)}};
  }
};

struct TrainingPair {
  std::shared_ptr<const DenoisingTrace> trace;
  GroundTruthMask ground_truth;
};

struct OptimizerConfig {
  double learning_rate = 100.0;
  double decay_factor = 0.7;
  int decay_every = 120;
  int epochs = 500;
  SelectionConfig selection;  // normalization is forced to mean_over_slices

  void validate() const {
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorKind::configuration,
            "learning_rate must be finite and non-negative");
    require(decay_factor > 0.0 && decay_factor <= 1.0, ErrorKind::configuration, "decay_factor must be in (0, 1]");
    require(decay_every >= 1, ErrorKind::configuration, "decay_every must be at least 1");
    require(epochs >= 1, ErrorKind::configuration, "epochs must be at least 1");
  }

  /// Step-decayed rate for a zero-based epoch.
  double rate_at(int epoch) const { return learning_rate * std::pow(decay_factor, epoch / decay_every); }
};

struct OptimizationResult {
  TokenEmbeddingMatrix best_tokens;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<double> loss_history;
  int best_epoch = -1;  // zero-based
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& msg, OptimizationResult partial, TokenEmbeddingMatrix last_finite)
      : Error(ErrorKind::divergence, msg), partial_(std::move(partial)), last_finite_(std::move(last_finite)) {}
  const OptimizationResult& partial() const { return partial_; }
  const TokenEmbeddingMatrix& last_finite_tokens() const { return last_finite_; }

 private:
  OptimizationResult partial_;
  TokenEmbeddingMatrix last_finite_;
};

inline constexpr double kBceEpsilon = 1e-7;

/// Sum over tokens of the per-pixel mean binary cross-entropy. `maps` must be
/// at ground-truth resolution with values in [0, 1]; probabilities are clamped
/// to [eps, 1 - eps].
inline double bce_loss(const std::vector<Map>& maps, const GroundTruthMask& gt, double eps = kBceEpsilon) {
  require(maps.size() == gt.channels.size(), ErrorKind::dimension,
          "heatmap has " + std::to_string(maps.size()) + " channels, ground truth has " +
              std::to_string(gt.channels.size()));
  double total = 0.0;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const auto& m = maps[k];
    const auto& g = gt.channels[k];
    require(m.width == g.width && m.height == g.height, ErrorKind::dimension,
            "heatmap " + dims_string(m.width, m.height) + " vs ground truth " + dims_string(g.width, g.height));
    double sum = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double p = std::clamp(m.data[i], eps, 1.0 - eps);
      sum += g.data[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    total += sum / static_cast<double>(m.size());
  }
  return total;
}

inline double bce_loss(const OvamHeatmap& heatmap, const GroundTruthMask& gt, double eps = kBceEpsilon) {
  return bce_loss(heatmap.maps, gt, eps);
}

/// The training objective: sum over pairs of bce_loss(resize(mean OVAM), G).
/// Traces are only read; the embedding is the sole free variable.
class TokenObjective {
 public:
  TokenObjective(std::vector<TrainingPair> pairs, SelectionConfig selection)
      : pairs_(std::move(pairs)), selection_(std::move(selection)) {
    selection_.normalization = HeatmapNormalization::mean_over_slices;
    require(!pairs_.empty(), ErrorKind::argument, "optimization needs at least one training pair");
    for (const auto& pair : pairs_) {
      require(pair.trace != nullptr, ErrorKind::argument, "training pair has no trace");
      const auto& tr = *pair.trace;
      const auto& gt = pair.ground_truth;
      require(!gt.channels.empty(), ErrorKind::argument, "ground truth has no channels");
      require(gt.width() == tr.image.width && gt.height() == tr.image.height, ErrorKind::dimension,
              "ground truth " + dims_string(gt.width(), gt.height()) + " does not match image " +
                  dims_string(tr.image.width, tr.image.height));
      for (const auto& ch : gt.channels) {
        require(ch.width == gt.width() && ch.height == gt.height(), ErrorKind::dimension,
                "ground-truth channels differ in size");
        for (auto v : ch.data) require(v <= 1, ErrorKind::argument, "ground-truth channels must be {0,1}-valued");
      }
      Prepared prep{resolve_selection(tr, selection_), {}, nullptr};
      for (const auto& plan : prep.slices.plan)
        prep.block_resizers.emplace_back(plan.block->side(tr.latent_w), plan.block->side(tr.latent_h),
                                         prep.slices.out_w, prep.slices.out_h);
      prep.to_gt = std::make_unique<BilinearResizer>(prep.slices.out_w, prep.slices.out_h, gt.width(), gt.height());
      prepared_.push_back(std::move(prep));
    }
  }

  std::size_t token_count() const { return pairs_.front().ground_truth.channels.size(); }
  const std::vector<TrainingPair>& pairs() const { return pairs_; }

  double loss(const TokenEmbeddingMatrix& x) const { return evaluate(x, nullptr); }

  /// Loss and its exact gradient with respect to every entry of x.
  double evaluate(const TokenEmbeddingMatrix& x, Tensor<double>* grad) const {
    const std::size_t n_tok = x.n_tokens();
    for (const auto& pair : pairs_)
      require(pair.ground_truth.channels.size() == n_tok, ErrorKind::dimension,
              "ground truth has " + std::to_string(pair.ground_truth.channels.size()) + " channels but X' has " +
                  std::to_string(n_tok) + " tokens");
    if (grad) *grad = Tensor<double>(x.tokens.shape(), 0.0);
    double total = 0.0;
    for (std::size_t j = 0; j < pairs_.size(); ++j) total += evaluate_pair(j, x, grad);
    return total;
  }

 private:
  struct Prepared {
    ResolvedSlices slices;
    std::vector<BilinearResizer> block_resizers;
    std::unique_ptr<BilinearResizer> to_gt;
  };

  double evaluate_pair(std::size_t j, const TokenEmbeddingMatrix& x, Tensor<double>* grad) const {
    const auto& tr = *pairs_[j].trace;
    const auto& gt = pairs_[j].ground_truth;
    const auto& prep = prepared_[j];
    const std::size_t n_tok = x.n_tokens();
    const std::size_t out_w = prep.slices.out_w, out_h = prep.slices.out_h;
    const double inv_s = 1.0 / static_cast<double>(prep.slices.slice_count);

    // Forward: mean heatmap at output resolution.
    std::vector<std::vector<double>> heat(n_tok, std::vector<double>(out_w * out_h, 0.0));
    std::vector<Tensor<double>> keys;
    std::vector<std::vector<Tensor<double>>> probs;  // [plan][timestep]
    for (std::size_t bi = 0; bi < prep.slices.plan.size(); ++bi) {
      const auto& plan = prep.slices.plan[bi];
      keys.push_back(project_attribution_keys(x, *plan.block, tr.key_weight(plan.block->id)));
      probs.emplace_back();
      for (int t : plan.timesteps) {
        auto a = attention_matrix(tr.query(plan.block->id, t), keys.back());
        const std::size_t heads = a.dim(1);
        for (int h : plan.heads)
          for (std::size_t k = 0; k < n_tok; ++k)
            prep.block_resizers[bi].accumulate(&a(0, h, k), heads * n_tok, heat[k].data());
        if (grad) probs.back().push_back(std::move(a));
      }
    }
    for (auto& m : heat)
      for (auto& v : m) v /= static_cast<double>(prep.slices.slice_count);

    // Loss at ground-truth resolution.
    const std::size_t gt_pix = gt.width() * gt.height();
    const double inv_pix = 1.0 / static_cast<double>(gt_pix);
    double loss = 0.0;
    std::vector<std::vector<double>> d_heat(n_tok);
    std::vector<double> up(gt_pix), d_up(gt_pix);
    for (std::size_t k = 0; k < n_tok; ++k) {
      std::fill(up.begin(), up.end(), 0.0);
      prep.to_gt->accumulate(heat[k].data(), 1, up.data());
      const auto& g = gt.channels[k].data;
      double sum = 0.0;
      for (std::size_t i = 0; i < gt_pix; ++i) {
        const double raw = up[i];
        const double p = std::clamp(raw, kBceEpsilon, 1.0 - kBceEpsilon);
        sum += g[i] ? -std::log(p) : -std::log(1.0 - p);
        if (grad) {
          const bool clamped = raw < kBceEpsilon || raw > 1.0 - kBceEpsilon;
          d_up[i] = clamped ? 0.0 : (g[i] ? -1.0 / p : 1.0 / (1.0 - p)) * inv_pix;
        }
      }
      loss += sum * inv_pix;
      if (grad) {
        d_heat[k].assign(out_w * out_h, 0.0);
        prep.to_gt->accumulate_transpose(d_up.data(), d_heat[k].data(), 1);
        for (auto& v : d_heat[k]) v *= inv_s;
      }
    }
    if (!grad) return loss;

    // Backward through resize, softmax, key projection.
    const std::size_t width = x.dim();
    for (std::size_t bi = 0; bi < prep.slices.plan.size(); ++bi) {
      const auto& plan = prep.slices.plan[bi];
      const BlockSpec& b = *plan.block;
      const std::size_t n_pix = b.side(tr.latent_w) * b.side(tr.latent_h);
      const std::size_t H = b.heads, D = b.head_dim;
      // Upstream gradient on each probability slice is the same for every
      // selected head and timestep: the adjoint resize of d_heat.
      Tensor<double> g_slice({n_pix, n_tok}, 0.0);
      for (std::size_t k = 0; k < n_tok; ++k)
        prep.block_resizers[bi].accumulate_transpose(d_heat[k].data(), &g_slice(0, k), n_tok);

      Tensor<double> d_keys({n_tok, H, D}, 0.0);
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
      std::vector<double> d_logit(n_tok);
      for (std::size_t ti = 0; ti < plan.timesteps.size(); ++ti) {
        const auto& a = probs[bi][ti];
        const auto& q = tr.query(b.id, plan.timesteps[ti]);
        for (std::size_t p = 0; p < n_pix; ++p) {
          const double* gp = &g_slice(p, 0);
          for (int h : plan.heads) {
            const double* ap = &a(p, h, 0);
            double s = 0.0;
            for (std::size_t k = 0; k < n_tok; ++k) s += ap[k] * gp[k];
            for (std::size_t k = 0; k < n_tok; ++k) d_logit[k] = ap[k] * (gp[k] - s) * inv_sqrt_d;
            const float* qp = &q(p, h, 0);
            for (std::size_t k = 0; k < n_tok; ++k) {
              if (d_logit[k] == 0.0) continue;
              double* dk = &d_keys(k, h, 0);
              for (std::size_t d = 0; d < D; ++d) dk[d] += d_logit[k] * static_cast<double>(qp[d]);
            }
          }
        }
      }
      const auto& w = tr.key_weight(b.id);
      for (std::size_t k = 0; k < n_tok; ++k)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t d = 0; d < D; ++d) {
            const double dk = d_keys(k, h, d);
            const float* wr = &w(h, d, 0);
            double* gx = &(*grad)(k, 0);
            for (std::size_t e = 0; e < width; ++e) gx[e] += dk * static_cast<double>(wr[e]);
          }
    }
    return loss;
  }

  std::vector<TrainingPair> pairs_;
  SelectionConfig selection_;
  std::vector<Prepared> prepared_;
};

/// Gradient of the summed objective with respect to X'.
inline Tensor<double> gradient(const std::vector<TrainingPair>& pairs, const TokenEmbeddingMatrix& x,
                               const OptimizerConfig& cfg) {
  Tensor<double> g;
  TokenObjective(pairs, cfg.selection).evaluate(x, &g);
  return g;
}

/// Background row from the start-of-text token plus one class row (the mean
/// of the class name's word tokens).
inline TokenEmbeddingMatrix init_attribution_tokens(const std::string& classname, const Backend& encoder) {
  require(!classname.empty(), ErrorKind::argument, "class name is empty");
  const auto enc = encoder.encode_text(classname);
  require(enc.n_tokens() >= 3, ErrorKind::argument, "class name '" + classname + "' encodes to no word tokens");
  const std::size_t width = enc.dim();
  Tensor<double> rows({2, width}, 0.0);
  const auto sot = enc.row(0);
  std::copy(sot.begin(), sot.end(), rows.data());
  const std::size_t words = enc.n_tokens() - 2;
  for (std::size_t k = 1; k <= words; ++k) {
    const auto r = enc.row(k);
    for (std::size_t e = 0; e < width; ++e) rows(1, e) += r[e];
  }
  for (std::size_t e = 0; e < width; ++e) rows(1, e) /= static_cast<double>(words);
  return {std::move(rows), {enc.labels.front(), classname}};
}

/// Called after every epoch with (1-based epoch, loss, learning rate).
using EpochCallback = std::function<void(int epoch, double loss, double learning_rate)>;

/// Full-batch gradient descent on X' with step decay. Returns the best
/// embedding seen (loss evaluated before each update).
inline OptimizationResult optimize_tokens(const std::vector<TrainingPair>& pairs, const TokenEmbeddingMatrix& init,
                                          const OptimizerConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  init.validate();
  const TokenObjective objective(pairs, cfg.selection);
  require(objective.token_count() == init.n_tokens(), ErrorKind::dimension,
          "ground truth has " + std::to_string(objective.token_count()) + " channels but init has " +
              std::to_string(init.n_tokens()) + " tokens");

  OptimizationResult result;
  result.best_tokens = init;
  TokenEmbeddingMatrix x = init;
  TokenEmbeddingMatrix last_finite = init;
  Tensor<double> grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.rate_at(epoch);
    const double loss = x.tokens.all_finite() ? objective.evaluate(x, &grad) : std::nan("");
    if (!std::isfinite(loss) || !grad.all_finite())
      throw DivergenceError("loss diverged at epoch " + std::to_string(epoch + 1), result, last_finite);
    result.loss_history.push_back(loss);
    if (loss < result.best_loss) {
      result.best_loss = loss;
      result.best_tokens = x;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(epoch + 1, loss, lr);
    last_finite = x;
    for (std::size_t i = 0; i < x.tokens.size(); ++i) x.tokens[i] -= lr * grad[i];
  }
  return result;
}

}  // namespace ovam
