#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ovam/backend.hpp"
#include "ovam/ovam.hpp"
#include "ovam/prng.hpp"

namespace ovam {

/// Published contract of the deterministic toy denoiser.
///
/// Everything below is a pure function of counter-PRNG draws (see prng.hpp),
/// so tests can rebuild any array independently:
///
///  text row of token label s     e_s[e]     = U(text_seed, s, 0)[e]
///  object layout (seed)          two draws B(seed, "layout", 0)[0..1] pick a half-plane:
///                                axis = b0 % 4, cut = 2*(1 + b1 % 3); the object is
///                                x < cut, x >= cut, y < cut, y >= cut for axis 0..3;
///                                L(p) = +1 on the object, -1 elsewhere
///  pooled layout, block b        L_b = mean of L over each r x r cell
///  query axis, block b           a_b[h,d]   = U(model_seed, b + "/axis", 0)[h*D + d]
///  semantic direction            u[e]       = U(model_seed, "semantic", 0)[e]
///  key weights, block b          W_b[h,d,e] = semantic_gain * a_b[h,d] * u[e]
///                                           + weight_noise * U(model_seed, b + "/key", 0)[(h*D + d)*E + e]
///  queries, cross block b, t     Q[p,h,d]   = L_b(p) * a_b[h,d]
///                                           + query_noise * U(seed, b, t)[(p*H + h)*D + d]
///  self block s, t               q, k as the cross queries with streams s+"/q", s+"/k";
///                                A[p,p',h] = softmax_p'( q_p.k_p' / sqrt(D) + saliency * (L(p') + 1) / 2 )
///  image (side = latent * image_scale, nearest upsampled layout)
///                                colour = (L > 0 ? object : background) + 8 * U(seed, "image", 1)[(y*side + x)*3 + c]
///                                object[c] = 40 + 175 * U01(seed, "image", 0)[c], background[c] = ...[3 + c]
///
/// U(seed, stream, step)[i] = prng::draw_signed(prng::stream_key(seed, stream, step), i),
/// B(...) the raw 64-bit draws, U01 the [0,1) draws.
struct ToyDenoiserSpec {
  std::size_t latent_w = 8;
  std::size_t latent_h = 8;
  std::size_t image_scale = 1;
  std::size_t embedding_dim = 16;
  int head_dim = 8;
  int timesteps = 3;
  std::size_t max_tokens = 77;
  std::uint64_t model_seed = 0x0A77E5EEDull;
  std::uint64_t text_seed = 0x7E47E5EEDull;
  double semantic_gain = 0.1;
  double weight_noise = 0.02;
  double query_noise = 0.1;
  double self_saliency = 1.0;
  std::vector<BlockSpec> blocks = {
      {"cross0", 1, 2, 8, BlockKind::cross},
      {"cross1", 2, 2, 8, BlockKind::cross},
      {"self0", 1, 2, 8, BlockKind::self},
  };

  std::size_t image_w() const { return latent_w * image_scale; }
  std::size_t image_h() const { return latent_h * image_scale; }
};

inline ToyDenoiserSpec toy_denoiser_spec() { return {}; }

namespace text {

inline bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) extra = 0;
    else if ((c >> 5) == 0x6) extra = 1;
    else if ((c >> 4) == 0xE) extra = 2;
    else if ((c >> 3) == 0x1E) extra = 3;
    else return false;
    if (i + extra >= s.size()) return false;
    for (std::size_t j = 1; j <= extra; ++j)
      if ((static_cast<unsigned char>(s[i + j]) >> 6) != 0x2) return false;
    i += extra + 1;
  }
  return true;
}

/// Lower-cased word pieces: runs of ASCII alphanumerics (and any non-ASCII
/// bytes) form one token, every other non-space character is its own token.
inline std::vector<std::string> tokenize(const std::string& prompt) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : prompt) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      out.emplace_back(1, ch);
    }
  }
  flush();
  return out;
}

}  // namespace text

class ToyBackend final : public Backend {
 public:
  explicit ToyBackend(ToyDenoiserSpec spec = toy_denoiser_spec()) : spec_(std::move(spec)) {}

  std::string id() const override { return "toy"; }
  std::size_t embedding_dim() const override { return spec_.embedding_dim; }
  std::size_t max_tokens() const override { return spec_.max_tokens; }
  int default_timesteps() const override { return spec_.timesteps; }
  const ToyDenoiserSpec& spec() const { return spec_; }

  std::vector<double> token_row(const std::string& label) const {
    const prng::CounterStream s(spec_.text_seed, label, 0);
    std::vector<double> row(spec_.embedding_dim);
    for (std::size_t e = 0; e < row.size(); ++e) row[e] = s.signed_at(e);
    return row;
  }

  TokenEmbeddingMatrix encode_text(const std::string& prompt) const override {
    require(text::valid_utf8(prompt), ErrorKind::argument, "prompt is not valid UTF-8");
    std::vector<std::string> labels{kStartToken};
    for (auto& w : text::tokenize(prompt)) labels.push_back(std::move(w));
    labels.emplace_back(kEndToken);
    if (labels.size() > spec_.max_tokens)
      throw Error(ErrorKind::over_length, "prompt encodes to " + std::to_string(labels.size()) +
                                              " tokens, backend maximum is " + std::to_string(spec_.max_tokens));
    Tensor<double> rows({labels.size(), spec_.embedding_dim});
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const auto r = token_row(labels[k]);
      std::copy(r.begin(), r.end(), rows.data() + k * spec_.embedding_dim);
    }
    return {std::move(rows), std::move(labels)};
  }

  /// +1 on the seed's object half-plane, -1 elsewhere; row-major latent grid.
  std::vector<double> layout(std::int64_t seed) const {
    const prng::CounterStream s(static_cast<std::uint64_t>(seed), "layout", 0);
    const std::size_t axis = s.bits_at(0) % 4, cut = 2 * (1 + s.bits_at(1) % 3);
    std::vector<double> out(spec_.latent_w * spec_.latent_h, -1.0);
    for (std::size_t y = 0; y < spec_.latent_h; ++y)
      for (std::size_t x = 0; x < spec_.latent_w; ++x) {
        const std::size_t c = axis < 2 ? x : y;
        const bool inside = axis % 2 == 0 ? c < cut : c >= cut;
        if (inside) out[y * spec_.latent_w + x] = 1.0;
      }
    return out;
  }

  std::vector<double> pooled_layout(const std::vector<double>& full, const BlockSpec& b) const {
    const std::size_t sw = b.side(spec_.latent_w), sh = b.side(spec_.latent_h);
    const std::size_t r = static_cast<std::size_t>(b.reduction);
    std::vector<double> out(sw * sh, 0.0);
    for (std::size_t y = 0; y < sh; ++y)
      for (std::size_t x = 0; x < sw; ++x) {
        double sum = 0;
        std::size_t n = 0;
        for (std::size_t yy = y * r; yy < std::min((y + 1) * r, spec_.latent_h); ++yy)
          for (std::size_t xx = x * r; xx < std::min((x + 1) * r, spec_.latent_w); ++xx) {
            sum += full[yy * spec_.latent_w + xx];
            ++n;
          }
        out[y * sw + x] = sum / static_cast<double>(n);
      }
    return out;
  }

  Tensor<float> key_weights(const BlockSpec& b) const {
    const std::size_t H = b.heads, D = b.head_dim, E = spec_.embedding_dim;
    const prng::CounterStream axis(spec_.model_seed, b.id + "/axis", 0);
    const prng::CounterStream sem(spec_.model_seed, "semantic", 0);
    const prng::CounterStream noise(spec_.model_seed, b.id + "/key", 0);
    Tensor<float> w({H, D, E});
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t e = 0; e < E; ++e)
          w(h, d, e) = static_cast<float>(spec_.semantic_gain * axis.signed_at(h * D + d) * sem.signed_at(e) +
                                          spec_.weight_noise * noise.signed_at((h * D + d) * E + e));
    return w;
  }

  Tensor<float> queries(const BlockSpec& b, const std::vector<double>& pooled, std::int64_t seed, int t,
                        const std::string& stream) const {
    const std::size_t H = b.heads, D = b.head_dim, n = pooled.size();
    const prng::CounterStream axis(spec_.model_seed, b.id + "/axis", 0);
    const prng::CounterStream noise(static_cast<std::uint64_t>(seed), stream, t);
    Tensor<float> q({n, H, D});
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t d = 0; d < D; ++d)
          q(p, h, d) = static_cast<float>(pooled[p] * axis.signed_at(h * D + d) +
                                          spec_.query_noise * noise.signed_at((p * H + h) * D + d));
    return q;
  }

  Tensor<float> self_attention(const BlockSpec& b, const std::vector<double>& full, std::int64_t seed, int t) const {
    const auto q = queries(b, full, seed, t, b.id + "/q");
    const auto k = queries(b, full, seed, t, b.id + "/k");
    const std::size_t n = full.size(), H = b.heads, D = b.head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
    Tensor<float> a({n, n, H});
    std::vector<double> logits(n);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t h = 0; h < H; ++h) {
        double peak = -1e300;
        for (std::size_t r = 0; r < n; ++r) {
          double dot = 0;
          for (std::size_t d = 0; d < D; ++d) dot += static_cast<double>(q(p, h, d)) * k(r, h, d);
          logits[r] = dot * inv_sqrt_d + spec_.self_saliency * (full[r] + 1.0) / 2.0;
          peak = std::max(peak, logits[r]);
        }
        double sum = 0;
        for (auto& l : logits) sum += (l = std::exp(l - peak));
        for (std::size_t r = 0; r < n; ++r) a(p, r, h) = static_cast<float>(logits[r] / sum);
      }
    return a;
  }

  RgbImage image(std::int64_t seed, const std::vector<double>& full) const {
    const std::size_t W = spec_.image_w(), Hh = spec_.image_h();
    const prng::CounterStream palette(static_cast<std::uint64_t>(seed), "image", 0);
    const prng::CounterStream grain(static_cast<std::uint64_t>(seed), "image", 1);
    RgbImage img(W, Hh);
    for (std::size_t y = 0; y < Hh; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const bool object = full[(y / spec_.image_scale) * spec_.latent_w + x / spec_.image_scale] > 0;
        for (std::size_t c = 0; c < 3; ++c) {
          const double base = 40.0 + 175.0 * palette.unit_at(object ? c : 3 + c);
          const double v = base + 8.0 * grain.signed_at((y * W + x) * 3 + c);
          img.at(y, x)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    return img;
  }

  DenoisingTrace generate_with_trace(const std::string& prompt, std::int64_t seed, int num_timesteps,
                                     const CrossAttentionHook& hook = {}) const override {
    require(num_timesteps >= 1, ErrorKind::argument, "num_timesteps must be at least 1");
    const auto prompt_tokens = encode_text(prompt);

    DenoisingTrace tr;
    tr.backend_id = id();
    tr.latent_w = spec_.latent_w;
    tr.latent_h = spec_.latent_h;
    tr.embedding_dim = spec_.embedding_dim;
    tr.blocks = spec_.blocks;
    tr.seed = seed;
    tr.prompt = prompt;
    tr.notes["guidance_branch"] = "none";
    for (int t = 0; t < num_timesteps; ++t) tr.timesteps.push_back(t);

    const auto full = layout(seed);
    for (const auto& b : spec_.blocks) {
      if (b.kind == BlockKind::cross) {
        tr.key_weights[b.id] = key_weights(b);
        const auto pooled = pooled_layout(full, b);
        const auto keys = project_attribution_keys(prompt_tokens, b, tr.key_weights[b.id]);
        for (int t : tr.timesteps) {
          auto q = queries(b, pooled, seed, t, b.id);
          // The toy never consumes the attention output; the probabilities are
          // still computed here as they would be inside a real denoiser.
          if (hook) hook(b, t, attention_matrix(q, keys));
          tr.queries[{b.id, t}] = std::move(q);
        }
      } else if (b.reduction == 1) {
        for (int t : tr.timesteps) tr.self_attn[{b.id, t}] = self_attention(b, full, seed, t);
      }
    }
    tr.image = image(seed, full);
    return tr;
  }

 private:
  ToyDenoiserSpec spec_;
};

}  // namespace ovam
