#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ovam/array.hpp"
#include "ovam/error.hpp"
#include "ovam/image.hpp"

namespace ovam {

enum class BlockKind { cross, self };

inline std::string to_string(BlockKind kind) { return kind == BlockKind::cross ? "cross" : "self"; }

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "cross") return BlockKind::cross;
  if (s == "self") return BlockKind::self;
  throw Error(ErrorKind::argument, "unknown block kind '" + s + "'");
}

/// One attention layer of the denoiser. Spatial side of the layer is
/// ceil(latent / reduction) in each direction.
struct BlockSpec {
  std::string id;
  int reduction = 1;
  int heads = 1;
  int head_dim = 1;
  BlockKind kind = BlockKind::cross;

  std::size_t side(std::size_t latent) const {
    return (latent + static_cast<std::size_t>(reduction) - 1) / static_cast<std::size_t>(reduction);
  }

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// Token embeddings, one row of width `dim()` per token.
struct TokenEmbeddingMatrix {
  Tensor<double> tokens;  // [n_tokens, l_E]
  std::vector<std::string> labels;

  TokenEmbeddingMatrix() = default;
  TokenEmbeddingMatrix(Tensor<double> t, std::vector<std::string> l)
      : tokens(std::move(t)), labels(std::move(l)) {
    validate();
  }

  std::size_t n_tokens() const { return tokens.rank() == 2 ? tokens.dim(0) : 0; }
  std::size_t dim() const { return tokens.rank() == 2 ? tokens.dim(1) : 0; }

  std::span<const double> row(std::size_t k) const { return tokens.values().subspan(k * dim(), dim()); }
  std::span<double> row(std::size_t k) { return tokens.values().subspan(k * dim(), dim()); }

  void validate() const {
    require(tokens.rank() == 2 && tokens.dim(0) >= 1, ErrorKind::argument,
            "token matrix needs at least one row, got shape " + tokens.shape_string());
    require(labels.size() == tokens.dim(0), ErrorKind::argument,
            "token matrix has " + std::to_string(tokens.dim(0)) + " rows but " +
                std::to_string(labels.size()) + " labels");
    require(tokens.all_finite(), ErrorKind::numeric_input, "token matrix has non-finite entries");
  }

  /// Stacks the selected rows into a new matrix.
  TokenEmbeddingMatrix select(const std::vector<std::size_t>& rows) const {
    Tensor<double> out({rows.size(), dim()});
    std::vector<std::string> out_labels;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i] < n_tokens(), ErrorKind::argument,
              "token index " + std::to_string(rows[i]) + " out of range");
      auto src = row(rows[i]);
      std::copy(src.begin(), src.end(), out.data() + i * dim());
      out_labels.push_back(labels[rows[i]]);
    }
    return {std::move(out), std::move(out_labels)};
  }

  friend bool operator==(const TokenEmbeddingMatrix&, const TokenEmbeddingMatrix&) = default;
};

using SliceKey = std::pair<std::string, int>;  // (block id, timestep)

/// Everything captured from one generation. Immutable once built.
///
/// queries[(b, t)]   : float [side_w * side_h, heads, head_dim]   (pixel p = y * side_w + x)
/// key_weights[b]    : float [heads, head_dim, l_E]               (K[k,h,d] = sum_e W[h,d,e] X[k,e])
/// self_attn[(b, t)] : float [W*H, W*H, heads]                    (row = query pixel)
struct DenoisingTrace {
  std::string backend_id;
  std::size_t latent_w = 0;
  std::size_t latent_h = 0;
  std::size_t embedding_dim = 0;
  std::vector<BlockSpec> blocks;
  std::vector<int> timesteps;
  std::map<SliceKey, Tensor<float>> queries;
  std::map<std::string, Tensor<float>> key_weights;
  std::map<SliceKey, Tensor<float>> self_attn;
  RgbImage image;
  std::int64_t seed = 0;
  std::string prompt;
  /// Free-form adapter notes, e.g. which guidance branch the queries come from.
  std::map<std::string, std::string> notes;

  const BlockSpec& block(const std::string& id) const {
    for (const auto& b : blocks)
      if (b.id == id) return b;
    throw Error(ErrorKind::configuration, "trace has no block '" + id + "'");
  }

  std::vector<const BlockSpec*> cross_blocks() const {
    std::vector<const BlockSpec*> out;
    for (const auto& b : blocks)
      if (b.kind == BlockKind::cross) out.push_back(&b);
    return out;
  }

  std::vector<const BlockSpec*> self_blocks() const {
    std::vector<const BlockSpec*> out;
    for (const auto& b : blocks)
      if (b.kind == BlockKind::self) out.push_back(&b);
    return out;
  }

  const Tensor<float>& query(const std::string& block_id, int t) const {
    auto it = queries.find({block_id, t});
    if (it == queries.end())
      throw Error(ErrorKind::partial_trace,
                  "trace is missing queries for block '" + block_id + "' at t=" + std::to_string(t));
    return it->second;
  }

  const Tensor<float>& key_weight(const std::string& block_id) const {
    auto it = key_weights.find(block_id);
    if (it == key_weights.end())
      throw Error(ErrorKind::partial_trace, "trace is missing key weights for block '" + block_id + "'");
    return it->second;
  }

  /// Checks shape laws and completeness. Throws partial_trace / dimension errors.
  void validate(double row_tolerance = 1e-5) const {
    require(latent_w > 0 && latent_h > 0, ErrorKind::dimension, "latent dims must be positive");
    require(!timesteps.empty(), ErrorKind::partial_trace, "trace has no timesteps");
    for (const auto& b : blocks) {
      require(b.reduction > 0 && b.heads > 0 && b.head_dim > 0, ErrorKind::argument,
              "block '" + b.id + "' has non-positive reduction, heads or head_dim");
      const std::size_t n_pix = b.side(latent_w) * b.side(latent_h);
      if (b.kind == BlockKind::cross) {
        const auto& kw = key_weight(b.id);
        require(kw.shape() == std::vector<std::size_t>{std::size_t(b.heads), std::size_t(b.head_dim), embedding_dim},
                ErrorKind::dimension, "key weights of '" + b.id + "' have shape " + kw.shape_string());
        for (int t : timesteps) {
          const auto& q = query(b.id, t);
          require(q.shape() == std::vector<std::size_t>{n_pix, std::size_t(b.heads), std::size_t(b.head_dim)},
                  ErrorKind::dimension,
                  "queries of '" + b.id + "' t=" + std::to_string(t) + " have shape " + q.shape_string());
        }
      } else {
        for (int t : timesteps) {
          auto it = self_attn.find({b.id, t});
          if (it == self_attn.end()) continue;
          require(b.reduction == 1, ErrorKind::configuration,
                  "self-attention of '" + b.id + "' is stored but the block is not full resolution");
          const auto& a = it->second;
          require(a.shape() == std::vector<std::size_t>{n_pix, n_pix, std::size_t(b.heads)},
                  ErrorKind::dimension, "self-attention of '" + b.id + "' has shape " + a.shape_string());
          for (std::size_t p = 0; p < n_pix; ++p)
            for (int h = 0; h < b.heads; ++h) {
              double sum = 0;
              for (std::size_t q = 0; q < n_pix; ++q) {
                const float v = a(p, q, h);
                require(v >= 0.0f, ErrorKind::numeric_input, "negative self-attention entry");
                sum += v;
              }
              require(std::abs(sum - 1.0) <= row_tolerance, ErrorKind::numeric_input,
                      "self-attention row does not sum to 1 in block '" + b.id + "'");
            }
        }
      }
    }
    for (const auto& [key, _] : self_attn)
      require(block(key.first).kind == BlockKind::self, ErrorKind::configuration,
              "self-attention stored for non-self block '" + key.first + "'");
  }

  friend bool operator==(const DenoisingTrace&, const DenoisingTrace&) = default;
};

/// Invoked once per (cross block, timestep) with the synthesis-time attention
/// probabilities [n_pix, heads, n_prompt_tokens].
using CrossAttentionHook =
    std::function<void(const BlockSpec&, int timestep, const Tensor<double>& probabilities)>;

/// Capture contract every denoiser adapter implements.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::string id() const = 0;
  virtual std::size_t embedding_dim() const = 0;
  /// Maximum number of tokens including start/end markers.
  virtual std::size_t max_tokens() const = 0;

  /// One row per tokenizer token including the start and end markers.
  virtual TokenEmbeddingMatrix encode_text(const std::string& prompt) const = 0;

  virtual DenoisingTrace generate_with_trace(const std::string& prompt, std::int64_t seed,
                                             int num_timesteps,
                                             const CrossAttentionHook& hook = {}) const = 0;

  virtual int default_timesteps() const = 0;
};

inline constexpr const char* kStartToken = "<|startoftext|>";
inline constexpr const char* kEndToken = "<|endoftext|>";

}  // namespace ovam
