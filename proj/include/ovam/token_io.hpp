#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "ovam/backend.hpp"
#include "ovam/io_util.hpp"

namespace ovam {

// Token file layout:
//   token.json   {"format", "label", "labels", "n_tokens", "embedding_dim",
//                 "backend_id", "best_loss", "training": {...}}
//   token.f32    n_tokens * embedding_dim float32 values, little-endian, row-major

struct TokenFile {
  std::string label;  // class name the tokens attribute
  std::string backend_id;
  TokenEmbeddingMatrix tokens;
  double best_loss = 0.0;
  bool has_loss = false;
  nlohmann::json training = nlohmann::json::object();
};

inline nlohmann::json token_metadata(const TokenFile& tf) {
  nlohmann::json meta;
  meta["format"] = "ovam-token";
  meta["version"] = 1;
  meta["label"] = tf.label;
  meta["labels"] = tf.tokens.labels;
  meta["n_tokens"] = tf.tokens.n_tokens();
  meta["embedding_dim"] = tf.tokens.dim();
  meta["backend_id"] = tf.backend_id;
  meta["dtype"] = "float32";
  meta["endianness"] = "little";
  meta["best_loss"] = tf.has_loss ? nlohmann::json(tf.best_loss) : nlohmann::json(nullptr);
  meta["training"] = tf.training;
  return meta;
}

/// Rows are stored as float32, so a round trip rounds each entry once.
inline void save_token(const TokenFile& tf, const std::filesystem::path& dir) {
  tf.tokens.validate();
  std::filesystem::create_directories(dir);
  write_f32<double>(dir / "token.f32", tf.tokens.tokens.values());
  write_file_text(dir / "token.json", token_metadata(tf).dump(2) + "\n");
}

inline TokenFile load_token(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "token.json"))
    throw Error(ErrorKind::load, "no token.json in " + dir.string());
  TokenFile tf;
  try {
    const auto meta = nlohmann::json::parse(read_file_text(dir / "token.json"));
    tf.label = meta.at("label").get<std::string>();
    tf.backend_id = meta.value("backend_id", "");
    const auto n = meta.at("n_tokens").get<std::size_t>();
    const auto width = meta.at("embedding_dim").get<std::size_t>();
    auto labels = meta.at("labels").get<std::vector<std::string>>();
    const auto raw = read_f32(dir / "token.f32", n * width);
    Tensor<double> rows({n, width}, std::vector<double>(raw.begin(), raw.end()));
    tf.tokens = TokenEmbeddingMatrix(std::move(rows), std::move(labels));
    if (meta.contains("best_loss") && meta["best_loss"].is_number()) {
      tf.best_loss = meta["best_loss"].get<double>();
      tf.has_loss = true;
    }
    if (meta.contains("training")) tf.training = meta["training"];
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::load, "malformed token.json: " + std::string(e.what()));
  }
  return tf;
}

}  // namespace ovam
