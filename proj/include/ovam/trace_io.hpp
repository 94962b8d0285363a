#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "ovam/backend.hpp"
#include "ovam/image.hpp"
#include "ovam/io_util.hpp"

namespace ovam {

// Trace container layout:
//   trace.json            metadata, block list, per-array dims
//   q_<block>_<t>.f32     queries, float32 little-endian, row-major
//   kw_<block>.f32        key-projection weights
//   sa_<block>_<t>.f32    full-resolution self-attention
//   image.png             decoded RGB image

namespace detail {

inline void check_block_id(const std::string& id) {
  require(!id.empty(), ErrorKind::argument, "empty block id");
  for (char c : id)
    require(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.',
            ErrorKind::argument, "block id '" + id + "' is not file-name safe");
}

inline nlohmann::json shape_json(const std::vector<std::size_t>& shape) { return shape; }

}  // namespace detail

inline void save_trace(const DenoisingTrace& trace, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json meta;
  meta["format"] = "ovam-trace";
  meta["version"] = 1;
  meta["dtype"] = "float32";
  meta["endianness"] = "little";
  meta["backend_id"] = trace.backend_id;
  meta["latent_w"] = trace.latent_w;
  meta["latent_h"] = trace.latent_h;
  meta["embedding_dim"] = trace.embedding_dim;
  meta["seed"] = trace.seed;
  meta["prompt"] = trace.prompt;
  meta["timesteps"] = trace.timesteps;
  meta["notes"] = trace.notes;
  meta["blocks"] = nlohmann::json::array();
  for (const auto& b : trace.blocks) {
    detail::check_block_id(b.id);
    meta["blocks"].push_back({{"id", b.id},
                              {"reduction", b.reduction},
                              {"heads", b.heads},
                              {"head_dim", b.head_dim},
                              {"kind", to_string(b.kind)}});
  }
  nlohmann::json arrays = nlohmann::json::array();
  auto emit = [&](const std::string& name, const Tensor<float>& t) {
    write_f32<float>(dir / name, t.values());
    arrays.push_back({{"file", name}, {"shape", t.shape()}});
  };
  for (const auto& [id, w] : trace.key_weights) emit("kw_" + id + ".f32", w);
  for (const auto& [key, q] : trace.queries) emit("q_" + key.first + "_" + std::to_string(key.second) + ".f32", q);
  for (const auto& [key, a] : trace.self_attn) emit("sa_" + key.first + "_" + std::to_string(key.second) + ".f32", a);
  meta["arrays"] = arrays;
  meta["image"] = {{"file", "image.png"}, {"width", trace.image.width}, {"height", trace.image.height}};
  write_png_rgb(dir / "image.png", trace.image);
  write_file_text(dir / "trace.json", meta.dump(2) + "\n");
}

inline DenoisingTrace load_trace(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "trace.json"))
    throw Error(ErrorKind::load, "no trace.json in " + dir.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file_text(dir / "trace.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::load, "malformed trace.json: " + std::string(e.what()));
  }
  require(meta.value("dtype", "") == "float32" && meta.value("endianness", "") == "little", ErrorKind::load,
          "unsupported trace dtype/endianness");

  DenoisingTrace tr;
  try {
    tr.backend_id = meta.at("backend_id").get<std::string>();
    tr.latent_w = meta.at("latent_w").get<std::size_t>();
    tr.latent_h = meta.at("latent_h").get<std::size_t>();
    tr.embedding_dim = meta.at("embedding_dim").get<std::size_t>();
    tr.seed = meta.at("seed").get<std::int64_t>();
    tr.prompt = meta.at("prompt").get<std::string>();
    tr.timesteps = meta.at("timesteps").get<std::vector<int>>();
    if (meta.contains("notes")) tr.notes = meta["notes"].get<std::map<std::string, std::string>>();
    for (const auto& b : meta.at("blocks"))
      tr.blocks.push_back({b.at("id").get<std::string>(), b.at("reduction").get<int>(), b.at("heads").get<int>(),
                           b.at("head_dim").get<int>(), parse_block_kind(b.at("kind").get<std::string>())});
    for (const auto& a : meta.at("arrays")) {
      const auto file = a.at("file").get<std::string>();
      const auto shape = a.at("shape").get<std::vector<std::size_t>>();
      Tensor<float> t(shape, read_f32(dir / file, Tensor<float>::element_count(shape)));
      const auto stem = file.substr(0, file.size() - 4);  // drop ".f32"
      if (stem.rfind("kw_", 0) == 0) {
        tr.key_weights[stem.substr(3)] = std::move(t);
        continue;
      }
      const bool is_query = stem.rfind("q_", 0) == 0;
      const auto body = stem.substr(is_query ? 2 : 3);
      const auto cut = body.rfind('_');
      require(cut != std::string::npos, ErrorKind::load, "cannot parse array name " + file);
      SliceKey key{body.substr(0, cut), std::stoi(body.substr(cut + 1))};
      (is_query ? tr.queries : tr.self_attn)[key] = std::move(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::load, "malformed trace.json: " + std::string(e.what()));
  }
  tr.image = read_png_rgb(dir / "image.png");
  tr.validate();
  return tr;
}

}  // namespace ovam
