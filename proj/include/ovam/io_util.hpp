#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "ovam/error.hpp"

namespace ovam {

static_assert(std::endian::native == std::endian::little,
              "raw float32 files are little-endian; big-endian hosts need byte swapping");

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_file_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io, "short write to " + path.string());
}

inline void write_file_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

template <typename T>
void write_f32(const std::filesystem::path& path, std::span<const T> values) {
  std::vector<float> tmp(values.begin(), values.end());
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(tmp.data()), tmp.size() * sizeof(float)});
}

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected) {
  auto bytes = read_file_bytes(path);
  if (bytes.size() != expected * sizeof(float))
    throw Error(ErrorKind::dimension, path.string() + " holds " + std::to_string(bytes.size()) +
                                          " bytes, expected " + std::to_string(expected * sizeof(float)));
  std::vector<float> out(expected);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace ovam
