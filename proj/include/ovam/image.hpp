#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "ovam/array.hpp"
#include "ovam/error.hpp"
#include "ovam/io_util.hpp"

namespace ovam {

/// Interleaved 8-bit RGB raster.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // 3 * width * height

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), pixels(3 * w * h, 0) {}

  std::uint8_t* at(std::size_t y, std::size_t x) noexcept { return &pixels[3 * (y * width + x)]; }
  const std::uint8_t* at(std::size_t y, std::size_t x) const noexcept {
    return &pixels[3 * (y * width + x)];
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

namespace png {

namespace detail {

inline std::vector<std::uint8_t> encode(const std::uint8_t* data, std::size_t w, std::size_t h,
                                        png_uint_32 format) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, data, 0, nullptr))
    throw Error(ErrorKind::io, std::string("png encode failed: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, data, 0, nullptr))
    throw Error(ErrorKind::io, std::string("png encode failed: ") + image.message);
  out.resize(size);
  return out;
}

inline std::vector<std::uint8_t> decode(const std::uint8_t* bytes, std::size_t n,
                                        png_uint_32 format, std::size_t& w, std::size_t& h) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes, n))
    throw Error(ErrorKind::io, std::string("png decode failed: ") + image.message);
  image.format = format;
  std::vector<std::uint8_t> out(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(ErrorKind::io, std::string("png decode failed: ") + image.message);
  }
  w = image.width;
  h = image.height;
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_rgb(const RgbImage& img) {
  return detail::encode(img.pixels.data(), img.width, img.height, PNG_FORMAT_RGB);
}

inline std::vector<std::uint8_t> encode_gray(const Raster<std::uint8_t>& img) {
  return detail::encode(img.data.data(), img.width, img.height, PNG_FORMAT_GRAY);
}

inline RgbImage decode_rgb(const std::vector<std::uint8_t>& bytes) {
  RgbImage img;
  img.pixels = detail::decode(bytes.data(), bytes.size(), PNG_FORMAT_RGB, img.width, img.height);
  return img;
}

inline Raster<std::uint8_t> decode_gray(const std::vector<std::uint8_t>& bytes) {
  Raster<std::uint8_t> img;
  img.data = detail::decode(bytes.data(), bytes.size(), PNG_FORMAT_GRAY, img.width, img.height);
  return img;
}

}  // namespace png

inline RgbImage read_png_rgb(const std::filesystem::path& path) {
  return png::decode_rgb(read_file_bytes(path));
}
inline void write_png_rgb(const std::filesystem::path& path, const RgbImage& img) {
  write_file_bytes(path, png::encode_rgb(img));
}

}  // namespace ovam
