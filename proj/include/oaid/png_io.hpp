#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oaid/error.hpp"
#include "oaid/imaging.hpp"

namespace oaid {

// Loads an 8-bit grayscale or RGB PNG. Palette, alpha and 16-bit files are rejected.
inline ImageBuffer load_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  const std::string name = path.string();
  if (!png_image_begin_read_from_file(&image, name.c_str()))
    throw IoError("cannot read PNG '" + name + "': " + image.message);
  const auto fail = [&](const std::string& why) {
    png_image_free(&image);
    throw IoError("unsupported PNG '" + name + "': " + why);
  };
  if (image.format & PNG_FORMAT_FLAG_COLORMAP) fail("palette images are not supported");
  if (image.format & PNG_FORMAT_FLAG_ALPHA) fail("alpha channel is not supported");
  if (image.format & PNG_FORMAT_FLAG_LINEAR) fail("only 8-bit depth is supported");
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + name + "': " + msg);
  }
  std::vector<float> pixels(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return ImageBuffer(image.height, image.width, color ? 3 : 1, std::move(pixels));
}

inline std::vector<std::uint8_t> to_bytes(const ImageBuffer& img) {
  std::vector<std::uint8_t> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(std::lround(static_cast<double>(img.pixels()[i]) * 255.0));
  return bytes;
}

inline void save_png(const ImageBuffer& img, const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto bytes = to_bytes(img);
  const std::string name = path.string();
  if (!png_image_write_to_file(&image, name.c_str(), 0, bytes.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + name + "': " + image.message);
}

}  // namespace oaid
