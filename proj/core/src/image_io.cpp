#include "scrl/image_io.hpp"

#include <png.h>

#include <cstring>

#include "scrl/error.hpp"

namespace scrl {

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw Error("image_io", "unsupported channel count for " + path.string());
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw Error("image_io", "cannot write " + path.string() + ": " + msg);
  }
}

Image8 read_png(const std::filesystem::path& path, int channels) {
  if (!std::filesystem::exists(path)) {
    throw Error("image_io", "missing file " + path.string());
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw Error("image_io", "cannot read " + path.string() + ": " + png.message);
  }
  png.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out(static_cast<int>(png.height), static_cast<int>(png.width), channels);
  if (!png_image_finish_read(&png, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw Error("image_io", "cannot decode " + path.string() + ": " + msg);
  }
  return out;
}

}  // namespace scrl
