#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace scrl {

// Interleaved 8-bit raster, row-major, `channels` in {1, 3}.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int h, int w, int c)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, 0) {}

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  friend bool operator==(const Image8&, const Image8&) = default;
};

// PNG I/O. Reading converts to the requested channel count (1 = gray, 3 = RGB).
void write_png(const std::filesystem::path& path, const Image8& image);
Image8 read_png(const std::filesystem::path& path, int channels);

}  // namespace scrl
