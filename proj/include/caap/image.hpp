#pragma once

#include <cstdint>
#include <vector>

namespace caap {

/// Pixel grid with interleaved channels (row-major, HWC), values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f);

  float& at(int y, int x, int c) { return data[index(y, x, c)]; }
  float at(int y, int x, int c) const { return data[index(y, x, c)]; }
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const Image& o) const { return same_shape(o) && data == o.data; }
};

/// Pixel-level binary mask plus helpers for the patch-level majority view.
struct SegMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // 1 = foreground

  SegMask() = default;
  SegMask(int h, int w, std::uint8_t fill = 0);

  bool at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v) { pixels[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t foreground_count() const;

  /// Patch i is foreground when strictly more than half its pixels are.
  std::vector<std::uint8_t> patch_majority(int patch_px) const;
  SegMask inverted() const;
};

/// Separable box blur (odd kernel width, clamp-to-edge), applied `passes` times.
Image box_blur(const Image& img, int kernel, int passes = 2);

/// Copies the pixel block of patch `patch` (row-major patch grid) from src into dst.
void copy_patch(const Image& src, Image& dst, int patch, int patch_px);
void fill_patch(Image& dst, int patch, int patch_px, float value);

}  // namespace caap
