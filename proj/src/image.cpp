#include "caap/image.hpp"

#include <algorithm>
#include <string>

#include "caap/error.hpp"

namespace caap {

Image::Image(int h, int w, int c, float fill)
    : height(h), width(w), channels(c),
      data(static_cast<std::size_t>(h) * w * c, fill) {
  if (h <= 0 || w <= 0 || c <= 0) {
    throw Error(ErrorKind::kShape, "image extents must be positive: " + std::to_string(h) + "x" +
                                       std::to_string(w) + "x" + std::to_string(c));
  }
}

SegMask::SegMask(int h, int w, std::uint8_t fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {
  if (h <= 0 || w <= 0) throw Error(ErrorKind::kShape, "mask extents must be positive");
}

std::size_t SegMask::foreground_count() const {
  return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
}

std::vector<std::uint8_t> SegMask::patch_majority(int patch_px) const {
  if (patch_px <= 0 || height % patch_px != 0 || width % patch_px != 0 || height != width) {
    throw Error(ErrorKind::kShape, "mask " + std::to_string(height) + "x" + std::to_string(width) +
                                       " is not a square grid of " + std::to_string(patch_px) +
                                       "px patches");
  }
  const int g = width / patch_px;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(g) * g, 0);
  const int half = patch_px * patch_px;
  for (int py = 0; py < g; ++py) {
    for (int px = 0; px < g; ++px) {
      int fg = 0;
      for (int y = 0; y < patch_px; ++y) {
        for (int x = 0; x < patch_px; ++x) fg += at(py * patch_px + y, px * patch_px + x) ? 1 : 0;
      }
      out[static_cast<std::size_t>(py) * g + px] = (2 * fg > half) ? 1 : 0;
    }
  }
  return out;
}

SegMask SegMask::inverted() const {
  SegMask m = *this;
  for (auto& p : m.pixels) p = p ? 0 : 1;
  return m;
}

namespace {

// One horizontal or vertical box pass with edge clamping.
void box_pass(const Image& in, Image& out, int kernel, bool horizontal) {
  const int r = kernel / 2;
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      for (int c = 0; c < in.channels; ++c) {
        float s = 0.0f;
        for (int k = -r; k <= r; ++k) {
          const int yy = horizontal ? y : std::clamp(y + k, 0, in.height - 1);
          const int xx = horizontal ? std::clamp(x + k, 0, in.width - 1) : x;
          s += in.at(yy, xx, c);
        }
        out.at(y, x, c) = s / static_cast<float>(kernel);
      }
    }
  }
}

}  // namespace

Image box_blur(const Image& img, int kernel, int passes) {
  if (kernel <= 0 || kernel % 2 == 0) {
    throw Error(ErrorKind::kConfig, "blur kernel must be a positive odd width, got " + std::to_string(kernel));
  }
  Image cur = img;
  if (kernel == 1) return cur;
  Image tmp = img;
  for (int p = 0; p < passes; ++p) {
    box_pass(cur, tmp, kernel, true);
    box_pass(tmp, cur, kernel, false);
  }
  return cur;
}

namespace {

void check_patch(const Image& img, int patch, int patch_px) {
  const int g = img.width / patch_px;
  if (patch < 0 || patch >= g * (img.height / patch_px)) {
    throw Error(ErrorKind::kRange, "patch index " + std::to_string(patch) + " outside grid");
  }
}

}  // namespace

void copy_patch(const Image& src, Image& dst, int patch, int patch_px) {
  if (!src.same_shape(dst)) throw Error(ErrorKind::kShape, "copy_patch: image shapes differ");
  check_patch(dst, patch, patch_px);
  const int g = dst.width / patch_px;
  const int y0 = (patch / g) * patch_px;
  const int x0 = (patch % g) * patch_px;
  for (int y = y0; y < y0 + patch_px; ++y) {
    for (int x = x0; x < x0 + patch_px; ++x) {
      for (int c = 0; c < dst.channels; ++c) dst.at(y, x, c) = src.at(y, x, c);
    }
  }
}

void fill_patch(Image& dst, int patch, int patch_px, float value) {
  check_patch(dst, patch, patch_px);
  const int g = dst.width / patch_px;
  const int y0 = (patch / g) * patch_px;
  const int x0 = (patch % g) * patch_px;
  for (int y = y0; y < y0 + patch_px; ++y) {
    for (int x = x0; x < x0 + patch_px; ++x) {
      for (int c = 0; c < dst.channels; ++c) dst.at(y, x, c) = value;
    }
  }
}

}  // namespace caap
