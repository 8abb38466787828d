#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lcbm/tensor.hpp"

namespace lcbm {

// Pixel box, half-open: covers x1 <= x < x2, y1 <= y < y2.
struct PixelBox {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int width() const { return x2 - x1; }
  int height() const { return y2 - y1; }
  long area() const { return static_cast<long>(width()) * height(); }
  bool contains(double x, double y) const {
    return x >= x1 && x < x2 && y >= y1 && y < y2;
  }
  bool operator==(const PixelBox&) const = default;
};

// CHW image with intensities nominally in [0, 1].
class Image {
 public:
  Image() = default;
  Image(std::size_t channels, std::size_t height, std::size_t width,
        double fill = 0.0)
      : pixels_({channels, height, width}, fill) {}
  explicit Image(Tensor chw);

  std::size_t channels() const { return pixels_.dim(0); }
  std::size_t height() const { return pixels_.dim(1); }
  std::size_t width() const { return pixels_.dim(2); }
  bool empty() const { return pixels_.empty(); }

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels_[(c * height() + y) * width() + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels_[(c * height() + y) * width() + x];
  }

  const Tensor& tensor() const { return pixels_; }
  Tensor& mutable_tensor() { return pixels_; }

  Image crop(const PixelBox& box) const;
  // Copy with every channel zeroed inside `box` (clipped to the image).
  Image with_box_zeroed(const PixelBox& box) const;

  bool operator==(const Image&) const = default;

 private:
  Tensor pixels_;
};

// Bilinear resampling of a single-channel H x W map with half-pixel centers
// (the convention of common image libraries' linear resize).
Tensor resize_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w);
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);
// Resize so the shorter side equals `size`, then center-crop to size x size.
Image resize_center_crop(const Image& img, std::size_t size);

// Binary PGM (P5) / PPM (P6) with maxval 255.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const Image& img, const std::filesystem::path& path);

// 8-bit grayscale or RGB PNG.
std::string encode_png(const Image& img);
void write_png(const Image& img, const std::filesystem::path& path);

// Blend a [0,1] heat map (image resolution) over `img` as a red/blue overlay;
// the thresholded mask outline is drawn when `mask` is non-empty.
Image heatmap_overlay(const Image& img, const Tensor& heat,
                      const std::vector<bool>& mask);

}  // namespace lcbm
