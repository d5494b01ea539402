#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wseg/types.hpp"

namespace wseg {

// 8-bit RGB PNG in, channel values scaled into [0,1]. Palette, gray and
// alpha variants are expanded/stripped to RGB on read.
Image load_image(const std::string& path);
void save_image(const Image& image, const std::string& path);

// Single-channel 8-bit PNG; raw value 255 is the UNLABELLED sentinel,
// anything else must be < class_count or the mask is rejected.
LabelMask load_mask(const std::string& path, int class_count);
void save_mask(const LabelMask& mask, const std::string& path);

// 16-bit single-channel PNG, used for superpixel segment ids.
struct Gray16 {
  int height = 0;
  int width = 0;
  std::vector<std::uint16_t> values;

  Gray16() = default;
  Gray16(int h, int w) : height(h), width(w), values(static_cast<size_t>(h) * w, 0) {}

  std::uint16_t at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
  std::uint16_t& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
};
Gray16 load_gray16(const std::string& path);
void save_gray16(const Gray16& img, const std::string& path);

}  // namespace wseg
