#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wseg/types.hpp"

namespace wseg {

struct SuperpixelMap {
  int height = 0;
  int width = 0;
  int segment_count = 0;
  std::vector<std::int32_t> ids;  // height * width, values in [0, segment_count)

  SuperpixelMap() = default;
  SuperpixelMap(int h, int w) : height(h), width(w), ids(static_cast<size_t>(h) * w, 0) {}

  std::int32_t at(int y, int x) const { return ids[static_cast<size_t>(y) * width + x]; }
  std::int32_t& at(int y, int x) { return ids[static_cast<size_t>(y) * width + x]; }
  int pixels() const { return height * width; }

  // Throws DataError unless ids cover exactly 0..segment_count-1 and every
  // segment is 4-connected.
  void validate() const;
};

// SLICO oversegmentation: k-means in CIELAB x (x,y) with per-cluster
// adaptive compactness. Deterministic for fixed inputs; the seed only
// breaks exact ties during seed perturbation.
SuperpixelMap oversegment(const Image& image, int requested_segments, std::uint64_t seed);

std::vector<int> segment_sizes(const SuperpixelMap& map);

// sRGB (D65) to CIELAB, planar 3 x H x W: L in [0,100], a/b centred on 0.
std::vector<double> rgb_to_lab(const Image& image);

// Segment ids as 16-bit grayscale PNG.
SuperpixelMap load_superpixels(const std::string& path);
void save_superpixels(const SuperpixelMap& map, const std::string& path);

}  // namespace wseg
