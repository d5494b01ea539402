#pragma once

#include <cstdint>
#include <vector>

#include "wseg/superpixels.hpp"
#include "wseg/types.hpp"

namespace wseg {

// Spreads scribble labels to whole superpixels: a segment that overlaps
// scribble pixels takes their majority class (ties toward the lowest class
// id), all other segments stay UNLABELLED. Scribble pixels always keep
// their own class.
LabelMask propagate_scribbles(const LabelMask& scribbles, const SuperpixelMap& superpixels);

// Synthetic scene: textured background (class 0) plus class_count-1
// disjoint fat shapes, each guaranteed to host scribbles up to
// scribble_capacity pixels wide.
struct SceneSpec {
  int height = 64;
  int width = 64;
  int class_count = 4;
  int scribble_capacity = 20;
};

struct Scene {
  Image image;
  LabelMask full_mask;
};

Scene synth_scene(const SceneSpec& spec, std::uint64_t seed);

// One scribble per class present in the mask: a random walk through the
// region's deep interior, dilated to the requested width. The scribble
// always lies strictly inside its class region.
LabelMask synth_scribbles(const LabelMask& full_mask, int width, std::uint64_t seed);

// Applies one random transform (right-angle rotation, scale 0.8-1.2 with
// centre pad/crop, or random crop of >= 50% area resized back) identically
// to the image and all masks. Masks are resampled nearest-neighbour only.
struct Augmented {
  Image image;
  std::vector<LabelMask> masks;
};

Augmented augment(const Image& image, const std::vector<LabelMask>& masks, std::uint64_t seed);

}  // namespace wseg
