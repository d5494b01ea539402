#include "wseg/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "wseg/errors.hpp"
#include "wseg/rng.hpp"

namespace wseg {
namespace {

// Structuring element of the given scribble width: a disk of diameter
// `width`, centred between pixels for even widths so the footprint is
// exactly `width` pixels across.
std::vector<std::pair<int, int>> width_disk(int width) {
  const double off = width % 2 == 0 ? 0.5 : 0.0;
  const double r2 = (width / 2.0) * (width / 2.0);
  std::vector<std::pair<int, int>> out;
  for (int dy = -width; dy <= width; ++dy)
    for (int dx = -width; dx <= width; ++dx) {
      double ddx = dx - off, ddy = dy - off;
      if (ddx * ddx + ddy * ddy <= r2) out.emplace_back(dy, dx);
    }
  return out;
}

// Pixels of `region` whose whole structuring-element footprint stays inside.
std::vector<int> erode(const std::vector<char>& region, int h, int w,
                       const std::vector<std::pair<int, int>>& se) {
  std::vector<int> out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool inside = true;
      for (auto [dy, dx] : se) {
        int yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w || !region[yy * w + xx]) {
          inside = false;
          break;
        }
      }
      if (inside) out.push_back(y * w + x);
    }
  return out;
}

// 3-4 chamfer distance to the region boundary, used to bias scribble walks
// toward the centre line.
std::vector<int> chamfer(const std::vector<char>& region, int h, int w) {
  const int inf = std::numeric_limits<int>::max() / 2;
  std::vector<int> d(static_cast<size_t>(h) * w);
  for (size_t i = 0; i < d.size(); ++i) d[i] = region[i] ? inf : 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int& v = d[y * w + x];
      if (v == 0) continue;
      // the image border counts as boundary
      if (y == 0 || x == 0 || y == h - 1 || x == w - 1) v = std::min(v, 3);
      if (y > 0) v = std::min(v, d[(y - 1) * w + x] + 3);
      if (x > 0) v = std::min(v, d[y * w + x - 1] + 3);
      if (y > 0 && x > 0) v = std::min(v, d[(y - 1) * w + x - 1] + 4);
      if (y > 0 && x + 1 < w) v = std::min(v, d[(y - 1) * w + x + 1] + 4);
    }
  for (int y = h - 1; y >= 0; --y)
    for (int x = w - 1; x >= 0; --x) {
      int& v = d[y * w + x];
      if (v == 0) continue;
      if (y + 1 < h) v = std::min(v, d[(y + 1) * w + x] + 3);
      if (x + 1 < w) v = std::min(v, d[y * w + x + 1] + 3);
      if (y + 1 < h && x + 1 < w) v = std::min(v, d[(y + 1) * w + x + 1] + 4);
      if (y + 1 < h && x > 0) v = std::min(v, d[(y + 1) * w + x - 1] + 4);
    }
  return d;
}

struct ShapeDef {
  int kind = 0;  // 0 disk, 1 rectangle, 2 ellipse
  double cx = 0, cy = 0;
  double a = 0, b = 0;  // half extents

  double bounding_radius() const {
    return kind == 1 ? std::sqrt(a * a + b * b) : std::max(a, b);
  }
  bool contains(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    switch (kind) {
      case 0:
        return dx * dx + dy * dy <= a * a;
      case 1:
        return std::abs(dx) <= a && std::abs(dy) <= b;
      default:
        return (dx * dx) / (a * a) + (dy * dy) / (b * b) <= 1.0;
    }
  }
};

// Per-class base colors; background first.
constexpr double kPalette[6][3] = {
    {0.36, 0.41, 0.50}, {0.74, 0.26, 0.21}, {0.22, 0.64, 0.31},
    {0.80, 0.74, 0.26}, {0.55, 0.31, 0.69}, {0.26, 0.69, 0.74},
};

int nearest_index(int dst, int src_extent, int dst_extent) {
  int v = static_cast<int>((static_cast<std::int64_t>(dst) * src_extent) / dst_extent);
  return std::min(v, src_extent - 1);
}

Image resize_nearest(const Image& src, int h, int w) {
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    int sy = nearest_index(y, src.height, h);
    for (int x = 0; x < w; ++x) {
      int sx = nearest_index(x, src.width, w);
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = src.at(c, sy, sx);
    }
  }
  return out;
}

LabelMask resize_nearest(const LabelMask& src, int h, int w) {
  LabelMask out(h, w, src.class_count);
  for (int y = 0; y < h; ++y) {
    int sy = nearest_index(y, src.height, h);
    for (int x = 0; x < w; ++x) out.at(y, x) = src.at(sy, nearest_index(x, src.width, w));
  }
  return out;
}

Image rotate90cw(const Image& src) {
  Image out(src.width, src.height);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = src.at(c, src.height - 1 - x, y);
  return out;
}

LabelMask rotate90cw(const LabelMask& src) {
  LabelMask out(src.width, src.height, src.class_count);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.at(y, x) = src.at(src.height - 1 - x, y);
  return out;
}

}  // namespace

LabelMask propagate_scribbles(const LabelMask& scribbles, const SuperpixelMap& superpixels) {
  if (scribbles.height != superpixels.height || scribbles.width != superpixels.width)
    throw DataError("propagate_scribbles: dimension mismatch");
  scribbles.validate();
  superpixels.validate();

  const int c = scribbles.class_count;
  std::vector<int> counts(static_cast<size_t>(superpixels.segment_count) * c, 0);
  for (int p = 0; p < scribbles.pixels(); ++p) {
    std::uint8_t lab = scribbles.labels[p];
    if (lab != LabelMask::kUnlabelled) ++counts[static_cast<size_t>(superpixels.ids[p]) * c + lab];
  }

  std::vector<std::uint8_t> segment_label(superpixels.segment_count, LabelMask::kUnlabelled);
  for (int s = 0; s < superpixels.segment_count; ++s) {
    const int* row = counts.data() + static_cast<size_t>(s) * c;
    int best = 0, best_class = -1;
    for (int cl = 0; cl < c; ++cl)
      if (row[cl] > best) {  // strict: ties keep the earlier (lower) class
        best = row[cl];
        best_class = cl;
      }
    if (best_class >= 0) segment_label[s] = static_cast<std::uint8_t>(best_class);
  }

  LabelMask out(scribbles.height, scribbles.width, c);
  for (int p = 0; p < out.pixels(); ++p) {
    std::uint8_t scr = scribbles.labels[p];
    out.labels[p] = scr != LabelMask::kUnlabelled ? scr : segment_label[superpixels.ids[p]];
  }
  return out;
}

Scene synth_scene(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.class_count < 2 || spec.class_count > 6)
    throw DataError("synth_scene: class_count must be in [2,6]");
  if (spec.height < 32 || spec.width < 32)
    throw DataError("synth_scene: scene must be at least 32x32");

  const int h = spec.height, w = spec.width, c = spec.class_count;
  Rng rng(seed);

  // Shapes must contain a disk one pixel wider than the scribble footprint
  // so the walk has somewhere to go after erosion.
  const double se_radius = spec.scribble_capacity / 2.0 + (spec.scribble_capacity % 2 ? 0 : 0.5);
  const double r_min = se_radius + 2.0;
  const double r_max =
      std::max(r_min + 1.0, c <= 2 ? 20.0 : (c == 3 ? 16.0 : 13.0));

  const auto se = width_disk(spec.scribble_capacity);

  for (int attempt = 0; attempt < 400; ++attempt) {
    // Shapes are placed one at a time with local retries; a shape that
    // cannot find room anywhere restarts the whole layout.
    std::vector<ShapeDef> shapes;
    bool feasible = true;
    for (int s = 0; s < c - 1 && feasible; ++s) {
      bool placed = false;
      for (int t = 0; t < 200 && !placed; ++t) {
        ShapeDef d;
        d.kind = rng.uniform_int(3);
        d.a = rng.uniform(r_min, r_max);
        d.b = d.kind == 0 ? d.a : rng.uniform(r_min, r_max);
        double margin = d.bounding_radius() + 2.0;
        if (2.0 * margin >= std::min(h, w)) continue;
        d.cx = rng.uniform(margin, w - 1 - margin);
        d.cy = rng.uniform(margin, h - 1 - margin);
        bool clear = true;
        for (const ShapeDef& o : shapes) {
          double dx = d.cx - o.cx, dy = d.cy - o.cy;
          double need = d.bounding_radius() + o.bounding_radius() + 3.0;
          if (dx * dx + dy * dy < need * need) {
            clear = false;
            break;
          }
        }
        if (!clear) continue;
        shapes.push_back(d);
        placed = true;
      }
      feasible = placed;
    }
    if (!feasible) continue;

    LabelMask mask(h, w, c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        std::uint8_t lab = 0;
        for (size_t s = 0; s < shapes.size(); ++s)
          if (shapes[s].contains(x, y)) {
            lab = static_cast<std::uint8_t>(s + 1);
            break;
          }
        mask.at(y, x) = lab;
      }

    // Every class, background included, must survive erosion by the
    // scribble footprint and hold a minimal pixel share.
    bool ok = true;
    for (int cl = 0; cl < c && ok; ++cl) {
      std::vector<char> region(mask.pixels());
      int count = 0;
      for (int p = 0; p < mask.pixels(); ++p) {
        region[p] = mask.labels[p] == cl;
        count += region[p];
      }
      if (count * 50 < mask.pixels()) ok = false;  // 2% share
      if (ok && erode(region, h, w, se).size() < 12) ok = false;
    }
    if (!ok) continue;

    // Texture: per-class base color, a smooth illumination ramp, per-pixel
    // noise. Drawn after acceptance so rejected attempts cost no draws.
    Image img(h, w);
    double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double* base = kPalette[mask.at(y, x)];
        double ramp = gx * (2.0 * x / w - 1.0) + gy * (2.0 * y / h - 1.0);
        for (int ch = 0; ch < 3; ++ch) {
          double v = base[ch] + ramp + rng.uniform(-0.04, 0.04);
          img.at(ch, y, x) = std::clamp(v, 0.0, 1.0);
        }
      }
    return {std::move(img), std::move(mask)};
  }
  throw DataError("synth_scene: no feasible layout for the given spec");
}

LabelMask synth_scribbles(const LabelMask& full_mask, int width, std::uint64_t seed) {
  if (width != 2 && width != 5 && width != 10 && width != 20)
    throw DataError("synth_scribbles: width must be one of 2, 5, 10, 20");
  full_mask.validate();
  if (!full_mask.fully_labelled())
    throw DataError("synth_scribbles: full mask must be fully labelled");

  const int h = full_mask.height, w = full_mask.width;
  Rng rng(seed);
  const auto se = width_disk(width);

  LabelMask out(h, w, full_mask.class_count);
  for (int cl = 0; cl < full_mask.class_count; ++cl) {
    std::vector<char> region(full_mask.pixels());
    int count = 0;
    for (int p = 0; p < full_mask.pixels(); ++p) {
      region[p] = full_mask.labels[p] == cl;
      count += region[p];
    }
    if (count == 0) continue;  // class absent, no scribble
    if (count < width * width)
      throw DataError("synth_scribbles: class region too small for the requested width");

    std::vector<int> core = erode(region, h, w, se);
    if (core.empty())
      throw DataError("synth_scribbles: class region too thin for the requested width");

    std::vector<int> depth = chamfer(region, h, w);
    std::vector<char> in_core(full_mask.pixels(), 0);
    for (int p : core) in_core[p] = 1;

    // Start at the deepest core pixel, then walk preferring deep
    // unvisited neighbours; revisits are allowed only to escape dead ends.
    int start = core[0];
    for (int p : core)
      if (depth[p] > depth[start]) start = p;

    const int target_len = std::max(4, static_cast<int>(std::sqrt(double(count))));
    std::vector<char> visited(full_mask.pixels(), 0);
    std::vector<int> path{start};
    visited[start] = 1;
    int cur = start;
    for (int step = 1; step < target_len; ++step) {
      int cands[8];
      double weights[8];
      int n_cand = 0;
      double total = 0.0;
      int y = cur / w, x = cur % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          int q = yy * w + xx;
          if (!in_core[q] || visited[q]) continue;
          cands[n_cand] = q;
          weights[n_cand] = double(depth[q]) * depth[q];
          total += weights[n_cand];
          ++n_cand;
        }
      if (n_cand == 0) break;
      double pick = rng.uniform(0.0, total);
      int chosen = cands[n_cand - 1];
      for (int i = 0; i < n_cand; ++i) {
        if (pick < weights[i]) {
          chosen = cands[i];
          break;
        }
        pick -= weights[i];
      }
      visited[chosen] = 1;
      path.push_back(chosen);
      cur = chosen;
    }

    for (int p : path)
      for (auto [dy, dx] : se) {
        int yy = p / w + dy, xx = p % w + dx;
        out.at(yy, xx) = static_cast<std::uint8_t>(cl);  // in bounds: p is in the eroded core
      }
  }
  return out;
}

Augmented augment(const Image& image, const std::vector<LabelMask>& masks, std::uint64_t seed) {
  image.validate();
  for (const LabelMask& m : masks)
    if (m.height != image.height || m.width != image.width)
      throw DataError("augment: mask dimensions differ from image");

  Rng rng(seed);
  Augmented out{image, masks};
  const int h = image.height, w = image.width;

  switch (rng.uniform_int(3)) {
    case 0: {
      int quarter_turns = rng.uniform_int(4);
      for (int t = 0; t < quarter_turns; ++t) {
        out.image = rotate90cw(out.image);
        for (LabelMask& m : out.masks) m = rotate90cw(m);
      }
      break;
    }
    case 1: {
      double f = rng.uniform(0.8, 1.2);
      int hs = std::max(1, static_cast<int>(std::lround(h * f)));
      int ws = std::max(1, static_cast<int>(std::lround(w * f)));
      Image scaled = resize_nearest(out.image, hs, ws);
      std::vector<LabelMask> smasks;
      for (const LabelMask& m : out.masks) smasks.push_back(resize_nearest(m, hs, ws));
      // centre-align; shrunk results replicate-pad, grown results crop
      int oy = (hs - h) / 2, ox = (ws - w) / 2;
      Image img(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int sy = std::clamp(y + oy, 0, hs - 1), sx = std::clamp(x + ox, 0, ws - 1);
          for (int c = 0; c < 3; ++c) img.at(c, y, x) = scaled.at(c, sy, sx);
        }
      out.image = std::move(img);
      for (size_t i = 0; i < out.masks.size(); ++i) {
        LabelMask m(h, w, out.masks[i].class_count);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            m.at(y, x) = smasks[i].at(std::clamp(y + oy, 0, hs - 1), std::clamp(x + ox, 0, ws - 1));
        out.masks[i] = std::move(m);
      }
      break;
    }
    default: {
      double side = std::sqrt(rng.uniform(0.5, 1.0));  // area >= 50%
      int ch = std::max(1, static_cast<int>(std::lround(h * side)));
      int cw = std::max(1, static_cast<int>(std::lround(w * side)));
      int oy = rng.uniform_int(h - ch + 1), ox = rng.uniform_int(w - cw + 1);
      Image crop(ch, cw);
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
          for (int c = 0; c < 3; ++c) crop.at(c, y, x) = out.image.at(c, y + oy, x + ox);
      out.image = resize_nearest(crop, h, w);
      for (LabelMask& m : out.masks) {
        LabelMask cm(ch, cw, m.class_count);
        for (int y = 0; y < ch; ++y)
          for (int x = 0; x < cw; ++x) cm.at(y, x) = m.at(y + oy, x + ox);
        m = resize_nearest(cm, h, w);
      }
      break;
    }
  }
  return out;
}

}  // namespace wseg
