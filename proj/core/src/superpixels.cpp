#include "wseg/superpixels.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "wseg/errors.hpp"
#include "wseg/png_io.hpp"
#include "wseg/rng.hpp"

namespace wseg {
namespace {

double srgb_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double lab_f(double t) {
  constexpr double kDelta3 = (6.0 / 29.0) * (6.0 / 29.0) * (6.0 / 29.0);
  return t > kDelta3 ? std::cbrt(t) : t / (3.0 * (6.0 / 29.0) * (6.0 / 29.0)) + 4.0 / 29.0;
}

struct Cluster {
  double l = 0, a = 0, b = 0;
  double x = 0, y = 0;
  double m2 = 100.0;  // squared adaptive compactness, initial m = 10
};

}  // namespace

std::vector<double> rgb_to_lab(const Image& image) {
  const int hw = image.pixels();
  std::vector<double> lab(static_cast<size_t>(3) * hw);
  for (int p = 0; p < hw; ++p) {
    double r = srgb_linear(image.data[p]);
    double g = srgb_linear(image.data[hw + p]);
    double b = srgb_linear(image.data[2 * hw + p]);
    // sRGB primaries, D65 white point
    double xx = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    double yy = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    double zz = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    double fx = lab_f(xx), fy = lab_f(yy), fz = lab_f(zz);
    lab[p] = 116.0 * fy - 16.0;
    lab[hw + p] = 500.0 * (fx - fy);
    lab[2 * hw + p] = 200.0 * (fy - fz);
  }
  return lab;
}

void SuperpixelMap::validate() const {
  if (height < 1 || width < 1) throw DataError("SuperpixelMap dimensions must be >= 1");
  if (ids.size() != static_cast<size_t>(height) * width)
    throw DataError("SuperpixelMap buffer size does not match dimensions");
  if (segment_count < 1) throw DataError("SuperpixelMap needs at least one segment");

  std::vector<int> sizes(segment_count, 0);
  for (std::int32_t v : ids) {
    if (v < 0 || v >= segment_count) throw DataError("segment id out of range");
    ++sizes[v];
  }
  for (int s = 0; s < segment_count; ++s)
    if (sizes[s] == 0) throw DataError("segment ids are not contiguous");

  // 4-connectivity: one flood fill per segment must reach all its pixels.
  std::vector<char> seen(ids.size(), 0);
  std::vector<int> reached(segment_count, 0);
  std::vector<int> stack;
  for (int start = 0; start < pixels(); ++start) {
    if (seen[start]) continue;
    const std::int32_t id = ids[start];
    if (reached[id] > 0) throw DataError("segment is not 4-connected");
    stack.assign(1, start);
    seen[start] = 1;
    int count = 0;
    while (!stack.empty()) {
      int p = stack.back();
      stack.pop_back();
      ++count;
      int y = p / width, x = p % width;
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int i = 0; i < 4; ++i) {
        if (ny[i] < 0 || ny[i] >= height || nx[i] < 0 || nx[i] >= width) continue;
        int q = ny[i] * width + nx[i];
        if (!seen[q] && ids[q] == id) {
          seen[q] = 1;
          stack.push_back(q);
        }
      }
    }
    reached[id] = count;
  }
  for (int s = 0; s < segment_count; ++s)
    if (reached[s] != sizes[s]) throw DataError("segment is not 4-connected");
}

std::vector<int> segment_sizes(const SuperpixelMap& map) {
  std::vector<int> sizes(map.segment_count, 0);
  for (std::int32_t v : map.ids) ++sizes[v];
  return sizes;
}

SuperpixelMap oversegment(const Image& image, int requested_segments, std::uint64_t seed) {
  image.validate();
  const int h = image.height, w = image.width, hw = h * w;
  if (requested_segments < 1 || requested_segments > hw)
    throw DataError("requested_segments must be in [1, pixel count]");

  const std::vector<double> lab = rgb_to_lab(image);
  auto lab_at = [&](int p, int c) { return lab[static_cast<size_t>(c) * hw + p]; };

  const double step = std::sqrt(static_cast<double>(hw) / requested_segments);
  const double s2 = step * step;

  // Seeds on a regular grid, each nudged to the lowest-gradient pixel of
  // its 3x3 neighbourhood. The seed value only decides between exact
  // gradient ties, so it cannot move a seed off the gradient minimum.
  Rng rng(seed);
  auto gradient = [&](int y, int x) {
    int xl = std::max(x - 1, 0), xr = std::min(x + 1, w - 1);
    int yu = std::max(y - 1, 0), yd = std::min(y + 1, h - 1);
    double g = 0.0;
    for (int c = 0; c < 3; ++c) {
      double dx = lab_at(y * w + xr, c) - lab_at(y * w + xl, c);
      double dy = lab_at(yd * w + x, c) - lab_at(yu * w + x, c);
      g += dx * dx + dy * dy;
    }
    return g;
  };

  std::vector<Cluster> clusters;
  for (double cy = step / 2.0; cy < h; cy += step) {
    for (double cx = step / 2.0; cx < w; cx += step) {
      int iy = std::min(static_cast<int>(cy), h - 1);
      int ix = std::min(static_cast<int>(cx), w - 1);
      double best = std::numeric_limits<double>::infinity();
      std::vector<std::pair<int, int>> ties;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int y = iy + dy, x = ix + dx;
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          double g = gradient(y, x);
          if (g < best) {
            best = g;
            ties.assign(1, {y, x});
          } else if (g == best) {
            ties.emplace_back(y, x);
          }
        }
      auto [sy, sx] = ties[ties.size() == 1 ? 0 : static_cast<size_t>(rng.uniform_int(
                                                      static_cast<int>(ties.size())))];
      Cluster c;
      int p = sy * w + sx;
      c.l = lab_at(p, 0);
      c.a = lab_at(p, 1);
      c.b = lab_at(p, 2);
      c.x = sx;
      c.y = sy;
      clusters.push_back(c);
    }
  }
  const int k = static_cast<int>(clusters.size());

  std::vector<std::int32_t> label(hw, 0);
  std::vector<double> dist(hw);
  for (int iter = 0; iter < 10; ++iter) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    std::fill(label.begin(), label.end(), -1);
    for (int ci = 0; ci < k; ++ci) {
      const Cluster& c = clusters[ci];
      int x0 = std::max(0, static_cast<int>(std::floor(c.x - step)));
      int x1 = std::min(w - 1, static_cast<int>(std::ceil(c.x + step)));
      int y0 = std::max(0, static_cast<int>(std::floor(c.y - step)));
      int y1 = std::min(h - 1, static_cast<int>(std::ceil(c.y + step)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          int p = y * w + x;
          double dl = lab_at(p, 0) - c.l, da = lab_at(p, 1) - c.a, db = lab_at(p, 2) - c.b;
          double dl2 = dl * dl + da * da + db * db;
          double dxy2 = (x - c.x) * (x - c.x) + (y - c.y) * (y - c.y);
          double d = dl2 / c.m2 + dxy2 / s2;
          if (d < dist[p]) {
            dist[p] = d;
            label[p] = ci;
          }
        }
      }
    }
    for (int p = 0; p < hw; ++p) {
      if (label[p] >= 0) continue;
      // windows cover the grid, but guard against drifted centers
      double best = std::numeric_limits<double>::infinity();
      for (int ci = 0; ci < k; ++ci) {
        double dxy2 = (p % w - clusters[ci].x) * (p % w - clusters[ci].x) +
                      (p / w - clusters[ci].y) * (p / w - clusters[ci].y);
        if (dxy2 < best) {
          best = dxy2;
          label[p] = ci;
        }
      }
    }

    // Move centers to member means; reset each cluster's compactness to the
    // largest color distance its members showed this iteration.
    std::vector<double> acc(static_cast<size_t>(k) * 6, 0.0);
    std::vector<double> max_dl2(k, 0.0);
    for (int p = 0; p < hw; ++p) {
      int ci = label[p];
      double* a = acc.data() + static_cast<size_t>(ci) * 6;
      a[0] += lab_at(p, 0);
      a[1] += lab_at(p, 1);
      a[2] += lab_at(p, 2);
      a[3] += p % w;
      a[4] += p / w;
      a[5] += 1.0;
      const Cluster& c = clusters[ci];
      double dl = lab_at(p, 0) - c.l, da = lab_at(p, 1) - c.a, db = lab_at(p, 2) - c.b;
      max_dl2[ci] = std::max(max_dl2[ci], dl * dl + da * da + db * db);
    }
    for (int ci = 0; ci < k; ++ci) {
      double* a = acc.data() + static_cast<size_t>(ci) * 6;
      if (a[5] == 0.0) continue;  // empty cluster keeps its state
      clusters[ci].l = a[0] / a[5];
      clusters[ci].a = a[1] / a[5];
      clusters[ci].b = a[2] / a[5];
      clusters[ci].x = a[3] / a[5];
      clusters[ci].y = a[4] / a[5];
      clusters[ci].m2 = std::max(max_dl2[ci], 1e-12);
    }
  }

  // Connectivity enforcement: flood-fill components of the raw labelling,
  // then absorb fragments below HW/(4K) into their largest neighbour.
  std::vector<int> comp(hw, -1);
  std::vector<std::int64_t> comp_size;
  std::vector<std::vector<int>> comp_adj;
  std::vector<int> stack;
  for (int start = 0; start < hw; ++start) {
    if (comp[start] >= 0) continue;
    int id = static_cast<int>(comp_size.size());
    comp_size.push_back(0);
    comp_adj.emplace_back();
    stack.assign(1, start);
    comp[start] = id;
    while (!stack.empty()) {
      int p = stack.back();
      stack.pop_back();
      ++comp_size[id];
      int y = p / w, x = p % w;
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int i = 0; i < 4; ++i) {
        if (ny[i] < 0 || ny[i] >= h || nx[i] < 0 || nx[i] >= w) continue;
        int q = ny[i] * w + nx[i];
        if (label[q] == label[p]) {
          if (comp[q] < 0) {
            comp[q] = id;
            stack.push_back(q);
          }
        } else if (comp[q] >= 0) {
          comp_adj[id].push_back(comp[q]);
          comp_adj[comp[q]].push_back(id);
        }
      }
    }
  }

  const int n_comp = static_cast<int>(comp_size.size());
  std::vector<int> parent(n_comp);
  for (int i = 0; i < n_comp; ++i) parent[i] = i;
  std::function<int(int)> find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };

  bool merged = true;
  while (merged) {
    merged = false;
    for (int i = 0; i < n_comp; ++i) {
      int root = find(i);
      if (root != i) continue;
      if (comp_size[root] * 4 * static_cast<std::int64_t>(requested_segments) >= hw) continue;
      int best = -1;
      std::int64_t best_size = -1;
      for (int adj : comp_adj[i]) {
        int r = find(adj);
        if (r == root) continue;
        if (comp_size[r] > best_size || (comp_size[r] == best_size && r < best)) {
          best = r;
          best_size = comp_size[r];
        }
      }
      if (best < 0) continue;  // isolated component, nothing to merge into
      parent[root] = best;
      comp_size[best] += comp_size[root];
      // the union keeps the fragment's neighbours for possible further merges
      comp_adj[best].insert(comp_adj[best].end(), comp_adj[i].begin(), comp_adj[i].end());
      merged = true;
    }
  }

  SuperpixelMap out(h, w);
  std::vector<std::int32_t> remap(n_comp, -1);
  std::int32_t next_id = 0;
  for (int p = 0; p < hw; ++p) {
    int root = find(comp[p]);
    if (remap[root] < 0) remap[root] = next_id++;
    out.ids[p] = remap[root];
  }
  out.segment_count = next_id;
  return out;
}

SuperpixelMap load_superpixels(const std::string& path) {
  Gray16 g = load_gray16(path);
  SuperpixelMap map(g.height, g.width);
  std::int32_t max_id = 0;
  for (size_t i = 0; i < g.values.size(); ++i) {
    map.ids[i] = g.values[i];
    max_id = std::max(max_id, map.ids[i]);
  }
  map.segment_count = max_id + 1;
  map.validate();
  return map;
}

void save_superpixels(const SuperpixelMap& map, const std::string& path) {
  map.validate();
  if (map.segment_count > 65536) throw DataError("too many segments for 16-bit storage");
  Gray16 g(map.height, map.width);
  for (size_t i = 0; i < map.ids.size(); ++i)
    g.values[i] = static_cast<std::uint16_t>(map.ids[i]);
  save_gray16(g, path);
}

}  // namespace wseg
