#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "wseg/errors.hpp"
#include "wseg/superpixels.hpp"

using namespace wseg;

namespace {

Image solid(int h, int w, double r, double g, double b) {
  Image img(h, w);
  for (int p = 0; p < h * w; ++p) {
    img.data[p] = r;
    img.data[h * w + p] = g;
    img.data[2 * h * w + p] = b;
  }
  return img;
}

// Fraction of true boundary pixels lying within `tol` (Chebyshev) of a
// segment boundary pixel.
double boundary_recall(const SuperpixelMap& map, const std::vector<int>& truth_region, int tol) {
  const int h = map.height, w = map.width;
  auto is_pred_boundary = [&](int y, int x) {
    std::int32_t id = map.at(y, x);
    if (y > 0 && map.at(y - 1, x) != id) return true;
    if (y + 1 < h && map.at(y + 1, x) != id) return true;
    if (x > 0 && map.at(y, x - 1) != id) return true;
    if (x + 1 < w && map.at(y, x + 1) != id) return true;
    return false;
  };
  int total = 0, hit = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int t = truth_region[y * w + x];
      bool tb = (y > 0 && truth_region[(y - 1) * w + x] != t) ||
                (y + 1 < h && truth_region[(y + 1) * w + x] != t) ||
                (x > 0 && truth_region[y * w + x - 1] != t) ||
                (x + 1 < w && truth_region[y * w + x + 1] != t);
      if (!tb) continue;
      ++total;
      bool found = false;
      for (int dy = -tol; dy <= tol && !found; ++dy)
        for (int dx = -tol; dx <= tol && !found; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w && is_pred_boundary(yy, xx)) found = true;
        }
      hit += found;
    }
  return total > 0 ? double(hit) / total : 1.0;
}

}  // namespace

TEST_CASE("rgb_to_lab matches reference values for the sRGB primaries") {
  struct Ref {
    double r, g, b, L, A, B;
  };
  // D65 two-degree reference values
  const Ref refs[] = {
      {1, 1, 1, 100.0, 0.0, 0.0},
      {0, 0, 0, 0.0, 0.0, 0.0},
      {1, 0, 0, 53.2408, 80.0925, 67.2032},
      {0, 1, 0, 87.7347, -86.1827, 83.1793},
      {0, 0, 1, 32.2970, 79.1875, -107.8602},
  };
  for (const Ref& ref : refs) {
    Image img = solid(1, 1, ref.r, ref.g, ref.b);
    auto lab = rgb_to_lab(img);
    CHECK(lab[0] == doctest::Approx(ref.L).epsilon(1e-3));
    CHECK(lab[1] == doctest::Approx(ref.A).epsilon(1e-3).scale(1.0));
    CHECK(lab[2] == doctest::Approx(ref.B).epsilon(1e-3).scale(1.0));
  }
}

TEST_CASE("grays are achromatic in lab") {
  for (double v : {0.1, 0.3, 0.5, 0.8}) {
    auto lab = rgb_to_lab(solid(1, 1, v, v, v));
    // truncated sRGB matrix constants leave ~1e-5 chroma residue
    CHECK(lab[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-4));
    CHECK(lab[2] == doctest::Approx(0.0).scale(1.0).epsilon(1e-4));
    CHECK(lab[0] > 0.0);
    CHECK(lab[0] < 100.0);
  }
}

TEST_CASE("requesting one segment yields a single cover") {
  Image img = solid(8, 8, 0.4, 0.5, 0.6);
  SuperpixelMap map = oversegment(img, 1, 0);
  map.validate();
  CHECK(map.segment_count == 1);
  for (auto id : map.ids) CHECK(id == 0);
}

TEST_CASE("uniform image gives a near-regular grid") {
  Image img = solid(60, 60, 0.5, 0.5, 0.5);
  SuperpixelMap map = oversegment(img, 36, 7);
  map.validate();
  CHECK(map.segment_count >= 26);  // +-30% of 36
  CHECK(map.segment_count <= 46);
  auto sizes = segment_sizes(map);
  for (int s : sizes) CHECK(s >= 3600 / (4 * 36));
}

TEST_CASE("textured image keeps count within 30% and connectivity") {
  // smooth ramp with mild noise, comparable to the synthetic scenes
  std::mt19937_64 rng(21);
  Image img(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) {
        double base = 0.2 + 0.6 * (c == 0 ? x : (c == 1 ? y : x + y)) / 128.0;
        img.at(c, y, x) = std::clamp(base + 0.05 * (double(rng() % 1000) / 999.0 - 0.5), 0.0, 1.0);
      }
  SuperpixelMap map = oversegment(img, 64, 3);
  map.validate();  // 4-connectivity and contiguity
  CHECK(map.segment_count >= 45);
  CHECK(map.segment_count <= 83);
}

TEST_CASE("pure noise still yields a valid partition") {
  std::mt19937_64 rng(25);
  Image img(48, 48);
  for (auto& v : img.data) v = double(rng() % 1000) / 999.0;
  SuperpixelMap map = oversegment(img, 36, 3);
  map.validate();
  CHECK(map.segment_count >= 1);
}

TEST_CASE("deterministic for a fixed seed") {
  std::mt19937_64 rng(22);
  Image img(40, 40);
  for (auto& v : img.data) v = double(rng() % 256) / 255.0;
  SuperpixelMap a = oversegment(img, 25, 11);
  SuperpixelMap b = oversegment(img, 25, 11);
  CHECK(a.ids == b.ids);
  CHECK(a.segment_count == b.segment_count);
}

TEST_CASE("two-tone boundary recall") {
  Image img(60, 60);
  for (int y = 0; y < 60; ++y)
    for (int x = 0; x < 60; ++x) {
      bool left = x < 30;
      img.at(0, y, x) = left ? 0.9 : 0.1;
      img.at(1, y, x) = left ? 0.2 : 0.7;
      img.at(2, y, x) = 0.3;
    }
  std::vector<int> truth(3600);
  for (int y = 0; y < 60; ++y)
    for (int x = 0; x < 60; ++x) truth[y * 60 + x] = x < 30 ? 0 : 1;

  SuperpixelMap map = oversegment(img, 8, 5);
  map.validate();
  CHECK(boundary_recall(map, truth, 2) >= 0.95);
}

TEST_CASE("segment_sizes matches a direct histogram") {
  std::mt19937_64 rng(23);
  Image img(32, 32);
  for (auto& v : img.data) v = double(rng() % 256) / 255.0;
  SuperpixelMap map = oversegment(img, 16, 1);
  auto sizes = segment_sizes(map);
  std::vector<int> want(map.segment_count, 0);
  for (auto id : map.ids) ++want[id];
  CHECK(sizes == want);
  int total = 0;
  for (int s : sizes) total += s;
  CHECK(total == 32 * 32);
}

TEST_CASE("oversegment rejects out-of-range requests") {
  Image img = solid(8, 8, 0.5, 0.5, 0.5);
  CHECK_THROWS_AS(oversegment(img, 0, 0), DataError);
  CHECK_THROWS_AS(oversegment(img, 65, 0), DataError);
}

TEST_CASE("superpixel map png round trip") {
  std::mt19937_64 rng(24);
  Image img(24, 24);
  for (auto& v : img.data) v = double(rng() % 256) / 255.0;
  SuperpixelMap map = oversegment(img, 9, 2);

  auto dir = std::filesystem::temp_directory_path() / "wseg_test_sp";
  std::filesystem::create_directories(dir);
  auto path = (dir / "sp.png").string();
  save_superpixels(map, path);
  SuperpixelMap back = load_superpixels(path);
  CHECK(back.ids == map.ids);
  CHECK(back.segment_count == map.segment_count);
}

TEST_CASE("map validate rejects broken invariants") {
  SuperpixelMap map(2, 2);
  map.segment_count = 2;
  map.ids = {0, 1, 1, 0};  // both segments diagonal, not 4-connected
  CHECK_THROWS_AS(map.validate(), DataError);

  map.ids = {0, 0, 2, 2};  // id 1 missing
  map.segment_count = 3;
  CHECK_THROWS_AS(map.validate(), DataError);

  map.ids = {0, 0, 1, 1};
  map.segment_count = 2;
  CHECK_NOTHROW(map.validate());
}
