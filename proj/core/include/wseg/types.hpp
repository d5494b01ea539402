#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace wseg {

// RGB image with values in [0,1], stored planar (channel-major):
// data[c * h * w + y * w + x]. Immutable by convention after construction.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // 3 * height * width

  Image() = default;
  Image(int h, int w);

  double at(int c, int y, int x) const { return data[(c * height + y) * width + x]; }
  double& at(int c, int y, int x) { return data[(c * height + y) * width + x]; }
  int pixels() const { return height * width; }

  // Throws DataError if dimensions are degenerate or any value is
  // outside [0,1] or non-finite.
  void validate() const;
};

// Per-pixel class ids in {0..class_count-1} plus an UNLABELLED sentinel.
// The same type carries scribbles, pseudo-masks and full ground truth.
struct LabelMask {
  static constexpr std::uint8_t kUnlabelled = 255;

  int height = 0;
  int width = 0;
  int class_count = 0;  // C >= 2, <= 254
  std::vector<std::uint8_t> labels;  // height * width

  LabelMask() = default;
  LabelMask(int h, int w, int class_count);

  std::uint8_t at(int y, int x) const { return labels[y * width + x]; }
  std::uint8_t& at(int y, int x) { return labels[y * width + x]; }
  bool labelled(int y, int x) const { return at(y, x) != kUnlabelled; }
  int pixels() const { return height * width; }

  int labelled_count() const;
  bool fully_labelled() const;

  // Throws DataError if any label is >= class_count and not the sentinel.
  void validate() const;
};

// Per-pixel class probability field, C x H x W planar. Each pixel's C
// values are nonnegative and sum to 1 (within 1e-9).
struct SegmentationOutput {
  int class_count = 0;
  int height = 0;
  int width = 0;
  std::vector<double> probs;  // class_count * height * width

  SegmentationOutput() = default;
  SegmentationOutput(int c, int h, int w);

  double at(int c, int y, int x) const { return probs[(c * height + y) * width + x]; }
  double& at(int c, int y, int x) { return probs[(c * height + y) * width + x]; }

  void validate() const;
};

// C x M matrix of predicted class centroids; row c is the centroid of
// class c in the loss feature space (M = C + K, K in {0,3}).
struct Centroids {
  int class_count = 0;
  int dim = 0;  // M
  std::vector<double> values;  // class_count * dim, row-major

  Centroids() = default;
  Centroids(int c, int m) : class_count(c), dim(m), values(static_cast<size_t>(c) * m, 0.0) {}

  double at(int c, int m) const { return values[static_cast<size_t>(c) * dim + m]; }
  double& at(int c, int m) { return values[static_cast<size_t>(c) * dim + m]; }
  const double* row(int c) const { return values.data() + static_cast<size_t>(c) * dim; }
};

// counts[i][j] = pixels of true class i predicted as class j. Predictions
// equal to LabelMask::kUnlabelled are tallied per true class in a separate
// overflow column: they enlarge the truth-side totals without crediting
// any predicted class.
struct ConfusionMatrix {
  int class_count = 0;
  std::vector<std::int64_t> counts;    // class_count * class_count, row-major
  std::vector<std::int64_t> overflow;  // per true class

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int c)
      : class_count(c), counts(static_cast<size_t>(c) * c, 0), overflow(c, 0) {}

  std::int64_t at(int true_c, int pred_c) const {
    return counts[static_cast<size_t>(true_c) * class_count + pred_c];
  }
  std::int64_t& at(int true_c, int pred_c) {
    return counts[static_cast<size_t>(true_c) * class_count + pred_c];
  }

  std::int64_t row_total(int true_c) const;  // includes overflow
  std::int64_t col_total(int pred_c) const;
  std::int64_t total() const;  // counts + overflow

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

// Per-pixel normalized RGB: (R,G,B)/(R+G+B), or (0,0,0) when the channel
// sum is zero. Returned in the same planar layout as Image.
std::vector<double> normalized_rgb(const Image& image);

}  // namespace wseg
