#include "wseg/types.hpp"

#include <cmath>
#include <numeric>

#include "wseg/errors.hpp"

namespace wseg {

Image::Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(3) * h * w, 0.0) {
  if (h < 1 || w < 1) throw DataError("Image dimensions must be >= 1");
}

void Image::validate() const {
  if (height < 1 || width < 1) throw DataError("Image dimensions must be >= 1");
  if (data.size() != static_cast<size_t>(3) * height * width)
    throw DataError("Image buffer size does not match dimensions");
  for (double v : data) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw DataError("Image values must be finite and within [0,1]");
  }
}

LabelMask::LabelMask(int h, int w, int c)
    : height(h), width(w), class_count(c),
      labels(static_cast<size_t>(h) * w, kUnlabelled) {
  if (h < 1 || w < 1) throw DataError("LabelMask dimensions must be >= 1");
  if (c < 2 || c > 254) throw DataError("class_count must be in [2,254]");
}

int LabelMask::labelled_count() const {
  int n = 0;
  for (std::uint8_t v : labels) n += (v != kUnlabelled);
  return n;
}

bool LabelMask::fully_labelled() const { return labelled_count() == pixels(); }

void LabelMask::validate() const {
  if (class_count < 2 || class_count > 254) throw DataError("class_count must be in [2,254]");
  if (labels.size() != static_cast<size_t>(height) * width)
    throw DataError("LabelMask buffer size does not match dimensions");
  for (std::uint8_t v : labels) {
    if (v != kUnlabelled && v >= class_count)
      throw DataError("malformed mask: label " + std::to_string(v) + " >= class_count " +
                      std::to_string(class_count));
  }
}

SegmentationOutput::SegmentationOutput(int c, int h, int w)
    : class_count(c), height(h), width(w), probs(static_cast<size_t>(c) * h * w, 0.0) {}

void SegmentationOutput::validate() const {
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double sum = 0.0;
      for (int c = 0; c < class_count; ++c) {
        double p = at(c, y, x);
        if (!std::isfinite(p) || p < 0.0)
          throw NumericalError("SegmentationOutput probabilities must be finite and >= 0");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw NumericalError("SegmentationOutput pixel probabilities must sum to 1");
    }
  }
}

std::int64_t ConfusionMatrix::row_total(int true_c) const {
  std::int64_t s = overflow[true_c];
  for (int j = 0; j < class_count; ++j) s += at(true_c, j);
  return s;
}

std::int64_t ConfusionMatrix::col_total(int pred_c) const {
  std::int64_t s = 0;
  for (int i = 0; i < class_count; ++i) s += at(i, pred_c);
  return s;
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t s = std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
  return s + std::accumulate(overflow.begin(), overflow.end(), std::int64_t{0});
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.class_count != class_count)
    throw DataError("cannot merge confusion matrices of different class counts");
  for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  for (size_t i = 0; i < overflow.size(); ++i) overflow[i] += other.overflow[i];
  return *this;
}

std::vector<double> normalized_rgb(const Image& image) {
  const int hw = image.pixels();
  std::vector<double> out(static_cast<size_t>(3) * hw, 0.0);
  for (int p = 0; p < hw; ++p) {
    double r = image.data[p];
    double g = image.data[hw + p];
    double b = image.data[2 * hw + p];
    double s = r + g + b;
    if (s > 0.0) {
      out[p] = r / s;
      out[hw + p] = g / s;
      out[2 * hw + p] = b / s;
    }
  }
  return out;
}

}  // namespace wseg
