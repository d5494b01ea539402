#pragma once

#include <vector>

#include "wseg/types.hpp"

namespace wseg {

// Builds the confusion matrix of `pred` against a fully labelled `truth`.
// UNLABELLED predictions land in the per-true-class overflow column.
ConfusionMatrix confusion(const LabelMask& pred, const LabelMask& truth);

// Mean intersection-over-union. Classes whose union is empty are skipped
// from the mean. Throws DataError on an empty matrix.
double miou(const ConfusionMatrix& cm);

// Per-class IOU; classes with empty union get -1 (skipped by miou).
std::vector<double> per_class_iou(const ConfusionMatrix& cm);

struct RecallPrecision {
  double mrec = 0.0;
  double mprec = 0.0;
};

// Macro-averaged recall and precision. A class with no positives in the
// truth is skipped for recall; a class with no predicted positives is
// skipped for precision.
RecallPrecision macro_recall_precision(const ConfusionMatrix& cm);

// Harmonic mean of macro precision and recall; 0 when both are 0.
double f1(double mrec, double mprec);

// Weak mIOU: quality of a (possibly partial) weak mask measured against
// the fully supervised mask.
double wmiou(const LabelMask& weak_mask, const LabelMask& full_mask);

struct MetricSummary {
  double miou = 0.0;
  double mrec = 0.0;
  double mprec = 0.0;
  double f1 = 0.0;
  std::vector<double> per_class;
};

MetricSummary summarize(const ConfusionMatrix& cm);

}  // namespace wseg
