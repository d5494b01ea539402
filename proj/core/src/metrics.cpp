#include "wseg/metrics.hpp"

#include "wseg/errors.hpp"

namespace wseg {

ConfusionMatrix confusion(const LabelMask& pred, const LabelMask& truth) {
  if (pred.height != truth.height || pred.width != truth.width)
    throw DataError("confusion: mask dimensions differ");
  if (pred.class_count != truth.class_count)
    throw DataError("confusion: class counts differ");
  truth.validate();
  pred.validate();

  ConfusionMatrix cm(truth.class_count);
  for (int i = 0; i < truth.pixels(); ++i) {
    std::uint8_t t = truth.labels[i];
    if (t == LabelMask::kUnlabelled) throw DataError("confusion: truth mask must be fully labelled");
    std::uint8_t p = pred.labels[i];
    if (p == LabelMask::kUnlabelled)
      ++cm.overflow[t];
    else
      ++cm.at(t, p);
  }
  return cm;
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  std::vector<double> iou(cm.class_count, -1.0);
  for (int c = 0; c < cm.class_count; ++c) {
    std::int64_t inter = cm.at(c, c);
    std::int64_t uni = cm.row_total(c) + cm.col_total(c) - inter;
    if (uni > 0) iou[c] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return iou;
}

double miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DataError("miou: empty confusion matrix");
  double sum = 0.0;
  int evaluated = 0;
  for (double v : per_class_iou(cm)) {
    if (v >= 0.0) {
      sum += v;
      ++evaluated;
    }
  }
  return evaluated > 0 ? sum / evaluated : 0.0;
}

RecallPrecision macro_recall_precision(const ConfusionMatrix& cm) {
  double rec_sum = 0.0, prec_sum = 0.0;
  int rec_n = 0, prec_n = 0;
  for (int c = 0; c < cm.class_count; ++c) {
    std::int64_t tp = cm.at(c, c);
    std::int64_t truth_pos = cm.row_total(c);
    std::int64_t pred_pos = cm.col_total(c);
    if (truth_pos > 0) {
      rec_sum += static_cast<double>(tp) / static_cast<double>(truth_pos);
      ++rec_n;
    }
    if (pred_pos > 0) {
      prec_sum += static_cast<double>(tp) / static_cast<double>(pred_pos);
      ++prec_n;
    }
  }
  RecallPrecision out;
  out.mrec = rec_n > 0 ? rec_sum / rec_n : 0.0;
  out.mprec = prec_n > 0 ? prec_sum / prec_n : 0.0;
  return out;
}

double f1(double mrec, double mprec) {
  if (mrec == 0.0 && mprec == 0.0) return 0.0;
  return 2.0 * mprec * mrec / (mprec + mrec);
}

double wmiou(const LabelMask& weak_mask, const LabelMask& full_mask) {
  return miou(confusion(weak_mask, full_mask));
}

MetricSummary summarize(const ConfusionMatrix& cm) {
  MetricSummary s;
  s.miou = miou(cm);
  RecallPrecision rp = macro_recall_precision(cm);
  s.mrec = rp.mrec;
  s.mprec = rp.mprec;
  s.f1 = f1(rp.mrec, rp.mprec);
  s.per_class = per_class_iou(cm);
  return s;
}

}  // namespace wseg
