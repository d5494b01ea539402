#include <doctest.h>

#include <random>

#include "wseg/errors.hpp"
#include "wseg/metrics.hpp"

using namespace wseg;

namespace {

LabelMask make_mask(int h, int w, int classes, std::initializer_list<int> labels) {
  LabelMask m(h, w, classes);
  int i = 0;
  for (int v : labels) m.labels[i++] = static_cast<std::uint8_t>(v);
  return m;
}

// Independent recount used as an oracle: walks the pixel grid once per
// class instead of going through a confusion matrix.
struct NaiveStats {
  double miou = 0.0, mrec = 0.0, mprec = 0.0;
};

NaiveStats naive_stats(const LabelMask& pred, const LabelMask& truth) {
  NaiveStats out;
  int iou_n = 0, rec_n = 0, prec_n = 0;
  for (int c = 0; c < truth.class_count; ++c) {
    long tp = 0, truth_c = 0, pred_c = 0;
    for (int i = 0; i < truth.pixels(); ++i) {
      bool t = truth.labels[i] == c;
      bool p = pred.labels[i] == c;
      if (t) ++truth_c;
      if (p) ++pred_c;
      if (t && p) ++tp;
    }
    long uni = truth_c + pred_c - tp;
    if (uni > 0) {
      out.miou += double(tp) / double(uni);
      ++iou_n;
    }
    if (truth_c > 0) {
      out.mrec += double(tp) / double(truth_c);
      ++rec_n;
    }
    if (pred_c > 0) {
      out.mprec += double(tp) / double(pred_c);
      ++prec_n;
    }
  }
  if (iou_n) out.miou /= iou_n;
  if (rec_n) out.mrec /= rec_n;
  if (prec_n) out.mprec /= prec_n;
  return out;
}

}  // namespace

TEST_CASE("confusion tallies counts and unlabelled overflow") {
  auto truth = make_mask(2, 2, 2, {0, 0, 1, 1});
  auto pred = make_mask(2, 2, 2, {0, 1, 1, 1});
  auto cm = confusion(pred, truth);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(1, 0) == 0);
  CHECK(cm.at(1, 1) == 2);
  CHECK(cm.overflow[0] == 0);
  CHECK(cm.total() == 4);

  auto pred2 = make_mask(2, 2, 2, {LabelMask::kUnlabelled, 1, 1, 1});
  auto cm2 = confusion(pred2, truth);
  CHECK(cm2.overflow[0] == 1);
  CHECK(cm2.row_total(0) == 2);   // overflow counts against the true class
  CHECK(cm2.col_total(0) == 0);   // but credits no predicted class
  CHECK(cm2.total() == 4);
}

TEST_CASE("hand-checked 2x2 example") {
  auto truth = make_mask(2, 2, 2, {0, 0, 1, 1});
  auto pred = make_mask(2, 2, 2, {0, 1, 1, 1});
  auto cm = confusion(pred, truth);

  auto s = summarize(cm);
  CHECK(s.miou == doctest::Approx(7.0 / 12.0).epsilon(1e-12));
  CHECK(s.mrec == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(s.mprec == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(s.f1 == doctest::Approx(15.0 / 19.0).epsilon(1e-12));
  CHECK(s.per_class[0] == doctest::Approx(0.5));
  CHECK(s.per_class[1] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("perfect prediction scores 1 everywhere") {
  auto truth = make_mask(3, 3, 3, {0, 0, 0, 1, 1, 1, 2, 2, 2});
  auto s = summarize(confusion(truth, truth));
  CHECK(s.miou == doctest::Approx(1.0));
  CHECK(s.mrec == doctest::Approx(1.0));
  CHECK(s.mprec == doctest::Approx(1.0));
  CHECK(s.f1 == doctest::Approx(1.0));
}

TEST_CASE("classes absent from both masks are skipped, not zeroed") {
  // Class 2 never occurs: the mean is over classes 0 and 1 only.
  auto truth = make_mask(2, 2, 3, {0, 0, 1, 1});
  auto pred = make_mask(2, 2, 3, {0, 0, 1, 1});
  auto cm = confusion(pred, truth);
  auto iou = per_class_iou(cm);
  CHECK(iou[2] == doctest::Approx(-1.0));
  CHECK(miou(cm) == doctest::Approx(1.0));
}

TEST_CASE("class present only in prediction drags mIOU but not recall") {
  auto truth = make_mask(2, 2, 3, {0, 0, 1, 1});
  auto pred = make_mask(2, 2, 3, {0, 2, 1, 1});
  auto cm = confusion(pred, truth);
  // Class 2: union of 1 pixel, intersection 0. Included in mIOU.
  CHECK(miou(cm) == doctest::Approx((0.5 + 1.0 + 0.0) / 3.0));
  auto rp = macro_recall_precision(cm);
  // No true class-2 pixels, so recall averages classes 0 and 1.
  CHECK(rp.mrec == doctest::Approx((0.5 + 1.0) / 2.0));
  // Precision includes class 2 with value 0.
  CHECK(rp.mprec == doctest::Approx((1.0 + 1.0 + 0.0) / 3.0));
}

TEST_CASE("f1 edge cases") {
  CHECK(f1(0.0, 0.0) == 0.0);
  CHECK(f1(1.0, 1.0) == doctest::Approx(1.0));
  CHECK(f1(0.5, 1.0) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("wmiou treats the weak mask as the prediction") {
  auto full = make_mask(2, 2, 2, {0, 0, 1, 1});
  auto weak = make_mask(2, 2, 2, {0, LabelMask::kUnlabelled, 1, 1});
  // Class 0: tp=1, union = 2 (truth) + 1 (pred) - 1 = 2 -> 0.5
  // Class 1: tp=2, union = 2 -> 1
  CHECK(wmiou(weak, full) == doctest::Approx(0.75));
}

TEST_CASE("pooled accumulation matches concatenated pixels") {
  auto t1 = make_mask(2, 2, 2, {0, 0, 1, 1});
  auto p1 = make_mask(2, 2, 2, {0, 1, 1, 1});
  auto t2 = make_mask(2, 2, 2, {1, 1, 0, 0});
  auto p2 = make_mask(2, 2, 2, {1, 0, 0, 1});

  auto pooled = confusion(p1, t1);
  pooled += confusion(p2, t2);

  auto tcat = make_mask(2, 4, 2, {0, 0, 1, 1, 1, 1, 0, 0});
  auto pcat = make_mask(2, 4, 2, {0, 1, 1, 1, 1, 0, 0, 1});
  auto cat = confusion(pcat, tcat);

  CHECK(pooled.counts == cat.counts);
  CHECK(pooled.overflow == cat.overflow);
  CHECK(miou(pooled) == doctest::Approx(miou(cat)));
}

TEST_CASE("random masks agree with a per-class recount") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    int classes = 2 + int(rng() % 5);
    int h = 1 + int(rng() % 9), w = 1 + int(rng() % 9);
    LabelMask truth(h, w, classes), pred(h, w, classes);
    for (int i = 0; i < h * w; ++i) {
      truth.labels[i] = static_cast<std::uint8_t>(rng() % classes);
      pred.labels[i] = static_cast<std::uint8_t>(rng() % classes);
    }
    auto cm = confusion(pred, truth);
    auto got = summarize(cm);
    auto want = naive_stats(pred, truth);
    CHECK(got.miou == doctest::Approx(want.miou).epsilon(1e-12));
    CHECK(got.mrec == doctest::Approx(want.mrec).epsilon(1e-12));
    CHECK(got.mprec == doctest::Approx(want.mprec).epsilon(1e-12));
  }
}

TEST_CASE("confusion rejects malformed input") {
  auto truth = make_mask(2, 2, 2, {0, 0, 1, 1});
  auto small = make_mask(1, 2, 2, {0, 1});
  CHECK_THROWS_AS(confusion(small, truth), DataError);

  auto other_classes = make_mask(2, 2, 3, {0, 0, 1, 1});
  CHECK_THROWS_AS(confusion(other_classes, truth), DataError);

  auto partial = make_mask(2, 2, 2, {0, LabelMask::kUnlabelled, 1, 1});
  CHECK_THROWS_AS(confusion(truth, partial), DataError);

  CHECK_THROWS_AS(miou(ConfusionMatrix(2)), DataError);
}
