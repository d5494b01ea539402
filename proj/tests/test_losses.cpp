#include "wseg/losses.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "wseg/errors.hpp"
#include "wseg/rng.hpp"

using namespace wseg;
using ad::Tensor;

namespace {

// probs tensor for one sample from explicit per-class planes
Tensor probs_from(int c, int h, int w, std::vector<double> values) {
  return ad::constant({1, c, h, w}, std::move(values));
}

LabelMask mask1(int h, int w, int classes, std::vector<std::uint8_t> labels) {
  LabelMask m(h, w, classes);
  m.labels = std::move(labels);
  return m;
}

// independent recomputation of the normalized distance field in plain loops
std::vector<double> naive_distances(const std::vector<double>& f, const std::vector<double>& mu,
                                    int n, int m, int c, int hw) {
  std::vector<double> out(static_cast<size_t>(n) * c * hw);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < hw; ++p) {
      std::vector<double> sq(c, 0.0);
      double denom = 0.0;
      for (int cl = 0; cl < c; ++cl) {
        for (int k = 0; k < m; ++k) {
          double diff = f[(static_cast<size_t>(i) * m + k) * hw + p] -
                        mu[(static_cast<size_t>(i) * c + cl) * m + k];
          sq[cl] += diff * diff;
        }
        denom += sq[cl];
      }
      for (int cl = 0; cl < c; ++cl)
        out[(static_cast<size_t>(i) * c + cl) * hw + p] = denom < 1e-12 ? 1.0 / c : sq[cl] / denom;
    }
  return out;
}

}  // namespace

TEST_CASE("partial cross-entropy: worked values") {
  // 2 classes over a 1x3 row; channel 0 holds p, channel 1 holds 1-p
  Tensor probs = probs_from(2, 1, 3, {0.9, 0.8, 0.6, 0.1, 0.2, 0.4});

  LabelMask none = mask1(1, 3, 2, {255, 255, 255});
  CHECK(partial_cross_entropy(probs, {none})->value[0] == 0.0);

  LabelMask one = mask1(1, 3, 2, {255, 255, 1});  // prob 0.4... use class 1 of pixel 2
  CHECK(partial_cross_entropy(probs, {one})->value[0] ==
        doctest::Approx(-std::log(0.4)).epsilon(1e-12));

  Tensor half = probs_from(2, 1, 1, {0.5, 0.5});
  LabelMask single = mask1(1, 1, 2, {0});
  CHECK(partial_cross_entropy(half, {single})->value[0] ==
        doctest::Approx(0.6931471805599453).epsilon(1e-12));

  // hand-checked: -(ln 0.9 + ln 0.8 + ln 0.6) = 0.8393297
  LabelMask all = mask1(1, 3, 2, {0, 0, 0});
  CHECK(partial_cross_entropy(probs, {all})->value[0] ==
        doctest::Approx(0.8393296907).epsilon(1e-9));

  // unlabelled pixels change nothing
  LabelMask two = mask1(1, 3, 2, {0, 0, 255});
  CHECK(partial_cross_entropy(probs, {two})->value[0] ==
        doctest::Approx(-(std::log(0.9) + std::log(0.8))).epsilon(1e-12));
}

TEST_CASE("partial cross-entropy: batches sum across samples") {
  Tensor probs = ad::constant({2, 2, 1, 1}, {0.9, 0.5, 0.1, 0.5});
  std::vector<LabelMask> targets{mask1(1, 1, 2, {0}), mask1(1, 1, 2, {1})};
  CHECK(partial_cross_entropy(probs, targets)->value[0] ==
        doctest::Approx(-(std::log(0.9) + std::log(0.5))).epsilon(1e-12));

  CHECK_THROWS_AS(partial_cross_entropy(probs, {targets[0]}), DataError);
  CHECK_THROWS_AS(partial_cross_entropy(probs, {targets[0], mask1(1, 2, 2, {0, 0})}), DataError);
}

TEST_CASE("normalized distances: hand cases and normalization") {
  // f=(1,0) with centroids (1,0) and (0,1): distances 0 and 2 -> d=(0,1)
  Tensor f = ad::constant({1, 2, 1, 1}, {1.0, 0.0});
  Tensor mu = ad::constant({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor d = normalized_distances(f, mu);
  CHECK(d->value[0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(d->value[1] == doctest::Approx(1.0).epsilon(1e-15));

  // f equidistant from three unit centroids -> uniform thirds
  Tensor f3 = ad::constant({1, 3, 1, 1}, {0.0, 0.0, 0.0});
  Tensor mu3 = ad::constant({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor d3 = normalized_distances(f3, mu3);
  for (int c = 0; c < 3; ++c) CHECK(d3->value[c] == doctest::Approx(1.0 / 3).epsilon(1e-15));

  // random instances: components match the naive loops and sum to 1
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 1 + rng.uniform_int(2), m = 2 + rng.uniform_int(3), c = 2 + rng.uniform_int(3);
    int h = 1 + rng.uniform_int(3), w = 1 + rng.uniform_int(3);
    std::vector<double> fv(static_cast<size_t>(n) * m * h * w), mv(static_cast<size_t>(n) * c * m);
    for (double& v : fv) v = rng.uniform(-1.0, 1.0);
    for (double& v : mv) v = rng.uniform(-1.0, 1.0);
    Tensor dist = normalized_distances(ad::constant({n, m, h, w}, fv), ad::constant({n, c, m}, mv));
    std::vector<double> want = naive_distances(fv, mv, n, m, c, h * w);
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(dist->value[i] == doctest::Approx(want[i]).epsilon(1e-12));
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < h * w; ++p) {
        double s = 0.0;
        for (int cl = 0; cl < c; ++cl) s += dist->value[(static_cast<size_t>(i) * c + cl) * h * w + p];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
  }
}

TEST_CASE("normalized distances: all-zero pixel goes uniform with no gradient") {
  Tensor f = ad::leaf({1, 2, 1, 1});
  f->value = {0.3, 0.7};
  Tensor mu = ad::leaf({1, 2, 2});
  mu->value = {0.3, 0.7, 0.3, 0.7};  // both centroids sit exactly on f

  Tensor d = normalized_distances(f, mu);
  CHECK(d->value[0] == 0.5);
  CHECK(d->value[1] == 0.5);
  ad::backward(ad::sum(ad::mul(d, ad::constant({1, 2, 1, 1}, {1.0, 2.0}))));
  for (double g : f->grad) CHECK(g == 0.0);
  for (double g : mu->grad) CHECK(g == 0.0);
}

TEST_CASE("centroid loss: worked values") {
  // d=(0,1) with the scribble on class 0: -ln(e^0/(e^0+e^-1)) = 0.3133
  Tensor f = ad::constant({1, 2, 1, 1}, {1.0, 0.0});
  Tensor mu = ad::constant({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor d = normalized_distances(f, mu);
  LabelMask scribble = mask1(1, 1, 2, {0});
  CHECK(centroid_loss(d, {scribble})->value[0] == doctest::Approx(0.3132616875).epsilon(1e-4));

  // equidistant C=4: uniform distances, so the loss is ln 4 per pixel
  Tensor f4 = ad::constant({1, 4, 1, 1}, {0.0, 0.0, 0.0, 0.0});
  std::vector<double> mu4v(16, 0.0);
  for (int c = 0; c < 4; ++c) mu4v[static_cast<size_t>(c) * 4 + c] = 1.0;
  Tensor d4 = normalized_distances(f4, ad::constant({1, 4, 4}, mu4v));
  for (int true_class = 0; true_class < 4; ++true_class) {
    LabelMask s = mask1(1, 1, 4, {static_cast<std::uint8_t>(true_class)});
    CHECK(std::abs(centroid_loss(d4, {s})->value[0] - std::log(4.0)) < 1e-9);
  }

  LabelMask empty = mask1(1, 1, 2, {255});
  CHECK(centroid_loss(d, {empty})->value[0] == 0.0);
}

TEST_CASE("centroid loss: assignment probabilities form a distribution") {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    int c = 2 + rng.uniform_int(4), m = c, hw = 4;
    std::vector<double> fv(static_cast<size_t>(m) * hw), mv(static_cast<size_t>(c) * m);
    for (double& v : fv) v = rng.uniform(0.0, 1.0);
    for (double& v : mv) v = rng.uniform(0.0, 1.0);
    Tensor d = normalized_distances(ad::constant({1, m, 2, 2}, fv), ad::constant({1, c, m}, mv));
    Tensor assign = ad::softmax_channels(ad::neg(d));
    for (int p = 0; p < hw; ++p) {
      double s = 0.0;
      for (int cl = 0; cl < c; ++cl) {
        double v = assign->value[static_cast<size_t>(cl) * hw + p];
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("distance regularizer: worked values and brute force") {
  // two pixels, class-0 predicted everywhere; f sits on centroid 0 exactly
  Tensor probs = probs_from(2, 1, 2, {0.9, 0.8, 0.1, 0.2});
  Tensor f = ad::constant({1, 2, 1, 2}, {0.3, 0.3, 0.7, 0.7});
  Tensor mu = ad::constant({1, 2, 2}, {0.3, 0.7, 0.9, 0.1});
  Tensor d = normalized_distances(f, mu);
  CHECK(mse_regularizer(d, probs)->value[0] == doctest::Approx(0.0).epsilon(1e-15));

  // centroids equidistant from f=(0.3,0.7) make both distances 0.5
  Tensor mu_sym = ad::constant({1, 2, 2}, {0.5, 0.7, 0.1, 0.7});
  Tensor d_sym = normalized_distances(f, mu_sym);
  CHECK(mse_regularizer(d_sym, probs)->value[0] == doctest::Approx(0.5).epsilon(1e-12));

  // exact probability tie picks the lower class id
  Tensor tied = probs_from(2, 1, 1, {0.5, 0.5});
  Tensor d_tie = ad::constant({1, 2, 1, 1}, {0.2, 0.8});
  CHECK(mse_regularizer(d_tie, tied)->value[0] == doctest::Approx(0.2).epsilon(1e-15));

  // random instances against a per-pixel loop
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 1 + rng.uniform_int(2), c = 2 + rng.uniform_int(3);
    int h = 2 + rng.uniform_int(3), w = 2 + rng.uniform_int(3);
    int hw = h * w;
    std::vector<double> pv(static_cast<size_t>(n) * c * hw), dv(pv.size());
    for (double& v : pv) v = rng.uniform(0.0, 1.0);
    for (double& v : dv) v = rng.uniform(0.0, 1.0);
    Tensor p = ad::constant({n, c, h, w}, pv);
    Tensor dd = ad::constant({n, c, h, w}, dv);

    double want = 0.0;
    for (int i = 0; i < n; ++i)
      for (int px = 0; px < hw; ++px) {
        int best = 0;
        for (int cl = 1; cl < c; ++cl)
          if (pv[(static_cast<size_t>(i) * c + cl) * hw + px] >
              pv[(static_cast<size_t>(i) * c + best) * hw + px])
            best = cl;
        want += dv[(static_cast<size_t>(i) * c + best) * hw + px];
      }
    want /= static_cast<double>(n) * hw;
    CHECK(mse_regularizer(dd, p)->value[0] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("full loss: group structure and balance weights") {
  Rng rng(23);
  const int n = 2, c = 3, h = 4, w = 4;
  std::vector<double> logits_v(static_cast<size_t>(n) * c * h * w);
  std::vector<double> cent_v(static_cast<size_t>(n) * c * c);
  for (double& v : logits_v) v = rng.uniform(-1.0, 1.0);
  for (double& v : cent_v) v = rng.uniform(0.0, 1.0);

  std::vector<LabelMask> pseudo, scribbles;
  for (int i = 0; i < n; ++i) {
    LabelMask pm(h, w, c), sc(h, w, c);
    for (int p = 0; p < h * w; ++p) {
      if (rng.uniform() < 0.7) pm.labels[p] = static_cast<std::uint8_t>(rng.uniform_int(c));
      if (rng.uniform() < 0.2) sc.labels[p] = static_cast<std::uint8_t>(rng.uniform_int(c));
    }
    pseudo.push_back(pm);
    scribbles.push_back(sc);
  }

  Tensor probs = ad::softmax_channels(ad::constant({n, c, h, w}, logits_v));
  Tensor cent = ad::constant({n, c, c}, cent_v);

  LossConfig g1{1.0, 1.0, FeatureMode::kSoftmaxOnly, LossGroup::kG1};
  LossParts p1 = full_loss(g1, probs, cent, pseudo, scribbles, {});
  CHECK(p1.cen == nullptr);
  CHECK(p1.mse == nullptr);
  CHECK(p1.total->value[0] == doctest::Approx(p1.pce->value[0] / n).epsilon(1e-15));

  LossConfig g2{1.0, 1.0, FeatureMode::kSoftmaxOnly, LossGroup::kG2};
  LossParts p2 = full_loss(g2, probs, cent, pseudo, scribbles, {});
  CHECK(p2.mse == nullptr);
  CHECK(p2.total->value[0] ==
        doctest::Approx((p2.pce->value[0] + p2.cen->value[0]) / n).epsilon(1e-12));

  LossConfig g3{1.0, 1.0, FeatureMode::kSoftmaxOnly, LossGroup::kG3};
  LossParts p3 = full_loss(g3, probs, cent, pseudo, scribbles, {});
  CHECK(p3.total->value[0] ==
        doctest::Approx((p3.pce->value[0] + p3.cen->value[0]) / n + p3.mse->value[0])
            .epsilon(1e-12));

  // halving lambda_cen removes exactly half the centroid term
  LossConfig g3h{0.5, 1.0, FeatureMode::kSoftmaxOnly, LossGroup::kG3};
  LossParts p3h = full_loss(g3h, probs, cent, pseudo, scribbles, {});
  CHECK(p3h.total->value[0] ==
        doctest::Approx(p3.total->value[0] - 0.5 * p3.cen->value[0] / n).epsilon(1e-12));

  LossConfig bad{-1.0, 1.0, FeatureMode::kSoftmaxOnly, LossGroup::kG3};
  CHECK_THROWS_AS(full_loss(bad, probs, cent, pseudo, scribbles, {}), DataError);
}

TEST_CASE("full loss: gradients for every group and feature mode") {
  Rng rng(31);
  const int n = 2, c = 3, h = 3, w = 3;

  for (auto [group, mode] : std::vector<std::pair<LossGroup, FeatureMode>>{
           {LossGroup::kG1, FeatureMode::kSoftmaxOnly},
           {LossGroup::kG2, FeatureMode::kSoftmaxOnly},
           {LossGroup::kG2, FeatureMode::kSoftmaxNRGB},
           {LossGroup::kG3, FeatureMode::kSoftmaxOnly},
           {LossGroup::kG3, FeatureMode::kSoftmaxNRGB}}) {
    LossConfig cfg{1.0, 1.0, mode, group};
    const int m = feature_dim(cfg, c);

    std::vector<Image> images;
    std::vector<LabelMask> pseudo, scribbles;
    for (int i = 0; i < n; ++i) {
      Image img(h, w);
      for (double& v : img.data) v = rng.uniform(0.05, 1.0);
      images.push_back(img);
      LabelMask pm(h, w, c), sc(h, w, c);
      for (int p = 0; p < h * w; ++p) {
        if (rng.uniform() < 0.7) pm.labels[p] = static_cast<std::uint8_t>(rng.uniform_int(c));
        if (rng.uniform() < 0.3) sc.labels[p] = static_cast<std::uint8_t>(rng.uniform_int(c));
      }
      pseudo.push_back(pm);
      scribbles.push_back(sc);
    }

    Tensor logits = ad::leaf({n, c, h, w});
    Tensor cent = ad::leaf({n, c, m});
    for (double& v : logits->value) v = rng.uniform(-1.0, 1.0);
    for (double& v : cent->value) v = rng.uniform(-0.5, 1.5);

    std::vector<Tensor> leaves =
        group == LossGroup::kG1 ? std::vector<Tensor>{logits} : std::vector<Tensor>{logits, cent};
    check_gradients(leaves, [&] {
      Tensor probs = ad::softmax_channels(logits);
      return full_loss(cfg, probs, cent, pseudo, scribbles, images).total;
    });
  }
}

TEST_CASE("centroid loss: invariant under a common distance scale") {
  Rng rng(37);
  const int c = 3, m = 3, h = 3, w = 3;
  std::vector<double> fv(static_cast<size_t>(m) * h * w), mv(static_cast<size_t>(c) * m);
  for (double& v : fv) v = rng.uniform(0.0, 1.0);
  for (double& v : mv) v = rng.uniform(0.0, 1.0);
  LabelMask sc(h, w, c);
  for (int p = 0; p < h * w; ++p)
    if (rng.uniform() < 0.5) sc.labels[p] = static_cast<std::uint8_t>(rng.uniform_int(c));

  auto eval = [&](double scale) {
    std::vector<double> fs = fv, ms = mv;
    for (double& v : fs) v *= scale;
    for (double& v : ms) v *= scale;
    Tensor d = normalized_distances(ad::constant({1, m, h, w}, fs), ad::constant({1, c, m}, ms));
    Tensor probs = ad::softmax_channels(ad::constant({1, c, h, w}, fv));
    return std::make_pair(centroid_loss(d, {sc})->value[0], mse_regularizer(d, probs)->value[0]);
  };

  auto [cen1, mse1] = eval(1.0);
  // scaling features and centroids together scales every squared distance
  // by the same factor, which the normalization divides back out
  for (double scale : {3.0, 0.25, 17.0}) {
    auto [cen_s, mse_s] = eval(scale);
    CHECK(cen_s == doctest::Approx(cen1).epsilon(1e-12));
    CHECK(mse_s == doctest::Approx(mse1).epsilon(1e-12));
  }
}

TEST_CASE("centroid loss: pulling the true centroid toward the features helps") {
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 2 + rng.uniform_int(3), m = c;
    std::vector<double> fv(m), base(static_cast<size_t>(c) * m);
    for (double& v : fv) v = rng.uniform(0.0, 1.0);
    for (double& v : base) v = rng.uniform(0.0, 1.0);
    int true_class = rng.uniform_int(c);
    LabelMask sc = mask1(1, 1, c, {static_cast<std::uint8_t>(true_class)});

    double prev = std::numeric_limits<double>::infinity();
    for (double u : {1.0, 0.8, 0.6, 0.4, 0.2, 0.05}) {
      std::vector<double> mv = base;
      for (int k = 0; k < m; ++k)
        mv[static_cast<size_t>(true_class) * m + k] =
            fv[k] + u * (base[static_cast<size_t>(true_class) * m + k] - fv[k]);
      Tensor d = normalized_distances(ad::constant({1, m, 1, 1}, fv), ad::constant({1, c, m}, mv));
      double loss = centroid_loss(d, {sc})->value[0];
      CHECK(loss <= prev + 1e-12);
      prev = loss;
    }
  }
}
