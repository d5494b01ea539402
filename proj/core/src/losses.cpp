#include "wseg/losses.hpp"

#include <string>

#include "wseg/errors.hpp"

namespace wseg {
namespace {

void check_batch_masks(const ad::Tensor& probs, const std::vector<LabelMask>& masks,
                       const char* what) {
  if (probs->shape.size() != 4) throw DataError(std::string(what) + ": probs must be (N,C,H,W)");
  if (static_cast<int>(masks.size()) != probs->dim(0))
    throw DataError(std::string(what) + ": one mask per batch sample required");
  for (const LabelMask& m : masks) {
    if (m.class_count != probs->dim(1) || m.height != probs->dim(2) || m.width != probs->dim(3))
      throw DataError(std::string(what) + ": mask does not match probability field");
  }
}

// 0/1 selector with a one at each labelled pixel's true-class channel.
ad::Tensor label_selector(const ad::Tensor& probs, const std::vector<LabelMask>& masks) {
  const int n = probs->dim(0), c = probs->dim(1), h = probs->dim(2), w = probs->dim(3);
  std::vector<double> sel(static_cast<size_t>(n) * c * h * w, 0.0);
  const size_t plane = static_cast<size_t>(h) * w;
  for (int i = 0; i < n; ++i)
    for (size_t p = 0; p < plane; ++p) {
      std::uint8_t lab = masks[i].labels[p];
      if (lab != LabelMask::kUnlabelled) sel[(static_cast<size_t>(i) * c + lab) * plane + p] = 1.0;
    }
  return ad::constant(probs->shape, std::move(sel));
}

}  // namespace

int feature_dim(const LossConfig& config, int class_count) {
  return class_count + (config.feature_mode == FeatureMode::kSoftmaxNRGB ? 3 : 0);
}

ad::Tensor partial_cross_entropy(const ad::Tensor& probs, const std::vector<LabelMask>& targets) {
  check_batch_masks(probs, targets, "partial_cross_entropy");
  return ad::neg(ad::sum(ad::mul(label_selector(probs, targets), ad::log_clamped(probs))));
}

ad::Tensor pixel_features(const LossConfig& config, const ad::Tensor& probs,
                          const std::vector<Image>& images) {
  if (config.feature_mode == FeatureMode::kSoftmaxOnly) return probs;
  const int n = probs->dim(0), h = probs->dim(2), w = probs->dim(3);
  if (static_cast<int>(images.size()) != n)
    throw DataError("pixel_features: one image per batch sample required");
  std::vector<double> nrgb(static_cast<size_t>(n) * 3 * h * w);
  for (int i = 0; i < n; ++i) {
    if (images[i].height != h || images[i].width != w)
      throw DataError("pixel_features: image does not match probability field");
    std::vector<double> v = normalized_rgb(images[i]);
    std::copy(v.begin(), v.end(), nrgb.begin() + static_cast<size_t>(i) * 3 * h * w);
  }
  return ad::concat_channels(probs, ad::constant({n, 3, h, w}, std::move(nrgb)));
}

ad::Tensor normalized_distances(const ad::Tensor& features, const ad::Tensor& centroids) {
  if (features->shape.size() != 4 || centroids->shape.size() != 3)
    throw DataError("normalized_distances: expected features (N,M,H,W), centroids (N,C,M)");
  if (features->dim(0) != centroids->dim(0) || features->dim(1) != centroids->dim(2))
    throw DataError("normalized_distances: feature dimension does not match centroids");
  return ad::normalize_channels(ad::class_sqdist(features, centroids));
}

ad::Tensor centroid_loss(const ad::Tensor& distances, const std::vector<LabelMask>& scribbles) {
  check_batch_masks(distances, scribbles, "centroid_loss");
  ad::Tensor assignment = ad::softmax_channels(ad::neg(distances));
  return ad::neg(ad::sum(ad::mul(label_selector(distances, scribbles), ad::log_clamped(assignment))));
}

ad::Tensor mse_regularizer(const ad::Tensor& distances, const ad::Tensor& probs) {
  if (distances->shape != probs->shape)
    throw DataError("mse_regularizer: distance and probability fields must agree");
  const int n = probs->dim(0), c = probs->dim(1), h = probs->dim(2), w = probs->dim(3);
  const size_t plane = static_cast<size_t>(h) * w;

  // The predicted class is data, not graph: a one at argmax_c probs.
  std::vector<double> sel(probs->value.size(), 0.0);
  for (int i = 0; i < n; ++i)
    for (size_t p = 0; p < plane; ++p) {
      int best = 0;
      double best_v = probs->value[(static_cast<size_t>(i) * c) * plane + p];
      for (int cl = 1; cl < c; ++cl) {
        double v = probs->value[(static_cast<size_t>(i) * c + cl) * plane + p];
        if (v > best_v) {
          best_v = v;
          best = cl;
        }
      }
      sel[(static_cast<size_t>(i) * c + best) * plane + p] = 1.0;
    }
  ad::Tensor picked = ad::mul(ad::constant(probs->shape, std::move(sel)), distances);
  return ad::mul_scalar(ad::sum(picked), 1.0 / (static_cast<double>(n) * h * w));
}

LossParts full_loss(const LossConfig& config, const ad::Tensor& probs, const ad::Tensor& centroids,
                    const std::vector<LabelMask>& pce_targets,
                    const std::vector<LabelMask>& scribbles, const std::vector<Image>& images) {
  if (config.lambda_cen < 0.0 || config.lambda_mse < 0.0)
    throw DataError("full_loss: balance weights must be >= 0");

  LossParts parts;
  parts.pce = partial_cross_entropy(probs, pce_targets);
  const double inv_batch = 1.0 / probs->dim(0);

  if (config.group == LossGroup::kG1) {
    parts.total = ad::mul_scalar(parts.pce, inv_batch);
    return parts;
  }

  ad::Tensor features = pixel_features(config, probs, images);
  ad::Tensor dist = normalized_distances(features, centroids);
  parts.cen = centroid_loss(dist, scribbles);

  ad::Tensor summed =
      ad::mul_scalar(ad::add(parts.pce, ad::mul_scalar(parts.cen, config.lambda_cen)), inv_batch);
  if (config.group == LossGroup::kG2) {
    parts.total = summed;
    return parts;
  }

  parts.mse = mse_regularizer(dist, probs);
  parts.total = ad::add(summed, ad::mul_scalar(parts.mse, config.lambda_mse));
  return parts;
}

}  // namespace wseg
