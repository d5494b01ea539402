#pragma once

#include <vector>

#include "wseg/autodiff.hpp"
#include "wseg/types.hpp"

namespace wseg {

// Which feature vector the centroid machinery sees per pixel: the softmax
// field alone (M = C) or with the image's normalized RGB appended (M = C+3).
enum class FeatureMode { kSoftmaxOnly, kSoftmaxNRGB };

// Training groups: G1 uses the partial cross-entropy alone, G2 adds the
// centroid term, G3 adds the distance regularizer on top.
enum class LossGroup { kG1, kG2, kG3 };

struct LossConfig {
  double lambda_cen = 1.0;
  double lambda_mse = 1.0;
  FeatureMode feature_mode = FeatureMode::kSoftmaxOnly;
  LossGroup group = LossGroup::kG3;
};

int feature_dim(const LossConfig& config, int class_count);

// Sum over labelled target pixels of -log p(true class); unlabelled pixels
// contribute nothing. probs (N,C,H,W), one mask per sample.
ad::Tensor partial_cross_entropy(const ad::Tensor& probs, const std::vector<LabelMask>& targets);

// Per-pixel loss features, (N,M,H,W). The images are only read in
// kSoftmaxNRGB mode.
ad::Tensor pixel_features(const LossConfig& config, const ad::Tensor& probs,
                          const std::vector<Image>& images);

// d[n,c,p]: squared distance from pixel p's features to centroid c,
// normalized per pixel to sum to 1 over classes. Degenerate pixels whose
// distances all vanish become uniform. features (N,M,H,W), centroids
// (N,C,M) -> (N,C,H,W).
ad::Tensor normalized_distances(const ad::Tensor& features, const ad::Tensor& centroids);

// Partial cross-entropy of softmax(-d) against the scribble labels, summed
// over scribble pixels.
ad::Tensor centroid_loss(const ad::Tensor& distances, const std::vector<LabelMask>& scribbles);

// Mean over every pixel of its normalized distance to the centroid of the
// class the segmentation head currently predicts there. The prediction is
// a hard argmax (ties toward the lower class id) and carries no gradient.
ad::Tensor mse_regularizer(const ad::Tensor& distances, const ad::Tensor& probs);

// The combined objective. pce and cen are sums, mse is a per-pixel mean;
// the total divides the summed terms by the batch size so step sizes do
// not scale with it. Terms the group disables stay null.
struct LossParts {
  ad::Tensor total;
  ad::Tensor pce;
  ad::Tensor cen;
  ad::Tensor mse;
};

LossParts full_loss(const LossConfig& config, const ad::Tensor& probs, const ad::Tensor& centroids,
                    const std::vector<LabelMask>& pce_targets,
                    const std::vector<LabelMask>& scribbles, const std::vector<Image>& images);

}  // namespace wseg
