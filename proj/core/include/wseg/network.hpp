#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "wseg/autodiff.hpp"
#include "wseg/types.hpp"

namespace wseg {

// Attention-gated U-Net plus a centroid-prediction sub-network.
//
// The encoder halves the spatial size at each of `scales` levels; the
// deepest level is the bottleneck. Every level is a residual pair of 3x3
// conv+batchnorm with a 1x1 projection on the skip path. Decoder levels
// upsample, reduce channels 2F -> F, gate the encoder skip with an
// attention gate and merge by concatenation. The sub-network pools the
// bottleneck features and runs three linear+batchnorm+relu blocks down to
// C*M centroid coordinates.

struct NetworkConfig {
  int scales = 3;  // resolution levels, bottleneck included
  int base_channels = 16;
  int class_count = 4;
  int centroid_dim = 4;  // M: class_count, or class_count+3 with nRGB features
  int f_int = 1;         // attention gate intermediate width
  int input_height = 64;
  int input_width = 64;
};

// Eq-style gate: alpha = sigmoid(W_phi' relu(W_x'x + W_g'g + b_g) + b_phi),
// output alpha * x. W_x deliberately has no bias.
struct AttentionGateParams {
  ad::Tensor wx;    // (F_int, F_l)
  ad::Tensor wg;    // (F_int, F_l)
  ad::Tensor bg;    // (F_int)
  ad::Tensor wphi;  // (1, F_int)
  ad::Tensor bphi;  // (1)
};

ad::Tensor attention_gate(const ad::Tensor& x, const ad::Tensor& g, const AttentionGateParams& p);

class Network {
 public:
  explicit Network(const NetworkConfig& config);

  struct Outputs {
    ad::Tensor probs;      // (N, C, H, W), per-pixel softmax
    ad::Tensor centroids;  // (N, C, M)
  };
  Outputs forward(const std::vector<Image>& batch, bool training);

  const NetworkConfig& config() const { return config_; }

  // Named leaves; zero until initialized. Order is fixed by construction.
  const std::vector<ad::Tensor>& parameters() const { return params_; }
  std::vector<ad::Tensor>& parameters() { return params_; }

  // Batchnorm running statistics, named for checkpointing.
  std::vector<std::pair<std::string, ad::BatchNormState*>> batchnorm_states();

 private:
  struct ConvBlock {
    ad::Tensor w1, b1, g1, be1, w2, b2, g2, be2, pw, pb;
    std::unique_ptr<ad::BatchNormState> bn1, bn2;
  };
  struct FcBlock {
    ad::Tensor w, b, g, be;
    std::unique_ptr<ad::BatchNormState> bn;
  };
  struct DecoderLevel {
    ad::Tensor rw, rb;  // channel reduction after upsampling
    AttentionGateParams gate;
    ConvBlock block;
  };

  ad::Tensor param(std::string name, std::vector<int> shape);
  ConvBlock conv_block(const std::string& name, int in_ch, int out_ch);
  FcBlock fc_block(const std::string& name, int in_f, int out_f);
  ad::Tensor run_block(ConvBlock& blk, const ad::Tensor& x, bool training);

  NetworkConfig config_;
  std::vector<ad::Tensor> params_;
  std::vector<ConvBlock> encoder_;
  ConvBlock bottom_;
  std::vector<DecoderLevel> decoder_;  // index s operates at scale s
  ad::Tensor head_w_, head_b_;
  std::vector<FcBlock> subnet_;
};

// Per-sample views of a forward pass.
SegmentationOutput segmentation_output(const Network::Outputs& out, int sample);
Centroids centroid_output(const Network::Outputs& out, int sample);

// Per-pixel argmax labels; ties resolve to the lowest class id.
LabelMask predict_labels_from_segmentation(const SegmentationOutput& probs);

// Loss feature field for clustering-based prediction: the softmax
// probabilities, with the image's normalized RGB appended when given.
struct FeatureField {
  int dim = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;  // dim * height * width, planar

  double at(int m, int y, int x) const { return values[(m * height + y) * width + x]; }
};

FeatureField make_features(const SegmentationOutput& probs, const Image* image);

// Nearest-centroid labels; ties resolve to the lowest class id.
LabelMask predict_labels_from_clustering(const FeatureField& features, const Centroids& centroids);

}  // namespace wseg
