#include "wseg/network.hpp"

#include <cmath>

#include "wseg/errors.hpp"

namespace wseg {

ad::Tensor attention_gate(const ad::Tensor& x, const ad::Tensor& g, const AttentionGateParams& p) {
  if (x->shape != g->shape) throw DataError("attention_gate: x and g shapes differ");
  ad::Tensor mixed = ad::relu(ad::add(ad::conv1x1(x, p.wx, nullptr), ad::conv1x1(g, p.wg, p.bg)));
  ad::Tensor alpha = ad::sigmoid(ad::conv1x1(mixed, p.wphi, p.bphi));
  return ad::mul_bcast_channel(x, alpha);
}

Network::Network(const NetworkConfig& config) : config_(config) {
  if (config.scales < 2) throw DataError("NetworkConfig: scales must be >= 2");
  if (config.base_channels < 1) throw DataError("NetworkConfig: base_channels must be >= 1");
  if (config.class_count < 2) throw DataError("NetworkConfig: class_count must be >= 2");
  if (config.centroid_dim != config.class_count && config.centroid_dim != config.class_count + 3)
    throw DataError("NetworkConfig: centroid_dim must be C or C+3");
  if (config.f_int < 1) throw DataError("NetworkConfig: f_int must be >= 1");
  const int down = 1 << (config.scales - 1);
  if (config.input_height % down != 0 || config.input_width % down != 0)
    throw DataError("NetworkConfig: input size must be divisible by 2^(scales-1)");
  if (config.input_height / down < 1 || config.input_width / down < 1)
    throw DataError("NetworkConfig: input too small for the scale count");

  int in_ch = 3;
  for (int s = 0; s < config.scales - 1; ++s) {
    int out_ch = config.base_channels << s;
    encoder_.push_back(conv_block("enc" + std::to_string(s), in_ch, out_ch));
    in_ch = out_ch;
  }
  const int deep = config.base_channels << (config.scales - 1);
  bottom_ = conv_block("bottom", in_ch, deep);

  decoder_.resize(config.scales - 1);
  for (int s = config.scales - 2; s >= 0; --s) {
    int fl = config.base_channels << s;
    std::string name = "dec" + std::to_string(s);
    DecoderLevel& lvl = decoder_[s];
    lvl.rw = param(name + ".reduce.w", {fl, 2 * fl});
    lvl.rb = param(name + ".reduce.b", {fl});
    lvl.gate.wx = param(name + ".gate.wx", {config.f_int, fl});
    lvl.gate.wg = param(name + ".gate.wg", {config.f_int, fl});
    lvl.gate.bg = param(name + ".gate.bg", {config.f_int});
    lvl.gate.wphi = param(name + ".gate.wphi", {1, config.f_int});
    lvl.gate.bphi = param(name + ".gate.bphi", {1});
    lvl.block = conv_block(name, 2 * fl, fl);
  }
  head_w_ = param("head.w", {config.class_count, config.base_channels});
  head_b_ = param("head.b", {config.class_count});

  const int cm = config.class_count * config.centroid_dim;
  subnet_.push_back(fc_block("subnet0", deep, 64));
  subnet_.push_back(fc_block("subnet1", 64, 32));
  subnet_.push_back(fc_block("subnet2", 32, cm));
}

ad::Tensor Network::param(std::string name, std::vector<int> shape) {
  ad::Tensor t = ad::leaf(std::move(shape));
  t->name = std::move(name);
  params_.push_back(t);
  return t;
}

Network::ConvBlock Network::conv_block(const std::string& name, int in_ch, int out_ch) {
  ConvBlock b;
  b.w1 = param(name + ".conv1.w", {out_ch, in_ch, 3, 3});
  b.b1 = param(name + ".conv1.b", {out_ch});
  b.g1 = param(name + ".bn1.g", {out_ch});
  b.be1 = param(name + ".bn1.b", {out_ch});
  b.w2 = param(name + ".conv2.w", {out_ch, out_ch, 3, 3});
  b.b2 = param(name + ".conv2.b", {out_ch});
  b.g2 = param(name + ".bn2.g", {out_ch});
  b.be2 = param(name + ".bn2.b", {out_ch});
  b.pw = param(name + ".proj.w", {out_ch, in_ch});
  b.pb = param(name + ".proj.b", {out_ch});
  b.bn1 = std::make_unique<ad::BatchNormState>(out_ch);
  b.bn2 = std::make_unique<ad::BatchNormState>(out_ch);
  return b;
}

Network::FcBlock Network::fc_block(const std::string& name, int in_f, int out_f) {
  FcBlock b;
  b.w = param(name + ".w", {out_f, in_f});
  b.b = param(name + ".b", {out_f});
  b.g = param(name + ".bn.g", {out_f});
  b.be = param(name + ".bn.b", {out_f});
  b.bn = std::make_unique<ad::BatchNormState>(out_f);
  return b;
}

ad::Tensor Network::run_block(ConvBlock& blk, const ad::Tensor& x, bool training) {
  ad::Tensor h = ad::relu(
      ad::batchnorm(ad::conv2d(x, blk.w1, blk.b1), blk.g1, blk.be1, *blk.bn1, training));
  h = ad::batchnorm(ad::conv2d(h, blk.w2, blk.b2), blk.g2, blk.be2, *blk.bn2, training);
  return ad::relu(ad::add(h, ad::conv1x1(x, blk.pw, blk.pb)));
}

Network::Outputs Network::forward(const std::vector<Image>& batch, bool training) {
  if (batch.empty()) throw DataError("forward: empty batch");
  const int n = static_cast<int>(batch.size());
  const int h = config_.input_height, w = config_.input_width;
  std::vector<double> input(static_cast<size_t>(n) * 3 * h * w);
  for (int i = 0; i < n; ++i) {
    if (batch[i].height != h || batch[i].width != w)
      throw DataError("forward: image size does not match the configured input size");
    std::copy(batch[i].data.begin(), batch[i].data.end(),
              input.begin() + static_cast<size_t>(i) * 3 * h * w);
  }

  ad::Tensor cur = ad::constant({n, 3, h, w}, std::move(input));
  std::vector<ad::Tensor> skips;
  for (auto& enc : encoder_) {
    cur = run_block(enc, cur, training);
    skips.push_back(cur);
    cur = ad::maxpool2(cur);
  }
  cur = run_block(bottom_, cur, training);
  ad::Tensor deep = cur;

  for (int s = config_.scales - 2; s >= 0; --s) {
    DecoderLevel& lvl = decoder_[s];
    ad::Tensor g = ad::conv1x1(ad::upsample_nearest2(cur), lvl.rw, lvl.rb);
    ad::Tensor gated = attention_gate(skips[s], g, lvl.gate);
    cur = run_block(lvl.block, ad::concat_channels(g, gated), training);
  }

  Outputs out;
  out.probs = ad::softmax_channels(ad::conv1x1(cur, head_w_, head_b_));

  ad::Tensor fc = ad::global_avg_pool(deep);
  for (auto& blk : subnet_)
    fc = ad::relu(ad::batchnorm(ad::linear(fc, blk.w, blk.b), blk.g, blk.be, *blk.bn, training));
  out.centroids = ad::reshape(fc, {n, config_.class_count, config_.centroid_dim});
  return out;
}

std::vector<std::pair<std::string, ad::BatchNormState*>> Network::batchnorm_states() {
  std::vector<std::pair<std::string, ad::BatchNormState*>> out;
  auto add_block = [&](const std::string& name, ConvBlock& b) {
    out.emplace_back(name + ".bn1", b.bn1.get());
    out.emplace_back(name + ".bn2", b.bn2.get());
  };
  for (size_t s = 0; s < encoder_.size(); ++s) add_block("enc" + std::to_string(s), encoder_[s]);
  add_block("bottom", bottom_);
  for (size_t s = 0; s < decoder_.size(); ++s) add_block("dec" + std::to_string(s), decoder_[s].block);
  for (size_t i = 0; i < subnet_.size(); ++i)
    out.emplace_back("subnet" + std::to_string(i) + ".bn", subnet_[i].bn.get());
  return out;
}

SegmentationOutput segmentation_output(const Network::Outputs& out, int sample) {
  const int c = out.probs->dim(1), h = out.probs->dim(2), w = out.probs->dim(3);
  SegmentationOutput seg(c, h, w);
  const size_t n = static_cast<size_t>(c) * h * w;
  std::copy_n(out.probs->value.begin() + sample * n, n, seg.probs.begin());
  return seg;
}

Centroids centroid_output(const Network::Outputs& out, int sample) {
  const int c = out.centroids->dim(1), m = out.centroids->dim(2);
  Centroids cen(c, m);
  const size_t n = static_cast<size_t>(c) * m;
  std::copy_n(out.centroids->value.begin() + sample * n, n, cen.values.begin());
  return cen;
}

LabelMask predict_labels_from_segmentation(const SegmentationOutput& probs) {
  LabelMask out(probs.height, probs.width, probs.class_count);
  for (int y = 0; y < probs.height; ++y)
    for (int x = 0; x < probs.width; ++x) {
      int best = 0;
      for (int c = 1; c < probs.class_count; ++c)
        if (probs.at(c, y, x) > probs.at(best, y, x)) best = c;
      out.at(y, x) = static_cast<std::uint8_t>(best);
    }
  return out;
}

FeatureField make_features(const SegmentationOutput& probs, const Image* image) {
  FeatureField f;
  f.height = probs.height;
  f.width = probs.width;
  f.dim = probs.class_count + (image ? 3 : 0);
  f.values = probs.probs;
  if (image) {
    if (image->height != probs.height || image->width != probs.width)
      throw DataError("make_features: image size does not match probabilities");
    std::vector<double> nrgb = normalized_rgb(*image);
    f.values.insert(f.values.end(), nrgb.begin(), nrgb.end());
  }
  return f;
}

LabelMask predict_labels_from_clustering(const FeatureField& features, const Centroids& centroids) {
  if (features.dim != centroids.dim)
    throw DataError("predict_labels_from_clustering: feature dimension mismatch");
  LabelMask out(features.height, features.width, centroids.class_count);
  for (int y = 0; y < features.height; ++y)
    for (int x = 0; x < features.width; ++x) {
      int best = 0;
      double best_d = 0.0;
      for (int c = 0; c < centroids.class_count; ++c) {
        double d = 0.0;
        for (int m = 0; m < features.dim; ++m) {
          double diff = features.at(m, y, x) - centroids.at(c, m);
          d += diff * diff;
        }
        if (c == 0 || d < best_d) {
          best_d = d;
          best = c;
        }
      }
      out.at(y, x) = static_cast<std::uint8_t>(best);
    }
  return out;
}

}  // namespace wseg
