#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wseg/losses.hpp"
#include "wseg/metrics.hpp"
#include "wseg/network.hpp"
#include "wseg/types.hpp"

namespace wseg {

struct TrainConfig {
  double learning_rate = 1e-4;
  int epochs = 30;
  int batch_size = 4;
  std::uint64_t seed = 0;
  LossConfig loss;
  std::string experiment_label = "E-SCR20-SUP50-N";
};

// What an experiment label implies for the data pipeline. Labels follow
// E-SCR{2|5|10|20}[-SUP{30|50|80}][-N|-NRGB], or E-FULL for the
// fully supervised upper baseline.
struct ExperimentSetup {
  bool full_supervision = false;
  int scribble_width = 0;   // 0 for E-FULL
  int superpixel_count = 0; // 0: train on the scribbles directly
  FeatureMode feature_mode = FeatureMode::kSoftmaxOnly;
  bool explicit_feature_mode = false;  // label carried -N/-NRGB
};

ExperimentSetup parse_experiment_label(const std::string& label);

struct Sample {
  Image image;
  LabelMask scribbles;
  LabelMask full_mask;
  std::uint64_t seed = 0;
};

// Loaded from a manifest of "image scribbles full_mask seed" lines with
// paths relative to the manifest's directory. The class count is inferred
// from the full masks.
struct Dataset {
  std::vector<Sample> samples;
  int class_count = 0;
  int height = 0;
  int width = 0;
};

Dataset load_dataset(const std::string& dir);

// Kaiming-normal fan-in initialization with relu gain for every weight
// matrix; biases zero, batchnorm scale 1 shift 0. Deterministic per seed.
void init_weights(Network& network, std::uint64_t seed);

// Adam with fixed step size; step() consumes and clears the gradients.
class Adam {
 public:
  Adam(std::vector<ad::Tensor> params, double lr);
  void step();
  void zero_grads();

 private:
  std::vector<ad::Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_;
  int t_ = 0;
};

// The per-sample cross-entropy targets an experiment trains on: full
// masks, raw scribbles, or superpixel-propagated pseudo-masks.
std::vector<LabelMask> make_targets(const Dataset& data, const ExperimentSetup& setup);

// Checkpoint: a text header (config lines, then one line per tensor with
// its element offset and shape) ending in a "data" line, followed by the
// raw little-endian float64 blob. Batchnorm running statistics are stored
// as ordinary tensors.
void save_checkpoint(const Network& network, FeatureMode feature_mode, const std::string& path);

struct CheckpointHeader {
  NetworkConfig config;
  FeatureMode feature_mode = FeatureMode::kSoftmaxOnly;
};

CheckpointHeader read_checkpoint_header(const std::string& path);
void load_checkpoint(Network& network, const std::string& path);

struct TrainResult {
  double wmiou_targets = -1.0;  // weak-target quality vs full masks; -1 for E-FULL
  double final_val_miou = 0.0;
  std::string checkpoint_path;
  std::string log_path;
};

// Runs the optimization and writes log.csv and the final checkpoint into
// out_dir. The log has one row per epoch; columns for inactive loss terms
// are omitted.
TrainResult train(const Dataset& data, const TrainConfig& config, const std::string& out_dir);

struct EvalBlock {
  MetricSummary pooled;
  double per_image_miou = 0.0;
};

struct EvalReport {
  EvalBlock seg;  // argmax of the segmentation head
  EvalBlock clu;  // nearest predicted centroid in feature space
};

EvalReport evaluate(Network& network, FeatureMode feature_mode, const Dataset& data,
                    int batch_size = 4);

}  // namespace wseg
