#include "wseg/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "wseg/annotation.hpp"
#include "wseg/errors.hpp"
#include "wseg/png_io.hpp"
#include "wseg/rng.hpp"
#include "wseg/superpixels.hpp"

namespace fs = std::filesystem;

namespace wseg {
namespace {

int parse_int_strict(const std::string& s, const char* what) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw DataError(std::string("bad ") + what + ": '" + s + "'");
  return v;
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// all batchnorm scale parameters carry a ".bn" path segment
bool is_bn_scale(const std::string& name) {
  return name.find(".bn") != std::string::npos && name.ends_with(".g");
}

struct Batch {
  std::vector<Image> images;
  std::vector<LabelMask> targets;
  std::vector<LabelMask> scribbles;
};

Batch gather(const Dataset& data, const std::vector<LabelMask>& targets,
             const std::vector<int>& order, size_t begin, size_t end) {
  Batch b;
  for (size_t k = begin; k < end; ++k) {
    int i = order[k];
    b.images.push_back(data.samples[i].image);
    b.targets.push_back(targets[i]);
    b.scribbles.push_back(data.samples[i].scribbles);
  }
  return b;
}

double val_miou(Network& net, const Dataset& data, const std::vector<int>& indices,
                int batch_size) {
  ConfusionMatrix acc(data.class_count);
  for (size_t at = 0; at < indices.size(); at += batch_size) {
    size_t end = std::min(indices.size(), at + batch_size);
    std::vector<Image> images;
    for (size_t k = at; k < end; ++k) images.push_back(data.samples[indices[k]].image);
    Network::Outputs out = net.forward(images, false);
    for (size_t k = at; k < end; ++k) {
      LabelMask pred =
          predict_labels_from_segmentation(segmentation_output(out, static_cast<int>(k - at)));
      acc += confusion(pred, data.samples[indices[k]].full_mask);
    }
  }
  return miou(acc);
}

}  // namespace

ExperimentSetup parse_experiment_label(const std::string& label) {
  ExperimentSetup setup;
  if (label == "E-FULL") {
    setup.full_supervision = true;
    return setup;
  }
  if (!label.starts_with("E-SCR")) throw DataError("unknown experiment label: '" + label + "'");

  std::string rest = label.substr(5);
  size_t dash = rest.find('-');
  setup.scribble_width = parse_int_strict(rest.substr(0, dash), "scribble width");
  if (setup.scribble_width != 2 && setup.scribble_width != 5 && setup.scribble_width != 10 &&
      setup.scribble_width != 20)
    throw DataError("experiment label scribble width must be 2, 5, 10 or 20");
  rest = dash == std::string::npos ? "" : rest.substr(dash);

  if (rest.starts_with("-SUP")) {
    std::string tail = rest.substr(4);
    dash = tail.find('-');
    setup.superpixel_count = parse_int_strict(tail.substr(0, dash), "superpixel count");
    if (setup.superpixel_count != 30 && setup.superpixel_count != 50 &&
        setup.superpixel_count != 80)
      throw DataError("experiment label superpixel count must be 30, 50 or 80");
    rest = dash == std::string::npos ? "" : tail.substr(dash);
  }

  if (rest == "-N") {
    setup.feature_mode = FeatureMode::kSoftmaxOnly;
    setup.explicit_feature_mode = true;
  } else if (rest == "-NRGB") {
    setup.feature_mode = FeatureMode::kSoftmaxNRGB;
    setup.explicit_feature_mode = true;
  } else if (!rest.empty()) {
    throw DataError("unknown experiment label suffix: '" + rest + "'");
  }
  return setup;
}

Dataset load_dataset(const std::string& dir) {
  fs::path base(dir);
  std::ifstream manifest(base / "manifest.txt");
  if (!manifest) throw DataError("cannot open manifest: " + (base / "manifest.txt").string());

  Dataset data;
  std::string line;
  int line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string image_path, scribble_path, full_path;
    std::uint64_t seed = 0;
    if (!(fields >> image_path >> scribble_path >> full_path >> seed))
      throw DataError("manifest line " + std::to_string(line_no) + " is malformed");

    Sample s;
    s.image = load_image((base / image_path).string());
    s.scribbles = load_mask((base / scribble_path).string(), 254);
    s.full_mask = load_mask((base / full_path).string(), 254);
    s.seed = seed;
    if (s.scribbles.height != s.image.height || s.scribbles.width != s.image.width ||
        s.full_mask.height != s.image.height || s.full_mask.width != s.image.width)
      throw DataError("manifest line " + std::to_string(line_no) + ": mask/image size mismatch");
    if (!s.full_mask.fully_labelled())
      throw DataError("manifest line " + std::to_string(line_no) + ": full mask has holes");
    data.samples.push_back(std::move(s));
  }
  if (data.samples.empty()) throw DataError("manifest holds no samples");

  data.height = data.samples[0].image.height;
  data.width = data.samples[0].image.width;
  int max_label = 1;
  for (const Sample& s : data.samples) {
    if (s.image.height != data.height || s.image.width != data.width)
      throw DataError("dataset mixes image sizes");
    for (std::uint8_t v : s.full_mask.labels) max_label = std::max(max_label, static_cast<int>(v));
  }
  data.class_count = max_label + 1;
  for (Sample& s : data.samples) {
    s.scribbles.class_count = data.class_count;
    s.full_mask.class_count = data.class_count;
    s.scribbles.validate();  // scribble labels must fit the inferred classes
    s.full_mask.validate();
  }
  return data;
}

void init_weights(Network& network, std::uint64_t seed) {
  Rng rng(seed);
  for (ad::Tensor& p : network.parameters()) {
    if (p->shape.size() >= 2) {
      const double fan_in = static_cast<double>(p->size()) / p->dim(0);
      const double stddev = std::sqrt(2.0 / fan_in);
      for (double& v : p->value) v = rng.gaussian() * stddev;
    } else {
      const double fill = is_bn_scale(p->name) ? 1.0 : 0.0;
      for (double& v : p->value) v = fill;
    }
  }
}

Adam::Adam(std::vector<ad::Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {
  for (const ad::Tensor& p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::step() {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, t_);
  const double c2 = 1.0 - std::pow(kBeta2, t_);
  for (size_t i = 0; i < params_.size(); ++i) {
    ad::Tensor& p = params_[i];
    for (size_t j = 0; j < p->value.size(); ++j) {
      const double g = p->grad[j];
      m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g;
      v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g * g;
      p->value[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + kEps);
    }
    std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }
}

void Adam::zero_grads() {
  for (ad::Tensor& p : params_)
    std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

std::vector<LabelMask> make_targets(const Dataset& data, const ExperimentSetup& setup) {
  std::vector<LabelMask> targets;
  targets.reserve(data.samples.size());
  for (const Sample& s : data.samples) {
    if (setup.full_supervision) {
      targets.push_back(s.full_mask);
    } else if (setup.superpixel_count == 0) {
      targets.push_back(s.scribbles);
    } else {
      // the sample's own seed keeps pseudo-masks a property of the
      // dataset, identical across runs and loss groups
      SuperpixelMap sp = oversegment(s.image, setup.superpixel_count, s.seed);
      targets.push_back(propagate_scribbles(s.scribbles, sp));
    }
  }
  return targets;
}

void save_checkpoint(const Network& network, FeatureMode feature_mode, const std::string& path) {
  const NetworkConfig& c = network.config();
  std::ostringstream header;
  header << "wseg-checkpoint 1\n";
  header << "config scales " << c.scales << "\n";
  header << "config base_channels " << c.base_channels << "\n";
  header << "config class_count " << c.class_count << "\n";
  header << "config centroid_dim " << c.centroid_dim << "\n";
  header << "config f_int " << c.f_int << "\n";
  header << "config input_height " << c.input_height << "\n";
  header << "config input_width " << c.input_width << "\n";
  header << "config feature_mode "
         << (feature_mode == FeatureMode::kSoftmaxNRGB ? "NRGB" : "N") << "\n";

  std::vector<std::pair<std::string, const std::vector<double>*>> entries;
  for (const ad::Tensor& p : network.parameters()) entries.emplace_back(p->name, &p->value);
  for (auto& [name, state] : const_cast<Network&>(network).batchnorm_states()) {
    entries.emplace_back(name + ".mean", &state->running_mean);
    entries.emplace_back(name + ".var", &state->running_var);
  }

  std::int64_t offset = 0;
  for (const ad::Tensor& p : network.parameters()) {
    header << "tensor " << p->name << " " << offset << " " << p->shape.size();
    for (int d : p->shape) header << " " << d;
    header << "\n";
    offset += p->size();
  }
  for (auto& [name, state] : const_cast<Network&>(network).batchnorm_states()) {
    for (const char* part : {".mean", ".var"}) {
      const auto& vec = part[1] == 'm' ? state->running_mean : state->running_var;
      header << "tensor " << name << part << " " << offset << " 1 " << vec.size() << "\n";
      offset += static_cast<std::int64_t>(vec.size());
    }
  }
  header << "data\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (auto& [name, vec] : entries)
    out.write(reinterpret_cast<const char*>(vec->data()),
              static_cast<std::streamsize>(vec->size() * sizeof(double)));
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

namespace {

struct CheckpointIndex {
  CheckpointHeader header;
  std::map<std::string, std::pair<std::int64_t, std::vector<int>>> tensors;  // offset, shape
  std::streampos blob_start = 0;
};

CheckpointIndex parse_checkpoint(std::ifstream& in, const std::string& path) {
  CheckpointIndex idx;
  std::string line;
  if (!std::getline(in, line) || line != "wseg-checkpoint 1")
    throw DataError("not a checkpoint file: " + path);
  while (std::getline(in, line)) {
    if (line == "data") break;
    std::istringstream fields(line);
    std::string kind, name;
    fields >> kind >> name;
    if (kind == "config") {
      std::string value;
      fields >> value;
      NetworkConfig& c = idx.header.config;
      if (name == "scales") c.scales = parse_int_strict(value, "scales");
      else if (name == "base_channels") c.base_channels = parse_int_strict(value, "base_channels");
      else if (name == "class_count") c.class_count = parse_int_strict(value, "class_count");
      else if (name == "centroid_dim") c.centroid_dim = parse_int_strict(value, "centroid_dim");
      else if (name == "f_int") c.f_int = parse_int_strict(value, "f_int");
      else if (name == "input_height") c.input_height = parse_int_strict(value, "input_height");
      else if (name == "input_width") c.input_width = parse_int_strict(value, "input_width");
      else if (name == "feature_mode")
        idx.header.feature_mode =
            value == "NRGB" ? FeatureMode::kSoftmaxNRGB : FeatureMode::kSoftmaxOnly;
      else
        throw DataError("unknown checkpoint config key: " + name);
    } else if (kind == "tensor") {
      std::int64_t offset = 0;
      int ndims = 0;
      fields >> offset >> ndims;
      std::vector<int> shape(ndims);
      for (int& d : shape) fields >> d;
      if (!fields) throw DataError("malformed tensor line in checkpoint: " + path);
      idx.tensors[name] = {offset, std::move(shape)};
    } else {
      throw DataError("malformed checkpoint header line: '" + line + "'");
    }
  }
  if (line != "data") throw DataError("checkpoint header not terminated: " + path);
  idx.blob_start = in.tellg();
  return idx;
}

void read_blob(std::ifstream& in, std::streampos base, std::int64_t offset, std::vector<double>& dst) {
  in.seekg(base + static_cast<std::streamoff>(offset * static_cast<std::int64_t>(sizeof(double))));
  in.read(reinterpret_cast<char*>(dst.data()),
          static_cast<std::streamsize>(dst.size() * sizeof(double)));
  if (!in) throw DataError("checkpoint blob truncated");
}

}  // namespace

CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  return parse_checkpoint(in, path).header;
}

void load_checkpoint(Network& network, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  CheckpointIndex idx = parse_checkpoint(in, path);

  const NetworkConfig& a = network.config();
  const NetworkConfig& b = idx.header.config;
  if (a.scales != b.scales || a.base_channels != b.base_channels ||
      a.class_count != b.class_count || a.centroid_dim != b.centroid_dim || a.f_int != b.f_int ||
      a.input_height != b.input_height || a.input_width != b.input_width)
    throw DataError("checkpoint was written for a different network configuration");

  size_t used = 0;
  for (ad::Tensor& p : network.parameters()) {
    auto it = idx.tensors.find(p->name);
    if (it == idx.tensors.end()) throw DataError("checkpoint missing tensor: " + p->name);
    if (it->second.second != p->shape) throw DataError("checkpoint shape mismatch: " + p->name);
    read_blob(in, idx.blob_start, it->second.first, p->value);
    ++used;
  }
  for (auto& [name, state] : network.batchnorm_states()) {
    for (const char* part : {".mean", ".var"}) {
      auto it = idx.tensors.find(name + part);
      if (it == idx.tensors.end()) throw DataError("checkpoint missing tensor: " + name + part);
      auto& vec = part[1] == 'm' ? state->running_mean : state->running_var;
      if (it->second.second != std::vector<int>{static_cast<int>(vec.size())})
        throw DataError("checkpoint shape mismatch: " + name + part);
      read_blob(in, idx.blob_start, it->second.first, vec);
      ++used;
    }
  }
  if (used != idx.tensors.size()) throw DataError("checkpoint holds unexpected extra tensors");
}

TrainResult train(const Dataset& data, const TrainConfig& config, const std::string& out_dir) {
  if (config.learning_rate <= 0.0) throw DataError("learning_rate must be > 0");
  if (config.epochs < 1) throw DataError("epochs must be >= 1");
  if (config.batch_size < 1) throw DataError("batch_size must be >= 1");
  if (data.samples.empty()) throw DataError("training dataset is empty");

  ExperimentSetup setup = parse_experiment_label(config.experiment_label);
  LossConfig loss = config.loss;
  if (setup.explicit_feature_mode) loss.feature_mode = setup.feature_mode;
  if (setup.full_supervision) loss.group = LossGroup::kG1;

  std::vector<LabelMask> targets = make_targets(data, setup);

  TrainResult result;
  if (!setup.full_supervision) {
    ConfusionMatrix acc(data.class_count);
    for (size_t i = 0; i < targets.size(); ++i)
      acc += confusion(targets[i], data.samples[i].full_mask);
    result.wmiou_targets = miou(acc);
  }

  NetworkConfig ncfg;
  ncfg.class_count = data.class_count;
  ncfg.centroid_dim =
      data.class_count + (loss.feature_mode == FeatureMode::kSoftmaxNRGB ? 3 : 0);
  ncfg.input_height = data.height;
  ncfg.input_width = data.width;
  Network net(ncfg);
  init_weights(net, config.seed);
  Adam opt(net.parameters(), config.learning_rate);

  // shuffling gets its own stream so adding epochs never changes init
  Rng shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  const int n = static_cast<int>(data.samples.size());
  std::vector<int> val_indices;
  for (int i = 0; i < std::min(n, 20); ++i) val_indices.push_back(i);

  fs::create_directories(out_dir);
  result.log_path = (fs::path(out_dir) / "log.csv").string();
  std::ofstream log(result.log_path, std::ios::trunc);
  if (!log) throw DataError("cannot write log: " + result.log_path);
  const bool has_cen = loss.group != LossGroup::kG1;
  const bool has_mse = loss.group == LossGroup::kG3;
  log << "epoch,L,L_pce" << (has_cen ? ",L_cen" : "") << (has_mse ? ",L_mse" : "")
      << ",miou_val\n";

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  const double pixels_per_image = static_cast<double>(data.height) * data.width;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

    double loss_sum = 0.0, pce_sum = 0.0, cen_sum = 0.0, mse_sum = 0.0;
    std::int64_t batches = 0, target_px = 0, scribble_px = 0, mse_px = 0;
    for (size_t at = 0; at < order.size(); at += config.batch_size) {
      size_t end = std::min(order.size(), at + static_cast<size_t>(config.batch_size));
      Batch batch = gather(data, targets, order, at, end);

      opt.zero_grads();
      Network::Outputs out = net.forward(batch.images, true);
      LossParts parts =
          full_loss(loss, out.probs, out.centroids, batch.targets, batch.scribbles, batch.images);
      ad::backward(parts.total);
      opt.step();

      loss_sum += parts.total->value[0];
      ++batches;
      pce_sum += parts.pce->value[0];
      for (const LabelMask& t : batch.targets) target_px += t.labelled_count();
      if (has_cen) {
        cen_sum += parts.cen->value[0];
        for (const LabelMask& s : batch.scribbles) scribble_px += s.labelled_count();
      }
      if (has_mse) {
        mse_sum += parts.mse->value[0] * static_cast<double>(end - at) * pixels_per_image;
        mse_px += static_cast<std::int64_t>(end - at) * static_cast<std::int64_t>(pixels_per_image);
      }
    }

    result.final_val_miou = val_miou(net, data, val_indices, config.batch_size);
    // logged losses are per-pixel means over their own pixel domains
    log << epoch << "," << format_real(loss_sum / batches) << ","
        << format_real(target_px > 0 ? pce_sum / target_px : 0.0);
    if (has_cen) log << "," << format_real(scribble_px > 0 ? cen_sum / scribble_px : 0.0);
    if (has_mse) log << "," << format_real(mse_sum / mse_px);
    log << "," << format_real(result.final_val_miou) << "\n";
    log.flush();
  }

  result.checkpoint_path = (fs::path(out_dir) / "final").string();
  save_checkpoint(net, loss.feature_mode, result.checkpoint_path);
  return result;
}

EvalReport evaluate(Network& network, FeatureMode feature_mode, const Dataset& data,
                    int batch_size) {
  if (data.samples.empty()) throw DataError("evaluation dataset is empty");
  if (batch_size < 1) throw DataError("batch_size must be >= 1");

  EvalReport report;
  ConfusionMatrix seg_acc(data.class_count), clu_acc(data.class_count);
  double seg_image_sum = 0.0, clu_image_sum = 0.0;
  for (size_t at = 0; at < data.samples.size(); at += batch_size) {
    size_t end = std::min(data.samples.size(), at + static_cast<size_t>(batch_size));
    std::vector<Image> images;
    for (size_t i = at; i < end; ++i) images.push_back(data.samples[i].image);
    Network::Outputs out = network.forward(images, false);

    for (size_t i = at; i < end; ++i) {
      int k = static_cast<int>(i - at);
      SegmentationOutput probs = segmentation_output(out, k);
      const LabelMask& truth = data.samples[i].full_mask;

      LabelMask seg_pred = predict_labels_from_segmentation(probs);
      ConfusionMatrix seg_cm = confusion(seg_pred, truth);
      seg_acc += seg_cm;
      seg_image_sum += miou(seg_cm);

      const Image* img =
          feature_mode == FeatureMode::kSoftmaxNRGB ? &data.samples[i].image : nullptr;
      LabelMask clu_pred =
          predict_labels_from_clustering(make_features(probs, img), centroid_output(out, k));
      ConfusionMatrix clu_cm = confusion(clu_pred, truth);
      clu_acc += clu_cm;
      clu_image_sum += miou(clu_cm);
    }
  }

  report.seg.pooled = summarize(seg_acc);
  report.clu.pooled = summarize(clu_acc);
  report.seg.per_image_miou = seg_image_sum / static_cast<double>(data.samples.size());
  report.clu.per_image_miou = clu_image_sum / static_cast<double>(data.samples.size());
  return report;
}

}  // namespace wseg
