#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace wseg::ad {

// Define-by-run reverse-mode automatic differentiation.
//
// Every op eagerly computes its value, allocates a zeroed gradient buffer
// and records a closure that scatters the node's gradient into its inputs.
// backward() on a scalar root runs the closures once in reverse topological
// order. Graphs are one-shot: build, backward, drop. Parameter leaves are
// the only nodes meant to outlive a graph; zero their grads between steps.
//
// Ops check their outputs for non-finite values and throw NumericalError,
// so a diverging computation fails at the op that produced it.

struct Node;
using Tensor = std::shared_ptr<Node>;

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<Tensor> inputs;
  std::function<void()> backward_fn;
  bool requires_grad = true;
  std::string name;  // set for parameters, empty elsewhere

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  int dim(int i) const { return shape[i]; }
};

std::int64_t numel(const std::vector<int>& shape);

Tensor leaf(std::vector<int> shape, bool requires_grad = true);
Tensor constant(std::vector<int> shape, std::vector<double> values);

// Accumulates gradients of a scalar root into every reachable node.
void backward(const Tensor& root);

// --- elementwise ---------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// log(max(v, 1e-12)); the clamped region is flat, so its gradient is 0.
Tensor log_clamped(const Tensor& a);

// --- reductions and shape ------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat_channels(const Tensor& a, const Tensor& b);  // along dim 1
Tensor global_avg_pool(const Tensor& x);                   // (N,C,H,W) -> (N,C)

// --- structured ops ------------------------------------------------------

// Softmax over dim 1 of (N,C,...) with max subtraction per position.
Tensor softmax_channels(const Tensor& a);

// 3x3 convolution, stride 1, zero padding 1.
// x (N,Cin,H,W), w (Cout,Cin,3,3), b (Cout) or nullptr.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);

// 1x1 convolution: w (Cout,Cin), b (Cout) or nullptr.
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b);

// x (N,Fin), w (Fout,Fin), b (Fout) or nullptr.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// 2x2 max pooling, stride 2; ties resolve to the first index in scan order.
Tensor maxpool2(const Tensor& x);

// Nearest-neighbour 2x upsampling.
Tensor upsample_nearest2(const Tensor& x);

// x (N,C,H,W) scaled per pixel by alpha (N,1,H,W).
Tensor mul_bcast_channel(const Tensor& x, const Tensor& alpha);

// out[n,c,p] = sum_m (f[n,m,p] - mu[n,c,m])^2.
// f (N,M,H,W), mu (N,C,M) -> (N,C,H,W).
Tensor class_sqdist(const Tensor& f, const Tensor& mu);

// out[n,c,p] = d[n,c,p] / sum_c' d[n,c',p]. A position whose denominator
// is below 1e-12 becomes uniform 1/C and passes no gradient.
Tensor normalize_channels(const Tensor& d);

// Batch normalization over dim 1. Running stats live outside the graph and
// are updated (biased variance) only when training is true.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(int channels)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                 bool training);

}  // namespace wseg::ad
