#include "wseg/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <unordered_set>

#include "wseg/errors.hpp"

namespace wseg::ad {
namespace {

// The BLAS must stay single-threaded: thread count changes the reduction
// order and with it the low bits of results, which breaks bit-exact
// reproducibility across runs.
void blas_init() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

Tensor make_result(std::vector<int> shape, std::vector<Tensor> inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  std::int64_t count = numel(n->shape);
  n->value.assign(count, 0.0);
  n->grad.assign(count, 0.0);
  n->inputs = std::move(inputs);
  n->requires_grad = false;
  for (const auto& in : n->inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  return n;
}

void check_finite(const Node& n, const char* op) {
  for (double v : n.value)
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value in ") + op);
}

void require(bool cond, const char* msg) {
  if (!cond) throw Error(msg);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a->shape == b->shape; }

// Views any tensor as (N, C, S): dim 0, dim 1, product of the rest.
void channel_view(const Tensor& t, int* n, int* c, int* s) {
  require(t->shape.size() >= 2, "op needs a tensor with at least 2 dims");
  *n = t->shape[0];
  *c = t->shape[1];
  std::int64_t spatial = 1;
  for (size_t i = 2; i < t->shape.size(); ++i) spatial *= t->shape[i];
  *s = static_cast<int>(spatial);
}

using UnaryFn = double (*)(double);
using UnaryGradFn = double (*)(double x, double y);  // dy/dx from input and output

Tensor unary_op(const Tensor& a, const char* name, UnaryFn f, UnaryGradFn df) {
  Tensor r = make_result(a->shape, {a});
  for (std::int64_t i = 0; i < a->size(); ++i) r->value[i] = f(a->value[i]);
  Node* out = r.get();
  Node* in = a.get();
  r->backward_fn = [out, in, df] {
    for (std::int64_t i = 0; i < out->size(); ++i)
      in->grad[i] += out->grad[i] * df(in->value[i], out->value[i]);
  };
  check_finite(*r, name);
  return r;
}

// im2col/col2im for the 3x3 stride-1 pad-1 case. col is (C*9) x (H*W) with
// row index c*9 + dy*3 + dx and column index y*W + x.
void im2col3(const double* x, int c_in, int h, int w, double* col) {
  const int hw = h * w;
  for (int c = 0; c < c_in; ++c) {
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        double* row = col + (static_cast<std::int64_t>(c) * 9 + dy * 3 + dx) * hw;
        for (int y = 0; y < h; ++y) {
          int sy = y + dy - 1;
          if (sy < 0 || sy >= h) {
            std::fill(row + y * w, row + (y + 1) * w, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::int64_t>(c) * h + sy) * w;
          for (int xx = 0; xx < w; ++xx) {
            int sx = xx + dx - 1;
            row[y * w + xx] = (sx < 0 || sx >= w) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im3(const double* col, int c_in, int h, int w, double* x_accum) {
  const int hw = h * w;
  for (int c = 0; c < c_in; ++c) {
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        const double* row = col + (static_cast<std::int64_t>(c) * 9 + dy * 3 + dx) * hw;
        for (int y = 0; y < h; ++y) {
          int sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          double* dst = x_accum + (static_cast<std::int64_t>(c) * h + sy) * w;
          for (int xx = 0; xx < w; ++xx) {
            int sx = xx + dx - 1;
            if (sx >= 0 && sx < w) dst[sx] += row[y * w + xx];
          }
        }
      }
    }
  }
}

}  // namespace

std::int64_t numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 1) throw Error("tensor dims must be >= 1");
    n *= d;
  }
  return n;
}

Tensor leaf(std::vector<int> shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  std::int64_t count = numel(n->shape);
  n->value.assign(count, 0.0);
  n->grad.assign(count, 0.0);
  n->requires_grad = requires_grad;
  return n;
}

Tensor constant(std::vector<int> shape, std::vector<double> values) {
  Tensor n = leaf(std::move(shape), false);
  if (static_cast<std::int64_t>(values.size()) != n->size())
    throw Error("constant: value count does not match shape");
  n->value = std::move(values);
  check_finite(*n, "constant");
  return n;
}

void backward(const Tensor& root) {
  require(root->size() == 1, "backward: root must be a scalar");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* node;
    size_t next;
  };
  std::vector<Frame> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next == f.node->inputs.size()) {
      order.push_back(f.node);
      stack.pop_back();
      continue;
    }
    Node* child = f.node->inputs[f.next++].get();
    if (seen.insert(child).second) stack.push_back({child, 0});
  }

  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();

  for (Node* n : order)
    for (double g : n->grad)
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "add: shape mismatch");
  Tensor r = make_result(a->shape, {a, b});
  for (std::int64_t i = 0; i < r->size(); ++i) r->value[i] = a->value[i] + b->value[i];
  Node *out = r.get(), *pa = a.get(), *pb = b.get();
  r->backward_fn = [out, pa, pb] {
    for (std::int64_t i = 0; i < out->size(); ++i) {
      pa->grad[i] += out->grad[i];
      pb->grad[i] += out->grad[i];
    }
  };
  check_finite(*r, "add");
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "sub: shape mismatch");
  Tensor r = make_result(a->shape, {a, b});
  for (std::int64_t i = 0; i < r->size(); ++i) r->value[i] = a->value[i] - b->value[i];
  Node *out = r.get(), *pa = a.get(), *pb = b.get();
  r->backward_fn = [out, pa, pb] {
    for (std::int64_t i = 0; i < out->size(); ++i) {
      pa->grad[i] += out->grad[i];
      pb->grad[i] -= out->grad[i];
    }
  };
  check_finite(*r, "sub");
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "mul: shape mismatch");
  Tensor r = make_result(a->shape, {a, b});
  for (std::int64_t i = 0; i < r->size(); ++i) r->value[i] = a->value[i] * b->value[i];
  Node *out = r.get(), *pa = a.get(), *pb = b.get();
  r->backward_fn = [out, pa, pb] {
    for (std::int64_t i = 0; i < out->size(); ++i) {
      pa->grad[i] += out->grad[i] * pb->value[i];
      pb->grad[i] += out->grad[i] * pa->value[i];
    }
  };
  check_finite(*r, "mul");
  return r;
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor r = make_result(a->shape, {a});
  for (std::int64_t i = 0; i < r->size(); ++i) r->value[i] = a->value[i] + s;
  Node *out = r.get(), *pa = a.get();
  r->backward_fn = [out, pa] {
    for (std::int64_t i = 0; i < out->size(); ++i) pa->grad[i] += out->grad[i];
  };
  check_finite(*r, "add_scalar");
  return r;
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor r = make_result(a->shape, {a});
  for (std::int64_t i = 0; i < r->size(); ++i) r->value[i] = a->value[i] * s;
  Node *out = r.get(), *pa = a.get();
  r->backward_fn = [out, pa, s] {
    for (std::int64_t i = 0; i < out->size(); ++i) pa->grad[i] += out->grad[i] * s;
  };
  check_finite(*r, "mul_scalar");
  return r;
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid",
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_clamped(const Tensor& a) {
  constexpr double kFloor = 1e-12;
  return unary_op(
      a, "log_clamped", [](double x) { return std::log(x < kFloor ? kFloor : x); },
      [](double x, double) { return x < kFloor ? 0.0 : 1.0 / x; });
}

Tensor sum(const Tensor& a) {
  Tensor r = make_result({1}, {a});
  double s = 0.0;
  for (double v : a->value) s += v;
  r->value[0] = s;
  Node *out = r.get(), *pa = a.get();
  r->backward_fn = [out, pa] {
    for (std::int64_t i = 0; i < pa->size(); ++i) pa->grad[i] += out->grad[0];
  };
  check_finite(*r, "sum");
  return r;
}

Tensor mean(const Tensor& a) {
  Tensor r = make_result({1}, {a});
  double s = 0.0;
  for (double v : a->value) s += v;
  const double inv = 1.0 / static_cast<double>(a->size());
  r->value[0] = s * inv;
  Node *out = r.get(), *pa = a.get();
  r->backward_fn = [out, pa, inv] {
    for (std::int64_t i = 0; i < pa->size(); ++i) pa->grad[i] += out->grad[0] * inv;
  };
  check_finite(*r, "mean");
  return r;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  require(numel(shape) == a->size(), "reshape: element count mismatch");
  Tensor r = make_result(std::move(shape), {a});
  r->value = a->value;
  Node *out = r.get(), *pa = a.get();
  r->backward_fn = [out, pa] {
    for (std::int64_t i = 0; i < out->size(); ++i) pa->grad[i] += out->grad[i];
  };
  return r;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a->shape.size() == b->shape.size() && a->shape.size() >= 2,
          "concat_channels: rank mismatch");
  for (size_t i = 0; i < a->shape.size(); ++i)
    require(i == 1 || a->shape[i] == b->shape[i], "concat_channels: non-channel dims must match");

  int n, ca, s;
  channel_view(a, &n, &ca, &s);
  int cb = b->shape[1];
  std::vector<int> shape = a->shape;
  shape[1] = ca + cb;
  Tensor r = make_result(shape, {a, b});

  const std::int64_t block_a = static_cast<std::int64_t>(ca) * s;
  const std::int64_t block_b = static_cast<std::int64_t>(cb) * s;
  for (int i = 0; i < n; ++i) {
    std::copy_n(a->value.data() + i * block_a, block_a,
                r->value.data() + i * (block_a + block_b));
    std::copy_n(b->value.data() + i * block_b, block_b,
                r->value.data() + i * (block_a + block_b) + block_a);
  }
  Node *out = r.get(), *pa = a.get(), *pb = b.get();
  r->backward_fn = [out, pa, pb, n, block_a, block_b] {
    for (int i = 0; i < n; ++i) {
      const double* g = out->grad.data() + i * (block_a + block_b);
      for (std::int64_t j = 0; j < block_a; ++j) pa->grad[i * block_a + j] += g[j];
      for (std::int64_t j = 0; j < block_b; ++j) pb->grad[i * block_b + j] += g[block_a + j];
    }
  };
  return r;
}

Tensor global_avg_pool(const Tensor& x) {
  require(x->shape.size() == 4, "global_avg_pool: need (N,C,H,W)");
  int n, c, s;
  channel_view(x, &n, &c, &s);
  Tensor r = make_result({n, c}, {x});
  const double inv = 1.0 / s;
  for (int i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* src = x->value.data() + static_cast<std::int64_t>(i) * s;
    for (int j = 0; j < s; ++j) acc += src[j];
    r->value[i] = acc * inv;
  }
  Node *out = r.get(), *px = x.get();
  r->backward_fn = [out, px, n, c, s, inv] {
    for (int i = 0; i < n * c; ++i) {
      double g = out->grad[i] * inv;
      double* dst = px->grad.data() + static_cast<std::int64_t>(i) * s;
      for (int j = 0; j < s; ++j) dst[j] += g;
    }
  };
  check_finite(*r, "global_avg_pool");
  return r;
}

Tensor softmax_channels(const Tensor& a) {
  int n, c, s;
  channel_view(a, &n, &c, &s);
  Tensor r = make_result(a->shape, {a});

  for (int i = 0; i < n; ++i) {
    const double* src = a->value.data() + static_cast<std::int64_t>(i) * c * s;
    double* dst = r->value.data() + static_cast<std::int64_t>(i) * c * s;
    for (int p = 0; p < s; ++p) {
      double mx = src[p];
      for (int ch = 1; ch < c; ++ch) mx = std::max(mx, src[ch * s + p]);
      double total = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        double e = std::exp(src[ch * s + p] - mx);
        dst[ch * s + p] = e;
        total += e;
      }
      for (int ch = 0; ch < c; ++ch) dst[ch * s + p] /= total;
    }
  }
  Node *out = r.get(), *pa = a.get();
  r->backward_fn = [out, pa, n, c, s] {
    for (int i = 0; i < n; ++i) {
      const double* y = out->value.data() + static_cast<std::int64_t>(i) * c * s;
      const double* g = out->grad.data() + static_cast<std::int64_t>(i) * c * s;
      double* dx = pa->grad.data() + static_cast<std::int64_t>(i) * c * s;
      for (int p = 0; p < s; ++p) {
        double dot = 0.0;
        for (int ch = 0; ch < c; ++ch) dot += g[ch * s + p] * y[ch * s + p];
        for (int ch = 0; ch < c; ++ch)
          dx[ch * s + p] += y[ch * s + p] * (g[ch * s + p] - dot);
      }
    }
  };
  check_finite(*r, "softmax_channels");
  return r;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  blas_init();
  require(x->shape.size() == 4, "conv2d: x must be (N,Cin,H,W)");
  require(w->shape.size() == 4 && w->shape[2] == 3 && w->shape[3] == 3,
          "conv2d: w must be (Cout,Cin,3,3)");
  require(w->shape[1] == x->shape[1], "conv2d: channel mismatch");
  const int n = x->shape[0], c_in = x->shape[1], h = x->shape[2], wd = x->shape[3];
  const int c_out = w->shape[0];
  if (b) require(b->shape == std::vector<int>{c_out}, "conv2d: bias must be (Cout)");

  std::vector<Tensor> inputs{x, w};
  if (b) inputs.push_back(b);
  Tensor r = make_result({n, c_out, h, wd}, std::move(inputs));

  const int hw = h * wd;
  const int k = c_in * 9;
  std::vector<double> col(static_cast<size_t>(k) * hw);
  for (int i = 0; i < n; ++i) {
    im2col3(x->value.data() + static_cast<std::int64_t>(i) * c_in * hw, c_in, h, wd, col.data());
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, c_out, hw, k, 1.0, w->value.data(), k,
                col.data(), hw, 0.0, r->value.data() + static_cast<std::int64_t>(i) * c_out * hw,
                hw);
  }
  if (b) {
    for (int i = 0; i < n; ++i)
      for (int co = 0; co < c_out; ++co) {
        double* dst = r->value.data() + (static_cast<std::int64_t>(i) * c_out + co) * hw;
        for (int p = 0; p < hw; ++p) dst[p] += b->value[co];
      }
  }

  Node *out = r.get(), *px = x.get(), *pw = w.get();
  Node* pb = b ? b.get() : nullptr;
  r->backward_fn = [out, px, pw, pb, n, c_in, c_out, h, wd, hw, k] {
    // The col matrix is recomputed rather than cached: it is cheap next to
    // the GEMMs and caching one per conv node would dominate memory.
    std::vector<double> col(static_cast<size_t>(k) * hw);
    std::vector<double> dcol(static_cast<size_t>(k) * hw);
    for (int i = 0; i < n; ++i) {
      const double* dy = out->grad.data() + static_cast<std::int64_t>(i) * c_out * hw;
      if (pw->requires_grad) {
        im2col3(px->value.data() + static_cast<std::int64_t>(i) * c_in * hw, c_in, h, wd,
                col.data());
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, c_out, k, hw, 1.0, dy, hw, col.data(),
                    hw, 1.0, pw->grad.data(), k);
      }
      if (px->requires_grad) {
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, hw, c_out, 1.0, pw->value.data(),
                    k, dy, hw, 0.0, dcol.data(), hw);
        col2im3(dcol.data(), c_in, h, wd,
                px->grad.data() + static_cast<std::int64_t>(i) * c_in * hw);
      }
      if (pb) {
        for (int co = 0; co < c_out; ++co) {
          double acc = 0.0;
          for (int p = 0; p < hw; ++p) acc += dy[co * hw + p];
          pb->grad[co] += acc;
        }
      }
    }
  };
  check_finite(*r, "conv2d");
  return r;
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  blas_init();
  require(x->shape.size() == 4, "conv1x1: x must be (N,Cin,H,W)");
  require(w->shape.size() == 2 && w->shape[1] == x->shape[1], "conv1x1: w must be (Cout,Cin)");
  const int n = x->shape[0], c_in = x->shape[1], h = x->shape[2], wd = x->shape[3];
  const int c_out = w->shape[0];
  if (b) require(b->shape == std::vector<int>{c_out}, "conv1x1: bias must be (Cout)");

  std::vector<Tensor> inputs{x, w};
  if (b) inputs.push_back(b);
  Tensor r = make_result({n, c_out, h, wd}, std::move(inputs));

  const int hw = h * wd;
  for (int i = 0; i < n; ++i) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, c_out, hw, c_in, 1.0, w->value.data(),
                c_in, x->value.data() + static_cast<std::int64_t>(i) * c_in * hw, hw, 0.0,
                r->value.data() + static_cast<std::int64_t>(i) * c_out * hw, hw);
  }
  if (b) {
    for (int i = 0; i < n; ++i)
      for (int co = 0; co < c_out; ++co) {
        double* dst = r->value.data() + (static_cast<std::int64_t>(i) * c_out + co) * hw;
        for (int p = 0; p < hw; ++p) dst[p] += b->value[co];
      }
  }

  Node *out = r.get(), *px = x.get(), *pw = w.get();
  Node* pb = b ? b.get() : nullptr;
  r->backward_fn = [out, px, pw, pb, n, c_in, c_out, hw] {
    for (int i = 0; i < n; ++i) {
      const double* dy = out->grad.data() + static_cast<std::int64_t>(i) * c_out * hw;
      const double* xv = px->value.data() + static_cast<std::int64_t>(i) * c_in * hw;
      if (pw->requires_grad)
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, c_out, c_in, hw, 1.0, dy, hw, xv, hw,
                    1.0, pw->grad.data(), c_in);
      if (px->requires_grad)
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, c_in, hw, c_out, 1.0,
                    pw->value.data(), c_in, dy, hw, 1.0,
                    px->grad.data() + static_cast<std::int64_t>(i) * c_in * hw, hw);
      if (pb) {
        for (int co = 0; co < c_out; ++co) {
          double acc = 0.0;
          for (int p = 0; p < hw; ++p) acc += dy[co * hw + p];
          pb->grad[co] += acc;
        }
      }
    }
  };
  check_finite(*r, "conv1x1");
  return r;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x->shape.size() == 2, "linear: x must be (N,Fin)");
  require(w->shape.size() == 2 && w->shape[1] == x->shape[1], "linear: w must be (Fout,Fin)");
  const int n = x->shape[0], f_in = x->shape[1], f_out = w->shape[0];
  if (b) require(b->shape == std::vector<int>{f_out}, "linear: bias must be (Fout)");

  std::vector<Tensor> inputs{x, w};
  if (b) inputs.push_back(b);
  Tensor r = make_result({n, f_out}, std::move(inputs));

  // Plain loops: these matrices are tiny and a fixed summation order keeps
  // per-sample results identical regardless of batch size.
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < f_out; ++o) {
      double acc = b ? b->value[o] : 0.0;
      const double* xi = x->value.data() + static_cast<std::int64_t>(i) * f_in;
      const double* wo = w->value.data() + static_cast<std::int64_t>(o) * f_in;
      for (int j = 0; j < f_in; ++j) acc += xi[j] * wo[j];
      r->value[i * f_out + o] = acc;
    }

  Node *out = r.get(), *px = x.get(), *pw = w.get();
  Node* pb = b ? b.get() : nullptr;
  r->backward_fn = [out, px, pw, pb, n, f_in, f_out] {
    for (int i = 0; i < n; ++i) {
      const double* g = out->grad.data() + static_cast<std::int64_t>(i) * f_out;
      const double* xi = px->value.data() + static_cast<std::int64_t>(i) * f_in;
      double* dxi = px->grad.data() + static_cast<std::int64_t>(i) * f_in;
      for (int o = 0; o < f_out; ++o) {
        const double* wo = pw->value.data() + static_cast<std::int64_t>(o) * f_in;
        double* dwo = pw->grad.data() + static_cast<std::int64_t>(o) * f_in;
        for (int j = 0; j < f_in; ++j) {
          dxi[j] += g[o] * wo[j];
          dwo[j] += g[o] * xi[j];
        }
        if (pb) pb->grad[o] += g[o];
      }
    }
  };
  check_finite(*r, "linear");
  return r;
}

Tensor maxpool2(const Tensor& x) {
  require(x->shape.size() == 4, "maxpool2: need (N,C,H,W)");
  const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  require(h % 2 == 0 && w % 2 == 0, "maxpool2: H and W must be even");
  const int oh = h / 2, ow = w / 2;
  Tensor r = make_result({n, c, oh, ow}, {x});

  auto argmax = std::make_shared<std::vector<std::int64_t>>(r->size());
  for (int i = 0; i < n * c; ++i) {
    const double* src = x->value.data() + static_cast<std::int64_t>(i) * h * w;
    double* dst = r->value.data() + static_cast<std::int64_t>(i) * oh * ow;
    std::int64_t* am = argmax->data() + static_cast<std::int64_t>(i) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        std::int64_t best = static_cast<std::int64_t>(2 * y) * w + 2 * xx;
        double bv = src[best];
        const std::int64_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::int64_t idx : cand)
          if (src[idx] > bv) {
            bv = src[idx];
            best = idx;
          }
        dst[y * ow + xx] = bv;
        am[y * ow + xx] = static_cast<std::int64_t>(i) * h * w + best;
      }
  }
  Node *out = r.get(), *px = x.get();
  r->backward_fn = [out, px, argmax] {
    for (std::int64_t i = 0; i < out->size(); ++i) px->grad[(*argmax)[i]] += out->grad[i];
  };
  check_finite(*r, "maxpool2");
  return r;
}

Tensor upsample_nearest2(const Tensor& x) {
  require(x->shape.size() == 4, "upsample_nearest2: need (N,C,H,W)");
  const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  const int oh = h * 2, ow = w * 2;
  Tensor r = make_result({n, c, oh, ow}, {x});
  for (int i = 0; i < n * c; ++i) {
    const double* src = x->value.data() + static_cast<std::int64_t>(i) * h * w;
    double* dst = r->value.data() + static_cast<std::int64_t>(i) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
  }
  Node *out = r.get(), *px = x.get();
  r->backward_fn = [out, px, n, c, h, w, oh, ow] {
    for (int i = 0; i < n * c; ++i) {
      const double* g = out->grad.data() + static_cast<std::int64_t>(i) * oh * ow;
      double* dx = px->grad.data() + static_cast<std::int64_t>(i) * h * w;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) dx[(y / 2) * w + xx / 2] += g[y * ow + xx];
    }
  };
  return r;
}

Tensor mul_bcast_channel(const Tensor& x, const Tensor& alpha) {
  require(x->shape.size() == 4 && alpha->shape.size() == 4, "mul_bcast_channel: need 4-D");
  require(alpha->shape[0] == x->shape[0] && alpha->shape[1] == 1 &&
              alpha->shape[2] == x->shape[2] && alpha->shape[3] == x->shape[3],
          "mul_bcast_channel: alpha must be (N,1,H,W)");
  const int n = x->shape[0], c = x->shape[1];
  const int hw = x->shape[2] * x->shape[3];
  Tensor r = make_result(x->shape, {x, alpha});
  for (int i = 0; i < n; ++i) {
    const double* av = alpha->value.data() + static_cast<std::int64_t>(i) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const double* xv = x->value.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      double* dst = r->value.data() + (static_cast<std::int64_t>(i) * c + ch) * hw;
      for (int p = 0; p < hw; ++p) dst[p] = xv[p] * av[p];
    }
  }
  Node *out = r.get(), *px = x.get(), *pal = alpha.get();
  r->backward_fn = [out, px, pal, n, c, hw] {
    for (int i = 0; i < n; ++i) {
      const double* av = pal->value.data() + static_cast<std::int64_t>(i) * hw;
      double* da = pal->grad.data() + static_cast<std::int64_t>(i) * hw;
      for (int ch = 0; ch < c; ++ch) {
        const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * hw;
        for (int p = 0; p < hw; ++p) {
          px->grad[base + p] += out->grad[base + p] * av[p];
          da[p] += out->grad[base + p] * px->value[base + p];
        }
      }
    }
  };
  check_finite(*r, "mul_bcast_channel");
  return r;
}

Tensor class_sqdist(const Tensor& f, const Tensor& mu) {
  require(f->shape.size() == 4, "class_sqdist: f must be (N,M,H,W)");
  require(mu->shape.size() == 3, "class_sqdist: mu must be (N,C,M)");
  require(mu->shape[0] == f->shape[0] && mu->shape[2] == f->shape[1],
          "class_sqdist: feature dim mismatch");
  const int n = f->shape[0], m = f->shape[1], h = f->shape[2], w = f->shape[3];
  const int c = mu->shape[1];
  const int hw = h * w;
  Tensor r = make_result({n, c, h, w}, {f, mu});

  for (int i = 0; i < n; ++i) {
    const double* fv = f->value.data() + static_cast<std::int64_t>(i) * m * hw;
    for (int cl = 0; cl < c; ++cl) {
      const double* muv = mu->value.data() + (static_cast<std::int64_t>(i) * c + cl) * m;
      double* dst = r->value.data() + (static_cast<std::int64_t>(i) * c + cl) * hw;
      std::fill(dst, dst + hw, 0.0);
      for (int j = 0; j < m; ++j) {
        const double* fj = fv + static_cast<std::int64_t>(j) * hw;
        const double mj = muv[j];
        for (int p = 0; p < hw; ++p) {
          double diff = fj[p] - mj;
          dst[p] += diff * diff;
        }
      }
    }
  }
  Node *out = r.get(), *pf = f.get(), *pmu = mu.get();
  r->backward_fn = [out, pf, pmu, n, m, c, hw] {
    for (int i = 0; i < n; ++i) {
      const double* fv = pf->value.data() + static_cast<std::int64_t>(i) * m * hw;
      double* dfv = pf->grad.data() + static_cast<std::int64_t>(i) * m * hw;
      for (int cl = 0; cl < c; ++cl) {
        const double* g = out->grad.data() + (static_cast<std::int64_t>(i) * c + cl) * hw;
        const double* muv = pmu->value.data() + (static_cast<std::int64_t>(i) * c + cl) * m;
        double* dmuv = pmu->grad.data() + (static_cast<std::int64_t>(i) * c + cl) * m;
        for (int j = 0; j < m; ++j) {
          const double* fj = fv + static_cast<std::int64_t>(j) * hw;
          double* dfj = dfv + static_cast<std::int64_t>(j) * hw;
          const double mj = muv[j];
          double dmu_acc = 0.0;
          for (int p = 0; p < hw; ++p) {
            double diff = fj[p] - mj;
            double gd = 2.0 * g[p] * diff;
            if (pf->requires_grad) dfj[p] += gd;
            dmu_acc -= gd;
          }
          if (pmu->requires_grad) dmuv[j] += dmu_acc;
        }
      }
    }
  };
  check_finite(*r, "class_sqdist");
  return r;
}

Tensor normalize_channels(const Tensor& d) {
  constexpr double kTiny = 1e-12;
  int n, c, s;
  channel_view(d, &n, &c, &s);
  Tensor r = make_result(d->shape, {d});

  for (int i = 0; i < n; ++i) {
    const double* src = d->value.data() + static_cast<std::int64_t>(i) * c * s;
    double* dst = r->value.data() + static_cast<std::int64_t>(i) * c * s;
    for (int p = 0; p < s; ++p) {
      double total = 0.0;
      for (int ch = 0; ch < c; ++ch) total += src[ch * s + p];
      if (total < kTiny) {
        for (int ch = 0; ch < c; ++ch) dst[ch * s + p] = 1.0 / c;
      } else {
        for (int ch = 0; ch < c; ++ch) dst[ch * s + p] = src[ch * s + p] / total;
      }
    }
  }
  Node *out = r.get(), *pd = d.get();
  r->backward_fn = [out, pd, n, c, s] {
    for (int i = 0; i < n; ++i) {
      const double* src = pd->value.data() + static_cast<std::int64_t>(i) * c * s;
      const double* g = out->grad.data() + static_cast<std::int64_t>(i) * c * s;
      double* dx = pd->grad.data() + static_cast<std::int64_t>(i) * c * s;
      for (int p = 0; p < s; ++p) {
        double total = 0.0;
        for (int ch = 0; ch < c; ++ch) total += src[ch * s + p];
        if (total < kTiny) continue;  // degenerate positions pass no gradient
        double dot = 0.0;
        for (int ch = 0; ch < c; ++ch) dot += g[ch * s + p] * src[ch * s + p];
        const double inv = 1.0 / total;
        for (int ch = 0; ch < c; ++ch)
          dx[ch * s + p] += g[ch * s + p] * inv - dot * inv * inv;
      }
    }
  };
  check_finite(*r, "normalize_channels");
  return r;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                 bool training) {
  int n, c, s;
  channel_view(x, &n, &c, &s);
  require(gamma->shape == std::vector<int>{c} && beta->shape == std::vector<int>{c},
          "batchnorm: gamma/beta must be (C)");
  require(static_cast<int>(state.running_mean.size()) == c, "batchnorm: state channel mismatch");

  Tensor r = make_result(x->shape, {x, gamma, beta});
  const int m = n * s;  // samples per channel
  const double eps = state.eps;

  auto mean_v = std::make_shared<std::vector<double>>(c, 0.0);
  auto invstd_v = std::make_shared<std::vector<double>>(c, 0.0);

  auto idx = [c, s](int i, int ch, int p) {
    return (static_cast<std::int64_t>(i) * c + ch) * s + p;
  };

  for (int ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < s; ++p) acc += x->value[idx(i, ch, p)];
      mu = acc / m;
      double vacc = 0.0;
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < s; ++p) {
          double d = x->value[idx(i, ch, p)] - mu;
          vacc += d * d;
        }
      var = vacc / m;
      state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
      state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * var;
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    (*mean_v)[ch] = mu;
    (*invstd_v)[ch] = 1.0 / std::sqrt(var + eps);
    const double g = gamma->value[ch], bb = beta->value[ch], is = (*invstd_v)[ch];
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < s; ++p)
        r->value[idx(i, ch, p)] = (x->value[idx(i, ch, p)] - mu) * is * g + bb;
  }

  Node *out = r.get(), *px = x.get(), *pg = gamma.get(), *pb = beta.get();
  r->backward_fn = [out, px, pg, pb, mean_v, invstd_v, n, c, s, m, training, idx] {
    for (int ch = 0; ch < c; ++ch) {
      const double mu = (*mean_v)[ch], is = (*invstd_v)[ch], g = pg->value[ch];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < s; ++p) {
          double dy = out->grad[idx(i, ch, p)];
          sum_dy += dy;
          sum_dy_xhat += dy * (px->value[idx(i, ch, p)] - mu) * is;
        }
      pg->grad[ch] += sum_dy_xhat;
      pb->grad[ch] += sum_dy;
      if (!px->requires_grad) continue;
      if (training) {
        // dL/dx through the batch statistics as well.
        for (int i = 0; i < n; ++i)
          for (int p = 0; p < s; ++p) {
            double xhat = (px->value[idx(i, ch, p)] - mu) * is;
            double dy = out->grad[idx(i, ch, p)];
            px->grad[idx(i, ch, p)] +=
                g * is * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
          }
      } else {
        for (int i = 0; i < n; ++i)
          for (int p = 0; p < s; ++p)
            px->grad[idx(i, ch, p)] += out->grad[idx(i, ch, p)] * g * is;
      }
    }
  };
  check_finite(*r, "batchnorm");
  return r;
}

}  // namespace wseg::ad
