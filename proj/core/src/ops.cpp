#include "gvsl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "gvsl/errors.hpp"

namespace gvsl::ad {
namespace {

// ---------------------------------------------------------------------------
// Elementwise binary ops with single-element broadcasting.

enum class Binary { Add, Sub, Mul, Div };

class BinaryOp final : public Op {
 public:
  explicit BinaryOp(Binary which) : which_(which) {}

  OpKind kind() const override {
    switch (which_) {
      case Binary::Add: return OpKind::Add;
      case Binary::Sub: return OpKind::Sub;
      case Binary::Mul: return OpKind::Mul;
      case Binary::Div: return OpKind::Div;
    }
    return OpKind::Add;
  }

  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0] == in[1]) return in[0];
    if (numel(in[1]) == 1) return in[0];
    if (numel(in[0]) == 1) return in[1];
    throw ShapeError(std::string(op_name(kind())) + ": shape mismatch " + to_string(in[0]) + " vs " +
                     to_string(in[1]));
  }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    Tensor out(output_shape(std::array{a.shape(), b.shape()}));
    const bool sa = a.numel() == 1 && out.numel() != 1;
    const bool sb = b.numel() == 1 && out.numel() != 1;
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = a[sa ? 0 : i];
      const double y = b[sb ? 0 : i];
      switch (which_) {
        case Binary::Add: out[i] = x + y; break;
        case Binary::Sub: out[i] = x - y; break;
        case Binary::Mul: out[i] = x * y; break;
        case Binary::Div: out[i] = x / y; break;
      }
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    const bool sa = a.numel() == 1 && out.numel() != 1;
    const bool sb = b.numel() == 1 && out.numel() != 1;
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = a[sa ? 0 : i];
      const double y = b[sb ? 0 : i];
      double da = 0.0, db = 0.0;
      switch (which_) {
        case Binary::Add: da = g[i]; db = g[i]; break;
        case Binary::Sub: da = g[i]; db = -g[i]; break;
        case Binary::Mul: da = g[i] * y; db = g[i] * x; break;
        case Binary::Div: da = g[i] / y; db = -g[i] * x / (y * y); break;
      }
      if (grads[0]) (*grads[0])[sa ? 0 : i] += da;
      if (grads[1]) (*grads[1])[sb ? 0 : i] += db;
    }
  }

 private:
  Binary which_;
};

// ---------------------------------------------------------------------------
// Elementwise unary ops. `df` receives the input and the forward output.

struct UnaryFn {
  OpKind kind;
  std::function<double(double)> f;
  std::function<double(double, double)> df;
};

class UnaryOp final : public Op {
 public:
  explicit UnaryOp(UnaryFn fn) : fn_(std::move(fn)) {}
  OpKind kind() const override { return fn_.kind; }
  Shape output_shape(std::span<const Shape> in) const override { return in[0]; }
  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fn_.f(x[i]);
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor& x = *in[0];
    Tensor& gx = *grads[0];
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * fn_.df(x[i], out[i]);
  }

 private:
  UnaryFn fn_;
};

// ---------------------------------------------------------------------------

class ReduceOp final : public Op {
 public:
  explicit ReduceOp(bool average) : average_(average) {}
  OpKind kind() const override { return average_ ? OpKind::Mean : OpKind::Sum; }
  Shape output_shape(std::span<const Shape>) const override { return {1}; }
  Tensor forward(std::span<const Tensor* const> in) const override {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    if (average_) s /= static_cast<double>(in[0]->numel());
    return Tensor::scalar(s);
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    double d = g[0];
    if (average_) d /= static_cast<double>(in[0]->numel());
    for (double& v : grads[0]->data()) v += d;
  }

 private:
  bool average_;
};

// ---------------------------------------------------------------------------

class ConcatOp final : public Op {
 public:
  explicit ConcatOp(std::size_t axis) : axis_(axis) {}
  OpKind kind() const override { return OpKind::Concat; }

  Shape output_shape(std::span<const Shape> in) const override {
    if (in.empty()) throw ShapeError("concat of zero tensors");
    Shape out = in[0];
    if (axis_ >= out.size()) throw ShapeError("concat axis out of range for " + to_string(out));
    for (std::size_t k = 1; k < in.size(); ++k) {
      const Shape& s = in[k];
      if (s.size() != out.size()) throw ShapeError("concat rank mismatch");
      for (std::size_t d = 0; d < s.size(); ++d) {
        if (d != axis_ && s[d] != out[d]) {
          throw ShapeError("concat: " + to_string(in[0]) + " vs " + to_string(s) + " off axis " +
                           std::to_string(axis_));
        }
      }
      out[axis_] += s[axis_];
    }
    return out;
  }

  Tensor forward(std::span<const Tensor* const> in) const override {
    std::vector<Shape> shapes;
    for (auto* t : in) shapes.push_back(t->shape());
    Tensor out(output_shape(shapes));
    const auto [outer, inner] = split(out.shape());
    const std::size_t out_block = static_cast<std::size_t>(out.shape()[axis_]) * inner;
    std::size_t offset = 0;
    for (auto* t : in) {
      const std::size_t block = static_cast<std::size_t>(t->shape()[axis_]) * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(t->data().begin() + o * block, block, out.data().begin() + o * out_block + offset);
      }
      offset += block;
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const auto [outer, inner] = split(out.shape());
    const std::size_t out_block = static_cast<std::size_t>(out.shape()[axis_]) * inner;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      const std::size_t block = static_cast<std::size_t>(in[k]->shape()[axis_]) * inner;
      if (grads[k]) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < block; ++j) (*grads[k])[o * block + j] += g[o * out_block + offset + j];
        }
      }
      offset += block;
    }
  }

 private:
  std::pair<std::size_t, std::size_t> split(const Shape& s) const {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis_; ++d) outer *= static_cast<std::size_t>(s[d]);
    for (std::size_t d = axis_ + 1; d < s.size(); ++d) inner *= static_cast<std::size_t>(s[d]);
    return {outer, inner};
  }
  std::size_t axis_;
};

// ---------------------------------------------------------------------------
// Trilinear x2 upsampling as three separable 1D passes.

void upsample_axis(const double* in, double* out, std::size_t outer, std::size_t n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = in + o * n * inner;
    double* dst = out + o * 2 * n * inner;
    for (std::size_t i = 0; i < 2 * n; ++i) {
      const std::size_t c = i / 2;
      std::size_t lo, hi;
      if (i % 2 == 0) {
        lo = c == 0 ? 0 : c - 1;
        hi = c;
      } else {
        lo = c;
        hi = std::min(c + 1, n - 1);
      }
      const double wlo = (i % 2 == 0) ? 0.25 : 0.75;
      const double whi = 1.0 - wlo;
      for (std::size_t k = 0; k < inner; ++k) dst[i * inner + k] = wlo * src[lo * inner + k] + whi * src[hi * inner + k];
    }
  }
}

void upsample_axis_transpose(const double* g, double* gin, std::size_t outer, std::size_t n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = g + o * 2 * n * inner;
    double* dst = gin + o * n * inner;
    for (std::size_t i = 0; i < 2 * n; ++i) {
      const std::size_t c = i / 2;
      std::size_t lo, hi;
      if (i % 2 == 0) {
        lo = c == 0 ? 0 : c - 1;
        hi = c;
      } else {
        lo = c;
        hi = std::min(c + 1, n - 1);
      }
      const double wlo = (i % 2 == 0) ? 0.25 : 0.75;
      const double whi = 1.0 - wlo;
      for (std::size_t k = 0; k < inner; ++k) {
        dst[lo * inner + k] += wlo * src[i * inner + k];
        dst[hi * inner + k] += whi * src[i * inner + k];
      }
    }
  }
}

class Upsample2xOp final : public Op {
 public:
  OpKind kind() const override { return OpKind::Upsample2x; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 5) throw ShapeError("upsample2x expects [N,C,Z,Y,X], got " + to_string(in[0]));
    Shape s = in[0];
    for (std::size_t d = 2; d < 5; ++d) s[d] *= 2;
    return s;
  }
  Tensor forward(std::span<const Tensor* const> in) const override {
    const Shape& s = in[0]->shape();
    const std::size_t nc = static_cast<std::size_t>(s[0] * s[1]);
    const auto z = static_cast<std::size_t>(s[2]), y = static_cast<std::size_t>(s[3]),
               x = static_cast<std::size_t>(s[4]);
    Tensor ax({1, static_cast<std::int64_t>(nc * z * y * x * 2)});
    upsample_axis(in[0]->data().data(), ax.data().data(), nc * z * y, x, 1);
    Tensor ay({1, static_cast<std::int64_t>(nc * z * y * x * 4)});
    upsample_axis(ax.data().data(), ay.data().data(), nc * z, y, 2 * x);
    Tensor out(output_shape(std::array{s}));
    upsample_axis(ay.data().data(), out.data().data(), nc, z, 4 * x * y);
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Shape& s = in[0]->shape();
    const std::size_t nc = static_cast<std::size_t>(s[0] * s[1]);
    const auto z = static_cast<std::size_t>(s[2]), y = static_cast<std::size_t>(s[3]),
               x = static_cast<std::size_t>(s[4]);
    std::vector<double> gy(nc * z * y * x * 4, 0.0);
    upsample_axis_transpose(g.data().data(), gy.data(), nc, z, 4 * x * y);
    std::vector<double> gx(nc * z * y * x * 2, 0.0);
    upsample_axis_transpose(gy.data(), gx.data(), nc * z, y, 2 * x);
    upsample_axis_transpose(gx.data(), grads[0]->data().data(), nc * z * y, x, 1);
  }
};

// ---------------------------------------------------------------------------

class LinearOp final : public Op {
 public:
  OpKind kind() const override { return OpKind::Linear; }
  Shape output_shape(std::span<const Shape> in) const override {
    const Shape &x = in[0], &w = in[1], &b = in[2];
    if (x.size() != 2 || w.size() != 2 || b.size() != 1 || w[1] != x[1] || b[0] != w[0]) {
      throw ShapeError("linear: x " + to_string(x) + ", W " + to_string(w) + ", b " + to_string(b));
    }
    return {x[0], w[0]};
  }
  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor &x = *in[0], &w = *in[1], &b = *in[2];
    const auto n = x.dim(0), ni = x.dim(1), no = w.dim(0);
    Tensor out({n, no});
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t o = 0; o < no; ++o) {
        double s = b[o];
        for (std::int64_t i = 0; i < ni; ++i) s += w[o * ni + i] * x[r * ni + i];
        out[r * no + o] = s;
      }
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor &x = *in[0], &w = *in[1];
    const auto n = x.dim(0), ni = x.dim(1), no = w.dim(0);
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t o = 0; o < no; ++o) {
        const double go = g[r * no + o];
        if (grads[2]) (*grads[2])[o] += go;
        for (std::int64_t i = 0; i < ni; ++i) {
          if (grads[0]) (*grads[0])[r * ni + i] += go * w[o * ni + i];
          if (grads[1]) (*grads[1])[o * ni + i] += go * x[r * ni + i];
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------

class GroupNormOp final : public Op {
 public:
  GroupNormOp(int groups, double eps) : groups_(groups), eps_(eps) {}
  OpKind kind() const override { return OpKind::GroupNorm; }
  Shape output_shape(std::span<const Shape> in) const override {
    const Shape& x = in[0];
    if (x.size() < 3) throw ShapeError("group_norm expects [N,C,...], got " + to_string(x));
    if (groups_ < 1 || x[1] % groups_ != 0) {
      throw ShapeError("group_norm: " + std::to_string(x[1]) + " channels not divisible into " +
                       std::to_string(groups_) + " groups");
    }
    if (in[1] != Shape{x[1]} || in[2] != Shape{x[1]}) throw ShapeError("group_norm: gamma/beta must be [C]");
    return x;
  }

  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor &x = *in[0], &gamma = *in[1], &beta = *in[2];
    Tensor out(x.shape());
    each_group(x.shape(), [&](std::size_t base, std::size_t c0, std::size_t cpg, std::size_t spatial) {
      const std::size_t m = cpg * spatial;
      double mu = 0.0;
      for (std::size_t j = 0; j < m; ++j) mu += x[base + j];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t j = 0; j < m; ++j) var += (x[base + j] - mu) * (x[base + j] - mu);
      var /= static_cast<double>(m);
      const double inv = 1.0 / std::sqrt(var + eps_);
      for (std::size_t c = 0; c < cpg; ++c) {
        const double ga = gamma[c0 + c], be = beta[c0 + c];
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t j = base + c * spatial + s;
          out[j] = (x[j] - mu) * inv * ga + be;
        }
      }
    });
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor &x = *in[0], &gamma = *in[1];
    each_group(x.shape(), [&](std::size_t base, std::size_t c0, std::size_t cpg, std::size_t spatial) {
      const std::size_t m = cpg * spatial;
      double mu = 0.0;
      for (std::size_t j = 0; j < m; ++j) mu += x[base + j];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t j = 0; j < m; ++j) var += (x[base + j] - mu) * (x[base + j] - mu);
      var /= static_cast<double>(m);
      const double inv = 1.0 / std::sqrt(var + eps_);
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t c = 0; c < cpg; ++c) {
        const double ga = gamma[c0 + c];
        double dga = 0.0, dbe = 0.0;
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t j = base + c * spatial + s;
          const double xhat = (x[j] - mu) * inv;
          dga += g[j] * xhat;
          dbe += g[j];
          mean_dxhat += g[j] * ga;
          mean_dxhat_xhat += g[j] * ga * xhat;
        }
        if (grads[1]) (*grads[1])[c0 + c] += dga;
        if (grads[2]) (*grads[2])[c0 + c] += dbe;
      }
      if (!grads[0]) return;
      mean_dxhat /= static_cast<double>(m);
      mean_dxhat_xhat /= static_cast<double>(m);
      for (std::size_t c = 0; c < cpg; ++c) {
        const double ga = gamma[c0 + c];
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t j = base + c * spatial + s;
          const double xhat = (x[j] - mu) * inv;
          (*grads[0])[j] += inv * (g[j] * ga - mean_dxhat - xhat * mean_dxhat_xhat);
        }
      }
    });
  }

 private:
  template <class F>
  void each_group(const Shape& s, F&& f) const {
    const auto n = static_cast<std::size_t>(s[0]), c = static_cast<std::size_t>(s[1]);
    std::size_t spatial = 1;
    for (std::size_t d = 2; d < s.size(); ++d) spatial *= static_cast<std::size_t>(s[d]);
    const std::size_t cpg = c / static_cast<std::size_t>(groups_);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t gi = 0; gi < static_cast<std::size_t>(groups_); ++gi) {
        f((b * c + gi * cpg) * spatial, gi * cpg, cpg, spatial);
      }
    }
  }
  int groups_;
  double eps_;
};

// ---------------------------------------------------------------------------

class GlobalAvgPoolOp final : public Op {
 public:
  OpKind kind() const override { return OpKind::GlobalAvgPool; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() < 3) throw ShapeError("global_avg_pool expects [N,C,...], got " + to_string(in[0]));
    return {in[0][0], in[0][1]};
  }
  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    Tensor out(output_shape(std::array{x.shape()}));
    const std::size_t spatial = x.numel() / out.numel();
    for (std::size_t k = 0; k < out.numel(); ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < spatial; ++j) s += x[k * spatial + j];
      out[k] = s / static_cast<double>(spatial);
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const std::size_t spatial = in[0]->numel() / out.numel();
    for (std::size_t k = 0; k < out.numel(); ++k) {
      const double d = g[k] / static_cast<double>(spatial);
      for (std::size_t j = 0; j < spatial; ++j) (*grads[0])[k * spatial + j] += d;
    }
  }
};

// ---------------------------------------------------------------------------
// Clipped window sums. The 1D pass is self-adjoint, so the backward pass is the
// same filter applied to the incoming gradient.

void box_axis(const double* in, double* out, std::size_t outer, std::size_t n, std::size_t inner, int radius) {
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto nn = static_cast<std::ptrdiff_t>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = in + o * n * inner;
    double* dst = out + o * n * inner;
    for (std::ptrdiff_t i = 0; i < nn; ++i) {
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - r);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(nn - 1, i + r);
      double* d = dst + static_cast<std::size_t>(i) * inner;
      std::fill_n(d, inner, 0.0);
      for (std::ptrdiff_t j = lo; j <= hi; ++j) {
        const double* s = src + static_cast<std::size_t>(j) * inner;
        for (std::size_t k = 0; k < inner; ++k) d[k] += s[k];
      }
    }
  }
}

Tensor box_filter(const Tensor& x, int window) {
  const Shape& s = x.shape();
  const auto nc = static_cast<std::size_t>(s[0] * s[1]);
  const auto z = static_cast<std::size_t>(s[2]), y = static_cast<std::size_t>(s[3]),
             xx = static_cast<std::size_t>(s[4]);
  const int r = window / 2;
  Tensor a(s), b(s);
  box_axis(x.data().data(), a.data().data(), nc * z * y, xx, 1, r);
  box_axis(a.data().data(), b.data().data(), nc * z, y, xx, r);
  box_axis(b.data().data(), a.data().data(), nc, z, y * xx, r);
  return a;
}

class BoxSumOp final : public Op {
 public:
  explicit BoxSumOp(int window) : window_(window) {}
  OpKind kind() const override { return OpKind::BoxSum; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 5) throw ShapeError("box_sum expects [N,C,Z,Y,X], got " + to_string(in[0]));
    if (window_ < 1 || window_ % 2 == 0) throw ConfigError("box_sum window must be odd and positive");
    return in[0];
  }
  Tensor forward(std::span<const Tensor* const> in) const override { return box_filter(*in[0], window_); }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor gb = box_filter(g, window_);
    for (std::size_t i = 0; i < gb.numel(); ++i) (*grads[0])[i] += gb[i];
  }

 private:
  int window_;
};

// ---------------------------------------------------------------------------

class ForwardDiffOp final : public Op {
 public:
  explicit ForwardDiffOp(std::size_t axis) : axis_(axis) {}
  OpKind kind() const override { return OpKind::ForwardDiff; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 5 || axis_ < 2 || axis_ > 4) {
      throw ShapeError("forward_diff expects [N,C,Z,Y,X] and a spatial axis");
    }
    return in[0];
  }
  Tensor forward(std::span<const Tensor* const> in) const override {
    const Tensor& x = *in[0];
    Tensor out(x.shape());
    walk(x.shape(), [&](std::size_t i, std::size_t stride) { out[i] = x[i + stride] - x[i]; });
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    Tensor& gx = *grads[0];
    walk(in[0]->shape(), [&](std::size_t i, std::size_t stride) {
      gx[i + stride] += g[i];
      gx[i] -= g[i];
    });
  }

 private:
  template <class F>
  void walk(const Shape& s, F&& f) const {
    std::size_t inner = 1;
    for (std::size_t d = axis_ + 1; d < 5; ++d) inner *= static_cast<std::size_t>(s[d]);
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis_; ++d) outer *= static_cast<std::size_t>(s[d]);
    const auto n = static_cast<std::size_t>(s[axis_]);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const std::size_t base = (o * n + i) * inner;
        for (std::size_t k = 0; k < inner; ++k) f(base + k, inner);
      }
    }
  }
  std::size_t axis_;
};

// ---------------------------------------------------------------------------

class SoftmaxCrossEntropyOp final : public Op {
 public:
  explicit SoftmaxCrossEntropyOp(Tensor labels) : labels_(std::move(labels)) {}
  OpKind kind() const override { return OpKind::SoftmaxCrossEntropy; }
  Shape output_shape(std::span<const Shape> in) const override {
    const Shape& l = in[0];
    const Shape& t = labels_.shape();
    if (l.size() != 5 || t.size() != 4 || t[0] != l[0] || t[1] != l[2] || t[2] != l[3] || t[3] != l[4]) {
      throw ShapeError("softmax_cross_entropy: logits " + to_string(l) + " vs labels " + to_string(t));
    }
    for (double v : labels_.data()) {
      if (v < 0 || v >= static_cast<double>(l[1]) || v != std::floor(v)) {
        throw ShapeError("softmax_cross_entropy: label out of range");
      }
    }
    return {1};
  }
  Tensor forward(std::span<const Tensor* const> in) const override {
    double total = 0.0;
    std::size_t count = 0;
    visit(*in[0], [&](std::size_t, std::size_t, std::size_t label, std::span<const double> p, double logz,
                      const double* logits, std::size_t stride) {
      (void)p;
      total += logz - logits[label * stride];
      ++count;
    });
    return Tensor::scalar(total / static_cast<double>(count));
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor& logits = *in[0];
    const double m = static_cast<double>(labels_.numel());
    Tensor& gl = *grads[0];
    visit(logits, [&](std::size_t base, std::size_t k, std::size_t label, std::span<const double> p, double,
                      const double*, std::size_t stride) {
      for (std::size_t c = 0; c < k; ++c) {
        const double target = c == label ? 1.0 : 0.0;
        gl[base + c * stride] += g[0] * (p[c] - target) / m;
      }
    });
  }

 private:
  template <class F>
  void visit(const Tensor& logits, F&& f) const {
    const Shape& s = logits.shape();
    const auto n = static_cast<std::size_t>(s[0]), k = static_cast<std::size_t>(s[1]);
    const std::size_t spatial = static_cast<std::size_t>(s[2] * s[3] * s[4]);
    std::vector<double> p(k);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t v = 0; v < spatial; ++v) {
        const std::size_t base = b * k * spatial + v;
        const double* lg = logits.data().data() + base;
        double mx = lg[0];
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, lg[c * spatial]);
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
          p[c] = std::exp(lg[c * spatial] - mx);
          z += p[c];
        }
        for (std::size_t c = 0; c < k; ++c) p[c] /= z;
        const auto label = static_cast<std::size_t>(labels_[b * spatial + v]);
        f(base, k, label, std::span<const double>(p), mx + std::log(z), lg, spatial);
      }
    }
  }
  Tensor labels_;
};

Var unary(Graph& g, Var x, UnaryFn fn) { return g.apply(std::make_unique<UnaryOp>(std::move(fn)), {x}); }

}  // namespace

Var add(Graph& g, Var a, Var b) { return g.apply(std::make_unique<BinaryOp>(Binary::Add), {a, b}); }
Var sub(Graph& g, Var a, Var b) { return g.apply(std::make_unique<BinaryOp>(Binary::Sub), {a, b}); }
Var mul(Graph& g, Var a, Var b) { return g.apply(std::make_unique<BinaryOp>(Binary::Mul), {a, b}); }
Var div(Graph& g, Var a, Var b) { return g.apply(std::make_unique<BinaryOp>(Binary::Div), {a, b}); }

Var square(Graph& g, Var x) {
  return unary(g, x, {OpKind::Square, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; }});
}

Var sqrt(Graph& g, Var x) {
  return unary(g, x,
               {OpKind::Sqrt, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; }});
}

Var negate(Graph& g, Var x) {
  return unary(g, x, {OpKind::Negate, [](double v) { return -v; }, [](double, double) { return -1.0; }});
}

Var scale(Graph& g, Var x, double factor) {
  return unary(g, x,
               {OpKind::Scale, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; }});
}

Var add_scalar(Graph& g, Var x, double offset) {
  return unary(g, x,
               {OpKind::AddScalar, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; }});
}

Var sum(Graph& g, Var x) { return g.apply(std::make_unique<ReduceOp>(false), {x}); }
Var mean(Graph& g, Var x) { return g.apply(std::make_unique<ReduceOp>(true), {x}); }

Var concat(Graph& g, std::span<const Var> parts, std::size_t axis) {
  return g.apply(std::make_unique<ConcatOp>(axis), std::vector<Var>(parts.begin(), parts.end()));
}

Var upsample2x(Graph& g, Var x) { return g.apply(std::make_unique<Upsample2xOp>(), {x}); }

Var linear(Graph& g, Var x, Var weight, Var bias) {
  return g.apply(std::make_unique<LinearOp>(), {x, weight, bias});
}

Var leaky_relu(Graph& g, Var x, double slope) {
  return unary(g, x,
               {OpKind::LeakyRelu, [slope](double v) { return v > 0.0 ? v : slope * v; },
                [slope](double v, double) { return v > 0.0 ? 1.0 : slope; }});
}

Var sigmoid(Graph& g, Var x) {
  return unary(g, x,
               {OpKind::Sigmoid, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                [](double, double y) { return y * (1.0 - y); }});
}

Var tanh(Graph& g, Var x) {
  return unary(g, x,
               {OpKind::Tanh, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; }});
}

Var group_norm(Graph& g, Var x, Var gamma, Var beta, int groups, double eps) {
  return g.apply(std::make_unique<GroupNormOp>(groups, eps), {x, gamma, beta});
}

Var global_avg_pool(Graph& g, Var x) { return g.apply(std::make_unique<GlobalAvgPoolOp>(), {x}); }

Var box_sum(Graph& g, Var x, int window) { return g.apply(std::make_unique<BoxSumOp>(window), {x}); }

Var forward_diff(Graph& g, Var x, std::size_t axis) { return g.apply(std::make_unique<ForwardDiffOp>(axis), {x}); }

Var softmax_cross_entropy(Graph& g, Var logits, Tensor labels) {
  return g.apply(std::make_unique<SoftmaxCrossEntropyOp>(std::move(labels)), {logits});
}

}  // namespace gvsl::ad
