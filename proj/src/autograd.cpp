#include "dinp/autograd.hpp"

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <memory>
#include <numeric>

namespace dinp {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

struct ConvGeometry {
  std::int64_t channels, height, width, kernel, stride, padding, out_height, out_width;

  std::int64_t rows() const { return channels * kernel * kernel; }
  std::int64_t cols() const { return out_height * out_width; }
  bool pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

// Output columns ox whose source column ox*stride - padding + kx lies in [0, width).
inline std::pair<std::int64_t, std::int64_t> valid_span(const ConvGeometry& g, std::int64_t kx) {
  const std::int64_t off = kx - g.padding;
  std::int64_t lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  std::int64_t hi = (g.width - 1 - off) >= 0 ? (g.width - 1 - off) / g.stride + 1 : 0;
  lo = std::min(lo, g.out_width);
  hi = std::clamp(hi, lo, g.out_width);
  return {lo, hi};
}

// Per-thread im2col buffers, reused across calls to avoid page-faulting a
// fresh multi-megabyte allocation for every convolution.
template <typename T>
T* scratch(std::size_t n, int slot) {
  thread_local std::array<AlignedVector<T>, 2> buffers;
  auto& b = buffers[static_cast<std::size_t>(slot)];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Four independent accumulators break the add latency chain.
template <typename T, typename F>
double group_sum(const T* p, std::int64_t n, F f) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4)
    for (int j = 0; j < 4; ++j) acc[j] += f(static_cast<double>(p[i + j]));
  for (; i < n; ++i) acc[0] += f(static_cast<double>(p[i]));
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const auto n = g.cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const T* plane = x + c * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * n;
        const auto [lo, hi] = valid_span(g, kx);
        const std::int64_t off = kx - g.padding;
        for (std::int64_t oy = 0; oy < g.out_height; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky;
          T* dst = row + oy * g.out_width;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_width, T(0));
            continue;
          }
          const T* src = plane + iy * g.width + off;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.out_width, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const auto n = g.cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    T* plane = dx + c * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * n;
        const auto [lo, hi] = valid_span(g, kx);
        const std::int64_t off = kx - g.padding;
        for (std::int64_t oy = 0; oy < g.out_height; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = row + oy * g.out_width;
          T* dst = plane + iy * g.width + off;
          if (g.stride == 1) {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

std::int64_t trailing_size(const Shape& s, std::size_t from) {
  std::int64_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<std::int32_t>(nodes_.size())) throw std::out_of_range("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  return node(v).value();
}

template <typename T>
Var Graph<T>::push(Tensor<T> value, std::string op, std::initializer_list<Var> inputs) {
  require_finite(value, op);
  Node n;
  n.owned = std::move(value);
  n.op = std::move(op);
  if (track_) {
    for (Var in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
void Graph<T>::set_backward(Var v, std::function<void()> fn) {
  if (nodes_[v.id].requires_grad) nodes_[v.id].backward = std::move(fn);
}

template <typename T>
Tensor<T>& Graph<T>::grad_ref(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty() && !n.value().empty()) n.grad = Tensor<T>(n.value().shape());
  return n.grad;
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  require_finite(value, "constant");
  Node n;
  n.owned = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::parameter(const std::string& name, const Tensor<T>& value) {
  if (auto it = params_.find(name); it != params_.end()) return it->second;
  require_finite(value, "parameter " + name);
  Node n;
  n.external = &value;
  n.op = "parameter " + name;
  n.requires_grad = track_;
  nodes_.push_back(std::move(n));
  Var v{static_cast<std::int32_t>(nodes_.size() - 1)};
  params_.emplace(name, v);
  return v;
}

template <typename T>
Var Graph<T>::conv2d(Var x, Var weight, std::optional<Var> bias, int stride, int padding) {
  const auto& xs = shape(x);
  const auto& ws = shape(weight);
  if (xs.size() != 4 || ws.size() != 4 || ws[2] != ws[3])
    throw ShapeError("conv2d: expected [B,C,H,W] input and square [Co,Ci,k,k] kernel, got " + shape_string(xs) +
                     " and " + shape_string(ws));
  if (xs[1] != ws[1])
    throw ShapeError("conv2d: input has " + std::to_string(xs[1]) + " channels, kernel expects " +
                     std::to_string(ws[1]));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (bias && (shape(*bias).size() != 1 || shape(*bias)[0] != ws[0])) throw ShapeError("conv2d: bias shape mismatch");
  const std::int64_t k = ws[2];
  if (xs[2] + 2 * padding < k || xs[3] + 2 * padding < k) throw ShapeError("conv2d: kernel larger than padded input");

  ConvGeometry geo{xs[1], xs[2], xs[3], k, stride, padding, (xs[2] + 2 * padding - k) / stride + 1,
                   (xs[3] + 2 * padding - k) / stride + 1};
  const std::int64_t batch = xs[0], out_c = ws[0];
  const std::int64_t in_plane = geo.channels * geo.height * geo.width, out_plane = out_c * geo.cols();

  Tensor<T> y({batch, out_c, geo.out_height, geo.out_width});
  {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(weight);
    T* cols = geo.pointwise() ? nullptr : scratch<T>(static_cast<std::size_t>(geo.rows() * geo.cols()), 0);
    ConstMatMap<T> wm(wv.data(), out_c, geo.rows());
    for (std::int64_t b = 0; b < batch; ++b) {
      const T* colp = xv.data() + b * in_plane;
      if (!geo.pointwise()) {
        im2col(colp, geo, cols);
        colp = cols;
      }
      MatMap<T> ym(y.data() + b * out_plane, out_c, geo.cols());
      ym.noalias() = wm * ConstMatMap<T>(colp, geo.rows(), geo.cols());
      if (bias) {
        const T* bp = value(*bias).data();
        for (std::int64_t c = 0; c < out_c; ++c) ym.row(c).array() += bp[c];
      }
    }
  }
  Var out = bias ? push(std::move(y), "conv2d", {x, weight, *bias}) : push(std::move(y), "conv2d", {x, weight});
  set_backward(out, [this, x, weight, bias, out, geo, batch, out_c, in_plane, out_plane] {
    const Tensor<T>& dy = nodes_[out.id].grad;
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(weight);
    const auto n = static_cast<std::size_t>(geo.rows() * geo.cols());
    T* cols = geo.pointwise() ? nullptr : scratch<T>(n, 0);
    T* dcols = needs(x) && !geo.pointwise() ? scratch<T>(n, 1) : nullptr;
    ConstMatMap<T> wm(wv.data(), out_c, geo.rows());
    for (std::int64_t b = 0; b < batch; ++b) {
      ConstMatMap<T> dym(dy.data() + b * out_plane, out_c, geo.cols());
      if (needs(weight)) {
        const T* colp = xv.data() + b * in_plane;
        if (!geo.pointwise()) {
          im2col(colp, geo, cols);
          colp = cols;
        }
        MatMap<T> dw(grad_ref(weight).data(), out_c, geo.rows());
        dw.noalias() += dym * ConstMatMap<T>(colp, geo.rows(), geo.cols()).transpose();
      }
      if (bias && needs(*bias)) {
        T* db = grad_ref(*bias).data();
        for (std::int64_t c = 0; c < out_c; ++c) db[c] += dym.row(c).sum();
      }
      if (needs(x)) {
        T* dx = grad_ref(x).data() + b * in_plane;
        if (geo.pointwise()) {
          MatMap<T>(dx, geo.rows(), geo.cols()).noalias() += wm.transpose() * dym;
        } else {
          MatMap<T>(dcols, geo.rows(), geo.cols()).noalias() = wm.transpose() * dym;
          col2im_add(dcols, geo, dx);
        }
      }
    }
  });
  return out;
}

template <typename T>
Var Graph<T>::linear(Var x, Var weight, Var bias) {
  const auto& xs = shape(x);
  const auto& ws = shape(weight);
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
    throw ShapeError("linear: input " + shape_string(xs) + " incompatible with weight " + shape_string(ws));
  if (shape(bias) != Shape{ws[0]}) throw ShapeError("linear: bias shape mismatch");
  const std::int64_t batch = xs[0], in = xs[1], outw = ws[0];
  Tensor<T> y({batch, outw});
  {
    MatMap<T> ym(y.data(), batch, outw);
    ym.noalias() = ConstMatMap<T>(value(x).data(), batch, in) * ConstMatMap<T>(value(weight).data(), outw, in).transpose();
    const T* bp = value(bias).data();
    for (std::int64_t r = 0; r < batch; ++r)
      for (std::int64_t c = 0; c < outw; ++c) ym(r, c) += bp[c];
  }
  Var out = push(std::move(y), "linear", {x, weight, bias});
  set_backward(out, [this, x, weight, bias, out, batch, in, outw] {
    ConstMatMap<T> dy(nodes_[out.id].grad.data(), batch, outw);
    if (needs(x))
      MatMap<T>(grad_ref(x).data(), batch, in).noalias() += dy * ConstMatMap<T>(value(weight).data(), outw, in);
    if (needs(weight))
      MatMap<T>(grad_ref(weight).data(), outw, in).noalias() += dy.transpose() * ConstMatMap<T>(value(x).data(), batch, in);
    if (needs(bias)) {
      T* db = grad_ref(bias).data();
      for (std::int64_t c = 0; c < outw; ++c) db[c] += dy.col(c).sum();
    }
  });
  return out;
}

template <typename T>
Var Graph<T>::group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  const auto& xs = shape(x);
  if (xs.size() < 2) throw ShapeError("group_norm: expected at least [B,C]");
  const std::int64_t batch = xs[0], channels = xs[1], spatial = trailing_size(xs, 2);
  if (groups < 1 || channels % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(channels) +
                     " channels");
  if (shape(gamma) != Shape{channels} || shape(beta) != Shape{channels})
    throw ShapeError("group_norm: affine parameter shape mismatch");
  const std::int64_t per_group = channels / groups;
  const std::int64_t count = per_group * spatial;

  auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(2 * batch * groups));
  Tensor<T> y(xs);
  const T* xp = value(x).data();
  const T* gp = value(gamma).data();
  const T* bp = value(beta).data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t g = 0; g < groups; ++g) {
      const std::int64_t base = (b * channels + g * per_group) * spatial;
      const double mean = group_sum(xp + base, count, [](double v) { return v; }) / static_cast<double>(count);
      const double var =
          group_sum(xp + base, count, [mean](double v) { return (v - mean) * (v - mean); }) / static_cast<double>(count);
      const double rstd = 1.0 / std::sqrt(var + eps);
      (*stats)[2 * (b * groups + g)] = static_cast<T>(mean);
      (*stats)[2 * (b * groups + g) + 1] = static_cast<T>(rstd);
      for (std::int64_t c = 0; c < per_group; ++c) {
        const std::int64_t ch = g * per_group + c;
        const T a = static_cast<T>(rstd) * gp[ch];
        const T shift = bp[ch] - static_cast<T>(mean) * a;
        const T* src = xp + base + c * spatial;
        T* dst = y.data() + base + c * spatial;
        for (std::int64_t s = 0; s < spatial; ++s) dst[s] = src[s] * a + shift;
      }
    }
  }
  Var out = push(std::move(y), "group_norm", {x, gamma, beta});
  set_backward(out, [this, x, gamma, beta, out, stats, batch, channels, spatial, groups, per_group, count] {
    const T* dy = nodes_[out.id].grad.data();
    const T* xp = value(x).data();
    const T* gp = value(gamma).data();
    T* dg = needs(gamma) ? grad_ref(gamma).data() : nullptr;
    T* dbeta = needs(beta) ? grad_ref(beta).data() : nullptr;
    T* dx = needs(x) ? grad_ref(x).data() : nullptr;
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t g = 0; g < groups; ++g) {
        const std::int64_t base = (b * channels + g * per_group) * spatial;
        const T mean = (*stats)[2 * (b * groups + g)];
        const T rstd = (*stats)[2 * (b * groups + g) + 1];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::int64_t c = 0; c < per_group; ++c) {
          const std::int64_t ch = g * per_group + c;
          double dgc = 0.0, dbc = 0.0;
          for (std::int64_t s = 0; s < spatial; ++s) {
            const std::int64_t i = base + c * spatial + s;
            const double xhat = (xp[i] - mean) * rstd;
            dgc += dy[i] * xhat;
            dbc += dy[i];
            const double dxhat = dy[i] * gp[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          if (dg) dg[ch] += static_cast<T>(dgc);
          if (dbeta) dbeta[ch] += static_cast<T>(dbc);
        }
        if (!dx) continue;
        const double inv_n = 1.0 / static_cast<double>(count);
        for (std::int64_t c = 0; c < per_group; ++c) {
          const std::int64_t ch = g * per_group + c;
          for (std::int64_t s = 0; s < spatial; ++s) {
            const std::int64_t i = base + c * spatial + s;
            const double xhat = (xp[i] - mean) * rstd;
            const double dxhat = dy[i] * gp[ch];
            dx[i] += static_cast<T>(rstd * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n));
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Var Graph<T>::silu(Var x) {
  const Tensor<T>& xv = value(x);
  Tensor<T> y(xv.shape());
  const auto n = static_cast<Eigen::Index>(xv.size());
  ArrMap<T>(y.data(), n) = ConstArrMap<T>(xv.data(), n) / (T(1) + (-ConstArrMap<T>(xv.data(), n)).exp());
  Var out = push(std::move(y), "silu", {x});
  set_backward(out, [this, x, out, n] {
    ConstArrMap<T> xa(value(x).data(), n), dy(nodes_[out.id].grad.data(), n);
    const auto s = (T(1) + (-xa).exp()).inverse();
    ArrMap<T>(grad_ref(x).data(), n) += dy * s * (T(1) + xa * (T(1) - s));
  });
  return out;
}

template <typename T>
Var Graph<T>::upsample_nearest2x(Var x) {
  const auto& xs = shape(x);
  if (xs.size() != 4) throw ShapeError("upsample_nearest2x: expected [B,C,H,W]");
  const std::int64_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  Tensor<T> y({xs[0], xs[1], 2 * h, 2 * w});
  const T* xp = value(x).data();
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t r = 0; r < 2 * h; ++r)
      for (std::int64_t c = 0; c < 2 * w; ++c) y[(p * 2 * h + r) * 2 * w + c] = xp[(p * h + r / 2) * w + c / 2];
  Var out = push(std::move(y), "upsample_nearest2x", {x});
  set_backward(out, [this, x, out, planes, h, w] {
    const T* dy = nodes_[out.id].grad.data();
    T* dx = grad_ref(x).data();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t r = 0; r < 2 * h; ++r)
        for (std::int64_t c = 0; c < 2 * w; ++c) dx[(p * h + r / 2) * w + c / 2] += dy[(p * 2 * h + r) * 2 * w + c];
  });
  return out;
}

template <typename T>
Var Graph<T>::attention(Var qkv, int heads) {
  const auto& s = shape(qkv);
  if (s.size() != 4 || s[1] % 3 != 0) throw ShapeError("attention: expected [B,3C,H,W]");
  const std::int64_t batch = s[0], channels = s[1] / 3, n = s[2] * s[3];
  if (heads < 1 || channels % heads != 0) throw ShapeError("attention: heads do not divide channels");
  const std::int64_t ch = channels / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(ch));

  auto probs = std::make_shared<AlignedVector<T>>(track_ ? static_cast<std::size_t>(batch * heads * n * n) : 0);
  Tensor<T> y({batch, channels, s[2], s[3]});
  RowMat<T> scores(n, n);
  const T* qp = value(qkv).data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      const T* base = qp + b * 3 * channels * n;
      ConstMatMap<T> q(base + h * ch * n, ch, n), k(base + (channels + h * ch) * n, ch, n),
          v(base + (2 * channels + h * ch) * n, ch, n);
      scores.noalias() = q.transpose() * k;
      scores *= scale;
      for (std::int64_t r = 0; r < n; ++r) {
        auto row = scores.row(r);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      MatMap<T>(y.data() + (b * channels + h * ch) * n, ch, n).noalias() = v * scores.transpose();
      if (track_) std::copy(scores.data(), scores.data() + n * n, probs->data() + (b * heads + h) * n * n);
    }
  }
  Var out = push(std::move(y), "attention", {qkv});
  set_backward(out, [this, qkv, out, probs, batch, heads, channels, ch, n, scale] {
    const T* dy = nodes_[out.id].grad.data();
    const T* qp = value(qkv).data();
    T* dq = grad_ref(qkv).data();
    RowMat<T> dp(n, n);
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t qoff = b * 3 * channels * n + h * ch * n;
        const std::int64_t koff = qoff + channels * n, voff = qoff + 2 * channels * n;
        ConstMatMap<T> q(qp + qoff, ch, n), k(qp + koff, ch, n), v(qp + voff, ch, n);
        ConstMatMap<T> p(probs->data() + (b * heads + h) * n * n, n, n);
        ConstMatMap<T> dout(dy + (b * channels + h * ch) * n, ch, n);
        MatMap<T>(dq + voff, ch, n).noalias() += dout * p;
        dp.noalias() = dout.transpose() * v;
        for (std::int64_t r = 0; r < n; ++r) {
          const T dot = dp.row(r).dot(p.row(r));
          dp.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
        }
        dp *= scale;
        MatMap<T>(dq + qoff, ch, n).noalias() += k * dp.transpose();
        MatMap<T>(dq + koff, ch, n).noalias() += q * dp;
      }
    }
  });
  return out;
}

template <typename T>
Var Graph<T>::embedding(Var table, const std::vector<int>& indices) {
  const auto& ts = shape(table);
  if (ts.size() != 2) throw ShapeError("embedding: table must be [entries, width]");
  const std::int64_t rows = ts[0], width = ts[1];
  Tensor<T> y({static_cast<std::int64_t>(indices.size()), width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= rows)
      throw std::out_of_range("embedding: index " + std::to_string(indices[i]) + " outside table of " +
                              std::to_string(rows) + " entries");
    std::copy_n(value(table).data() + indices[i] * width, width, y.data() + i * width);
  }
  Var out = push(std::move(y), "embedding", {table});
  set_backward(out, [this, table, out, indices, width] {
    const T* dy = nodes_[out.id].grad.data();
    T* dt = grad_ref(table).data();
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::int64_t c = 0; c < width; ++c) dt[indices[i] * width + c] += dy[i * width + c];
  });
  return out;
}

template <typename T>
Var Graph<T>::modulate(Var x, Var scale_shift) {
  const auto& xs = shape(x);
  const auto& ss = shape(scale_shift);
  if (xs.size() < 2 || ss.size() != 2 || ss[0] != xs[0] || ss[1] != 2 * xs[1])
    throw ShapeError("modulate: " + shape_string(xs) + " incompatible with scale/shift " + shape_string(ss));
  const std::int64_t batch = xs[0], channels = xs[1], spatial = trailing_size(xs, 2);
  Tensor<T> y(xs);
  const T* xp = value(x).data();
  const T* sp = value(scale_shift).data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t c = 0; c < channels; ++c) {
      const T a = T(1) + sp[b * 2 * channels + c];
      const T shift = sp[b * 2 * channels + channels + c];
      const std::int64_t base = (b * channels + c) * spatial;
      for (std::int64_t s = 0; s < spatial; ++s) y[base + s] = xp[base + s] * a + shift;
    }
  Var out = push(std::move(y), "modulate", {x, scale_shift});
  set_backward(out, [this, x, scale_shift, out, batch, channels, spatial] {
    const T* dy = nodes_[out.id].grad.data();
    const T* xp = value(x).data();
    const T* sp = value(scale_shift).data();
    T* dx = needs(x) ? grad_ref(x).data() : nullptr;
    T* ds = needs(scale_shift) ? grad_ref(scale_shift).data() : nullptr;
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t c = 0; c < channels; ++c) {
        const T a = T(1) + sp[b * 2 * channels + c];
        const std::int64_t base = (b * channels + c) * spatial;
        double dscale = 0.0, dshift = 0.0;
        for (std::int64_t s = 0; s < spatial; ++s) {
          if (dx) dx[base + s] += dy[base + s] * a;
          dscale += dy[base + s] * xp[base + s];
          dshift += dy[base + s];
        }
        if (ds) {
          ds[b * 2 * channels + c] += static_cast<T>(dscale);
          ds[b * 2 * channels + channels + c] += static_cast<T>(dshift);
        }
      }
  });
  return out;
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  require_same_shape(shape(a), shape(b), "add");
  Tensor<T> y = value(a);
  const Tensor<T>& bv = value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  Var out = push(std::move(y), "add", {a, b});
  set_backward(out, [this, a, b, out] {
    const Tensor<T>& dy = nodes_[out.id].grad;
    for (Var v : {a, b}) {
      if (!needs(v)) continue;
      Tensor<T>& g = grad_ref(v);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    }
  });
  return out;
}

template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  require_same_shape(shape(a), shape(b), "mul");
  Tensor<T> y = value(a);
  const Tensor<T>& bv = value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  Var out = push(std::move(y), "mul", {a, b});
  set_backward(out, [this, a, b, out] {
    const Tensor<T>& dy = nodes_[out.id].grad;
    if (needs(a)) {
      Tensor<T>& g = grad_ref(a);
      const Tensor<T>& bv = value(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * bv[i];
    }
    if (needs(b)) {
      Tensor<T>& g = grad_ref(b);
      const Tensor<T>& av = value(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * av[i];
    }
  });
  return out;
}

template <typename T>
Var Graph<T>::scale(Var a, double s) {
  Tensor<T> y = value(a);
  for (auto& v : y.values()) v *= static_cast<T>(s);
  Var out = push(std::move(y), "scale", {a});
  set_backward(out, [this, a, out, s] {
    const Tensor<T>& dy = nodes_[out.id].grad;
    Tensor<T>& g = grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * static_cast<T>(s);
  });
  return out;
}

template <typename T>
Var Graph<T>::square(Var a) {
  Tensor<T> y = value(a);
  for (auto& v : y.values()) v *= v;
  Var out = push(std::move(y), "square", {a});
  set_backward(out, [this, a, out] {
    const Tensor<T>& dy = nodes_[out.id].grad;
    const Tensor<T>& av = value(a);
    Tensor<T>& g = grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * T(2) * av[i];
  });
  return out;
}

template <typename T>
Var Graph<T>::sum(Var a) {
  const Tensor<T>& av = value(a);
  double total = 0.0;
  for (T v : av.values()) total += v;
  Var out = push(Tensor<T>(Shape{}, std::vector<T>{static_cast<T>(total)}), "sum", {a});
  set_backward(out, [this, a, out] {
    const T dy = nodes_[out.id].grad[0];
    Tensor<T>& g = grad_ref(a);
    for (auto& v : g.values()) v += dy;
  });
  return out;
}

template <typename T>
Var Graph<T>::concat_channels(Var a, Var b) {
  const auto& as = shape(a);
  const auto& bs = shape(b);
  if (as.size() < 2 || as.size() != bs.size() || as[0] != bs[0] ||
      !std::equal(as.begin() + 2, as.end(), bs.begin() + 2))
    throw ShapeError("concat_channels: " + shape_string(as) + " vs " + shape_string(bs));
  const std::int64_t batch = as[0], spatial = trailing_size(as, 2);
  const std::int64_t asz = as[1] * spatial, bsz = bs[1] * spatial;
  Shape os = as;
  os[1] = as[1] + bs[1];
  Tensor<T> y(os);
  for (std::int64_t i = 0; i < batch; ++i) {
    std::copy_n(value(a).data() + i * asz, asz, y.data() + i * (asz + bsz));
    std::copy_n(value(b).data() + i * bsz, bsz, y.data() + i * (asz + bsz) + asz);
  }
  Var out = push(std::move(y), "concat_channels", {a, b});
  set_backward(out, [this, a, b, out, batch, asz, bsz] {
    const T* dy = nodes_[out.id].grad.data();
    if (needs(a)) {
      T* g = grad_ref(a).data();
      for (std::int64_t i = 0; i < batch; ++i)
        for (std::int64_t j = 0; j < asz; ++j) g[i * asz + j] += dy[i * (asz + bsz) + j];
    }
    if (needs(b)) {
      T* g = grad_ref(b).data();
      for (std::int64_t i = 0; i < batch; ++i)
        for (std::int64_t j = 0; j < bsz; ++j) g[i * bsz + j] += dy[i * (asz + bsz) + asz + j];
    }
  });
  return out;
}

template <typename T>
Var Graph<T>::concat_features(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_features: no inputs");
  const std::int64_t batch = shape(parts[0]).at(0);
  std::vector<std::int64_t> widths;
  std::int64_t total = 0;
  for (Var p : parts) {
    const auto& s = shape(p);
    if (s.size() != 2 || s[0] != batch) throw ShapeError("concat_features: expected [B,n] inputs");
    widths.push_back(s[1]);
    total += s[1];
  }
  Tensor<T> y({batch, total});
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::int64_t i = 0; i < batch; ++i)
      std::copy_n(value(parts[k]).data() + i * widths[k], widths[k], y.data() + i * total + offset);
    offset += widths[k];
  }
  Node n;
  n.owned = std::move(y);
  n.op = "concat_features";
  require_finite(n.owned, n.op);
  if (track_)
    for (Var p : parts) n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  nodes_.push_back(std::move(n));
  Var out{static_cast<std::int32_t>(nodes_.size() - 1)};
  set_backward(out, [this, parts, widths, out, batch, total] {
    const T* dy = nodes_[out.id].grad.data();
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (needs(parts[k])) {
        T* g = grad_ref(parts[k]).data();
        for (std::int64_t i = 0; i < batch; ++i)
          for (std::int64_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += dy[i * total + offset + j];
      }
      offset += widths[k];
    }
  });
  return out;
}

template <typename T>
Var Graph<T>::masked_mse(Var prediction, Var target, Var mask) {
  require_same_shape(shape(prediction), shape(target), "masked_mse");
  require_same_shape(shape(prediction), shape(mask), "masked_mse");
  if (needs(target) || needs(mask)) throw std::invalid_argument("masked_mse: target and mask must be constants");
  const auto& ps = shape(prediction);
  if (ps.empty()) throw ShapeError("masked_mse: expected a batch dimension");
  const std::int64_t batch = ps[0], per = trailing_size(ps, 1);
  const T* p = value(prediction).data();
  const T* t = value(target).data();
  const T* m = value(mask).data();
  std::vector<T> inv_counts(static_cast<std::size_t>(batch));
  double loss = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    std::int64_t count = 0;
    double acc = 0.0;
    for (std::int64_t i = b * per; i < (b + 1) * per; ++i) {
      if (m[i] > T(0.5)) {
        const double d = static_cast<double>(p[i]) - t[i];
        acc += d * d;
        ++count;
      }
    }
    if (count == 0) throw std::invalid_argument("masked_mse: empty mask for sample " + std::to_string(b));
    inv_counts[b] = T(1) / static_cast<T>(count);
    loss += acc / static_cast<double>(count);
  }
  loss /= static_cast<double>(batch);
  Var out = push(Tensor<T>(Shape{}, std::vector<T>{static_cast<T>(loss)}), "masked_mse", {prediction});
  set_backward(out, [this, prediction, target, mask, out, batch, per, inv_counts] {
    const T dy = nodes_[out.id].grad[0];
    const T* p = value(prediction).data();
    const T* t = value(target).data();
    const T* m = value(mask).data();
    T* g = grad_ref(prediction).data();
    for (std::int64_t b = 0; b < batch; ++b) {
      const T coef = dy * T(2) * inv_counts[b] / static_cast<T>(batch);
      for (std::int64_t i = b * per; i < (b + 1) * per; ++i)
        if (m[i] > T(0.5)) g[i] += coef * (p[i] - t[i]);
    }
  });
  return out;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (!track_) throw std::logic_error("backward on a graph built without gradient tracking");
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_string(shape(loss)));
  for (auto& n : nodes_) n.grad = Tensor<T>();
  grad_ref(loss)[0] = T(1);
  for (std::int32_t id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.backward && !n.grad.empty()) n.backward();
  }
}

template <typename T>
Tensor<T> Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  return n.grad.empty() ? Tensor<T>(n.value().shape()) : n.grad;
}

template <typename T>
ParamMap<T> Graph<T>::parameter_gradients() const {
  ParamMap<T> out;
  for (const auto& [name, v] : params_) out.emplace(name, grad(v));
  return out;
}

template class Graph<float>;
template class Graph<double>;

template <typename T>
Evaluation<T> evaluate_with_gradients(const GraphBuilder<T>& builder, const ParamMap<T>& params) {
  Graph<T> g(true);
  Var loss = builder(g, params);
  g.backward(loss);
  Evaluation<T> result;
  result.loss = g.value(loss)[0];
  result.gradients = g.parameter_gradients();
  for (const auto& [name, t] : params) {
    if (!result.gradients.contains(name)) result.gradients.emplace(name, Tensor<T>(t.shape()));
  }
  return result;
}

template <typename T>
T evaluate(const GraphBuilder<T>& builder, const ParamMap<T>& params) {
  Graph<T> g(false);
  Var loss = builder(g, params);
  if (g.value(loss).size() != 1) throw ShapeError("evaluate: graph does not terminate in a scalar");
  return g.value(loss)[0];
}

template Evaluation<float> evaluate_with_gradients(const GraphBuilder<float>&, const ParamMap<float>&);
template Evaluation<double> evaluate_with_gradients(const GraphBuilder<double>&, const ParamMap<double>&);
template float evaluate(const GraphBuilder<float>&, const ParamMap<float>&);
template double evaluate(const GraphBuilder<double>&, const ParamMap<double>&);

template <std::same_as<double> T>
std::vector<T> finite_difference_probes(const GraphBuilder<T>& builder, const ParamMap<T>& params,
                                        const std::vector<ParameterProbe>& probes, T step) {
  if (!(step > 0)) throw std::invalid_argument("finite difference step must be positive");
  ParamMap<T> work = params;
  std::vector<T> out;
  out.reserve(probes.size());
  for (const auto& probe : probes) {
    auto it = work.find(probe.name);
    if (it == work.end()) throw std::out_of_range("unknown parameter '" + probe.name + "'");
    if (probe.index >= it->second.size()) throw std::out_of_range("probe index outside parameter " + probe.name);
    T& slot = it->second[probe.index];
    const T saved = slot;
    slot = saved + step;
    const T up = evaluate(builder, work);
    slot = saved - step;
    const T down = evaluate(builder, work);
    slot = saved;
    out.push_back((up - down) / (T(2) * step));
  }
  return out;
}

template <std::same_as<double> T>
ParamMap<T> finite_difference_gradients(const GraphBuilder<T>& builder, const ParamMap<T>& params, T step) {
  if (!(step > 0)) throw std::invalid_argument("finite difference step must be positive");
  ParamMap<T> out;
  for (const auto& [name, t] : params) {
    std::vector<ParameterProbe> probes;
    for (std::size_t i = 0; i < t.size(); ++i) probes.push_back({name, i});
    out.emplace(name, Tensor<T>(t.shape(), finite_difference_probes(builder, params, probes, step)));
  }
  return out;
}

template ParamMap<double> finite_difference_gradients(const GraphBuilder<double>&, const ParamMap<double>&, double);
template std::vector<double> finite_difference_probes(const GraphBuilder<double>&, const ParamMap<double>&,
                                                      const std::vector<ParameterProbe>&, double);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int padding) {
  Graph<T> g(false);
  Var out = g.conv2d(g.constant(input), g.constant(kernel), std::nullopt, stride, padding);
  return g.value(out);
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, int, int);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, int, int);

}  // namespace dinp
