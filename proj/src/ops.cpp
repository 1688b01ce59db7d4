#include "echotrack/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

#include "echotrack/parallel.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {
namespace ops {
namespace {

using MatR = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using Impl = std::shared_ptr<TensorImpl>;

template <class... Ts>
bool tracking(const Ts&... ts) {
  return Tape::active() != nullptr && (ts.requires_grad() || ...);
}

void attach(Tensor& y, Tape::BackwardFn fn) {
  y.set_requires_grad(true);
  Tape::active()->record(y.impl(), std::move(fn));
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined operand");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require_defined(op, a);
  require_defined(op, b);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank, const char* what) {
  require_defined(op, t);
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + to_string(t.shape()));
  }
}

std::size_t last_extent(const char* op, const Tensor& t) {
  require_defined(op, t);
  if (t.rank() == 0) throw ShapeError(std::string(op) + ": scalar operand has no last axis");
  return t.shape().back();
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const auto av = a.data();
  const auto bv = b.data();
  Buffer out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor y(a.shape(), std::move(out));
  if (tracking(a, b)) {
    attach(y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      const auto& g = yi->grad;
      for (const auto& in : {ai, bi}) {
        if (!in->requires_grad) continue;
        auto& gi = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto av = a.data();
  const auto bv = b.data();
  Buffer out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor y(a.shape(), std::move(out));
  if (tracking(a, b)) {
    attach(y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto av = a.data();
  const auto bv = b.data();
  Buffer out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor y(a.shape(), std::move(out));
  if (tracking(a, b)) {
    attach(y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    });
  }
  return y;
}

Tensor relu(const Tensor& x) {
  require_defined("relu", x);
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > real(0) ? xv[i] : real(0);
  Tensor y(x.shape(), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl()] {
      const auto& g = yi->grad;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xi->data[i] > real(0)) gx[i] += g[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, real factor) {
  require_defined("scale", x);
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  Tensor y(x.shape(), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl(), factor] {
      const auto& g = yi->grad;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return y;
}

Tensor abs(const Tensor& x) {
  require_defined("abs", x);
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(xv[i]);
  Tensor y(x.shape(), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl()] {
      const auto& g = yi->grad;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const real v = xi->data[i];
        if (v > real(0)) {
          gx[i] += g[i];
        } else if (v < real(0)) {
          gx[i] -= g[i];
        }
      }
    });
  }
  return y;
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b, real factor) {
  switch (kind) {
    case Elementwise::add:
      return add(a, b);
    case Elementwise::sub:
      return sub(a, b);
    case Elementwise::mul:
      return mul(a, b);
    case Elementwise::relu:
      return relu(a);
    case Elementwise::scale:
      return scale(a, factor);
  }
  throw std::invalid_argument("elementwise: unknown kind");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t p = last_extent("add_bias", x);
  require_rank("add_bias", bias, 1, "bias");
  if (bias.extent(0) != p) {
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not match last axis of " +
                     to_string(x.shape()));
  }
  const auto xv = x.data();
  const auto bv = bias.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % p];
  Tensor y(x.shape(), std::move(out));
  if (tracking(x, bias)) {
    attach(y, [xi = x.impl(), bi = bias.impl(), yi = y.impl(), p] {
      const auto& g = yi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % p] += g[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  require_defined("sum", x);
  real s = 0;
  for (auto v : x.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl()] {
      const real g = yi->grad[0];
      auto& gx = xi->grad_buffer();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  require_defined("mean", x);
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), real(1) / static_cast<real>(x.numel()));
}

// ---------------------------------------------------------------- products

namespace {

Tensor dense(const Tensor& x, std::size_t rows, std::size_t k, const Tensor& w,
             const Tensor& bias, Shape out_shape) {
  const std::size_t p = w.extent(1);
  Buffer out(rows * p);
  {
    CMapR xm(x.data().data(), rows, k);
    CMapR wm(w.data().data(), k, p);
    MapR ym(out.data(), rows, p);
    ym.noalias() = xm * wm;
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<real, 1, Eigen::Dynamic>> bm(bias.data().data(), p);
      ym.rowwise() += bm;
    }
  }
  Tensor y(std::move(out_shape), std::move(out));
  const bool with_bias = bias.defined();
  if (tracking(x, w) || (with_bias && tracking(bias))) {
    attach(y, [xi = x.impl(), wi = w.impl(), bi = with_bias ? bias.impl() : Impl{}, yi = y.impl(),
               rows, k, p] {
      CMapR gy(yi->grad.data(), rows, p);
      if (xi->requires_grad) {
        MapR gx(xi->grad_buffer().data(), rows, k);
        gx.noalias() += gy * CMapR(wi->data.data(), k, p).transpose();
      }
      if (wi->requires_grad) {
        MapR gw(wi->grad_buffer().data(), k, p);
        gw.noalias() += CMapR(xi->data.data(), rows, k).transpose() * gy;
      }
      if (bi && bi->requires_grad) {
        Eigen::Map<Eigen::Matrix<real, 1, Eigen::Dynamic>> gb(bi->grad_buffer().data(), p);
        gb += gy.colwise().sum();
      }
    });
  }
  return y;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2, "left operand");
  require_rank("matmul", b, 2, "right operand");
  if (a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) + " . " +
                     to_string(b.shape()));
  }
  return dense(a, a.extent(0), a.extent(1), b, Tensor{}, {a.extent(0), b.extent(1)});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const std::size_t k = last_extent("linear", x);
  require_rank("linear", w, 2, "weight");
  if (w.extent(0) != k) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " does not match weight " +
                     to_string(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != w.extent(1))) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                     to_string(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.extent(1);
  return dense(x, x.numel() / k, k, w, bias, std::move(out_shape));
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank("bmm", a, 3, "left operand");
  require_rank("bmm", b, 3, "right operand");
  const std::size_t batch = a.extent(0);
  const std::size_t m = a.extent(1);
  const std::size_t k = a.extent(2);
  const std::size_t kb = transpose_b ? b.extent(2) : b.extent(1);
  const std::size_t p = transpose_b ? b.extent(1) : b.extent(2);
  if (b.extent(0) != batch || kb != k) {
    throw ShapeError(std::string("bmm: incompatible operands ") + to_string(a.shape()) +
                     (transpose_b ? " . T" : " . ") + to_string(b.shape()));
  }
  Buffer out(batch * m * p);
  const real* av = a.data().data();
  const real* bv = b.data().data();
  parallel_for(batch, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      CMapR am(av + i * m * k, m, k);
      MapR ym(out.data() + i * m * p, m, p);
      if (transpose_b) {
        ym.noalias() = am * CMapR(bv + i * p * k, p, k).transpose();
      } else {
        ym.noalias() = am * CMapR(bv + i * k * p, k, p);
      }
    }
  });
  Tensor y({batch, m, p}, std::move(out));
  if (tracking(a, b)) {
    attach(y, [ai = a.impl(), bi = b.impl(), yi = y.impl(), batch, m, k, p, transpose_b] {
      real* ga = ai->requires_grad ? ai->grad_buffer().data() : nullptr;
      real* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
      for (std::size_t i = 0; i < batch; ++i) {
        CMapR gy(yi->grad.data() + i * m * p, m, p);
        CMapR am(ai->data.data() + i * m * k, m, k);
        if (transpose_b) {
          CMapR bm(bi->data.data() + i * p * k, p, k);
          if (ga) MapR(ga + i * m * k, m, k).noalias() += gy * bm;
          if (gb) MapR(gb + i * p * k, p, k).noalias() += gy.transpose() * am;
        } else {
          CMapR bm(bi->data.data() + i * k * p, k, p);
          if (ga) MapR(ga + i * m * k, m, k).noalias() += gy * bm.transpose();
          if (gb) MapR(gb + i * k * p, k, p).noalias() += am.transpose() * gy;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvGeometry {
  std::size_t batch, h, w, cin, kh, kw, cout, stride, ho, wo;
  std::ptrdiff_t pad_h, pad_w;
  std::size_t patch() const { return kh * kw * cin; }
  std::size_t rows() const { return batch * ho * wo; }
};

// cols[(b, oy, ox), (ky, kx, c)] = x[b, oy*s - pad + ky, ox*s - pad + kx, c]
void im2col(const ConvGeometry& g, const real* x, real* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        real* row = cols + ((b * g.ho + oy) * g.wo + ox) * patch;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - g.pad_h;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - g.pad_w;
            real* dst = row + (ky * g.kw + kx) * g.cin;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) ||
                ix >= static_cast<std::ptrdiff_t>(g.w)) {
              std::fill(dst, dst + g.cin, real(0));
            } else {
              const real* src = x + ((b * g.h + static_cast<std::size_t>(iy)) * g.w +
                                     static_cast<std::size_t>(ix)) *
                                        g.cin;
              std::copy(src, src + g.cin, dst);
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const real* cols, real* gx) {
  const std::size_t patch = g.patch();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const real* row = cols + ((b * g.ho + oy) * g.wo + ox) * patch;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - g.pad_h;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - g.pad_w;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const real* src = row + (ky * g.kw + kx) * g.cin;
            real* dst = gx + ((b * g.h + static_cast<std::size_t>(iy)) * g.w +
                              static_cast<std::size_t>(ix)) *
                                 g.cin;
            for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  require_defined("conv2d", x);
  require_rank("conv2d", w, 4, "kernel");
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("conv2d: input must be [H,W,C] or [B,H,W,C], got " + to_string(x.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const bool batched = x.rank() == 4;
  ConvGeometry g{};
  g.batch = batched ? x.extent(0) : 1;
  g.h = x.extent(batched ? 1 : 0);
  g.w = x.extent(batched ? 2 : 1);
  g.cin = x.shape().back();
  g.kh = w.extent(0);
  g.kw = w.extent(1);
  g.cout = w.extent(3);
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd, got " + to_string(w.shape()));
  }
  if (w.extent(2) != g.cin) {
    throw ShapeError("conv2d: channel mismatch, input " + to_string(x.shape()) + " vs kernel " +
                     to_string(w.shape()));
  }
  g.stride = stride;
  g.pad_h = static_cast<std::ptrdiff_t>((g.kh - 1) / 2);
  g.pad_w = static_cast<std::ptrdiff_t>((g.kw - 1) / 2);
  g.ho = (g.h + stride - 1) / stride;
  g.wo = (g.w + stride - 1) / stride;

  const bool direct = g.kh == 1 && g.kw == 1 && stride == 1;
  Buffer cols;
  if (!direct) {
    cols.resize(g.rows() * g.patch());
    im2col(g, x.data().data(), cols.data());
  }
  const real* cv = direct ? x.data().data() : cols.data();
  Buffer out(g.rows() * g.cout);
  MapR(out.data(), g.rows(), g.cout).noalias() =
      CMapR(cv, g.rows(), g.patch()) * CMapR(w.data().data(), g.patch(), g.cout);

  Shape out_shape = batched ? Shape{g.batch, g.ho, g.wo, g.cout} : Shape{g.ho, g.wo, g.cout};
  Tensor y(std::move(out_shape), std::move(out));
  if (tracking(x, w)) {
    attach(y, [xi = x.impl(), wi = w.impl(), yi = y.impl(), g, direct] {
      CMapR gy(yi->grad.data(), g.rows(), g.cout);
      if (wi->requires_grad) {
        Buffer c;
        const real* cv = xi->data.data();
        if (!direct) {
          c.resize(g.rows() * g.patch());
          im2col(g, xi->data.data(), c.data());
          cv = c.data();
        }
        MapR(wi->grad_buffer().data(), g.patch(), g.cout).noalias() +=
            CMapR(cv, g.rows(), g.patch()).transpose() * gy;
      }
      if (xi->requires_grad) {
        CMapR wm(wi->data.data(), g.patch(), g.cout);
        if (direct) {
          MapR(xi->grad_buffer().data(), g.rows(), g.patch()).noalias() += gy * wm.transpose();
        } else {
          Buffer gc(g.rows() * g.patch());
          MapR(gc.data(), g.rows(), g.patch()).noalias() = gy * wm.transpose();
          col2im_add(g, gc.data(), xi->grad_buffer().data());
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- row-wise

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t n = last_extent("softmax_lastdim", x);
  if (n == 0) throw ShapeError("softmax_lastdim: empty last axis in " + to_string(x.shape()));
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const real* src = xv.data() + r * n;
    real* dst = out.data() + r * n;
    const real mx = *std::max_element(src, src + n);
    real s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dst[i] = std::exp(src[i] - mx);
      s += dst[i];
    }
    for (std::size_t i = 0; i < n; ++i) dst[i] /= s;
  }
  Tensor y(x.shape(), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl(), n, rows] {
      auto& gx = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const real* yv = yi->data.data() + r * n;
        const real* gy = yi->grad.data() + r * n;
        real dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += gy[i] * yv[i];
        for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += yv[i] * (gy[i] - dot);
      }
    });
  }
  return y;
}

Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  const std::size_t n = last_extent("layer_norm_lastdim", x);
  if (n == 0) throw ShapeError("layer_norm_lastdim: empty last axis in " + to_string(x.shape()));
  for (const Tensor* p : {&gain, &bias}) {
    if (p->defined() && (p->rank() != 1 || p->extent(0) != n)) {
      throw ShapeError("layer_norm_lastdim: affine parameter " + to_string(p->shape()) +
                       " does not match " + to_string(x.shape()));
    }
  }
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  Buffer normed(xv.size());
  Buffer inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const real* src = xv.data() + r * n;
    real mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += src[i];
    mu /= static_cast<real>(n);
    real var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<real>(n);
    const real inv = real(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t i = 0; i < n; ++i) normed[r * n + i] = (src[i] - mu) * inv;
  }
  Buffer out = normed;
  if (gain.defined() || bias.defined()) {
    const auto gv = gain.data();
    const auto bv = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::size_t c = i % n;
      out[i] = out[i] * (gain.defined() ? gv[c] : real(1)) + (bias.defined() ? bv[c] : real(0));
    }
  }
  Tensor y(x.shape(), std::move(out));
  const bool affine_tracked = (gain.defined() && tracking(gain)) || (bias.defined() && tracking(bias));
  if (tracking(x) || affine_tracked) {
    attach(y, [xi = x.impl(), gi = gain.defined() ? gain.impl() : Impl{},
               bi = bias.defined() ? bias.impl() : Impl{}, yi = y.impl(), normed = std::move(normed),
               inv_std = std::move(inv_std), n, rows] {
      const auto& gy = yi->grad;
      if (bi && bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i % n] += gy[i];
      }
      if (gi && gi->requires_grad) {
        auto& gg = gi->grad_buffer();
        for (std::size_t i = 0; i < gy.size(); ++i) gg[i % n] += gy[i] * normed[i];
      }
      if (!xi->requires_grad) return;
      auto& gx = xi->grad_buffer();
      Buffer gxhat(n);
      for (std::size_t r = 0; r < rows; ++r) {
        real mean_g = 0;
        real mean_gx = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const real gain_i = gi ? gi->data[i] : real(1);
          gxhat[i] = gy[r * n + i] * gain_i;
          mean_g += gxhat[i];
          mean_gx += gxhat[i] * normed[r * n + i];
        }
        mean_g /= static_cast<real>(n);
        mean_gx /= static_cast<real>(n);
        for (std::size_t i = 0; i < n; ++i) {
          gx[r * n + i] += inv_std[r] * (gxhat[i] - mean_g - normed[r * n + i] * mean_gx);
        }
      }
    });
  }
  return y;
}

Tensor l2_normalize_lastdim(const Tensor& x, real eps) {
  const std::size_t n = last_extent("l2_normalize_lastdim", x);
  const std::size_t rows = n ? x.numel() / n : 0;
  const auto xv = x.data();
  Buffer out(xv.size());
  Buffer norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    real ss = eps * eps;
    for (std::size_t i = 0; i < n; ++i) ss += xv[r * n + i] * xv[r * n + i];
    norms[r] = std::sqrt(ss);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = xv[r * n + i] / norms[r];
  }
  Tensor y(x.shape(), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl(), norms = std::move(norms), n, rows] {
      auto& gx = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const real* yv = yi->data.data() + r * n;
        const real* gy = yi->grad.data() + r * n;
        real dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += yv[i] * gy[i];
        for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += (gy[i] - yv[i] * dot) / norms[r];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- sampling

namespace {

struct Corner {
  std::ptrdiff_t x, y;
  real w, dwdx, dwdy;
};

// The four cells around (x, y) with bilinear weights and weight derivatives.
std::array<Corner, 4> corners(real x, real y) {
  const real fx0 = std::floor(x);
  const real fy0 = std::floor(y);
  const real ax = x - fx0;
  const real ay = y - fy0;
  const auto x0 = static_cast<std::ptrdiff_t>(fx0);
  const auto y0 = static_cast<std::ptrdiff_t>(fy0);
  return {{{x0, y0, (1 - ax) * (1 - ay), -(1 - ay), -(1 - ax)},
           {x0 + 1, y0, ax * (1 - ay), (1 - ay), -ax},
           {x0, y0 + 1, (1 - ax) * ay, -ay, (1 - ax)},
           {x0 + 1, y0 + 1, ax * ay, ay, ax}}};
}

bool sampleable(real x, real y) {
  // Far outside the map every corner is missing; also keeps the integer cast defined.
  constexpr real kLimit = real(1e7);
  return std::isfinite(x) && std::isfinite(y) && std::abs(x) < kLimit && std::abs(y) < kLimit;
}

}  // namespace

Tensor bilinear_sample(const Tensor& map, const Tensor& coords) {
  require_defined("bilinear_sample", map);
  require_defined("bilinear_sample", coords);
  const bool batched = map.rank() == 4;
  if (!(map.rank() == 3 && coords.rank() == 2) && !(batched && coords.rank() == 3)) {
    throw ShapeError("bilinear_sample: expected map [H,W,d] with coords [P,2] or map [B,H,W,d] "
                     "with coords [B,P,2], got " +
                     to_string(map.shape()) + " and " + to_string(coords.shape()));
  }
  const std::size_t batch = batched ? map.extent(0) : 1;
  const std::size_t h = map.extent(batched ? 1 : 0);
  const std::size_t w = map.extent(batched ? 2 : 1);
  const std::size_t d = map.shape().back();
  const std::size_t points = coords.extent(batched ? 1 : 0);
  if (coords.shape().back() != 2 || (batched && coords.extent(0) != batch)) {
    throw ShapeError("bilinear_sample: coords " + to_string(coords.shape()) +
                     " incompatible with map " + to_string(map.shape()));
  }
  const real* mv = map.data().data();
  const real* cv = coords.data().data();
  Buffer out(batch * points * d, real(0));
  parallel_for(batch * points, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t bp = lo; bp < hi; ++bp) {
      const std::size_t b = bp / points;
      const real x = cv[bp * 2];
      const real y = cv[bp * 2 + 1];
      if (!sampleable(x, y)) continue;
      real* dst = out.data() + bp * d;
      for (const auto& c : corners(x, y)) {
        if (c.w == real(0) || c.x < 0 || c.y < 0 || c.x >= static_cast<std::ptrdiff_t>(w) ||
            c.y >= static_cast<std::ptrdiff_t>(h)) {
          continue;
        }
        const real* src = mv + ((b * h + static_cast<std::size_t>(c.y)) * w +
                                static_cast<std::size_t>(c.x)) *
                                   d;
        for (std::size_t k = 0; k < d; ++k) dst[k] += c.w * src[k];
      }
    }
  }, 64);
  Shape out_shape = batched ? Shape{batch, points, d} : Shape{points, d};
  Tensor y(std::move(out_shape), std::move(out));
  if (tracking(map, coords)) {
    attach(y, [mi = map.impl(), ci = coords.impl(), yi = y.impl(), batch, h, w, d, points] {
      real* gm = mi->requires_grad ? mi->grad_buffer().data() : nullptr;
      real* gc = ci->requires_grad ? ci->grad_buffer().data() : nullptr;
      const real* mv = mi->data.data();
      for (std::size_t bp = 0; bp < batch * points; ++bp) {
        const std::size_t b = bp / points;
        const real x = ci->data[bp * 2];
        const real y = ci->data[bp * 2 + 1];
        if (!sampleable(x, y)) continue;
        const real* gy = yi->grad.data() + bp * d;
        for (const auto& c : corners(x, y)) {
          if (c.x < 0 || c.y < 0 || c.x >= static_cast<std::ptrdiff_t>(w) ||
              c.y >= static_cast<std::ptrdiff_t>(h)) {
            continue;
          }
          const std::size_t off = ((b * h + static_cast<std::size_t>(c.y)) * w +
                                   static_cast<std::size_t>(c.x)) *
                                  d;
          if (gm) {
            for (std::size_t k = 0; k < d; ++k) gm[off + k] += c.w * gy[k];
          }
          if (gc) {
            real dot = 0;
            for (std::size_t k = 0; k < d; ++k) dot += mv[off + k] * gy[k];
            gc[bp * 2] += c.dwdx * dot;
            gc[bp * 2 + 1] += c.dwdy * dot;
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- layout

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined("reshape", x);
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor y(std::move(shape), Buffer(x.data().begin(), x.data().end()));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl()] {
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i];
    });
  }
  return y;
}

namespace {

// For each output element (row-major over the permuted shape), the offset of
// the source element.
std::vector<std::size_t> permutation_offsets(const Shape& in, std::span<const std::size_t> axes) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  const std::size_t n = numel(in);
  std::vector<std::size_t> offsets(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    offsets[o] = src;
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      src += strides[a];
      if (idx[a] < out[a]) break;
      src -= strides[a] * idx[a];
      idx[a] = 0;
    }
  }
  return offsets;
}

}  // namespace

Tensor permute(const Tensor& x, std::span<const std::size_t> axes) {
  require_defined("permute", x);
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool valid = axes.size() == r;
  for (auto a : axes) {
    if (!valid || a >= r || seen[a]) {
      valid = false;
      break;
    }
    seen[a] = true;
  }
  if (!valid) throw ShapeError("permute: invalid axis order for shape " + to_string(x.shape()));
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.extent(axes[i]);
  auto offsets = permutation_offsets(x.shape(), axes);
  const auto xv = x.data();
  Buffer out(offsets.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[offsets[o]];
  Tensor y(std::move(out_shape), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl(), offsets = std::move(offsets)] {
      auto& gx = xi->grad_buffer();
      for (std::size_t o = 0; o < offsets.size(); ++o) gx[offsets[o]] += yi->grad[o];
    });
  }
  return y;
}

Tensor permute(const Tensor& x, std::initializer_list<std::size_t> axes) {
  return permute(x, std::span<const std::size_t>(axes.begin(), axes.size()));
}

Tensor concat_lastdim(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no operands");
  const Shape& first = parts[0].shape();
  last_extent("concat_lastdim", parts[0]);
  const std::size_t rows = parts[0].numel() / first.back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const std::size_t wdt = last_extent("concat_lastdim", p);
    Shape lead(p.shape().begin(), p.shape().end() - 1);
    if (p.rank() != first.size() || !std::equal(lead.begin(), lead.end(), first.begin())) {
      throw ShapeError("concat_lastdim: leading extents differ, " + to_string(first) + " vs " +
                       to_string(p.shape()));
    }
    widths.push_back(wdt);
    total += wdt;
  }
  Buffer out(rows * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + col);
    }
    col += widths[k];
  }
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor y(std::move(out_shape), std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || tracking(p);
  if (any) {
    std::vector<Impl> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    attach(y, [impls = std::move(impls), widths = std::move(widths), yi = y.impl(), rows, total] {
      std::size_t col = 0;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        if (impls[k]->requires_grad) {
          auto& g = impls[k]->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < widths[k]; ++c) {
              g[r * widths[k] + c] += yi->grad[r * total + col + c];
            }
          }
        }
        col += widths[k];
      }
    });
  }
  return y;
}

Tensor concat_lastdim(std::initializer_list<Tensor> parts) {
  return concat_lastdim(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor slice_lastdim(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = last_extent("slice_lastdim", x);
  if (begin > end || end > n) {
    throw ShapeError("slice_lastdim: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const std::size_t wdt = end - begin;
  const auto xv = x.data();
  Buffer out(rows * wdt);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * n + begin, wdt, out.data() + r * wdt);
  }
  Shape out_shape = x.shape();
  out_shape.back() = wdt;
  Tensor y(std::move(out_shape), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl(), rows, n, wdt, begin] {
      auto& gx = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < wdt; ++c) gx[r * n + begin + c] += yi->grad[r * wdt + c];
      }
    });
  }
  return y;
}

Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices) {
  require_defined("index_select", x);
  if (axis >= x.rank()) {
    throw ShapeError("index_select: axis " + std::to_string(axis) + " out of range for " +
                     to_string(x.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t n = s[axis];
  for (auto i : indices) {
    if (i >= n) {
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for axis of " +
                       "extent " + std::to_string(n));
    }
  }
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  const std::size_t m = indices.size();
  const auto xv = x.data();
  Buffer out(outer * m * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      std::copy_n(xv.data() + (o * n + indices[j]) * inner, inner,
                  out.data() + (o * m + j) * inner);
    }
  }
  Shape out_shape = s;
  out_shape[axis] = m;
  Tensor y(std::move(out_shape), std::move(out));
  if (tracking(x)) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    attach(y, [xi = x.impl(), yi = y.impl(), idx = std::move(idx), outer, n, inner] {
      auto& gx = xi->grad_buffer();
      const std::size_t m = idx.size();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < m; ++j) {
          real* dst = gx.data() + (o * n + idx[j]) * inner;
          const real* src = yi->grad.data() + (o * m + j) * inner;
          for (std::size_t k = 0; k < inner; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return y;
}

Tensor repeat_leading(const Tensor& x, std::size_t times) {
  require_defined("repeat_leading", x);
  const auto xv = x.data();
  const std::size_t n = xv.size();
  Buffer out(times * n);
  for (std::size_t r = 0; r < times; ++r) std::copy(xv.begin(), xv.end(), out.begin() + r * n);
  Shape out_shape;
  out_shape.reserve(x.rank() + 1);
  out_shape.push_back(times);
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  Tensor y(std::move(out_shape), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl(), times, n] {
      auto& gx = xi->grad_buffer();
      for (std::size_t r = 0; r < times; ++r) {
        for (std::size_t i = 0; i < n; ++i) gx[i] += yi->grad[r * n + i];
      }
    });
  }
  return y;
}

Tensor time_shift(const Tensor& x, std::ptrdiff_t offset, std::size_t channel_begin,
                  std::size_t channel_end) {
  const std::size_t d = last_extent("time_shift", x);
  if (x.rank() < 2) throw ShapeError("time_shift: need [T, ..., d], got " + to_string(x.shape()));
  if (channel_begin > channel_end || channel_end > d) {
    throw ShapeError("time_shift: channel range outside " + to_string(x.shape()));
  }
  const std::size_t frames = x.extent(0);
  const std::size_t per_frame = x.numel() / frames;
  const std::size_t sites = per_frame / d;
  const auto xv = x.data();
  Buffer out(xv.begin(), xv.end());
  const auto src_frame = [&](std::size_t t) -> std::ptrdiff_t {
    return static_cast<std::ptrdiff_t>(t) - offset;
  };
  for (std::size_t t = 0; t < frames; ++t) {
    const std::ptrdiff_t s = src_frame(t);
    const bool valid = s >= 0 && s < static_cast<std::ptrdiff_t>(frames);
    for (std::size_t p = 0; p < sites; ++p) {
      real* dst = out.data() + t * per_frame + p * d;
      for (std::size_t c = channel_begin; c < channel_end; ++c) {
        dst[c] = valid ? xv[static_cast<std::size_t>(s) * per_frame + p * d + c] : real(0);
      }
    }
  }
  Tensor y(x.shape(), std::move(out));
  if (tracking(x)) {
    attach(y, [xi = x.impl(), yi = y.impl(), offset, channel_begin, channel_end, frames, per_frame,
               sites, d] {
      auto& gx = xi->grad_buffer();
      const auto& gy = yi->grad;
      for (std::size_t t = 0; t < frames; ++t) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) - offset;
        const bool valid = s >= 0 && s < static_cast<std::ptrdiff_t>(frames);
        for (std::size_t p = 0; p < sites; ++p) {
          const std::size_t base = t * per_frame + p * d;
          for (std::size_t c = 0; c < d; ++c) {
            if (c < channel_begin || c >= channel_end) {
              gx[base + c] += gy[base + c];
            } else if (valid) {
              gx[static_cast<std::size_t>(s) * per_frame + p * d + c] += gy[base + c];
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace ops
}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
