#include "focalerrornet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace fen::ops {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, ErrorKind::dimension,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
              to_string(s));
}

// Geometry of one conv3d call.
struct ConvGeom {
  std::size_t n, cin, d, h, w;
  std::size_t cout, k, stride, pad, groups;
  std::size_t od, oh, ow;
  std::size_t cin_g() const { return cin / groups; }
  std::size_t cout_g() const { return cout / groups; }
  std::size_t k3() const { return k * k * k; }
  std::size_t s_in() const { return d * h * w; }
  std::size_t s_out() const { return od * oh * ow; }
  bool direct_map() const { return k == 1 && stride == 1 && pad == 0; }
};

// Valid output range [lo, hi) along one axis for kernel tap `tap`.
inline void tap_range(std::size_t tap, std::size_t pad, std::size_t stride,
                      std::size_t in, std::size_t out, std::size_t& lo, std::size_t& hi) {
  // i = o*stride + tap - pad must lie in [0, in)
  const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(tap) - static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t l = t >= 0 ? 0 : (-t + s - 1) / s;
  std::ptrdiff_t h = (static_cast<std::ptrdiff_t>(in) - 1 - t);
  h = h < 0 ? -1 : h / s;
  h = std::min<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(out) - 1);
  lo = static_cast<std::size_t>(l);
  hi = h < l ? lo : static_cast<std::size_t>(h + 1);
}

// col is (s_out x cin_g*k3), column-major.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t so = g.s_out();
  for (std::size_t ci = 0; ci < g.cin_g(); ++ci) {
    const T* xc = x + ci * g.s_in();
    for (std::size_t kz = 0; kz < g.k; ++kz)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          T* dst = col + (((ci * g.k + kz) * g.k + ky) * g.k + kx) * so;
          std::fill(dst, dst + so, T(0));
          std::size_t zlo, zhi, ylo, yhi, xlo, xhi;
          tap_range(kz, g.pad, g.stride, g.d, g.od, zlo, zhi);
          tap_range(ky, g.pad, g.stride, g.h, g.oh, ylo, yhi);
          tap_range(kx, g.pad, g.stride, g.w, g.ow, xlo, xhi);
          for (std::size_t oz = zlo; oz < zhi; ++oz) {
            const std::size_t iz = oz * g.stride + kz - g.pad;
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const std::size_t iy = oy * g.stride + ky - g.pad;
              if (xhi <= xlo) continue;
              const T* src = xc + (iz * g.h + iy) * g.w + (xlo * g.stride + kx - g.pad);
              T* row = dst + (oz * g.oh + oy) * g.ow + xlo;
              const std::size_t len = xhi - xlo;
              if (g.stride == 1) {
                for (std::size_t j = 0; j < len; ++j) row[j] = src[j];
              } else {
                for (std::size_t j = 0; j < len; ++j) row[j] = src[j * g.stride];
              }
            }
          }
        }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* gx) {
  const std::size_t so = g.s_out();
  for (std::size_t ci = 0; ci < g.cin_g(); ++ci) {
    T* gxc = gx + ci * g.s_in();
    for (std::size_t kz = 0; kz < g.k; ++kz)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const T* src = col + (((ci * g.k + kz) * g.k + ky) * g.k + kx) * so;
          std::size_t zlo, zhi, ylo, yhi, xlo, xhi;
          tap_range(kz, g.pad, g.stride, g.d, g.od, zlo, zhi);
          tap_range(ky, g.pad, g.stride, g.h, g.oh, ylo, yhi);
          tap_range(kx, g.pad, g.stride, g.w, g.ow, xlo, xhi);
          for (std::size_t oz = zlo; oz < zhi; ++oz) {
            const std::size_t iz = oz * g.stride + kz - g.pad;
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const std::size_t iy = oy * g.stride + ky - g.pad;
              if (xhi <= xlo) continue;
              T* dst = gxc + (iz * g.h + iy) * g.w + (xlo * g.stride + kx - g.pad);
              const T* row = src + (oz * g.oh + oy) * g.ow + xlo;
              for (std::size_t j = 0; j < xhi - xlo; ++j) dst[j * g.stride] += row[j];
            }
          }
        }
  }
}

// Depth-wise forward for one channel: out += corr(in, wk).
template <typename T>
void depthwise_forward(const T* in, const T* wk, const ConvGeom& g, T* out) {
  for (std::size_t kz = 0; kz < g.k; ++kz) {
    std::size_t zlo, zhi;
    tap_range(kz, g.pad, g.stride, g.d, g.od, zlo, zhi);
    for (std::size_t oz = zlo; oz < zhi; ++oz) {
      const std::size_t iz = oz * g.stride + kz - g.pad;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        std::size_t ylo, yhi;
        tap_range(ky, g.pad, g.stride, g.h, g.oh, ylo, yhi);
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const std::size_t iy = oy * g.stride + ky - g.pad;
          T* orow = out + (oz * g.oh + oy) * g.ow;
          const T* irow = in + (iz * g.h + iy) * g.w;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            std::size_t xlo, xhi;
            tap_range(kx, g.pad, g.stride, g.w, g.ow, xlo, xhi);
            if (xhi <= xlo) continue;
            const T wv = wk[(kz * g.k + ky) * g.k + kx];
            const T* src = irow + (xlo * g.stride + kx - g.pad);
            T* dst = orow + xlo;
            const std::size_t len = xhi - xlo;
            if (g.stride == 1) {
              for (std::size_t j = 0; j < len; ++j) dst[j] += wv * src[j];
            } else {
              for (std::size_t j = 0; j < len; ++j) dst[j] += wv * src[j * g.stride];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const T* in, const T* wk, const T* gout, const ConvGeom& g,
                        T* gin, T* gwk) {
  for (std::size_t kz = 0; kz < g.k; ++kz) {
    std::size_t zlo, zhi;
    tap_range(kz, g.pad, g.stride, g.d, g.od, zlo, zhi);
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      std::size_t ylo, yhi;
      tap_range(ky, g.pad, g.stride, g.h, g.oh, ylo, yhi);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        std::size_t xlo, xhi;
        tap_range(kx, g.pad, g.stride, g.w, g.ow, xlo, xhi);
        const std::size_t tap = (kz * g.k + ky) * g.k + kx;
        const T wv = wk[tap];
        double acc = 0.0;
        for (std::size_t oz = zlo; oz < zhi; ++oz) {
          const std::size_t iz = oz * g.stride + kz - g.pad;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * g.stride + ky - g.pad;
            if (xhi <= xlo) continue;
            const T* grow = gout + (oz * g.oh + oy) * g.ow + xlo;
            const std::size_t ioff = (iz * g.h + iy) * g.w + (xlo * g.stride + kx - g.pad);
            const std::size_t len = xhi - xlo;
            const T* src = in + ioff;
            T row_acc = 0;
            for (std::size_t j = 0; j < len; ++j) row_acc += grow[j] * src[j * g.stride];
            if (gin) {
              T* dst = gin + ioff;
              for (std::size_t j = 0; j < len; ++j) dst[j * g.stride] += wv * grow[j];
            }
            acc += row_acc;
          }
        }
        if (gwk) gwk[tap] += static_cast<T>(acc);
      }
    }
  }
}

// Stride-1 depth-wise kernels on a zero-padded copy of one channel.
//
// With the padded extents (PD, PH, PW), output voxel (z, y, x) reads padded
// input at (z + kz, y + ky, x + kx). Indexing the output with the padded
// pitch, i = (z * PH + y) * PW + x, turns every tap into one contiguous run
// P[i + off(tap)] over i in [0, span): a long axpy (forward, input gradient)
// or dot product (weight gradient). Positions with y >= oh or x >= ow are
// computed and discarded (forward) or held at zero (backward).
struct PaddedGeom {
  std::size_t pd, ph, pw, span;
  explicit PaddedGeom(const ConvGeom& g)
      : pd(g.d + 2 * g.pad), ph(g.h + 2 * g.pad), pw(g.w + 2 * g.pad),
        span(((g.od - 1) * ph + (g.oh - 1)) * pw + g.ow) {}
  std::size_t padded_size() const { return pd * ph * pw; }
  std::size_t tap_offset(std::size_t kz, std::size_t ky, std::size_t kx) const {
    return (kz * ph + ky) * pw + kx;
  }
};

template <typename T>
void pad_channel(const T* in, const ConvGeom& g, const PaddedGeom& pg, T* padded) {
  std::fill(padded, padded + pg.padded_size(), T(0));
  for (std::size_t z = 0; z < g.d; ++z)
    for (std::size_t y = 0; y < g.h; ++y) {
      const T* src = in + (z * g.h + y) * g.w;
      std::copy(src, src + g.w, padded + ((z + g.pad) * pg.ph + y + g.pad) * pg.pw + g.pad);
    }
}

template <typename T>
T dot_run(const T* a, const T* b, std::size_t n) {
  // Independent partial sums keep the reduction vectorizable without
  // reassociation flags; the combination order is fixed.
  constexpr std::size_t kLanes = 16;
  T part[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) part[j] += a[i + j] * b[i + j];
  T acc = 0;
  for (; i < n; ++i) acc += a[i] * b[i];
  for (std::size_t j = 0; j < kLanes; ++j) acc += part[j];
  return acc;
}

template <typename T>
void depthwise_forward_s1(const T* in, const T* wk, const ConvGeom& g, const PaddedGeom& pg,
                          T* padded, T* acc, T* out) {
  pad_channel(in, g, pg, padded);
  std::fill(acc, acc + pg.span, T(0));
  for (std::size_t kz = 0; kz < g.k; ++kz)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T wv = wk[(kz * g.k + ky) * g.k + kx];
        const T* src = padded + pg.tap_offset(kz, ky, kx);
        for (std::size_t i = 0; i < pg.span; ++i) acc[i] += wv * src[i];
      }
  for (std::size_t z = 0; z < g.od; ++z)
    for (std::size_t y = 0; y < g.oh; ++y) {
      const T* src = acc + (z * pg.ph + y) * pg.pw;
      T* dst = out + (z * g.oh + y) * g.ow;
      for (std::size_t x = 0; x < g.ow; ++x) dst[x] += src[x];
    }
}

template <typename T>
void depthwise_backward_s1(const T* in, const T* wk, const T* gout, const ConvGeom& g,
                           const PaddedGeom& pg, T* padded, T* gpitch, T* gpad, T* gin,
                           T* gwk) {
  std::fill(gpitch, gpitch + pg.span, T(0));
  for (std::size_t z = 0; z < g.od; ++z)
    for (std::size_t y = 0; y < g.oh; ++y) {
      const T* src = gout + (z * g.oh + y) * g.ow;
      std::copy(src, src + g.ow, gpitch + (z * pg.ph + y) * pg.pw);
    }
  if (gwk) {
    pad_channel(in, g, pg, padded);
    for (std::size_t kz = 0; kz < g.k; ++kz)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          gwk[(kz * g.k + ky) * g.k + kx] +=
              dot_run(gpitch, padded + pg.tap_offset(kz, ky, kx), pg.span);
        }
  }
  if (gin) {
    std::fill(gpad, gpad + pg.padded_size(), T(0));
    for (std::size_t kz = 0; kz < g.k; ++kz)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const T wv = wk[(kz * g.k + ky) * g.k + kx];
          T* dst = gpad + pg.tap_offset(kz, ky, kx);
          for (std::size_t i = 0; i < pg.span; ++i) dst[i] += wv * gpitch[i];
        }
    for (std::size_t z = 0; z < g.d; ++z)
      for (std::size_t y = 0; y < g.h; ++y) {
        const T* src = gpad + ((z + g.pad) * pg.ph + y + g.pad) * pg.pw + g.pad;
        T* dst = gin + (z * g.h + y) * g.w;
        for (std::size_t x = 0; x < g.w; ++x) dst[x] += src[x];
      }
  }
}

ConvGeom conv_geometry(const Shape& xs, const Shape& ws, const Conv3dOptions& opt) {
  require_rank(xs, 5, "conv3d(x)");
  require_rank(ws, 5, "conv3d(w)");
  ConvGeom g{};
  g.n = xs[0];
  g.cin = xs[1];
  g.d = xs[2];
  g.h = xs[3];
  g.w = xs[4];
  g.cout = ws[0];
  g.k = ws[2];
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.groups = opt.groups;
  require(g.groups >= 1 && g.cin % g.groups == 0 && g.cout % g.groups == 0,
          ErrorKind::dimension, "conv3d: channels not divisible by groups");
  require(ws[1] == g.cin / g.groups, ErrorKind::dimension,
          "conv3d: weight " + to_string(ws) + " does not match input " + to_string(xs));
  require(ws[3] == g.k && ws[4] == g.k && g.k % 2 == 1, ErrorKind::dimension,
          "conv3d: kernel must be cubic with odd extent");
  require(g.stride >= 1, ErrorKind::value, "conv3d: stride must be >= 1");
  require(g.d + 2 * g.pad >= g.k && g.h + 2 * g.pad >= g.k && g.w + 2 * g.pad >= g.k,
          ErrorKind::dimension, "conv3d: kernel larger than padded input");
  g.od = (g.d + 2 * g.pad - g.k) / g.stride + 1;
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

// Strides of `s` viewed against `out`; broadcast axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = (s[i] == 1 && out[i] != 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  require(a.size() == b.size(), ErrorKind::dimension,
          std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i] == b[i] || a[i] == 1 || b[i] == 1, ErrorKind::dimension,
            std::string(op) + ": incompatible shapes " + to_string(a) + " vs " +
                to_string(b));
    out[i] = std::max(a[i], b[i]);
  }
  return out;
}

// Calls f(o, ia, ib, len, sa, sb) for each innermost run of the output.
template <typename F>
void for_each_run(const Shape& out, const std::vector<std::size_t>& sa,
                  const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0}, std::size_t{1}, std::size_t{0},
      std::size_t{0});
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t outer = numel(out) / std::max<std::size_t>(inner, 1);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t r = 0; r < outer; ++r) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    f(r * inner, ia, ib, inner, sa[rank - 1], sb[rank - 1]);
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = T(std::numbers::inv_sqrtpi / std::numbers::sqrt2) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

}  // namespace

template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b, Conv3dOptions opt) {
  const ConvGeom g = conv_geometry(x.shape(), w.shape(), opt);
  if (b.defined()) {
    require(b.rank() == 1 && b.dim(0) == g.cout, ErrorKind::dimension,
            "conv3d: bias shape " + to_string(b.shape()));
  }
  const std::size_t so = g.s_out(), si = g.s_in();
  const std::size_t kc = g.cin_g() * g.k3();
  const bool depthwise = g.groups == g.cin && g.cout == g.cin;
  std::vector<T> out(g.n * g.cout * so, T(0));
  const T* xd = x.data().data();
  const T* wd = w.data().data();

  std::vector<T> col;
  if (!depthwise && !g.direct_map()) col.resize(so * kc);
  for (std::size_t n = 0; n < g.n; ++n) {
    if (depthwise) {
      if (g.stride == 1) {
        const PaddedGeom pg(g);
        std::vector<T> padded(pg.padded_size()), acc(pg.span);
        for (std::size_t c = 0; c < g.cin; ++c) {
          depthwise_forward_s1(xd + (n * g.cin + c) * si, wd + c * g.k3(), g, pg, padded.data(),
                               acc.data(), out.data() + (n * g.cout + c) * so);
        }
      } else {
        for (std::size_t c = 0; c < g.cin; ++c) {
          depthwise_forward(xd + (n * g.cin + c) * si, wd + c * g.k3(), g,
                            out.data() + (n * g.cout + c) * so);
        }
      }
      continue;
    }
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const T* xg = xd + (n * g.cin + grp * g.cin_g()) * si;
      const T* src = xg;
      if (!g.direct_map()) {
        im2col(xg, g, col.data());
        src = col.data();
      }
      ConstMatMap<T> cm(src, so, kc);
      ConstMatMap<T> wt(wd + grp * g.cout_g() * kc, kc, g.cout_g());
      MatMap<T> om(out.data() + (n * g.cout + grp * g.cout_g()) * so, so, g.cout_g());
      om.noalias() = cm * wt;
    }
  }
  if (b.defined()) {
    const T* bd = b.data().data();
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t c = 0; c < g.cout; ++c) {
        T* o = out.data() + (n * g.cout + c) * so;
        for (std::size_t s = 0; s < so; ++s) o[s] += bd[c];
      }
  }

  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  auto bn = b.defined() ? b.node_ptr() : nullptr;
  return tape.emit(
      "conv3d", {g.n, g.cout, g.od, g.oh, g.ow}, std::move(out), {&x, &w, &b},
      [xn, wn, bn, g, depthwise, so, si, kc](const TensorNode<T>& o) {
        const T* go = o.grad.data();
        const T* xd = xn->data.data();
        const T* wd = wn->data.data();
        auto gx = grad_sink(*xn);
        auto gw = grad_sink(*wn);
        if (bn) {
          auto gb = grad_sink(*bn);
          if (!gb.empty()) {
            for (std::size_t c = 0; c < g.cout; ++c) {
              double acc = 0.0;
              for (std::size_t n = 0; n < g.n; ++n) {
                const T* p = go + (n * g.cout + c) * so;
                for (std::size_t s = 0; s < so; ++s) acc += p[s];
              }
              gb[c] += static_cast<T>(acc);
            }
          }
        }
        if (gx.empty() && gw.empty()) return;
        if (depthwise && g.stride == 1) {
          const PaddedGeom pg(g);
          std::vector<T> padded(pg.padded_size()), gpitch(pg.span), gpad(pg.padded_size());
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t c = 0; c < g.cin; ++c) {
              depthwise_backward_s1(xd + (n * g.cin + c) * si, wd + c * g.k3(),
                                    go + (n * g.cout + c) * so, g, pg, padded.data(),
                                    gpitch.data(), gpad.data(),
                                    gx.empty() ? nullptr : gx.data() + (n * g.cin + c) * si,
                                    gw.empty() ? nullptr : gw.data() + c * g.k3());
            }
          return;
        }
        if (depthwise) {
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t c = 0; c < g.cin; ++c) {
              depthwise_backward(xd + (n * g.cin + c) * si, wd + c * g.k3(),
                                 go + (n * g.cout + c) * so, g,
                                 gx.empty() ? nullptr : gx.data() + (n * g.cin + c) * si,
                                 gw.empty() ? nullptr : gw.data() + c * g.k3());
            }
          return;
        }
        std::vector<T> col, dcol;
        if (!g.direct_map()) {
          col.resize(so * kc);
          if (!gx.empty()) dcol.resize(so * kc);
        }
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t grp = 0; grp < g.groups; ++grp) {
            const std::size_t xoff = (n * g.cin + grp * g.cin_g()) * si;
            ConstMatMap<T> gom(go + (n * g.cout + grp * g.cout_g()) * so, so, g.cout_g());
            ConstMatMap<T> wt(wd + grp * g.cout_g() * kc, kc, g.cout_g());
            const T* src = xd + xoff;
            if (!g.direct_map() && !gw.empty()) {
              im2col(xd + xoff, g, col.data());
              src = col.data();
            }
            if (!gw.empty()) {
              ConstMatMap<T> cm(src, so, kc);
              MatMap<T> gwm(gw.data() + grp * g.cout_g() * kc, kc, g.cout_g());
              gwm.noalias() += cm.transpose() * gom;
            }
            if (!gx.empty()) {
              if (g.direct_map()) {
                MatMap<T> gxm(gx.data() + xoff, so, kc);
                gxm.noalias() += gom * wt.transpose();
              } else {
                MatMap<T> dcm(dcol.data(), so, kc);
                dcm.noalias() = gom * wt.transpose();
                col2im_add(dcol.data(), g, gx.data() + xoff);
              }
            }
          }
      });
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x.shape(), 2, "linear(x)");
  require_rank(w.shape(), 2, "linear(w)");
  const std::size_t n = x.dim(0), f = x.dim(1), gdim = w.dim(1);
  require(w.dim(0) == f, ErrorKind::dimension,
          "linear: inner dims " + to_string(x.shape()) + " x " + to_string(w.shape()));
  if (b.defined()) {
    require(b.rank() == 1 && b.dim(0) == gdim, ErrorKind::dimension,
            "linear: bias shape " + to_string(b.shape()));
  }
  std::vector<T> out(n * gdim);
  // Row-major [N,F] is column-major (F x N); likewise for w and y.
  ConstMatMap<T> xm(x.data().data(), f, n);
  ConstMatMap<T> wm(w.data().data(), gdim, f);
  MatMap<T> ym(out.data(), gdim, n);
  ym.noalias() = wm * xm;
  if (b.defined()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < gdim; ++j) out[i * gdim + j] += b[j];
  }
  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  auto bn = b.defined() ? b.node_ptr() : nullptr;
  return tape.emit("linear", {n, gdim}, std::move(out), {&x, &w, &b},
                   [xn, wn, bn, n, f, gdim](const TensorNode<T>& o) {
                     ConstMatMap<T> gy(o.grad.data(), gdim, n);
                     if (auto gx = grad_sink(*xn); !gx.empty()) {
                       ConstMatMap<T> wm(wn->data.data(), gdim, f);
                       MatMap<T> gxm(gx.data(), f, n);
                       gxm.noalias() += wm.transpose() * gy;
                     }
                     if (auto gw = grad_sink(*wn); !gw.empty()) {
                       ConstMatMap<T> xm(xn->data.data(), f, n);
                       MatMap<T> gwm(gw.data(), gdim, f);
                       gwm.noalias() += gy * xm.transpose();
                     }
                     if (bn) {
                       if (auto gb = grad_sink(*bn); !gb.empty()) {
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < gdim; ++j) gb[j] += gy(j, i);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = gelu_value(xd[i]);
  auto xn = x.node_ptr();
  return tape.emit("gelu", x.shape(), std::move(out), {&x}, [xn](const TensorNode<T>& o) {
    auto gx = grad_sink(*xn);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * gelu_derivative(xn->data[i]);
  });
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto xn = x.node_ptr();
  return tape.emit("relu", x.shape(), std::move(out), {&x}, [xn](const TensorNode<T>& o) {
    auto gx = grad_sink(*xn);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xn->data[i] > T(0)) gx[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, Activation kind) {
  return kind == Activation::gelu ? gelu(tape, x) : relu(tape, x);
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(numel(out_shape));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_run(out_shape, sa, sb, [&](auto o, auto ia, auto ib, auto len, auto ea, auto eb) {
      for (std::size_t i = 0; i < len; ++i) out[o + i] = ad[ia + i * ea] + bd[ib + i * eb];
    });
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return tape.emit("add", out_shape, std::move(out), {&a, &b},
                   [an, bn, out_shape](const TensorNode<T>& o) {
                     auto ga = grad_sink(*an);
                     auto gb = grad_sink(*bn);
                     const T* go = o.grad.data();
                     if (an->shape == bn->shape) {
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i];
                       return;
                     }
                     const auto sa = broadcast_strides(an->shape, out_shape);
                     const auto sb = broadcast_strides(bn->shape, out_shape);
                     for_each_run(out_shape, sa, sb,
                                  [&](auto off, auto ia, auto ib, auto len, auto ea, auto eb) {
                                    for (std::size_t i = 0; i < len; ++i) {
                                      if (!ga.empty()) ga[ia + i * ea] += go[off + i];
                                      if (!gb.empty()) gb[ib + i * eb] += go[off + i];
                                    }
                                  });
                   });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(numel(out_shape));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_run(out_shape, sa, sb, [&](auto o, auto ia, auto ib, auto len, auto ea, auto eb) {
      for (std::size_t i = 0; i < len; ++i) out[o + i] = ad[ia + i * ea] * bd[ib + i * eb];
    });
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return tape.emit("mul", out_shape, std::move(out), {&a, &b},
                   [an, bn, out_shape](const TensorNode<T>& o) {
                     auto ga = grad_sink(*an);
                     auto gb = grad_sink(*bn);
                     const T* go = o.grad.data();
                     const T* ad = an->data.data();
                     const T* bd = bn->data.data();
                     if (an->shape == bn->shape) {
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bd[i];
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * ad[i];
                       return;
                     }
                     const auto sa = broadcast_strides(an->shape, out_shape);
                     const auto sb = broadcast_strides(bn->shape, out_shape);
                     for_each_run(out_shape, sa, sb,
                                  [&](auto off, auto ia, auto ib, auto len, auto ea, auto eb) {
                                    for (std::size_t i = 0; i < len; ++i) {
                                      const T g = go[off + i];
                                      if (!ga.empty()) ga[ia + i * ea] += g * bd[ib + i * eb];
                                      if (!gb.empty()) gb[ib + i * eb] += g * ad[ia + i * ea];
                                    }
                                  });
                   });
}

template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, T scale, T shift) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * scale + shift;
  auto xn = x.node_ptr();
  return tape.emit("affine", x.shape(), std::move(out), {&x},
                   [xn, scale](const TensorNode<T>& o) {
                     auto gx = grad_sink(*xn);
                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * scale;
                   });
}

template <typename T>
Tensor<T> global_avg_pool3d(Tape<T>& tape, const Tensor<T>& x) {
  require_rank(x.shape(), 5, "global_avg_pool3d");
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t s = x.dim(2) * x.dim(3) * x.dim(4);
  require(s >= 1, ErrorKind::dimension, "global_avg_pool3d: empty spatial extent");
  std::vector<T> out(nc);
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < s; ++j) acc += xd[i * s + j];
    out[i] = static_cast<T>(acc / static_cast<double>(s));
  }
  auto xn = x.node_ptr();
  return tape.emit("global_avg_pool3d", {x.dim(0), x.dim(1), 1, 1, 1}, std::move(out), {&x},
                   [xn, nc, s](const TensorNode<T>& o) {
                     auto gx = grad_sink(*xn);
                     if (gx.empty()) return;
                     const T inv = T(1) / static_cast<T>(s);
                     for (std::size_t i = 0; i < nc; ++i) {
                       const T g = o.grad[i] * inv;
                       for (std::size_t j = 0; j < s; ++j) gx[i * s + j] += g;
                     }
                   });
}

template <typename T>
Tensor<T> max_pool3d(Tape<T>& tape, const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_rank(x.shape(), 5, "max_pool3d");
  require(kernel >= 1 && stride >= 1, ErrorKind::value, "max_pool3d: bad kernel/stride");
  const std::size_t n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  require(d >= kernel && h >= kernel && w >= kernel, ErrorKind::dimension,
          "max_pool3d: input smaller than kernel");
  const std::size_t od = (d - kernel) / stride + 1, oh = (h - kernel) / stride + 1,
                    ow = (w - kernel) / stride + 1;
  const std::size_t si = d * h * w, so = od * oh * ow;
  std::vector<T> out(n * c * so);
  std::vector<std::size_t> arg(out.size());
  const T* xd = x.data().data();
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const T* in = xd + nc * si;
    for (std::size_t oz = 0; oz < od; ++oz)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = (oz * stride * h + oy * stride) * w + ox * stride;
          for (std::size_t kz = 0; kz < kernel; ++kz)
            for (std::size_t ky = 0; ky < kernel; ++ky)
              for (std::size_t kx = 0; kx < kernel; ++kx) {
                const std::size_t idx =
                    ((oz * stride + kz) * h + oy * stride + ky) * w + ox * stride + kx;
                if (in[idx] > in[best]) best = idx;
              }
          const std::size_t o = nc * so + (oz * oh + oy) * ow + ox;
          out[o] = in[best];
          arg[o] = nc * si + best;
        }
  }
  auto xn = x.node_ptr();
  return tape.emit("max_pool3d", {n, c, od, oh, ow}, std::move(out), {&x},
                   [xn, arg = std::move(arg)](const TensorNode<T>& o) {
                     auto gx = grad_sink(*xn);
                     if (gx.empty()) return;
                     for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
                   });
}

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Rng& rng, bool active) {
  require(p >= 0.0 && p < 1.0, ErrorKind::value,
          "dropout: probability must lie in [0, 1), got " + std::to_string(p));
  if (!active || p == 0.0) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  const auto xd = x.data();
  std::vector<T> mask(xd.size());
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    mask[i] = rng.uniform() < p ? T(0) : scale;
    out[i] = xd[i] * mask[i];
  }
  auto xn = x.node_ptr();
  return tape.emit("dropout", x.shape(), std::move(out), {&x},
                   [xn, mask = std::move(mask)](const TensorNode<T>& o) {
                     auto gx = grad_sink(*xn);
                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * mask[i];
                   });
}

template <typename T>
Tensor<T> layer_norm_channels(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta, double eps) {
  require(x.rank() >= 2, ErrorKind::dimension, "layer_norm_channels: rank < 2");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t s = x.numel() / (n * c);
  require(gamma.numel() == c && beta.numel() == c, ErrorKind::dimension,
          "layer_norm_channels: affine params must have " + std::to_string(c) + " entries");
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(n * s);
  std::vector<double> mean(s), var(s);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = xd + b * c * s;
    std::fill(mean.begin(), mean.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < s; ++j) mean[j] += xb[ch * s + j];
    for (std::size_t j = 0; j < s; ++j) mean[j] /= static_cast<double>(c);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < s; ++j) {
        const double dlt = xb[ch * s + j] - mean[j];
        var[j] += dlt * dlt;
      }
    T* rs = rstd.data() + b * s;
    for (std::size_t j = 0; j < s; ++j)
      rs[j] = static_cast<T>(1.0 / std::sqrt(var[j] / static_cast<double>(c) + eps));
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* xh = xhat.data() + (b * c + ch) * s;
      T* o = out.data() + (b * c + ch) * s;
      for (std::size_t j = 0; j < s; ++j) {
        xh[j] = static_cast<T>(xb[ch * s + j] - mean[j]) * rs[j];
        o[j] = xh[j] * gd[ch] + bd[ch];
      }
    }
  }
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  return tape.emit(
      "layer_norm_channels", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, n, c, s, xhat = std::move(xhat), rstd = std::move(rstd)](
          const TensorNode<T>& o) {
        const T* go = o.grad.data();
        auto gx = grad_sink(*xn);
        auto gg = grad_sink(*gn);
        auto gbeta = grad_sink(*bn);
        const T* gd = gn->data.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc_g = 0.0, acc_b = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const T* g = go + (b * c + ch) * s;
            const T* xh = xhat.data() + (b * c + ch) * s;
            for (std::size_t j = 0; j < s; ++j) {
              acc_g += g[j] * xh[j];
              acc_b += g[j];
            }
          }
          if (!gg.empty()) gg[ch] += static_cast<T>(acc_g);
          if (!gbeta.empty()) gbeta[ch] += static_cast<T>(acc_b);
        }
        if (gx.empty()) return;
        std::vector<double> m1(s), m2(s);
        for (std::size_t b = 0; b < n; ++b) {
          std::fill(m1.begin(), m1.end(), 0.0);
          std::fill(m2.begin(), m2.end(), 0.0);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* g = go + (b * c + ch) * s;
            const T* xh = xhat.data() + (b * c + ch) * s;
            for (std::size_t j = 0; j < s; ++j) {
              const double dxh = static_cast<double>(g[j]) * gd[ch];
              m1[j] += dxh;
              m2[j] += dxh * xh[j];
            }
          }
          const double invc = 1.0 / static_cast<double>(c);
          const T* rs = rstd.data() + b * s;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* g = go + (b * c + ch) * s;
            const T* xh = xhat.data() + (b * c + ch) * s;
            T* dx = gx.data() + (b * c + ch) * s;
            for (std::size_t j = 0; j < s; ++j) {
              const double dxh = static_cast<double>(g[j]) * gd[ch];
              dx[j] += static_cast<T>(rs[j] * (dxh - m1[j] * invc - xh[j] * m2[j] * invc));
            }
          }
        }
      });
}

template <typename T>
Tensor<T> channel_slice(Tape<T>& tape, const Tensor<T>& x, std::size_t begin,
                        std::size_t count) {
  require(x.rank() >= 2, ErrorKind::dimension, "channel_slice: rank < 2");
  const std::size_t n = x.dim(0), c = x.dim(1);
  require(count >= 1 && begin + count <= c, ErrorKind::dimension,
          "channel_slice: range out of bounds for " + to_string(x.shape()));
  const std::size_t s = x.numel() / (n * c);
  Shape shape = x.shape();
  shape[1] = count;
  std::vector<T> out(n * count * s);
  const T* xd = x.data().data();
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(xd + (b * c + begin) * s, count * s, out.data() + b * count * s);
  auto xn = x.node_ptr();
  return tape.emit("channel_slice", std::move(shape), std::move(out), {&x},
                   [xn, n, c, s, begin, count](const TensorNode<T>& o) {
                     auto gx = grad_sink(*xn);
                     if (gx.empty()) return;
                     for (std::size_t b = 0; b < n; ++b) {
                       T* dst = gx.data() + (b * c + begin) * s;
                       const T* src = o.grad.data() + b * count * s;
                       for (std::size_t i = 0; i < count * s; ++i) dst[i] += src[i];
                     }
                   });
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.numel(), ErrorKind::dimension,
          "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node_ptr();
  return tape.emit("reshape", std::move(shape), std::move(out), {&x},
                   [xn](const TensorNode<T>& o) {
                     auto gx = grad_sink(*xn);
                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                   });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  auto xn = x.node_ptr();
  return tape.emit("sum", {}, {static_cast<T>(acc)}, {&x}, [xn](const TensorNode<T>& o) {
    auto gx = grad_sink(*xn);
    for (auto& g : gx) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(), ErrorKind::dimension,
          "mse_loss: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  require(pred.numel() >= 1, ErrorKind::dimension, "mse_loss: empty input");
  const auto p = pred.data();
  const auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    acc += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(p.size());
  auto pn = pred.node_ptr();
  auto tn = target.node_ptr();
  return tape.emit("mse_loss", {}, {static_cast<T>(acc * inv_n)}, {&pred},
                   [pn, tn, inv_n](const TensorNode<T>& o) {
                     auto gp = grad_sink(*pn);
                     const T scale = static_cast<T>(2.0 * inv_n) * o.grad[0];
                     for (std::size_t i = 0; i < gp.size(); ++i)
                       gp[i] += scale * (pn->data[i] - tn->data[i]);
                   });
}

#define FEN_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv3d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                            Conv3dOptions);                                                 \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                      \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                      \
  template Tensor<T> activation(Tape<T>&, const Tensor<T>&, Activation);                    \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> affine(Tape<T>&, const Tensor<T>&, T, T);                              \
  template Tensor<T> global_avg_pool3d(Tape<T>&, const Tensor<T>&);                         \
  template Tensor<T> max_pool3d(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);      \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, double, Rng&, bool);               \
  template Tensor<T> layer_norm_channels(Tape<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                         const Tensor<T>&, double);                         \
  template Tensor<T> channel_slice(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);   \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                            \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mse_loss(Tape<T>&, const Tensor<T>&, const Tensor<T>&);

FEN_INSTANTIATE_OPS(float)
FEN_INSTANTIATE_OPS(double)

}  // namespace fen::ops
