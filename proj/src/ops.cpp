#include "mmc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace mmc {

namespace {

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Row-major GEMM kernels, accumulate into C.

// C(m x n) += A(m x k) * B(k x n)
void gemm_nn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * k;
    double* c = C + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C(m x n) += A(m x k) * B(n x k)^T
void gemm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * k;
    double* c = C + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* b = B + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] += acc;
    }
  }
}

// C(m x n) += A(k x m)^T * B(k x n)
void gemm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const double* a = A + static_cast<std::size_t>(p) * m;
    const double* b = B + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

struct ConvDims {
  int batch, in_ch, in_h, in_w;
  int out_ch, kh, kw;
  int out_h, out_w;
  int stride, pad;
  int cols() const { return in_ch * kh * kw; }
  int positions() const { return out_h * out_w; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (stride <= 0) throw ValueError("conv2d: stride must be positive");
  if (pad < 0) throw ValueError("conv2d: pad must be non-negative");
  if (x.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ShapeError("conv2d: weights must be OIKK, got " + shape_str(w.shape()));
  if (b.rank() != 1 || b.dim(0) != w.dim(0))
    throw ShapeError("conv2d: bias must have one value per output channel");
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) +
                     " channels but weights expect " + std::to_string(w.dim(1)));
  ConvDims d;
  d.batch = x.dim(0);
  d.in_ch = x.dim(1);
  d.in_h = x.dim(2);
  d.in_w = x.dim(3);
  d.out_ch = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.out_h = (d.in_h + 2 * pad - d.kh) / stride + 1;
  d.out_w = (d.in_w + 2 * pad - d.kw) / stride + 1;
  if (d.in_h + 2 * pad < d.kh || d.in_w + 2 * pad < d.kw)
    throw ShapeError("conv2d: kernel does not fit the padded input");
  return d;
}

void im2col(const double* x, const ConvDims& d, double* col) {
  // col is (in_ch*kh*kw) x (out_h*out_w), zero-padded borders.
  const int P = d.positions();
  for (int c = 0; c < d.in_ch; ++c) {
    for (int u = 0; u < d.kh; ++u) {
      for (int v = 0; v < d.kw; ++v) {
        double* out = col + (static_cast<std::size_t>(c) * d.kh * d.kw +
                             static_cast<std::size_t>(u) * d.kw + v) *
                                P;
        for (int oy = 0; oy < d.out_h; ++oy) {
          const int iy = oy * d.stride - d.pad + u;
          double* orow = out + static_cast<std::size_t>(oy) * d.out_w;
          if (iy < 0 || iy >= d.in_h) {
            std::fill(orow, orow + d.out_w, 0.0);
            continue;
          }
          const double* xrow = x + (static_cast<std::size_t>(c) * d.in_h + iy) * d.in_w;
          for (int ox = 0; ox < d.out_w; ++ox) {
            const int ix = ox * d.stride - d.pad + v;
            orow[ox] = (ix >= 0 && ix < d.in_w) ? xrow[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, const ConvDims& d, double* gx) {
  const int P = d.positions();
  for (int c = 0; c < d.in_ch; ++c) {
    for (int u = 0; u < d.kh; ++u) {
      for (int v = 0; v < d.kw; ++v) {
        const double* in = col + (static_cast<std::size_t>(c) * d.kh * d.kw +
                                  static_cast<std::size_t>(u) * d.kw + v) *
                                     P;
        for (int oy = 0; oy < d.out_h; ++oy) {
          const int iy = oy * d.stride - d.pad + u;
          if (iy < 0 || iy >= d.in_h) continue;
          const double* irow = in + static_cast<std::size_t>(oy) * d.out_w;
          double* grow = gx + (static_cast<std::size_t>(c) * d.in_h + iy) * d.in_w;
          for (int ox = 0; ox < d.out_w; ++ox) {
            const int ix = ox * d.stride - d.pad + v;
            if (ix >= 0 && ix < d.in_w) grow[ix] += irow[ox];
          }
        }
      }
    }
  }
}

void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, const ConvDims& d,
                    Tensor& y) {
  const int P = d.positions();
  const int Kc = d.cols();
  std::vector<double> col(static_cast<std::size_t>(Kc) * P);
  std::fill(y.data(), y.data() + y.size(), 0.0);
  for (int n = 0; n < d.batch; ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * d.in_ch * d.in_h * d.in_w;
    double* yn = y.data() + static_cast<std::size_t>(n) * d.out_ch * P;
    im2col(xn, d, col.data());
    gemm_nn_acc(w.data(), col.data(), yn, d.out_ch, Kc, P);
    for (int o = 0; o < d.out_ch; ++o) {
      const double bo = b[static_cast<std::size_t>(o)];
      double* yrow = yn + static_cast<std::size_t>(o) * P;
      for (int p = 0; p < P; ++p) yrow[p] += bo;
    }
  }
}

struct ResizePlan {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

// Half-pixel sampling: source = (i + 0.5) * in / out - 0.5, neighbors clamped.
ResizePlan resize_axis(int in, int out) {
  ResizePlan p;
  p.lo.resize(static_cast<std::size_t>(out));
  p.hi.resize(static_cast<std::size_t>(out));
  p.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    const double src = (i + 0.5) * scale - 0.5;
    const double base = std::floor(src);
    const int b = static_cast<int>(base);
    p.lo[static_cast<std::size_t>(i)] = std::clamp(b, 0, in - 1);
    p.hi[static_cast<std::size_t>(i)] = std::clamp(b + 1, 0, in - 1);
    p.frac[static_cast<std::size_t>(i)] = src - base;
  }
  return p;
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  const ConvDims d = conv_dims(x, w, b, stride, pad);
  Tensor y({d.batch, d.out_ch, d.out_h, d.out_w});
  conv2d_forward(x, w, b, d, y);
  if (!wants_grad({&x, &w, &b})) return y;
  y.set_requires_grad(true);
  tape.record(
      "conv2d", {x, w, b}, y, [=]() mutable { conv2d_forward(x, w, b, d, y); },
      [=]() mutable {
        const int P = d.positions();
        const int Kc = d.cols();
        const std::vector<double>& gy = y.grad();
        if (b.requires_grad()) {
          std::vector<double>& gb = b.grad();
          for (int n = 0; n < d.batch; ++n)
            for (int o = 0; o < d.out_ch; ++o) {
              const double* g = gy.data() + (static_cast<std::size_t>(n) * d.out_ch + o) * P;
              double acc = 0.0;
              for (int p = 0; p < P; ++p) acc += g[p];
              gb[static_cast<std::size_t>(o)] += acc;
            }
        }
        if (!w.requires_grad() && !x.requires_grad()) return;
        std::vector<double> col(static_cast<std::size_t>(Kc) * P);
        std::vector<double> dcol;
        if (x.requires_grad()) dcol.resize(static_cast<std::size_t>(Kc) * P);
        for (int n = 0; n < d.batch; ++n) {
          const double* gyn = gy.data() + static_cast<std::size_t>(n) * d.out_ch * P;
          if (w.requires_grad()) {
            const double* xn =
                x.data() + static_cast<std::size_t>(n) * d.in_ch * d.in_h * d.in_w;
            im2col(xn, d, col.data());
            gemm_nt_acc(gyn, col.data(), w.grad().data(), d.out_ch, P, Kc);
          }
          if (x.requires_grad()) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            gemm_tn_acc(w.data(), gyn, dcol.data(), Kc, d.out_ch, P);
            double* gxn =
                x.grad().data() + static_cast<std::size_t>(n) * d.in_ch * d.in_h * d.in_w;
            col2im_acc(dcol.data(), d, gxn);
          }
        }
      });
  return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (!wants_grad({&x})) return y;
  y.set_requires_grad(true);
  tape.record(
      "relu", {x}, y,
      [=]() mutable {
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      },
      [=]() mutable {
        std::vector<double>& gx = x.grad();
        const std::vector<double>& gy = y.grad();
        for (std::size_t i = 0; i < x.size(); ++i)
          if (x[i] > 0.0) gx[i] += gy[i];
      });
  return y;
}

Tensor gap(Tape& tape, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("gap: input must be NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y({N, C});
  const double inv = 1.0 / static_cast<double>(hw);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = x.data() + (static_cast<std::size_t>(n) * C + c) * hw;
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += p[i];
      y[static_cast<std::size_t>(n) * C + c] = acc * inv;
    }
  if (!wants_grad({&x})) return y;
  y.set_requires_grad(true);
  tape.record(
      "gap", {x}, y,
      [=]() mutable {
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const double* p = x.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            y[static_cast<std::size_t>(n) * C + c] = acc * inv;
          }
      },
      [=]() mutable {
        std::vector<double>& gx = x.grad();
        const std::vector<double>& gy = y.grad();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const double g = gy[static_cast<std::size_t>(n) * C + c] * inv;
            double* p = gx.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) p[i] += g;
          }
      });
  return y;
}

namespace {

Tensor linear_impl(Tape& tape, const Tensor& v, const Tensor& w, const Tensor* bias) {
  if (v.rank() != 2 || w.rank() != 2)
    throw ShapeError("linear: expected rank-2 input and weights");
  if (v.dim(1) != w.dim(1))
    throw ShapeError("linear: input width " + std::to_string(v.dim(1)) +
                     " does not match weight width " + std::to_string(w.dim(1)));
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0)))
    throw ShapeError("linear: bias length must equal the number of output rows");
  const int N = v.dim(0), Cin = v.dim(1), Cout = w.dim(0);
  Tensor y({N, Cout});
  auto forward = [=](Tensor out) {
    std::fill(out.data(), out.data() + out.size(), 0.0);
    gemm_nt_acc(v.data(), w.data(), out.data(), N, Cin, Cout);
    if (bias)
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < Cout; ++o)
          out[static_cast<std::size_t>(n) * Cout + o] += (*bias)[static_cast<std::size_t>(o)];
  };
  forward(y);
  const bool grad = bias ? wants_grad({&v, &w, bias}) : wants_grad({&v, &w});
  if (!grad) return y;
  y.set_requires_grad(true);
  std::vector<Tensor> inputs = {v, w};
  Tensor b;
  if (bias) {
    b = *bias;
    inputs.push_back(b);
  }
  const bool has_bias = bias != nullptr;
  tape.record(
      "linear", inputs, y,
      [=]() mutable {
        std::fill(y.data(), y.data() + y.size(), 0.0);
        gemm_nt_acc(v.data(), w.data(), y.data(), N, Cin, Cout);
        if (has_bias)
          for (int n = 0; n < N; ++n)
            for (int o = 0; o < Cout; ++o)
              y[static_cast<std::size_t>(n) * Cout + o] += b[static_cast<std::size_t>(o)];
      },
      [=]() mutable {
        const std::vector<double>& gy = y.grad();
        if (v.requires_grad())
          gemm_nn_acc(gy.data(), w.data(), v.grad().data(), N, Cout, Cin);
        if (w.requires_grad())
          gemm_tn_acc(gy.data(), v.data(), w.grad().data(), Cout, N, Cin);
        if (has_bias && b.requires_grad()) {
          std::vector<double>& gb = b.grad();
          for (int n = 0; n < N; ++n)
            for (int o = 0; o < Cout; ++o)
              gb[static_cast<std::size_t>(o)] += gy[static_cast<std::size_t>(n) * Cout + o];
        }
      });
  return y;
}

}  // namespace

Tensor linear(Tape& tape, const Tensor& v, const Tensor& w) {
  return linear_impl(tape, v, w, nullptr);
}

Tensor linear(Tape& tape, const Tensor& v, const Tensor& w, const Tensor& b) {
  return linear_impl(tape, v, w, &b);
}

Tensor mul_broadcast(Tape& tape, const Tensor& x, const Tensor& h) {
  if (x.rank() != 4 || h.rank() != 4)
    throw ShapeError("mul_broadcast: expected NCHW input and N1HW map");
  if (h.dim(1) != 1) throw ShapeError("mul_broadcast: map must have a single channel");
  if (x.dim(0) != h.dim(0) || x.dim(2) != h.dim(2) || x.dim(3) != h.dim(3))
    throw ShapeError("mul_broadcast: input " + shape_str(x.shape()) + " and map " +
                     shape_str(h.shape()) + " disagree");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y(x.shape());
  auto forward = [=](Tensor out) {
    for (int n = 0; n < N; ++n) {
      const double* hn = h.data() + static_cast<std::size_t>(n) * hw;
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) out[off + i] = x[off + i] * hn[i];
      }
    }
  };
  forward(y);
  if (!wants_grad({&x, &h})) return y;
  y.set_requires_grad(true);
  tape.record(
      "mul_broadcast", {x, h}, y, [=]() mutable { forward(y); },
      [=]() mutable {
        const std::vector<double>& gy = y.grad();
        for (int n = 0; n < N; ++n) {
          const std::size_t hoff = static_cast<std::size_t>(n) * hw;
          for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
            if (x.requires_grad()) {
              std::vector<double>& gx = x.grad();
              for (std::size_t i = 0; i < hw; ++i) gx[off + i] += gy[off + i] * h[hoff + i];
            }
            if (h.requires_grad()) {
              std::vector<double>& gh = h.grad();
              for (std::size_t i = 0; i < hw; ++i) gh[hoff + i] += gy[off + i] * x[off + i];
            }
          }
        }
      });
  return y;
}

Tensor minmax_normalize(Tape& tape, const Tensor& m, double eps, bool detach_extrema) {
  if (eps <= 0.0) throw ValueError("minmax_normalize: eps must be positive");
  const std::size_t n = m.size();
  auto extrema = [=]() {
    std::size_t jmin = 0, jmax = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (m[i] < m[jmin]) jmin = i;
      if (m[i] > m[jmax]) jmax = i;
    }
    return std::pair<std::size_t, std::size_t>(jmin, jmax);
  };
  auto forward = [=](Tensor out) {
    const auto [jmin, jmax] = extrema();
    const double mn = m[jmin];
    const double s = 1.0 / (m[jmax] - mn + eps);
    for (std::size_t i = 0; i < n; ++i) out[i] = (m[i] - mn) * s;
  };
  Tensor y(m.shape());
  forward(y);
  if (!wants_grad({&m})) return y;
  y.set_requires_grad(true);
  tape.record(
      "minmax_normalize", {m}, y, [=]() mutable { forward(y); },
      [=]() mutable {
        const auto [jmin, jmax] = extrema();
        const double mn = m[jmin];
        const double s = 1.0 / (m[jmax] - mn + eps);
        std::vector<double>& gm = m.grad();
        const std::vector<double>& gy = y.grad();
        double gsum = 0.0, psum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          gm[i] += s * gy[i];
          gsum += gy[i];
          psum += gy[i] * (m[i] - mn);
        }
        if (!detach_extrema) {
          gm[jmin] += -s * gsum + s * s * psum;
          gm[jmax] -= s * s * psum;
        }
      });
  return y;
}

Tensor bilinear_resize(Tape& tape, const Tensor& m, int out_h, int out_w) {
  if (m.rank() != 2) throw ShapeError("bilinear_resize: expected a rank-2 map");
  if (out_h < 1 || out_w < 1) throw ValueError("bilinear_resize: output extents must be >= 1");
  const int H = m.dim(0), W = m.dim(1);
  const ResizePlan ry = resize_axis(H, out_h);
  const ResizePlan rx = resize_axis(W, out_w);
  auto forward = [=](Tensor out) {
    for (int r = 0; r < out_h; ++r) {
      const double ty = ry.frac[static_cast<std::size_t>(r)];
      const double* row0 = m.data() + static_cast<std::size_t>(ry.lo[static_cast<std::size_t>(r)]) * W;
      const double* row1 = m.data() + static_cast<std::size_t>(ry.hi[static_cast<std::size_t>(r)]) * W;
      double* orow = out.data() + static_cast<std::size_t>(r) * out_w;
      for (int c = 0; c < out_w; ++c) {
        const double tx = rx.frac[static_cast<std::size_t>(c)];
        const int xa = rx.lo[static_cast<std::size_t>(c)], xb = rx.hi[static_cast<std::size_t>(c)];
        orow[c] = (1.0 - ty) * ((1.0 - tx) * row0[xa] + tx * row0[xb]) +
                  ty * ((1.0 - tx) * row1[xa] + tx * row1[xb]);
      }
    }
  };
  Tensor y({out_h, out_w});
  forward(y);
  if (!wants_grad({&m})) return y;
  y.set_requires_grad(true);
  tape.record(
      "bilinear_resize", {m}, y, [=]() mutable { forward(y); },
      [=]() mutable {
        std::vector<double>& gm = m.grad();
        const std::vector<double>& gy = y.grad();
        for (int r = 0; r < out_h; ++r) {
          const double ty = ry.frac[static_cast<std::size_t>(r)];
          const std::size_t y0 = static_cast<std::size_t>(ry.lo[static_cast<std::size_t>(r)]) * W;
          const std::size_t y1 = static_cast<std::size_t>(ry.hi[static_cast<std::size_t>(r)]) * W;
          for (int c = 0; c < out_w; ++c) {
            const double g = gy[static_cast<std::size_t>(r) * out_w + c];
            const double tx = rx.frac[static_cast<std::size_t>(c)];
            const std::size_t xa = static_cast<std::size_t>(rx.lo[static_cast<std::size_t>(c)]);
            const std::size_t xb = static_cast<std::size_t>(rx.hi[static_cast<std::size_t>(c)]);
            gm[y0 + xa] += g * (1.0 - ty) * (1.0 - tx);
            gm[y0 + xb] += g * (1.0 - ty) * tx;
            gm[y1 + xa] += g * ty * (1.0 - tx);
            gm[y1 + xb] += g * ty * tx;
          }
        }
      });
  return y;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be NC");
  const int N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw ValueError("softmax_cross_entropy: expected one label per row");
  for (int lab : labels)
    if (lab < 0 || lab >= C)
      throw ValueError("softmax_cross_entropy: label " + std::to_string(lab) +
                       " outside [0, " + std::to_string(C) + ")");
  auto probs_of = [=](std::vector<double>& probs) {
    probs.resize(static_cast<std::size_t>(N) * C);
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* l = logits.data() + static_cast<std::size_t>(n) * C;
      double* p = probs.data() + static_cast<std::size_t>(n) * C;
      double mx = l[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, l[c]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) {
        p[c] = std::exp(l[c] - mx);
        z += p[c];
      }
      const double inv = 1.0 / z;
      for (int c = 0; c < C; ++c) p[c] *= inv;
      loss -= l[labels[static_cast<std::size_t>(n)]] - mx - std::log(z);
    }
    return loss / N;
  };
  std::vector<double> probs;
  Tensor y = Tensor::scalar(probs_of(probs));
  if (!wants_grad({&logits})) return y;
  y.set_requires_grad(true);
  tape.record(
      "softmax_cross_entropy", {logits}, y,
      [=]() mutable {
        std::vector<double> p;
        y[0] = probs_of(p);
      },
      [=]() mutable {
        std::vector<double> p;
        probs_of(p);
        const double g = y.grad()[0] / N;
        std::vector<double>& gl = logits.grad();
        for (int n = 0; n < N; ++n) {
          for (int c = 0; c < C; ++c)
            gl[static_cast<std::size_t>(n) * C + c] += g * p[static_cast<std::size_t>(n) * C + c];
          gl[static_cast<std::size_t>(n) * C + labels[static_cast<std::size_t>(n)]] -= g;
        }
      });
  return y;
}

Tensor sq_l2(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sq_l2: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  const std::size_t n = a.size();
  auto forward = [=]() {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = a[i] - b[i];
      acc += d * d;
    }
    return acc;
  };
  Tensor y = Tensor::scalar(forward());
  if (!wants_grad({&a, &b})) return y;
  y.set_requires_grad(true);
  tape.record(
      "sq_l2", {a, b}, y, [=]() mutable { y[0] = forward(); },
      [=]() mutable {
        const double g = 2.0 * y.grad()[0];
        if (a.requires_grad()) {
          std::vector<double>& ga = a.grad();
          for (std::size_t i = 0; i < n; ++i) ga[i] += g * (a[i] - b[i]);
        }
        if (b.requires_grad()) {
          std::vector<double>& gb = b.grad();
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (a[i] - b[i]);
        }
      });
  return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  const std::size_t n = a.size();
  Tensor y(a.shape());
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
  if (!wants_grad({&a, &b})) return y;
  y.set_requires_grad(true);
  tape.record(
      "add", {a, b}, y,
      [=]() mutable {
        for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
      },
      [=]() mutable {
        const std::vector<double>& gy = y.grad();
        if (a.requires_grad()) {
          std::vector<double>& ga = a.grad();
          for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
        }
        if (b.requires_grad()) {
          std::vector<double>& gb = b.grad();
          for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i];
        }
      });
  return y;
}

Tensor scale(Tape& tape, const Tensor& a, double s) {
  const std::size_t n = a.size();
  Tensor y(a.shape());
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * s;
  if (!wants_grad({&a})) return y;
  y.set_requires_grad(true);
  tape.record(
      "scale", {a}, y,
      [=]() mutable {
        for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * s;
      },
      [=]() mutable {
        std::vector<double>& ga = a.grad();
        const std::vector<double>& gy = y.grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += s * gy[i];
      });
  return y;
}

Tensor sum(Tape& tape, const Tensor& x) {
  const std::size_t n = x.size();
  auto forward = [=]() {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
  };
  Tensor y = Tensor::scalar(forward());
  if (!wants_grad({&x})) return y;
  y.set_requires_grad(true);
  tape.record(
      "sum", {x}, y, [=]() mutable { y[0] = forward(); },
      [=]() mutable {
        const double g = y.grad()[0];
        std::vector<double>& gx = x.grad();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
      });
  return y;
}

Tensor row(Tape& tape, const Tensor& x, int r) {
  if (x.rank() != 2) throw ShapeError("row: expected a rank-2 tensor");
  if (r < 0 || r >= x.dim(0)) throw ValueError("row: index out of range");
  const int C = x.dim(1);
  const std::size_t off = static_cast<std::size_t>(r) * C;
  Tensor y({C});
  for (int c = 0; c < C; ++c) y[static_cast<std::size_t>(c)] = x[off + c];
  if (!wants_grad({&x})) return y;
  y.set_requires_grad(true);
  tape.record(
      "row", {x}, y,
      [=]() mutable {
        for (int c = 0; c < C; ++c) y[static_cast<std::size_t>(c)] = x[off + c];
      },
      [=]() mutable {
        std::vector<double>& gx = x.grad();
        const std::vector<double>& gy = y.grad();
        for (int c = 0; c < C; ++c) gx[off + c] += gy[static_cast<std::size_t>(c)];
      });
  return y;
}

Tensor select_image(Tape& tape, const Tensor& x, int n) {
  if (x.rank() != 4) throw ShapeError("select_image: expected NCHW");
  if (n < 0 || n >= x.dim(0)) throw ValueError("select_image: index out of range");
  const std::size_t chw = x.size() / static_cast<std::size_t>(x.dim(0));
  const std::size_t off = static_cast<std::size_t>(n) * chw;
  Tensor y({x.dim(1), x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < chw; ++i) y[i] = x[off + i];
  if (!wants_grad({&x})) return y;
  y.set_requires_grad(true);
  tape.record(
      "select_image", {x}, y,
      [=]() mutable {
        for (std::size_t i = 0; i < chw; ++i) y[i] = x[off + i];
      },
      [=]() mutable {
        std::vector<double>& gx = x.grad();
        const std::vector<double>& gy = y.grad();
        for (std::size_t i = 0; i < chw; ++i) gx[off + i] += gy[i];
      });
  return y;
}

Tensor stack_maps(Tape& tape, const std::vector<Tensor>& maps) {
  if (maps.empty()) throw ValueError("stack_maps: need at least one map");
  const Shape& s0 = maps[0].shape();
  if (s0.size() != 2) throw ShapeError("stack_maps: maps must be rank-2");
  for (const Tensor& m : maps)
    if (m.shape() != s0) throw ShapeError("stack_maps: all maps must share one extent");
  const int N = static_cast<int>(maps.size());
  const std::size_t hw = numel(s0);
  Tensor y({N, 1, s0[0], s0[1]});
  for (int n = 0; n < N; ++n)
    for (std::size_t i = 0; i < hw; ++i) y[static_cast<std::size_t>(n) * hw + i] = maps[static_cast<std::size_t>(n)][i];
  bool grad = false;
  for (const Tensor& m : maps) grad = grad || m.requires_grad();
  if (!grad) return y;
  y.set_requires_grad(true);
  std::vector<Tensor> ins = maps;
  tape.record(
      "stack_maps", ins, y,
      [=]() mutable {
        for (int n = 0; n < N; ++n)
          for (std::size_t i = 0; i < hw; ++i)
            y[static_cast<std::size_t>(n) * hw + i] = ins[static_cast<std::size_t>(n)][i];
      },
      [=]() mutable {
        const std::vector<double>& gy = y.grad();
        for (int n = 0; n < N; ++n) {
          Tensor m = ins[static_cast<std::size_t>(n)];
          if (!m.requires_grad()) continue;
          std::vector<double>& gm = m.grad();
          for (std::size_t i = 0; i < hw; ++i) gm[i] += gy[static_cast<std::size_t>(n) * hw + i];
        }
      });
  return y;
}

}  // namespace mmc
