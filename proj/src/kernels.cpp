#include "pabovw/kernels.hpp"

#include <omp.h>

#include <atomic>
#include <stdexcept>
#include <string>

namespace pabovw::kernels {

namespace {
std::atomic<bool> g_parallel{true};
std::atomic<int> g_max_threads{0};  // 0 = library default

int worker_count() {
  int n = omp_get_max_threads();
  int cap = g_max_threads.load();
  if (cap > 0 && cap < n) n = cap;
  return n;
}

bool go_parallel(idx work) {
  // Tiny problems are not worth the fork/join.
  return g_parallel.load() && work >= 4096 && worker_count() > 1 &&
         !omp_in_parallel();
}
}  // namespace

bool parallel_enabled() { return g_parallel.load(); }
void set_parallel(bool on) { g_parallel.store(on); }
void set_max_threads(int n) { g_max_threads.store(n); }
int max_threads() { return worker_count(); }

// ---------------------------------------------------------------------------
// matmul

void matmul_nn_serial(const double* a, const double* b, double* c, idx m, idx k, idx n) {
  for (idx i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (idx j = 0; j < n; ++j) crow[j] = 0.0;
    for (idx p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (idx j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nn_omp(const double* a, const double* b, double* c, idx m, idx k, idx n) {
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (idx i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (idx j = 0; j < n; ++j) crow[j] = 0.0;
    for (idx p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (idx j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nn(const double* a, const double* b, double* c, idx m, idx k, idx n) {
  if (go_parallel(m * k * n) && m > 1) {
    matmul_nn_omp(a, b, c, m, k, n);
  } else {
    matmul_nn_serial(a, b, c, m, k, n);
  }
}

void matmul_nt_serial(const double* a, const double* b, double* c, idx m, idx n, idx k) {
  for (idx i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (idx j = 0; j < k; ++j) {
      const double* brow = b + j * n;
      double acc = 0.0;
      for (idx p = 0; p < n; ++p) acc += arow[p] * brow[p];
      c[i * k + j] = acc;
    }
  }
}

void matmul_nt_omp(const double* a, const double* b, double* c, idx m, idx n, idx k) {
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (idx i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (idx j = 0; j < k; ++j) {
      const double* brow = b + j * n;
      double acc = 0.0;
      for (idx p = 0; p < n; ++p) acc += arow[p] * brow[p];
      c[i * k + j] = acc;
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, idx m, idx n, idx k) {
  if (go_parallel(m * n * k) && m > 1) {
    matmul_nt_omp(a, b, c, m, n, k);
  } else {
    matmul_nt_serial(a, b, c, m, n, k);
  }
}

void matmul_tn_serial(const double* a, const double* b, double* c, idx m, idx k, idx n) {
  for (idx i = 0; i < k; ++i) {
    double* crow = c + i * n;
    for (idx j = 0; j < n; ++j) crow[j] = 0.0;
    for (idx p = 0; p < m; ++p) {
      const double av = a[p * k + i];
      const double* brow = b + p * n;
      for (idx j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn_omp(const double* a, const double* b, double* c, idx m, idx k, idx n) {
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (idx i = 0; i < k; ++i) {
    double* crow = c + i * n;
    for (idx j = 0; j < n; ++j) crow[j] = 0.0;
    for (idx p = 0; p < m; ++p) {
      const double av = a[p * k + i];
      const double* brow = b + p * n;
      for (idx j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, idx m, idx k, idx n) {
  if (go_parallel(m * k * n) && k > 1) {
    matmul_tn_omp(a, b, c, m, k, n);
  } else {
    matmul_tn_serial(a, b, c, m, k, n);
  }
}

// ---------------------------------------------------------------------------
// conv2d

Conv2dDims conv_out_dims(idx n, idx ci, idx h, idx w, idx co, idx k, idx stride, idx pad) {
  if (k != 1 && k != 3) {
    throw std::invalid_argument("conv2d: kernel size must be 1 or 3, got " +
                                std::to_string(k));
  }
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument("conv2d: stride must be 1 or 2, got " +
                                std::to_string(stride));
  }
  if (k > h + 2 * pad || k > w + 2 * pad) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(k) +
                                " larger than padded input " + std::to_string(h + 2 * pad) +
                                "x" + std::to_string(w + 2 * pad));
  }
  Conv2dDims d{n, ci, h, w, co, k, stride, pad, 0, 0};
  d.oh = (h + 2 * pad - k) / stride + 1;
  d.ow = (w + 2 * pad - k) / stride + 1;
  return d;
}

namespace {

inline void conv_fwd_cell(const double* x, const double* w, const double* bias,
                          double* out, const Conv2dDims& d, idx n, idx co) {
  const double b = bias ? bias[co] : 0.0;
  double* o = out + (n * d.co + co) * d.oh * d.ow;
  for (idx oh = 0; oh < d.oh; ++oh) {
    for (idx ow = 0; ow < d.ow; ++ow) {
      double acc = b;
      for (idx ci = 0; ci < d.ci; ++ci) {
        const double* xp = x + (n * d.ci + ci) * d.h * d.w;
        const double* wp = w + ((co * d.ci + ci) * d.k) * d.k;
        for (idx kh = 0; kh < d.k; ++kh) {
          const idx ih = oh * d.stride - d.pad + kh;
          if (ih < 0 || ih >= d.h) continue;
          for (idx kw = 0; kw < d.k; ++kw) {
            const idx iw = ow * d.stride - d.pad + kw;
            if (iw < 0 || iw >= d.w) continue;
            acc += xp[ih * d.w + iw] * wp[kh * d.k + kw];
          }
        }
      }
      o[oh * d.ow + ow] = acc;
    }
  }
}

inline void conv_bwd_input_cell(const double* gout, const double* w, double* gx,
                                const Conv2dDims& d, idx n, idx ci) {
  double* g = gx + (n * d.ci + ci) * d.h * d.w;
  for (idx ih = 0; ih < d.h; ++ih) {
    for (idx iw = 0; iw < d.w; ++iw) {
      double acc = 0.0;
      for (idx co = 0; co < d.co; ++co) {
        const double* gp = gout + (n * d.co + co) * d.oh * d.ow;
        const double* wp = w + ((co * d.ci + ci) * d.k) * d.k;
        for (idx kh = 0; kh < d.k; ++kh) {
          const idx num_h = ih + d.pad - kh;
          if (num_h < 0 || num_h % d.stride) continue;
          const idx oh = num_h / d.stride;
          if (oh >= d.oh) continue;
          for (idx kw = 0; kw < d.k; ++kw) {
            const idx num_w = iw + d.pad - kw;
            if (num_w < 0 || num_w % d.stride) continue;
            const idx ow = num_w / d.stride;
            if (ow >= d.ow) continue;
            acc += gp[oh * d.ow + ow] * wp[kh * d.k + kw];
          }
        }
      }
      g[ih * d.w + iw] += acc;
    }
  }
}

inline void conv_bwd_weight_cell(const double* gout, const double* x, double* gw,
                                 const Conv2dDims& d, idx co, idx ci, idx kh, idx kw) {
  double acc = 0.0;
  for (idx n = 0; n < d.n; ++n) {
    const double* gp = gout + (n * d.co + co) * d.oh * d.ow;
    const double* xp = x + (n * d.ci + ci) * d.h * d.w;
    for (idx oh = 0; oh < d.oh; ++oh) {
      const idx ih = oh * d.stride - d.pad + kh;
      if (ih < 0 || ih >= d.h) continue;
      for (idx ow = 0; ow < d.ow; ++ow) {
        const idx iw = ow * d.stride - d.pad + kw;
        if (iw < 0 || iw >= d.w) continue;
        acc += gp[oh * d.ow + ow] * xp[ih * d.w + iw];
      }
    }
  }
  gw[((co * d.ci + ci) * d.k + kh) * d.k + kw] += acc;
}

}  // namespace

void conv2d_forward_serial(const double* x, const double* w, const double* bias,
                           double* out, const Conv2dDims& d) {
  for (idx n = 0; n < d.n; ++n)
    for (idx co = 0; co < d.co; ++co) conv_fwd_cell(x, w, bias, out, d, n, co);
}

void conv2d_forward_omp(const double* x, const double* w, const double* bias,
                        double* out, const Conv2dDims& d) {
#pragma omp parallel for collapse(2) schedule(static) num_threads(worker_count())
  for (idx n = 0; n < d.n; ++n)
    for (idx co = 0; co < d.co; ++co) conv_fwd_cell(x, w, bias, out, d, n, co);
}

void conv2d_forward(const double* x, const double* w, const double* bias,
                    double* out, const Conv2dDims& d) {
  const idx work = d.n * d.co * d.oh * d.ow * d.ci * d.k * d.k;
  if (go_parallel(work) && d.n * d.co > 1) {
    conv2d_forward_omp(x, w, bias, out, d);
  } else {
    conv2d_forward_serial(x, w, bias, out, d);
  }
}

void conv2d_backward_input_serial(const double* gout, const double* w, double* gx,
                                  const Conv2dDims& d) {
  for (idx n = 0; n < d.n; ++n)
    for (idx ci = 0; ci < d.ci; ++ci) conv_bwd_input_cell(gout, w, gx, d, n, ci);
}

void conv2d_backward_input_omp(const double* gout, const double* w, double* gx,
                               const Conv2dDims& d) {
#pragma omp parallel for collapse(2) schedule(static) num_threads(worker_count())
  for (idx n = 0; n < d.n; ++n)
    for (idx ci = 0; ci < d.ci; ++ci) conv_bwd_input_cell(gout, w, gx, d, n, ci);
}

void conv2d_backward_input(const double* gout, const double* w, double* gx,
                           const Conv2dDims& d) {
  const idx work = d.n * d.ci * d.h * d.w * d.co * d.k * d.k;
  if (go_parallel(work) && d.n * d.ci > 1) {
    conv2d_backward_input_omp(gout, w, gx, d);
  } else {
    conv2d_backward_input_serial(gout, w, gx, d);
  }
}

void conv2d_backward_weights_serial(const double* gout, const double* x, double* gw,
                                    double* gbias, const Conv2dDims& d) {
  for (idx co = 0; co < d.co; ++co)
    for (idx ci = 0; ci < d.ci; ++ci)
      for (idx kh = 0; kh < d.k; ++kh)
        for (idx kw = 0; kw < d.k; ++kw)
          conv_bwd_weight_cell(gout, x, gw, d, co, ci, kh, kw);
  if (gbias) {
    for (idx co = 0; co < d.co; ++co) {
      double acc = 0.0;
      for (idx n = 0; n < d.n; ++n) {
        const double* gp = gout + (n * d.co + co) * d.oh * d.ow;
        for (idx i = 0; i < d.oh * d.ow; ++i) acc += gp[i];
      }
      gbias[co] += acc;
    }
  }
}

void conv2d_backward_weights_omp(const double* gout, const double* x, double* gw,
                                 double* gbias, const Conv2dDims& d) {
#pragma omp parallel for collapse(2) schedule(static) num_threads(worker_count())
  for (idx co = 0; co < d.co; ++co)
    for (idx ci = 0; ci < d.ci; ++ci)
      for (idx kh = 0; kh < d.k; ++kh)
        for (idx kw = 0; kw < d.k; ++kw)
          conv_bwd_weight_cell(gout, x, gw, d, co, ci, kh, kw);
  if (gbias) {
#pragma omp parallel for schedule(static) num_threads(worker_count())
    for (idx co = 0; co < d.co; ++co) {
      double acc = 0.0;
      for (idx n = 0; n < d.n; ++n) {
        const double* gp = gout + (n * d.co + co) * d.oh * d.ow;
        for (idx i = 0; i < d.oh * d.ow; ++i) acc += gp[i];
      }
      gbias[co] += acc;
    }
  }
}

void conv2d_backward_weights(const double* gout, const double* x, double* gw,
                             double* gbias, const Conv2dDims& d) {
  const idx work = d.n * d.co * d.ci * d.k * d.k * d.oh * d.ow;
  if (go_parallel(work) && d.co * d.ci > 1) {
    conv2d_backward_weights_omp(gout, x, gw, gbias, d);
  } else {
    conv2d_backward_weights_serial(gout, x, gw, gbias, d);
  }
}

}  // namespace pabovw::kernels
