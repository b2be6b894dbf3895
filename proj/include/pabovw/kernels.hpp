#pragma once

#include <cstdint>

namespace pabovw::kernels {

// The hot inner loops (matmul and conv2d) exist in two variants: a plain
// serial reference and an OpenMP version. The OpenMP variants partition work
// over independent output elements and keep the per-element accumulation
// order identical to the serial code, so the two produce bit-identical
// results for any thread count. Tests assert that equality; the kernel_bench
// tool compares their throughput.

using idx = std::int64_t;

bool parallel_enabled();
void set_parallel(bool on);
// Caps OpenMP worker count (also applied from BOVW_DISTILL_THREADS by the CLI).
void set_max_threads(int n);
int max_threads();

// c[m,n] = sum_k a[m,k] * b[k,n]
void matmul_nn_serial(const double* a, const double* b, double* c, idx m, idx k, idx n);
void matmul_nn_omp(const double* a, const double* b, double* c, idx m, idx k, idx n);
void matmul_nn(const double* a, const double* b, double* c, idx m, idx k, idx n);

// c[m,k] = sum_n a[m,n] * b[k,n]   (b used transposed)
void matmul_nt_serial(const double* a, const double* b, double* c, idx m, idx n, idx k);
void matmul_nt_omp(const double* a, const double* b, double* c, idx m, idx n, idx k);
void matmul_nt(const double* a, const double* b, double* c, idx m, idx n, idx k);

// c[k,n] = sum_m a[m,k] * b[m,n]   (a used transposed)
void matmul_tn_serial(const double* a, const double* b, double* c, idx m, idx k, idx n);
void matmul_tn_omp(const double* a, const double* b, double* c, idx m, idx k, idx n);
void matmul_tn(const double* a, const double* b, double* c, idx m, idx k, idx n);

struct Conv2dDims {
  idx n, ci, h, w;   // input
  idx co, k;         // kernel bank
  idx stride, pad;
  idx oh, ow;        // output extents, filled by conv_out_dims
};

// floor((e + 2*pad - k)/stride) + 1, validated against the kernel size.
Conv2dDims conv_out_dims(idx n, idx ci, idx h, idx w, idx co, idx k, idx stride, idx pad);

// out[n,co,oh,ow] = bias[co] + sum_{ci,kh,kw} x[n,ci,ih,iw] * w[co,ci,kh,kw]
void conv2d_forward_serial(const double* x, const double* w, const double* bias,
                           double* out, const Conv2dDims& d);
void conv2d_forward_omp(const double* x, const double* w, const double* bias,
                        double* out, const Conv2dDims& d);
void conv2d_forward(const double* x, const double* w, const double* bias,
                    double* out, const Conv2dDims& d);

// gx[n,ci,ih,iw] += gather of gout against the kernel (accumulates into gx).
void conv2d_backward_input_serial(const double* gout, const double* w, double* gx,
                                  const Conv2dDims& d);
void conv2d_backward_input_omp(const double* gout, const double* w, double* gx,
                               const Conv2dDims& d);
void conv2d_backward_input(const double* gout, const double* w, double* gx,
                           const Conv2dDims& d);

// gw[co,ci,kh,kw] += sum_{n,oh,ow} gout * x; gbias[co] += sum gout (if not null).
void conv2d_backward_weights_serial(const double* gout, const double* x, double* gw,
                                    double* gbias, const Conv2dDims& d);
void conv2d_backward_weights_omp(const double* gout, const double* x, double* gw,
                                 double* gbias, const Conv2dDims& d);
void conv2d_backward_weights(const double* gout, const double* x, double* gw,
                             double* gbias, const Conv2dDims& d);

}  // namespace pabovw::kernels
