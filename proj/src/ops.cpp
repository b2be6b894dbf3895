#include "pabovw/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "pabovw/kernels.hpp"

namespace pabovw {

namespace {

using Node = Tensor::Node;
using NodePtr = std::shared_ptr<Node>;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() >= big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    return detail::make_op_result(
        a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
          for (int p = 0; p < 2; ++p) {
            Node& par = *n.parents[p];
            if (!par.requires_grad) continue;
            par.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) par.grad[i] += n.grad[i];
          }
        });
  }
  if (!is_suffix(b.shape(), a.shape())) {
    fail("add: shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()) + " (broadcast only over leading extents)");
  }
  const std::size_t bs = b.size();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i % bs);
  return detail::make_op_result(
      a.shape(), std::move(out), {a.node(), b.node()}, [bs](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            pb.grad[i % bs] += n.grad[i];
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return detail::make_op_result(
      a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return detail::make_op_result(
      a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa.grad[i] += n.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            pb.grad[i] += n.grad[i] * pa.data[i];
        }
      });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
  return detail::make_op_result(a.shape(), std::move(out), {a.node()}, [s](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * s;
  });
}

Tensor add_const(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
  return detail::make_op_result(a.shape(), std::move(out), {a.node()}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
  return detail::make_op_result(a.shape(), std::move(out), {a.node()}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (pa.data[i] > 0.0) pa.grad[i] += n.grad[i];
  });
}

Tensor abs_op(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.at(i));
  return detail::make_op_result(a.shape(), std::move(out), {a.node()}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = pa.data[i];
      if (x > 0.0)
        pa.grad[i] += n.grad[i];
      else if (x < 0.0)
        pa.grad[i] -= n.grad[i];
    }
  });
}

Tensor log_op(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.at(i));
  return detail::make_op_result(a.shape(), std::move(out), {a.node()}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      pa.grad[i] += n.grad[i] / pa.data[i];
  });
}

Tensor softmax(const Tensor& a) {
  if (a.rank() < 1 || a.rank() > 2) {
    fail("softmax: expected [C] or [N,C], got " + shape_str(a.shape()));
  }
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * cols;
    double* y = out.data() + r * cols;
    double m = x[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - m);
      z += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= z;
  }
  return detail::make_op_result(
      a.shape(), std::move(out), {a.node()}, [rows, cols](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = n.data.data() + r * cols;
          const double* g = n.grad.data() + r * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
          double* gx = pa.grad.data() + r * cols;
          for (std::size_t j = 0; j < cols; ++j) gx[j] += y[j] * (g[j] - dot);
        }
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_op_result(Shape{1}, {s}, {a.node()}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const double g = n.grad[0];
    for (double& v : pa.grad) v += g;
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  return detail::make_op_result(Shape{1}, {s * inv}, {a.node()}, [inv](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const double g = n.grad[0] * inv;
    for (double& v : pa.grad) v += g;
  });
}

Tensor mean_hw(const Tensor& a) {
  if (a.rank() < 3) {
    fail("mean_hw: expected at least rank 3, got " + shape_str(a.shape()));
  }
  const std::size_t w = a.shape()[a.rank() - 1];
  const std::size_t h = a.shape()[a.rank() - 2];
  const std::size_t hw = h * w;
  const std::size_t rows = a.size() / hw;
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  std::vector<double> out(rows);
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* x = a.data().data() + r * hw;
    for (std::size_t j = 0; j < hw; ++j) s += x[j];
    out[r] = s * inv;
  }
  return detail::make_op_result(
      std::move(out_shape), std::move(out), {a.node()}, [rows, hw, inv](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double g = n.grad[r] * inv;
          double* gx = pa.grad.data() + r * hw;
          for (std::size_t j = 0; j < hw; ++j) gx[j] += g;
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    fail("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
  const auto m = static_cast<kernels::idx>(a.shape()[0]);
  const auto k = static_cast<kernels::idx>(a.shape()[1]);
  const auto n = static_cast<kernels::idx>(b.shape()[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  kernels::matmul_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_op_result(
      Shape{a.shape()[0], b.shape()[1]}, std::move(out), {a.node(), b.node()},
      [m, k, n](Node& node) {
        Node& pa = *node.parents[0];
        Node& pb = *node.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          std::vector<double> tmp(static_cast<std::size_t>(m * k));
          kernels::matmul_nt(node.grad.data(), pb.data.data(), tmp.data(), m, n, k);
          for (std::size_t i = 0; i < tmp.size(); ++i) pa.grad[i] += tmp[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          std::vector<double> tmp(static_cast<std::size_t>(k * n));
          kernels::matmul_tn(pa.data.data(), node.grad.data(), tmp.data(), m, k, n);
          for (std::size_t i = 0; i < tmp.size(); ++i) pb.grad[i] += tmp[i];
        }
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) fail("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0];
  const std::size_t n = a.shape()[1];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i * n + j);
  return detail::make_op_result(
      Shape{n, m}, std::move(out), {a.node()}, [m, n](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            pa.grad[i * n + j] += node.grad[j * m + i];
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out = a.data();
  return detail::make_op_result(std::move(shape), std::move(out), {a.node()},
                                [](Node& node) {
                                  Node& pa = *node.parents[0];
                                  if (!pa.requires_grad) return;
                                  pa.ensure_grad();
                                  for (std::size_t i = 0; i < node.grad.size(); ++i)
                                    pa.grad[i] += node.grad[i];
                                });
}

Tensor nchw_to_rows(const Tensor& a) {
  if (a.rank() != 3 && a.rank() != 4) {
    fail("nchw_to_rows: expected [C,H,W] or [N,C,H,W], got " + shape_str(a.shape()));
  }
  const bool batched = a.rank() == 4;
  const std::size_t n = batched ? a.shape()[0] : 1;
  const std::size_t c = a.shape()[batched ? 1 : 0];
  const std::size_t h = a.shape()[batched ? 2 : 1];
  const std::size_t w = a.shape()[batched ? 3 : 2];
  std::vector<double> out(a.size());
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi)
          out[((ni * h + hi) * w + wi) * c + ci] =
              a.at(((ni * c + ci) * h + hi) * w + wi);
  return detail::make_op_result(
      Shape{n * h * w, c}, std::move(out), {a.node()}, [n, c, h, w](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t hi = 0; hi < h; ++hi)
              for (std::size_t wi = 0; wi < w; ++wi)
                pa.grad[((ni * c + ci) * h + hi) * w + wi] +=
                    node.grad[((ni * h + hi) * w + wi) * c + ci];
      });
}

Tensor rows_to_nchw(const Tensor& a, std::size_t n, std::size_t h, std::size_t w) {
  if (a.rank() != 2 || a.shape()[0] != n * h * w) {
    fail("rows_to_nchw: rows " + shape_str(a.shape()) + " do not match " +
         std::to_string(n) + "x" + std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t c = a.shape()[1];
  std::vector<double> out(a.size());
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi)
          out[((ni * c + ci) * h + hi) * w + wi] =
              a.at(((ni * h + hi) * w + wi) * c + ci);
  return detail::make_op_result(
      Shape{n, c, h, w}, std::move(out), {a.node()}, [n, c, h, w](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t hi = 0; hi < h; ++hi)
              for (std::size_t wi = 0; wi < w; ++wi)
                pa.grad[((ni * h + hi) * w + wi) * c + ci] +=
                    node.grad[((ni * c + ci) * h + hi) * w + wi];
      });
}

Tensor row_l2_normalize(const Tensor& a, double eps) {
  if (a.rank() != 2) {
    fail("row_l2_normalize: expected [R,D], got " + shape_str(a.shape()));
  }
  if (eps <= 0.0) fail("row_l2_normalize: eps must be positive");
  const std::size_t rows = a.shape()[0];
  const std::size_t d = a.shape()[1];
  std::vector<double> out(a.size());
  std::vector<double> norms(rows);
  std::vector<char> clamped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[j] * x[j];
    const double nrm = std::sqrt(s);
    const double denom = std::max(nrm, eps);
    norms[r] = denom;
    clamped[r] = nrm < eps;
    double* y = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) y[j] = x[j] / denom;
  }
  return detail::make_op_result(
      a.shape(), std::move(out), {a.node()},
      [rows, d, norms = std::move(norms), clamped = std::move(clamped)](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = node.data.data() + r * d;
          const double* g = node.grad.data() + r * d;
          double* gx = pa.grad.data() + r * d;
          if (clamped[r]) {
            for (std::size_t j = 0; j < d; ++j) gx[j] += g[j] / norms[r];
          } else {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < d; ++j)
              gx[j] += (g[j] - dot * y[j]) / norms[r];
          }
        }
      });
}

Tensor cosine_sim(const Tensor& u, const Tensor& v, double eps) {
  if (u.rank() != 1 || v.rank() != 1 || u.size() != v.size()) {
    fail("cosine_sim: expected equal-length vectors, got " + shape_str(u.shape()) +
         " vs " + shape_str(v.shape()));
  }
  if (eps <= 0.0) fail("cosine_sim: eps must be positive");
  Tensor un = row_l2_normalize(reshape(u, {1, u.size()}), eps);
  Tensor vn = row_l2_normalize(reshape(v, {1, v.size()}), eps);
  return sum(mul(un, vn));
}

Tensor select_row(const Tensor& a, std::size_t row) {
  if (a.rank() != 2) fail("select_row: expected [R,D], got " + shape_str(a.shape()));
  if (row >= a.shape()[0]) {
    fail("select_row: row " + std::to_string(row) + " out of range for " +
         shape_str(a.shape()));
  }
  const std::size_t d = a.shape()[1];
  std::vector<double> out(a.data().begin() + row * d,
                          a.data().begin() + (row + 1) * d);
  return detail::make_op_result(Shape{d}, std::move(out), {a.node()},
                                [row, d](Node& node) {
                                  Node& pa = *node.parents[0];
                                  if (!pa.requires_grad) return;
                                  pa.ensure_grad();
                                  for (std::size_t j = 0; j < d; ++j)
                                    pa.grad[row * d + j] += node.grad[j];
                                });
}

Tensor zero_diag(const Tensor& a) {
  if (a.rank() != 2 || a.shape()[0] != a.shape()[1]) {
    fail("zero_diag: expected square matrix, got " + shape_str(a.shape()));
  }
  const std::size_t k = a.shape()[0];
  std::vector<double> out = a.data();
  for (std::size_t i = 0; i < k; ++i) out[i * k + i] = 0.0;
  return detail::make_op_result(a.shape(), std::move(out), {a.node()}, [k](Node& node) {
    Node& pa = *node.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        if (i != j) pa.grad[i * k + j] += node.grad[i * k + j];
  });
}

Tensor center_rows(const Tensor& a) {
  if (a.rank() != 2) fail("center_rows: expected [R,D], got " + shape_str(a.shape()));
  const std::size_t rows = a.shape()[0];
  const std::size_t d = a.shape()[1];
  std::vector<double> out(a.size());
  const double inv = 1.0 / static_cast<double>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += x[j];
    m *= inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[j] - m;
  }
  return detail::make_op_result(
      a.shape(), std::move(out), {a.node()}, [rows, d, inv](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = node.grad.data() + r * d;
          double gm = 0.0;
          for (std::size_t j = 0; j < d; ++j) gm += g[j];
          gm *= inv;
          double* gx = pa.grad.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) gx[j] += g[j] - gm;
        }
      });
}

Tensor stack0(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("stack0: no tensors given");
  const Shape& s0 = parts[0].shape();
  for (const Tensor& t : parts) {
    if (t.shape() != s0) {
      fail("stack0: shape mismatch " + shape_str(s0) + " vs " + shape_str(t.shape()));
    }
  }
  const std::size_t per = parts[0].size();
  Shape out_shape;
  out_shape.push_back(parts.size());
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  std::vector<double> out;
  out.reserve(per * parts.size());
  std::vector<NodePtr> parents;
  parents.reserve(parts.size());
  for (const Tensor& t : parts) {
    out.insert(out.end(), t.data().begin(), t.data().end());
    parents.push_back(t.node());
  }
  return detail::make_op_result(
      std::move(out_shape), std::move(out), std::move(parents), [per](Node& node) {
        for (std::size_t p = 0; p < node.parents.size(); ++p) {
          Node& par = *node.parents[p];
          if (!par.requires_grad) continue;
          par.ensure_grad();
          const double* g = node.grad.data() + p * per;
          for (std::size_t i = 0; i < per; ++i) par.grad[i] += g[i];
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    fail("conv2d: expected x [N,Ci,H,W] and w [Co,Ci,k,k], got " +
         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (x.shape()[1] != w.shape()[1]) {
    fail("conv2d: channel mismatch, input " + shape_str(x.shape()) +
         " vs kernel " + shape_str(w.shape()));
  }
  if (w.shape()[2] != w.shape()[3]) {
    fail("conv2d: kernel must be square, got " + shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.shape()[0] != w.shape()[0])) {
    fail("conv2d: bias " + shape_str(bias.shape()) + " does not match kernel " +
         shape_str(w.shape()));
  }
  auto d = kernels::conv_out_dims(
      static_cast<kernels::idx>(x.shape()[0]), static_cast<kernels::idx>(x.shape()[1]),
      static_cast<kernels::idx>(x.shape()[2]), static_cast<kernels::idx>(x.shape()[3]),
      static_cast<kernels::idx>(w.shape()[0]), static_cast<kernels::idx>(w.shape()[2]),
      static_cast<kernels::idx>(stride), static_cast<kernels::idx>(pad));
  std::vector<double> out(static_cast<std::size_t>(d.n * d.co * d.oh * d.ow));
  kernels::conv2d_forward(x.data().data(), w.data().data(),
                          has_bias ? bias.data().data() : nullptr, out.data(), d);
  std::vector<NodePtr> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  return detail::make_op_result(
      Shape{static_cast<std::size_t>(d.n), static_cast<std::size_t>(d.co),
            static_cast<std::size_t>(d.oh), static_cast<std::size_t>(d.ow)},
      std::move(out), std::move(parents), [d, has_bias](Node& node) {
        Node& px = *node.parents[0];
        Node& pw = *node.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          kernels::conv2d_backward_input(node.grad.data(), pw.data.data(),
                                         px.grad.data(), d);
        }
        double* gbias = nullptr;
        if (has_bias) {
          Node& pb = *node.parents[2];
          if (pb.requires_grad) {
            pb.ensure_grad();
            gbias = pb.grad.data();
          }
        }
        if (pw.requires_grad || gbias) {
          double* gw = nullptr;
          if (pw.requires_grad) {
            pw.ensure_grad();
            gw = pw.grad.data();
          }
          if (gw) {
            kernels::conv2d_backward_weights(node.grad.data(), px.data.data(), gw,
                                             gbias, d);
          } else if (gbias) {
            // bias-only gradient
            for (kernels::idx co = 0; co < d.co; ++co) {
              double acc = 0.0;
              for (kernels::idx n = 0; n < d.n; ++n) {
                const double* gp = node.grad.data() + (n * d.co + co) * d.oh * d.ow;
                for (kernels::idx i = 0; i < d.oh * d.ow; ++i) acc += gp[i];
              }
              gbias[co] += acc;
            }
          }
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, bool training,
                 double momentum, double eps) {
  if (x.rank() != 2 && x.rank() != 4) {
    fail("batchnorm: expected [N,C] or [N,C,H,W], got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape()[0];
  const std::size_t c = x.shape()[1];
  const std::size_t spatial = x.size() / (n * c);
  const std::size_t cnt = n * spatial;
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c) {
    fail("batchnorm: parameter length does not match " + std::to_string(c) +
         " channels");
  }
  if (training && cnt < 2) {
    fail("batchnorm: train mode requires a per-channel population of at least 2, got " +
         std::to_string(cnt));
  }

  std::vector<double> out(x.size());
  auto x_index = [n, c, spatial](std::size_t ni, std::size_t ci, std::size_t si) {
    (void)n;
    return (ni * c + ci) * spatial + si;
  };

  if (!training) {
    std::vector<double> rinv(c);
    for (std::size_t ci = 0; ci < c; ++ci)
      rinv[ci] = 1.0 / std::sqrt(running_var.at(ci) + eps);
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t si = 0; si < spatial; ++si) {
          const std::size_t i = x_index(ni, ci, si);
          out[i] = gamma.at(ci) * (x.at(i) - running_mean.at(ci)) * rinv[ci] +
                   beta.at(ci);
        }
    Tensor rm = running_mean;  // keep buffers alive in the closure
    Tensor rv = running_var;
    return detail::make_op_result(
        x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
        [n, c, spatial, rinv = std::move(rinv), rm, rv](Node& node) {
          Node& px = *node.parents[0];
          Node& pg = *node.parents[1];
          Node& pb = *node.parents[2];
          if (px.requires_grad) px.ensure_grad();
          if (pg.requires_grad) pg.ensure_grad();
          if (pb.requires_grad) pb.ensure_grad();
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t ci = 0; ci < c; ++ci)
              for (std::size_t si = 0; si < spatial; ++si) {
                const std::size_t i = (ni * c + ci) * spatial + si;
                const double g = node.grad[i];
                if (px.requires_grad)
                  px.grad[i] += g * pg.data[ci] * rinv[ci];
                if (pg.requires_grad)
                  pg.grad[ci] += g * (px.data[i] - rm.at(ci)) * rinv[ci];
                if (pb.requires_grad) pb.grad[ci] += g;
              }
        });
  }

  // Train mode: batch statistics, biased variance for normalization,
  // unbiased variance folded into the running buffer.
  std::vector<double> mu(c, 0.0), var(c, 0.0), invstd(c);
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t si = 0; si < spatial; ++si) mu[ci] += x.at(x_index(ni, ci, si));
  for (std::size_t ci = 0; ci < c; ++ci) mu[ci] /= static_cast<double>(cnt);
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t si = 0; si < spatial; ++si) {
        const double dvt = x.at(x_index(ni, ci, si)) - mu[ci];
        var[ci] += dvt * dvt;
      }
  for (std::size_t ci = 0; ci < c; ++ci) {
    var[ci] /= static_cast<double>(cnt);
    invstd[ci] = 1.0 / std::sqrt(var[ci] + eps);
  }

  std::vector<double> xhat(x.size());
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t si = 0; si < spatial; ++si) {
        const std::size_t i = x_index(ni, ci, si);
        xhat[i] = (x.at(i) - mu[ci]) * invstd[ci];
        out[i] = gamma.at(ci) * xhat[i] + beta.at(ci);
      }

  const double unbias = static_cast<double>(cnt) / static_cast<double>(cnt - 1);
  for (std::size_t ci = 0; ci < c; ++ci) {
    running_mean.at(ci) = (1.0 - momentum) * running_mean.at(ci) + momentum * mu[ci];
    running_var.at(ci) =
        (1.0 - momentum) * running_var.at(ci) + momentum * var[ci] * unbias;
  }

  return detail::make_op_result(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [n, c, spatial, cnt, invstd = std::move(invstd),
       xhat = std::move(xhat)](Node& node) {
        Node& px = *node.parents[0];
        Node& pg = *node.parents[1];
        Node& pb = *node.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        const double invcnt = 1.0 / static_cast<double>(cnt);
        for (std::size_t ci = 0; ci < c; ++ci) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t si = 0; si < spatial; ++si) {
              const std::size_t i = (ni * c + ci) * spatial + si;
              sum_g += node.grad[i];
              sum_gx += node.grad[i] * xhat[i];
            }
          if (pg.requires_grad) pg.grad[ci] += sum_gx;
          if (pb.requires_grad) pb.grad[ci] += sum_g;
          if (px.requires_grad) {
            const double k = pg.data[ci] * invstd[ci];
            for (std::size_t ni = 0; ni < n; ++ni)
              for (std::size_t si = 0; si < spatial; ++si) {
                const std::size_t i = (ni * c + ci) * spatial + si;
                px.grad[i] +=
                    k * (node.grad[i] - (sum_g + xhat[i] * sum_gx) * invcnt);
              }
          }
        }
      });
}

namespace {

struct BilinearTap {
  std::size_t i00, i01, i10, i11;
  double w00, w01, w10, w11;
};

// Precomputes the sample taps shared by forward and backward.
std::vector<BilinearTap> bilinear_taps(double x1, double y1, double x2, double y2,
                                       std::size_t in_h, std::size_t in_w,
                                       std::size_t out_h, std::size_t out_w) {
  std::vector<BilinearTap> taps(out_h * out_w);
  const double sy = (y2 - y1) / static_cast<double>(out_h);
  const double sx = (x2 - x1) / static_cast<double>(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    double fy = y1 + (static_cast<double>(oy) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(in_h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1i = std::min(y0 + 1, in_h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double fx = x1 + (static_cast<double>(ox) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(in_w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1i = std::min(x0 + 1, in_w - 1);
      const double wx = fx - static_cast<double>(x0);
      BilinearTap& t = taps[oy * out_w + ox];
      t.i00 = y0 * in_w + x0;
      t.i01 = y0 * in_w + x1i;
      t.i10 = y1i * in_w + x0;
      t.i11 = y1i * in_w + x1i;
      t.w00 = (1.0 - wy) * (1.0 - wx);
      t.w01 = (1.0 - wy) * wx;
      t.w10 = wy * (1.0 - wx);
      t.w11 = wy * wx;
    }
  }
  return taps;
}

}  // namespace

Tensor crop_resize_bilinear(const Tensor& x, double x1, double y1, double x2,
                            double y2, std::size_t out_h, std::size_t out_w) {
  if (x.rank() < 2) {
    fail("crop_resize_bilinear: expected spatial tensor, got " + shape_str(x.shape()));
  }
  if (out_h < 1 || out_w < 1) fail("crop_resize_bilinear: output extents must be >= 1");
  if (!(x2 > x1) || !(y2 > y1)) {
    fail("crop_resize_bilinear: degenerate box");
  }
  const std::size_t in_w = x.shape()[x.rank() - 1];
  const std::size_t in_h = x.shape()[x.rank() - 2];
  const std::size_t planes = x.size() / (in_h * in_w);
  auto taps = bilinear_taps(x1, y1, x2, y2, in_h, in_w, out_h, out_w);

  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  out_shape.push_back(out_h);
  out_shape.push_back(out_w);
  std::vector<double> out(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * in_h * in_w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < taps.size(); ++i) {
      const BilinearTap& t = taps[i];
      dst[i] = t.w00 * src[t.i00] + t.w01 * src[t.i01] + t.w10 * src[t.i10] +
               t.w11 * src[t.i11];
    }
  }
  const std::size_t in_plane = in_h * in_w;
  const std::size_t out_plane = out_h * out_w;
  return detail::make_op_result(
      std::move(out_shape), std::move(out), {x.node()},
      [planes, in_plane, out_plane, taps = std::move(taps)](Node& node) {
        Node& px = *node.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (std::size_t p = 0; p < planes; ++p) {
          const double* g = node.grad.data() + p * out_plane;
          double* gx = px.grad.data() + p * in_plane;
          for (std::size_t i = 0; i < out_plane; ++i) {
            const BilinearTap& t = taps[i];
            gx[t.i00] += t.w00 * g[i];
            gx[t.i01] += t.w01 * g[i];
            gx[t.i10] += t.w10 * g[i];
            gx[t.i11] += t.w11 * g[i];
          }
        }
      });
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() < 2) {
    fail("bilinear_resize: expected spatial tensor, got " + shape_str(x.shape()));
  }
  const std::size_t in_w = x.shape()[x.rank() - 1];
  const std::size_t in_h = x.shape()[x.rank() - 2];
  return crop_resize_bilinear(x, 0.0, 0.0, static_cast<double>(in_w),
                              static_cast<double>(in_h), out_h, out_w);
}

Tensor cross_entropy_logits(const Tensor& logits,
                            const std::vector<std::size_t>& labels) {
  if (logits.rank() != 1 && logits.rank() != 2) {
    fail("cross_entropy: expected [C] or [N,C] logits, got " +
         shape_str(logits.shape()));
  }
  const std::size_t cols = logits.shape().back();
  const std::size_t rows = logits.size() / cols;
  if (labels.size() != rows) {
    fail("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
         std::to_string(rows) + " rows");
  }
  for (std::size_t label : labels) {
    if (label >= cols) {
      fail("cross_entropy: label " + std::to_string(label) +
           " out of range for " + std::to_string(cols) + " classes");
    }
  }
  std::vector<double> probs(logits.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* l = logits.data().data() + r * cols;
    double m = l[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, l[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(l[j] - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) probs[r * cols + j] = std::exp(l[j] - lse);
    loss += lse - l[labels[r]];
  }
  loss /= static_cast<double>(rows);
  return detail::make_op_result(
      Shape{1}, {loss}, {logits.node()},
      [rows, cols, labels, probs = std::move(probs)](Node& node) {
        Node& pl = *node.parents[0];
        if (!pl.requires_grad) return;
        pl.ensure_grad();
        const double g = node.grad[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < cols; ++j) {
            double d = probs[r * cols + j];
            if (j == labels[r]) d -= 1.0;
            pl.grad[r * cols + j] += g * d;
          }
        }
      });
}

Tensor cross_entropy_logits(const Tensor& logits, std::size_t label) {
  return cross_entropy_logits(logits, std::vector<std::size_t>{label});
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
  require_same_shape(pred, target, "smooth_l1");
  if (beta <= 0.0) fail("smooth_l1: beta must be positive");
  const std::size_t cnt = pred.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < cnt; ++i) {
    const double d = pred.at(i) - target.at(i);
    const double a = std::abs(d);
    loss += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  }
  loss /= static_cast<double>(cnt);
  return detail::make_op_result(
      Shape{1}, {loss}, {pred.node(), target.node()}, [cnt, beta](Node& node) {
        Node& pp = *node.parents[0];
        Node& pt = *node.parents[1];
        const double g = node.grad[0] / static_cast<double>(cnt);
        if (pp.requires_grad) pp.ensure_grad();
        if (pt.requires_grad) pt.ensure_grad();
        for (std::size_t i = 0; i < cnt; ++i) {
          const double d = pp.data[i] - pt.data[i];
          const double slope = std::clamp(d / beta, -1.0, 1.0) * g;
          if (pp.requires_grad) pp.grad[i] += slope;
          if (pt.requires_grad) pt.grad[i] -= slope;
        }
      });
}

}  // namespace pabovw
