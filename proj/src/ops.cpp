#include "chartrans/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "chartrans/errors.hpp"

namespace chartrans {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

using Index = Eigen::Index;

// Matrix product of aligned copies. Eigen's small-product and matrix-vector
// kernels peel loops according to operand addresses, so the same product read
// from differently aligned buffers can differ in the last bit. Copying first
// makes results depend on values and shapes only.
template <typename T, typename A, typename B>
RowMat<T> product(const A& a, const B& b) {
  const RowMat<T> x = a;
  const RowMat<T> y = b;
  RowMat<T> r(x.rows(), y.cols());
  r.noalias() = x * y;
  return r;
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

template <typename T>
std::size_t last_dim(const Tensor<T>& x) {
  return x.rank() == 0 ? 1 : x.shape().back();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  Map<T>(out.data(), m, n) = product<T>(MapC<T>(a.data().data(), m, k), MapC<T>(b.data().data(), k, n));
  return make_result<T>({std::size_t(m), std::size_t(n)}, std::move(out), {a, b},
                        [a, b, m, k, n](const detail::Node<T>& self) {
                          MapC<T> g(self.grad.data(), m, n);
                          if (auto ga = a.grad_sink(); !ga.empty()) {
                            Map<T>(ga.data(), m, k) += product<T>(g, MapC<T>(b.data().data(), k, n).transpose());
                          }
                          if (auto gb = b.grad_sink(); !gb.empty()) {
                            Map<T>(gb.data(), k, n) += product<T>(MapC<T>(a.data().data(), m, k).transpose(), g);
                          }
                        });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index p = transpose_b ? b.dim(1) : b.dim(2);
  const Index bk = transpose_b ? b.dim(2) : b.dim(1);
  if (Index(b.dim(0)) != batch || bk != k) {
    throw ShapeError("bmm: dimension mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const Index b_rows = b.dim(1), b_cols = b.dim(2);
  std::vector<T> out(batch * m * p);
  for (Index i = 0; i < batch; ++i) {
    MapC<T> am(a.data().data() + i * m * k, m, k);
    MapC<T> bm(b.data().data() + i * b_rows * b_cols, b_rows, b_cols);
    Map<T> om(out.data() + i * m * p, m, p);
    if (transpose_b) {
      om = product<T>(am, bm.transpose());
    } else {
      om = product<T>(am, bm);
    }
  }
  return make_result<T>(
      {std::size_t(batch), std::size_t(m), std::size_t(p)}, std::move(out), {a, b},
      [a, b, batch, m, k, p, b_rows, b_cols, transpose_b](const detail::Node<T>& self) {
        auto ga = a.grad_sink();
        auto gb = b.grad_sink();
        for (Index i = 0; i < batch; ++i) {
          MapC<T> g(self.grad.data() + i * m * p, m, p);
          MapC<T> am(a.data().data() + i * m * k, m, k);
          MapC<T> bm(b.data().data() + i * b_rows * b_cols, b_rows, b_cols);
          if (!ga.empty()) {
            Map<T> gam(ga.data() + i * m * k, m, k);
            if (transpose_b) {
              gam += product<T>(g, bm);
            } else {
              gam += product<T>(g, bm.transpose());
            }
          }
          if (!gb.empty()) {
            Map<T> gbm(gb.data() + i * b_rows * b_cols, b_rows, b_cols);
            if (transpose_b) {
              gbm += product<T>(g.transpose(), am);
            } else {
              gbm += product<T>(am.transpose(), g);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(w, 2, "linear");
  const Index in = w.dim(0), out_dim = w.dim(1);
  if (x.rank() == 0 || Index(x.shape().back()) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || Index(bias.dim(0)) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  const Index rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<T> out(rows * out_dim);
  Map<T> om(out.data(), rows, out_dim);
  om = product<T>(MapC<T>(x.data().data(), rows, in), MapC<T>(w.data().data(), in, out_dim));
  if (has_bias) {
    om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(),
                                                                          out_dim);
  }
  auto fn = [x, w, bias, rows, in, out_dim](const detail::Node<T>& self) {
    MapC<T> g(self.grad.data(), rows, out_dim);
    if (auto gx = x.grad_sink(); !gx.empty()) {
      Map<T>(gx.data(), rows, in) += product<T>(g, MapC<T>(w.data().data(), in, out_dim).transpose());
    }
    if (auto gw = w.grad_sink(); !gw.empty()) {
      Map<T>(gw.data(), in, out_dim) += product<T>(MapC<T>(x.data().data(), rows, in).transpose(), g);
    }
    if (bias.defined()) {
      if (auto gbias = bias.grad_sink(); !gbias.empty()) {
        // Plain row order: Eigen's column reduction depends on buffer alignment.
        const T* gr = self.grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < out_dim; ++j) gbias[j] += gr[r * out_dim + j];
        }
      }
    }
  };
  if (has_bias) return make_result<T>(std::move(shape), std::move(out), {x, w, bias}, fn);
  return make_result<T>(std::move(shape), std::move(out), {x, w}, fn);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw ShapeError("add: cannot broadcast " + shape_str(bs) + " onto " + shape_str(as));
  }
  const std::size_t inner = b.numel();
  const std::size_t outer = a.numel() / inner;
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    T* row = out.data() + o * inner;
    for (std::size_t i = 0; i < inner; ++i) row[i] += bd[i];
  }
  return make_result<T>(as, std::move(out), {a, b},
                        [a, b, inner, outer](const detail::Node<T>& self) {
                          if (auto ga = a.grad_sink(); !ga.empty()) {
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                          }
                          if (auto gb = b.grad_sink(); !gb.empty()) {
                            for (std::size_t o = 0; o < outer; ++o) {
                              const T* g = self.grad.data() + o * inner;
                              for (std::size_t i = 0; i < inner; ++i) gb[i] += g[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](const detail::Node<T>& self) {
    if (auto ga = a.grad_sink(); !ga.empty()) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (auto gb = b.grad_sink(); !gb.empty()) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](const detail::Node<T>& self) {
    if (auto ga = a.grad_sink(); !ga.empty()) {
      const auto bd = b.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bd[i];
    }
    if (auto gb = b.grad_sink(); !gb.empty()) {
      const auto ad = a.data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * ad[i];
    }
  });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * xd[i] + shift;
  return make_result<T>(x.shape(), std::move(out), {x}, [x, scale](const detail::Node<T>& self) {
    if (auto gx = x.grad_sink(); !gx.empty()) {
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += scale * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  switch (kind) {
    case Activation::kRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
      break;
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xd[i];
        if (v >= T(0)) {
          out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
          const T e = std::exp(v);
          out[i] = e / (T(1) + e);
        }
      }
      break;
    case Activation::kTanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xd[i]);
      break;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, kind](const detail::Node<T>& self) {
    auto gx = x.grad_sink();
    if (gx.empty()) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    switch (kind) {
      case Activation::kRelu: {
        // derivative at exactly 0 is taken as 0
        const auto xd = x.data();
        for (std::size_t i = 0; i < gx.size(); ++i) {
          if (xd[i] > T(0)) gx[i] += g[i];
        }
        break;
      }
      case Activation::kSigmoid:
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
        break;
      case Activation::kTanh:
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
        break;
    }
  });
}

namespace {

// Backward of a row-wise softmax: gx = y * (g - <g, y>).
template <typename T>
void softmax_backward(std::span<const T> y, std::span<const T> g, std::span<T> gx,
                      std::size_t cols) {
  const std::size_t rows = y.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* yr = y.data() + r * cols;
    const T* gr = g.data() + r * cols;
    T* out = gx.data() + r * cols;
    T dot = 0;
    for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
    for (std::size_t c = 0; c < cols; ++c) out[c] += yr[c] * (gr[c] - dot);
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t cols = last_dim(x);
  const std::size_t rows = x.numel() / cols;
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * cols;
    T* yr = out.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      total += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, cols](const detail::Node<T>& self) {
    if (auto gx = x.grad_sink(); !gx.empty()) {
      softmax_backward<T>(self.value, self.grad, gx, cols);
    }
  });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const AttentionMask& mask) {
  require_rank(scores, 3, "masked_softmax");
  const std::size_t n = scores.dim(0), q_len = scores.dim(1), k_len = scores.dim(2);
  if (mask.heads == 0 || n % mask.heads != 0) {
    throw ShapeError("masked_softmax: leading dim " + std::to_string(n) +
                     " not divisible by heads " + std::to_string(mask.heads));
  }
  const std::size_t batch = n / mask.heads;
  if (!mask.key_pad.empty() && mask.key_pad.size() != batch * k_len) {
    throw ShapeError("masked_softmax: key mask of " + std::to_string(mask.key_pad.size()) +
                     " entries does not match scores " + shape_str(scores.shape()));
  }
  if (mask.causal && q_len > k_len) {
    throw ShapeError("masked_softmax: causal mask needs q_len <= k_len, got " +
                     shape_str(scores.shape()));
  }
  std::vector<T> out(scores.numel(), T(0));
  const auto xd = scores.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* pad =
        mask.key_pad.empty() ? nullptr : mask.key_pad.data() + (i / mask.heads) * k_len;
    for (std::size_t qi = 0; qi < q_len; ++qi) {
      const std::size_t row = (i * q_len + qi) * k_len;
      const std::size_t limit = mask.causal ? qi + 1 : k_len;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < limit; ++c) {
        if (pad && pad[c]) continue;
        mx = std::max(mx, xd[row + c]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) continue;  // fully masked row
      T total = 0;
      for (std::size_t c = 0; c < limit; ++c) {
        if (pad && pad[c]) continue;
        out[row + c] = std::exp(xd[row + c] - mx);
        total += out[row + c];
      }
      for (std::size_t c = 0; c < limit; ++c) out[row + c] /= total;
    }
  }
  return make_result<T>(scores.shape(), std::move(out), {scores},
                        [scores, k_len](const detail::Node<T>& self) {
                          // masked entries have y == 0 and therefore zero gradient
                          if (auto gx = scores.grad_sink(); !gx.empty()) {
                            softmax_backward<T>(self.value, self.grad, gx, k_len);
                          }
                        });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
  const std::size_t d = last_dim(x);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * d;
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + T(eps));
    rstd[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (xr[c] - mean) * inv;
      xhat[r * d + c] = h;
      out[r * d + c] = gd[c] * h + bd[c];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, d, rows, xhat = std::move(xhat),
       rstd = std::move(rstd)](const detail::Node<T>& self) {
        const auto& g = self.grad;
        if (auto gg = gain.grad_sink(); !gg.empty()) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[r * d + c];
        }
        if (auto gb = bias.grad_sink(); !gb.empty()) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
        }
        if (auto gx = x.grad_sink(); !gx.empty()) {
          const auto gd = gain.data();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_g = 0, mean_gx = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const T gh = g[r * d + c] * gd[c];
              mean_g += gh;
              mean_gx += gh * xhat[r * d + c];
            }
            mean_g /= T(d);
            mean_gx /= T(d);
            for (std::size_t c = 0; c < d; ++c) {
              const T gh = g[r * d + c] * gd[c];
              gx[r * d + c] += rstd[r] * (gh - mean_g - xhat[r * d + c] * mean_gx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& filters, std::size_t width) {
  if (width < 1 || width > 8) {
    throw DataError("conv1d_same: width " + std::to_string(width) + " outside 1..8");
  }
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("conv1d_same: expected [L x E] or [B x L x E], got " + shape_str(x.shape()));
  }
  require_rank(filters, 3, "conv1d_same");
  const bool batched = x.rank() == 3;
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t len = x.dim(batched ? 1 : 0);
  const std::size_t emb = x.dim(batched ? 2 : 1);
  if (filters.dim(0) != width || filters.dim(1) != emb) {
    throw ShapeError("conv1d_same: filters " + shape_str(filters.shape()) + " do not match width " +
                     std::to_string(width) + " and input " + shape_str(x.shape()));
  }
  const std::size_t nf = filters.dim(2);
  const std::ptrdiff_t pad_left = std::ptrdiff_t(width - 1) / 2;
  const std::size_t cols = width * emb;
  const std::size_t rows = batch * len;

  // im2col: row (b, l) holds the window x[b, l - pad_left .. l - pad_left + width)
  std::vector<T> col(rows * cols, T(0));
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t l = 0; l < len; ++l) {
      T* dst = col.data() + (b * len + l) * cols;
      for (std::size_t k = 0; k < width; ++k) {
        const std::ptrdiff_t src = std::ptrdiff_t(l) + std::ptrdiff_t(k) - pad_left;
        if (src < 0 || src >= std::ptrdiff_t(len)) continue;
        std::copy_n(xd.data() + (b * len + src) * emb, emb, dst + k * emb);
      }
    }
  }
  std::vector<T> out(rows * nf);
  Map<T>(out.data(), rows, nf) = product<T>(MapC<T>(col.data(), rows, cols), MapC<T>(filters.data().data(), cols, nf));

  Shape shape = batched ? Shape{batch, len, nf} : Shape{len, nf};
  return make_result<T>(
      std::move(shape), std::move(out), {x, filters},
      [x, filters, col = std::move(col), batch, len, emb, width, nf, pad_left, rows,
       cols](const detail::Node<T>& self) {
        MapC<T> g(self.grad.data(), rows, nf);
        if (auto gf = filters.grad_sink(); !gf.empty()) {
          Map<T>(gf.data(), cols, nf) += product<T>(MapC<T>(col.data(), rows, cols).transpose(), g);
        }
        if (auto gx = x.grad_sink(); !gx.empty()) {
          RowMat<T> gcol = product<T>(g, MapC<T>(filters.data().data(), cols, nf).transpose());
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t l = 0; l < len; ++l) {
              const T* src_row = gcol.data() + (b * len + l) * cols;
              for (std::size_t k = 0; k < width; ++k) {
                const std::ptrdiff_t dst = std::ptrdiff_t(l) + std::ptrdiff_t(k) - pad_left;
                if (dst < 0 || dst >= std::ptrdiff_t(len)) continue;
                T* out_row = gx.data() + (b * len + dst) * emb;
                const T* in = src_row + k * emb;
                for (std::size_t e = 0; e < emb; ++e) out_row[e] += in[e];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> maxpool1d(const Tensor<T>& x, std::size_t stride) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("maxpool1d: expected [L x C] or [B x L x C], got " + shape_str(x.shape()));
  }
  if (stride == 0) throw DataError("maxpool1d: stride must be positive");
  const bool batched = x.rank() == 3;
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t len = x.dim(batched ? 1 : 0);
  const std::size_t ch = x.dim(batched ? 2 : 1);
  if (len % stride != 0) {
    throw ShapeError("maxpool1d: length " + std::to_string(len) + " not divisible by stride " +
                     std::to_string(stride));
  }
  const std::size_t out_len = len / stride;
  std::vector<T> out(batch * out_len * ch);
  std::vector<std::uint32_t> arg(out.size());
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_len; ++o) {
      const std::size_t base = (b * len + o * stride) * ch;
      T* dst = out.data() + (b * out_len + o) * ch;
      std::uint32_t* adst = arg.data() + (b * out_len + o) * ch;
      for (std::size_t c = 0; c < ch; ++c) {
        dst[c] = xd[base + c];
        adst[c] = std::uint32_t(base + c);
      }
      for (std::size_t s = 1; s < stride; ++s) {
        const std::size_t off = base + s * ch;
        for (std::size_t c = 0; c < ch; ++c) {
          if (xd[off + c] > dst[c]) {  // strict: ties keep the first position
            dst[c] = xd[off + c];
            adst[c] = std::uint32_t(off + c);
          }
        }
      }
    }
  }
  Shape shape = batched ? Shape{batch, out_len, ch} : Shape{out_len, ch};
  return make_result<T>(std::move(shape), std::move(out), {x},
                        [x, arg = std::move(arg)](const detail::Node<T>& self) {
                          if (auto gx = x.grad_sink(); !gx.empty()) {
                            for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids,
                           const Shape& lead) {
  require_rank(table, 2, "embedding_lookup");
  if (shape_numel(lead) != ids.size()) {
    throw ShapeError("embedding_lookup: " + std::to_string(ids.size()) +
                     " ids do not fill shape " + shape_str(lead));
  }
  const std::size_t vocab = table.dim(0), emb = table.dim(1);
  std::vector<T> out(ids.size() * emb);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || std::size_t(ids[i]) >= vocab) {
      throw VocabError("embedding_lookup: id " + std::to_string(ids[i]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(td.data() + std::size_t(ids[i]) * emb, emb, out.data() + i * emb);
  }
  Shape shape = lead;
  shape.push_back(emb);
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return make_result<T>(std::move(shape), std::move(out), {table},
                        [table, emb, saved = std::move(saved)](const detail::Node<T>& self) {
                          if (auto gt = table.grad_sink(); !gt.empty()) {
                            for (std::size_t i = 0; i < saved.size(); ++i) {
                              T* row = gt.data() + std::size_t(saved[i]) * emb;
                              const T* g = self.grad.data() + i * emb;
                              for (std::size_t e = 0; e < emb; ++e) row[e] += g[e];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat_lastdim(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape pl = p.shape();
    pl.pop_back();
    if (pl != lead) {
      throw ShapeError("concat_lastdim: " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts[0].shape()));
    }
    widths.push_back(p.shape().back());
    total += widths.back();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pd = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pd.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  std::vector<Tensor<T>> saved(parts.begin(), parts.end());
  return make_result<T>(
      std::move(shape), std::move(out), parts,
      [saved, widths, rows, total](const detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < saved.size(); ++k) {
          if (auto gp = saved[k].grad_sink(); !gp.empty()) {
            for (std::size_t r = 0; r < rows; ++r) {
              const T* g = self.grad.data() + r * total + off;
              T* dst = gp.data() + r * widths[k];
              for (std::size_t c = 0; c < widths[k]; ++c) dst[c] += g[c];
            }
          }
          off += widths[k];
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [x](const detail::Node<T>& self) {
    if (auto gx = x.grad_sink(); !gx.empty()) {
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> swap_middle_axes(const Tensor<T>& x) {
  require_rank(x, 4, "swap_middle_axes");
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < c; ++k)
        std::copy_n(xd.data() + ((i * b + j) * c + k) * d, d, out.data() + ((i * c + k) * b + j) * d);
  return make_result<T>({a, c, b, d}, std::move(out), {x},
                        [x, a, b, c, d](const detail::Node<T>& self) {
                          auto gx = x.grad_sink();
                          if (gx.empty()) return;
                          for (std::size_t i = 0; i < a; ++i)
                            for (std::size_t j = 0; j < b; ++j)
                              for (std::size_t k = 0; k < c; ++k) {
                                const T* g = self.grad.data() + ((i * c + k) * b + j) * d;
                                T* dst = gx.data() + ((i * b + j) * c + k) * d;
                                for (std::size_t e = 0; e < d; ++e) dst[e] += g[e];
                              }
                        });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> factors) {
  const std::size_t d = last_dim(x);
  const std::size_t rows = x.numel() / d;
  if (factors.size() != rows) {
    throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                     std::to_string(rows) + " rows of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xd[r * d + c] * factors[r];
  std::vector<T> saved(factors.begin(), factors.end());
  return make_result<T>(x.shape(), std::move(out), {x},
                        [x, d, saved = std::move(saved)](const detail::Node<T>& self) {
                          if (auto gx = x.grad_sink(); !gx.empty()) {
                            for (std::size_t r = 0; r < saved.size(); ++r)
                              for (std::size_t c = 0; c < d; ++c)
                                gx[r * d + c] += self.grad[r * d + c] * saved[r];
                          }
                        });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw DataError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  std::mt19937_64 rng(seed);
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    m = u < rate ? T(0) : keep_scale;
  }
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  return make_result<T>(x.shape(), std::move(out), {x},
                        [x, mask = std::move(mask)](const detail::Node<T>& self) {
                          if (auto gx = x.grad_sink(); !gx.empty()) {
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>({}, {total}, {x}, [x](const detail::Node<T>& self) {
    if (auto gx = x.grad_sink(); !gx.empty()) {
      const T g = self.grad[0];
      for (auto& v : gx) v += g;
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        double smoothing, std::int32_t ignore_id) {
  const std::size_t cols = last_dim(logits);
  const std::size_t rows = logits.numel() / cols;
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw DataError("cross_entropy: smoothing must be in [0, 1), got " + std::to_string(smoothing));
  }
  const bool has_ignored_col = ignore_id >= 0 && std::size_t(ignore_id) < cols;
  const std::size_t spread_over = cols - (has_ignored_col ? 1 : 0);
  if (smoothing > 0.0 && spread_over == 0) throw ShapeError("cross_entropy: nothing to smooth over");
  const T off = spread_over ? T(smoothing / double(spread_over)) : T(0);
  const T on = T(1.0 - smoothing);

  // log-probabilities are kept for the backward pass
  std::vector<T> logp(logits.numel());
  const auto xd = logits.data();
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t y = targets[r];
    if (y == ignore_id) continue;
    if (y < 0 || std::size_t(y) >= cols) {
      throw VocabError("cross_entropy: target id " + std::to_string(y) + " outside " +
                       std::to_string(cols) + " classes");
    }
    const T* xr = xd.data() + r * cols;
    T* lr = logp.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const T log_z = mx + std::log(z);
    T smooth_sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      lr[c] = xr[c] - log_z;
      if (std::int32_t(c) != ignore_id) smooth_sum += lr[c];
    }
    total -= on * lr[y] + off * smooth_sum;
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return make_result<T>(
      {}, {total}, {logits},
      [logits, tgt = std::move(tgt), logp = std::move(logp), cols, ignore_id, on,
       off](const detail::Node<T>& self) {
        auto gx = logits.grad_sink();
        if (gx.empty()) return;
        const T g = self.grad[0];
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          if (tgt[r] == ignore_id) continue;
          const T* lr = logp.data() + r * cols;
          T* gr = gx.data() + r * cols;
          // d/dz of -sum_c q_c log p_c is p - q, since q sums to one
          for (std::size_t c = 0; c < cols; ++c) {
            const T q = (std::int32_t(c) == ignore_id ? T(0) : off) +
                        (std::int32_t(c) == tgt[r] ? on : T(0));
            gr[c] += g * (std::exp(lr[c]) - q);
          }
        }
      });
}

#define CHARTRANS_INSTANTIATE_OPS(T)                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                            \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> affine(const Tensor<T>&, T, T);                                           \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                 \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                        \
  template Tensor<T> masked_softmax(const Tensor<T>&, const AttentionMask&);                   \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> conv1d_same(const Tensor<T>&, const Tensor<T>&, std::size_t);             \
  template Tensor<T> maxpool1d(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::int32_t>,         \
                                      const Shape&);                                           \
  template Tensor<T> concat_lastdim(std::span<const Tensor<T>>);                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> swap_middle_axes(const Tensor<T>&);                                       \
  template Tensor<T> scale_rows(const Tensor<T>&, std::span<const T>);                         \
  template Tensor<T> dropout(const Tensor<T>&, double, std::uint64_t);                         \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>, double,    \
                                   std::int32_t);

CHARTRANS_INSTANTIATE_OPS(float)
CHARTRANS_INSTANTIATE_OPS(double)

}  // namespace chartrans
