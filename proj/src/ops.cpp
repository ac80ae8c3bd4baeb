#include "tristream/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tristream {

namespace {

// C[M,N] += A[M,K] * B[K,N], all row-major contiguous.
template <typename T>
void gemm_accum(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T  (B given row-major as [N,K])
template <typename T>
void gemm_bt_accum(const T* a, const T* b, T* c, int64_t m, int64_t k,
                   int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_at_accum(const T* a, const T* b, T* c, int64_t m, int64_t k,
                   int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Shape broadcast_result_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " +
                       shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `s` against a broadcast result shape; 0 on broadcast axes.
std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t run = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    size_t si = s.size() - 1 - i;
    size_t oi = out.size() - 1 - i;
    if (s[si] == out[oi]) {
      st[oi] = run;
    } else {
      st[oi] = 0;  // s[si] == 1
    }
    run *= s[si];
  }
  return st;
}

// Calls f(out_flat, a_flat, b_flat) for every element of the broadcast result.
template <typename F>
void broadcast_iter(const Shape& out, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, F&& f) {
  int r = static_cast<int>(out.size());
  int64_t n = 1;
  for (int64_t d : out) n *= d;
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t ai = 0, bi = 0;
  for (int64_t o = 0; o < n; ++o) {
    f(o, ai, bi);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      ai += sa[ax];
      bi += sb[ax];
      if (idx[ax] < out[ax]) break;
      idx[ax] = 0;
      ai -= sa[ax] * out[ax];
      bi -= sb[ax] * out[ax];
    }
  }
}

template <typename T, typename Fwd>
Tensor<T> broadcast_binary_op(const char* name, const Tensor<T>& a,
                              const Tensor<T>& b, Fwd fwd, T da_sign,
                              bool da_times_b, T db_sign, bool db_times_a) {
  Shape os = broadcast_result_shape(a.shape(), b.shape());
  Tensor<T> out(os);
  auto sa = broadcast_strides(a.shape(), os);
  auto sb = broadcast_strides(b.shape(), os);
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = fwd(ad[i], bd[i]);
  } else {
    broadcast_iter(os, sa, sb, [&](int64_t o, int64_t ai, int64_t bi) {
      od[o] = fwd(ad[ai], bd[bi]);
    });
  }
  if (tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::current()->record(name, out, [=]() mutable {
      const std::vector<T>& gy = oc.grad();
      Shape os2 = oc.shape();
      auto sa2 = broadcast_strides(ac.shape(), os2);
      auto sb2 = broadcast_strides(bc.shape(), os2);
      if (ac.requires_grad()) {
        T* ga = ac.grad_buf().data();
        const T* bd2 = bc.data();
        broadcast_iter(os2, sa2, sb2, [&](int64_t o, int64_t ai, int64_t bi) {
          T g = gy[o] * da_sign;
          if (da_times_b) g *= bd2[bi];
          ga[ai] += g;
        });
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad_buf().data();
        const T* ad2 = ac.data();
        broadcast_iter(os2, sa2, sb2, [&](int64_t o, int64_t ai, int64_t bi) {
          T g = gy[o] * db_sign;
          if (db_times_a) g *= ad2[ai];
          gb[bi] += g;
        });
      }
    });
  }
  return out;
}

}  // namespace

int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, Padding pad) {
  if (pad == Padding::Same) return (in + stride - 1) / stride;
  if (in < k)
    throw ShapeError("valid conv: kernel " + std::to_string(k) +
                     " larger than input " + std::to_string(in));
  return (in - k) / stride + 1;
}

int64_t pad_before(int64_t in, int64_t k, int64_t stride, Padding pad) {
  if (pad == Padding::Valid) return 0;
  int64_t out = (in + stride - 1) / stride;
  int64_t total = std::max<int64_t>((out - 1) * stride + k - in, 0);
  return total / 2;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, T(1), false, T(1), false);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, T(1), false, T(-1), false);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, T(1), true, T(1), true);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  Tensor<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  T cc = static_cast<T>(c);
  for (int64_t i = 0; i < x.numel(); ++i) yd[i] = cc * xd[i];
  if (tracing<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record("scale", y, [xc, yc, cc]() mutable {
      if (!xc.requires_grad()) return;
      const auto& gy = yc.grad();
      T* gx = xc.grad_buf().data();
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += cc * gy[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 tensors, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul inner dims disagree: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tensor<T> out({m, n});
  gemm_accum(a.data(), b.data(), out.data(), m, k, n);
  if (tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::current()->record("matmul", out, [=]() mutable {
      const T* gy = oc.grad().data();
      if (ac.requires_grad())
        gemm_bt_accum(gy, bc.data(), ac.grad_buf().data(), m, n, k);
      if (bc.requires_grad())
        gemm_at_accum(ac.data(), gy, bc.grad_buf().data(), m, k, n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, Stride3 stride,
                 Padding pad) {
  if (x.rank() != 5 || w.rank() != 5)
    throw ShapeError("conv3d expects x[B,T,H,W,Cin], w[kT,kH,kW,Cin,Cout]");
  if (stride.t < 1 || stride.h < 1 || stride.w < 1)
    throw ContractError("conv3d strides must be >= 1");
  int64_t B = x.dim(0), Ti = x.dim(1), Hi = x.dim(2), Wi = x.dim(3),
          Ci = x.dim(4);
  int64_t kT = w.dim(0), kH = w.dim(1), kW = w.dim(2), wCi = w.dim(3),
          Co = w.dim(4);
  if (Ci != wCi)
    throw ShapeError("conv3d channel mismatch: input has " +
                     std::to_string(Ci) + ", kernel expects " +
                     std::to_string(wCi));
  int64_t To = conv_out_extent(Ti, kT, stride.t, pad);
  int64_t Ho = conv_out_extent(Hi, kH, stride.h, pad);
  int64_t Wo = conv_out_extent(Wi, kW, stride.w, pad);
  int64_t pt = pad_before(Ti, kT, stride.t, pad);
  int64_t ph = pad_before(Hi, kH, stride.h, pad);
  int64_t pw = pad_before(Wi, kW, stride.w, pad);

  int64_t M = B * To * Ho * Wo;
  int64_t K = kT * kH * kW * Ci;
  std::vector<T> col(static_cast<size_t>(M * K), T(0));
  const T* xd = x.data();
  {
    int64_t row = 0;
    for (int64_t b = 0; b < B; ++b) {
      const T* xb = xd + b * Ti * Hi * Wi * Ci;
      for (int64_t to = 0; to < To; ++to) {
        int64_t t0 = to * stride.t - pt;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          int64_t h0 = ho * stride.h - ph;
          for (int64_t wo = 0; wo < Wo; ++wo, ++row) {
            int64_t w0 = wo * stride.w - pw;
            T* crow = col.data() + row * K;
            for (int64_t kt = 0; kt < kT; ++kt) {
              int64_t it = t0 + kt;
              if (it < 0 || it >= Ti) continue;
              for (int64_t kh = 0; kh < kH; ++kh) {
                int64_t ih = h0 + kh;
                if (ih < 0 || ih >= Hi) continue;
                for (int64_t kw = 0; kw < kW; ++kw) {
                  int64_t iw = w0 + kw;
                  if (iw < 0 || iw >= Wi) continue;
                  const T* src = xb + ((it * Hi + ih) * Wi + iw) * Ci;
                  T* dst = crow + ((kt * kH + kh) * kW + kw) * Ci;
                  for (int64_t c = 0; c < Ci; ++c) dst[c] = src[c];
                }
              }
            }
          }
        }
      }
    }
  }

  Tensor<T> out({B, To, Ho, Wo, Co});
  gemm_accum(col.data(), w.data(), out.data(), M, K, Co);

  if (tracing<T>({&x, &w})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, oc = out;
    auto col_saved = std::make_shared<std::vector<T>>(std::move(col));
    Tape<T>::current()->record("conv3d", out, [=]() mutable {
      const T* gy = oc.grad().data();
      if (wc.requires_grad())
        gemm_at_accum(col_saved->data(), gy, wc.grad_buf().data(), M, K, Co);
      if (xc.requires_grad()) {
        std::vector<T> gcol(static_cast<size_t>(M * K), T(0));
        gemm_bt_accum(gy, wc.data(), gcol.data(), M, Co, K);
        // col2im scatter
        T* gx = xc.grad_buf().data();
        int64_t row = 0;
        for (int64_t b = 0; b < B; ++b) {
          T* gxb = gx + b * Ti * Hi * Wi * Ci;
          for (int64_t to = 0; to < To; ++to) {
            int64_t t0 = to * stride.t - pt;
            for (int64_t ho = 0; ho < Ho; ++ho) {
              int64_t h0 = ho * stride.h - ph;
              for (int64_t wo = 0; wo < Wo; ++wo, ++row) {
                int64_t w0 = wo * stride.w - pw;
                const T* crow = gcol.data() + row * K;
                for (int64_t kt = 0; kt < kT; ++kt) {
                  int64_t it = t0 + kt;
                  if (it < 0 || it >= Ti) continue;
                  for (int64_t kh = 0; kh < kH; ++kh) {
                    int64_t ih = h0 + kh;
                    if (ih < 0 || ih >= Hi) continue;
                    for (int64_t kw = 0; kw < kW; ++kw) {
                      int64_t iw = w0 + kw;
                      if (iw < 0 || iw >= Wi) continue;
                      T* dst = gxb + ((it * Hi + ih) * Wi + iw) * Ci;
                      const T* src = crow + ((kt * kH + kh) * kW + kw) * Ci;
                      for (int64_t c = 0; c < Ci; ++c) dst[c] += src[c];
                    }
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> maxpool_spatial(const Tensor<T>& x, int64_t kt, int64_t kh,
                          int64_t kw, Stride3 stride, Padding pad) {
  if (x.rank() != 5) throw ShapeError("maxpool_spatial expects [B,T,H,W,C]");
  if (kt != 1 || stride.t != 1)
    throw ContractError(
        "temporal pooling is disallowed: kernel and stride over T must be 1");
  int64_t B = x.dim(0), Ti = x.dim(1), Hi = x.dim(2), Wi = x.dim(3),
          C = x.dim(4);
  int64_t Ho = conv_out_extent(Hi, kh, stride.h, pad);
  int64_t Wo = conv_out_extent(Wi, kw, stride.w, pad);
  int64_t ph = pad_before(Hi, kh, stride.h, pad);
  int64_t pw = pad_before(Wi, kw, stride.w, pad);
  Tensor<T> out({B, Ti, Ho, Wo, C});
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(out.numel()), -1);
  const T* xd = x.data();
  T* od = out.data();
  int64_t* am = argmax->data();
  int64_t o = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < Ti; ++t)
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo)
          for (int64_t c = 0; c < C; ++c, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            int64_t besti = -1;
            for (int64_t dh = 0; dh < kh; ++dh) {
              int64_t ih = ho * stride.h - ph + dh;
              if (ih < 0 || ih >= Hi) continue;
              for (int64_t dw = 0; dw < kw; ++dw) {
                int64_t iw = wo * stride.w - pw + dw;
                if (iw < 0 || iw >= Wi) continue;
                int64_t ii = (((b * Ti + t) * Hi + ih) * Wi + iw) * C + c;
                if (xd[ii] > best) {
                  best = xd[ii];
                  besti = ii;
                }
              }
            }
            od[o] = best;
            am[o] = besti;
          }
  if (tracing<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::current()->record("maxpool", out, [xc, oc, argmax]() mutable {
      if (!xc.requires_grad()) return;
      const auto& gy = oc.grad();
      T* gx = xc.grad_buf().data();
      const int64_t* am2 = argmax->data();
      for (size_t i = 0; i < gy.size(); ++i)
        if (am2[i] >= 0) gx[am2[i]] += gy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avgpool_global(const Tensor<T>& x) {
  if (x.rank() != 5) throw ShapeError("avgpool_global expects [B,T,H,W,C]");
  int64_t B = x.dim(0), Ti = x.dim(1), Hi = x.dim(2), Wi = x.dim(3),
          C = x.dim(4);
  int64_t spatial = Ti * Hi * Wi;
  Tensor<T> out({B, C});
  const T* xd = x.data();
  T* od = out.data();
  for (int64_t b = 0; b < B; ++b) {
    const T* xb = xd + b * spatial * C;
    T* ob = od + b * C;
    for (int64_t i = 0; i < spatial; ++i)
      for (int64_t c = 0; c < C; ++c) ob[c] += xb[i * C + c];
    for (int64_t c = 0; c < C; ++c) ob[c] /= static_cast<T>(spatial);
  }
  if (tracing<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::current()->record("avgpool_global", out, [=]() mutable {
      if (!xc.requires_grad()) return;
      const auto& gy = oc.grad();
      T* gx = xc.grad_buf().data();
      T inv = T(1) / static_cast<T>(spatial);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < spatial; ++i)
          for (int64_t c = 0; c < C; ++c)
            gx[(b * spatial + i) * C + c] += gy[b * C + c] * inv;
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) yd[i] = xd[i] > T(0) ? xd[i] : T(0);
  if (tracing<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record("relu", y, [xc, yc]() mutable {
      if (!xc.requires_grad()) return;
      const auto& gy = yc.grad();
      T* gx = xc.grad_buf().data();
      const T* xd2 = xc.data();
      for (size_t i = 0; i < gy.size(); ++i)
        if (xd2[i] > T(0)) gx[i] += gy[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    T v = xd[i];
    if (v >= T(0)) {
      yd[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      yd[i] = e / (T(1) + e);
    }
  }
  if (tracing<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record("sigmoid", y, [xc, yc]() mutable {
      if (!xc.requires_grad()) return;
      const auto& gy = yc.grad();
      T* gx = xc.grad_buf().data();
      const T* yd2 = yc.data();
      for (size_t i = 0; i < gy.size(); ++i)
        gx[i] += gy[i] * yd2[i] * (T(1) - yd2[i]);
    });
  }
  return y;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects [B,C]");
  int64_t B = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != B)
    throw ShapeError("cross_entropy: labels length != batch size");
  for (int y : labels)
    if (y < 0 || y >= C)
      throw IndexError("cross_entropy: class index " + std::to_string(y) +
                       " out of range [0," + std::to_string(C) + ")");
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<size_t>(logits.numel()));
  const T* ld = logits.data();
  T loss = T(0);
  for (int64_t b = 0; b < B; ++b) {
    const T* row = ld + b * C;
    T m = row[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    T sum = T(0);
    for (int64_t c = 0; c < C; ++c) sum += std::exp(row[c] - m);
    T lse = m + std::log(sum);
    loss += lse - row[labels[static_cast<size_t>(b)]];
    for (int64_t c = 0; c < C; ++c)
      (*probs)[b * C + c] = std::exp(row[c] - m) / sum;
  }
  loss /= static_cast<T>(B);
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (tracing<T>({&logits})) {
    out.set_requires_grad(true);
    Tensor<T> lc = logits, oc = out;
    Tape<T>::current()->record("softmax_ce", out, [=]() mutable {
      if (!lc.requires_grad()) return;
      T g = oc.grad()[0] / static_cast<T>(B);
      T* gl = lc.grad_buf().data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          T p = (*probs)[b * C + c];
          T onehot = (labels[static_cast<size_t>(b)] == c) ? T(1) : T(0);
          gl[b * C + c] += g * (p - onehot);
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (!shape_eq(pred.shape(), target.shape()))
    throw ShapeError("mse shape mismatch: " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  int64_t n = pred.numel();
  const T* pd = pred.data();
  const T* td = target.data();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) {
    T d = pd[i] - td[i];
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (tracing<T>({&pred, &target})) {
    out.set_requires_grad(true);
    Tensor<T> pc = pred, tc = target, oc = out;
    Tape<T>::current()->record("mse", out, [=]() mutable {
      T g = oc.grad()[0] * T(2) / static_cast<T>(n);
      const T* pd2 = pc.data();
      const T* td2 = tc.data();
      if (pc.requires_grad()) {
        T* gp = pc.grad_buf().data();
        for (int64_t i = 0; i < n; ++i) gp[i] += g * (pd2[i] - td2[i]);
      }
      if (tc.requires_grad()) {
        T* gt = tc.grad_buf().data();
        for (int64_t i = 0; i < n; ++i) gt[i] -= g * (pd2[i] - td2[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape) + " changes element count");
  Tensor<T> y = Tensor<T>::from_data(std::move(new_shape), x.vec());
  if (tracing<T>({&x})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    Tape<T>::current()->record("reshape", y, [xc, yc]() mutable {
      if (!xc.requires_grad()) return;
      const auto& gy = yc.grad();
      T* gx = xc.grad_buf().data();
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  const T* xd = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) acc += xd[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tracing<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::current()->record("sum_all", out, [xc, oc]() mutable {
      if (!xc.requires_grad()) return;
      T g = oc.grad()[0];
      T* gx = xc.grad_buf().data();
      for (size_t i = 0; i < xc.vec().size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, double momentum,
                     double eps) {
  if (x.rank() != 5) throw ShapeError("batch_norm expects [B,T,H,W,C]");
  int64_t C = x.dim(4);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeError("batch_norm: parameter size must equal channel count");
  int64_t n = x.numel();
  int64_t N = n / C;  // reduction count per channel
  Tensor<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  const T* gd = gamma.data();
  const T* bd = beta.data();

  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T(0));
  auto ivar = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T(0));

  if (training) {
    std::vector<T> var(static_cast<size_t>(C), T(0));
    for (int64_t i = 0; i < n; i += C)
      for (int64_t c = 0; c < C; ++c) (*mean)[c] += xd[i + c];
    for (int64_t c = 0; c < C; ++c) (*mean)[c] /= static_cast<T>(N);
    for (int64_t i = 0; i < n; i += C)
      for (int64_t c = 0; c < C; ++c) {
        T d = xd[i + c] - (*mean)[c];
        var[c] += d * d;
      }
    for (int64_t c = 0; c < C; ++c) {
      var[c] /= static_cast<T>(N);
      (*ivar)[c] = T(1) / std::sqrt(var[c] + static_cast<T>(eps));
    }
    T* rm = running_mean.data();
    T* rv = running_var.data();
    T mom = static_cast<T>(momentum);
    for (int64_t c = 0; c < C; ++c) {
      rm[c] = (T(1) - mom) * rm[c] + mom * (*mean)[c];
      rv[c] = (T(1) - mom) * rv[c] + mom * var[c];
    }
  } else {
    const T* rm = running_mean.data();
    const T* rv = running_var.data();
    for (int64_t c = 0; c < C; ++c) {
      (*mean)[c] = rm[c];
      (*ivar)[c] = T(1) / std::sqrt(rv[c] + static_cast<T>(eps));
    }
  }
  for (int64_t i = 0; i < n; i += C)
    for (int64_t c = 0; c < C; ++c)
      yd[i + c] = gd[c] * (xd[i + c] - (*mean)[c]) * (*ivar)[c] + bd[c];

  if (tracing<T>({&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, gc = gamma, bc = beta, yc = y;
    Tape<T>::current()->record("batch_norm", y, [=]() mutable {
      const auto& gy = yc.grad();
      const T* xd2 = xc.data();
      const T* gd2 = gc.data();
      std::vector<T> sum_dy(static_cast<size_t>(C), T(0));
      std::vector<T> sum_dy_xhat(static_cast<size_t>(C), T(0));
      for (int64_t i = 0; i < n; i += C)
        for (int64_t c = 0; c < C; ++c) {
          T xhat = (xd2[i + c] - (*mean)[c]) * (*ivar)[c];
          sum_dy[c] += gy[i + c];
          sum_dy_xhat[c] += gy[i + c] * xhat;
        }
      if (gc.requires_grad()) {
        T* gg = gc.grad_buf().data();
        for (int64_t c = 0; c < C; ++c) gg[c] += sum_dy_xhat[c];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad_buf().data();
        for (int64_t c = 0; c < C; ++c) gb[c] += sum_dy[c];
      }
      if (xc.requires_grad()) {
        T* gx = xc.grad_buf().data();
        if (training) {
          T invN = T(1) / static_cast<T>(N);
          for (int64_t i = 0; i < n; i += C)
            for (int64_t c = 0; c < C; ++c) {
              T xhat = (xd2[i + c] - (*mean)[c]) * (*ivar)[c];
              gx[i + c] += gd2[c] * (*ivar)[c] * invN *
                           (static_cast<T>(N) * gy[i + c] - sum_dy[c] -
                            xhat * sum_dy_xhat[c]);
            }
        } else {
          for (int64_t i = 0; i < n; i += C)
            for (int64_t c = 0; c < C; ++c)
              gx[i + c] += gy[i + c] * gd2[c] * (*ivar)[c];
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, int64_t groups, double eps) {
  if (x.rank() != 5) throw ShapeError("group_norm expects [B,T,H,W,C]");
  int64_t B = x.dim(0), C = x.dim(4);
  if (groups < 1 || C % groups != 0)
    throw ConfigError("group_norm: channel count " + std::to_string(C) +
                      " not divisible by " + std::to_string(groups) +
                      " groups");
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("group_norm: parameter size must equal channel count");
  int64_t spatial = x.dim(1) * x.dim(2) * x.dim(3);
  int64_t Cg = C / groups;
  int64_t M = spatial * Cg;  // reduction count per (b,g)
  Tensor<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  const T* gd = gamma.data();
  const T* bd = beta.data();

  auto mean = std::make_shared<std::vector<T>>(
      static_cast<size_t>(B * groups), T(0));
  auto ivar = std::make_shared<std::vector<T>>(
      static_cast<size_t>(B * groups), T(0));

  for (int64_t b = 0; b < B; ++b) {
    const T* xb = xd + b * spatial * C;
    for (int64_t g = 0; g < groups; ++g) {
      T mu = T(0), v = T(0);
      for (int64_t i = 0; i < spatial; ++i)
        for (int64_t c = g * Cg; c < (g + 1) * Cg; ++c) mu += xb[i * C + c];
      mu /= static_cast<T>(M);
      for (int64_t i = 0; i < spatial; ++i)
        for (int64_t c = g * Cg; c < (g + 1) * Cg; ++c) {
          T d = xb[i * C + c] - mu;
          v += d * d;
        }
      v /= static_cast<T>(M);
      (*mean)[b * groups + g] = mu;
      (*ivar)[b * groups + g] = T(1) / std::sqrt(v + static_cast<T>(eps));
    }
  }
  for (int64_t b = 0; b < B; ++b) {
    const T* xb = xd + b * spatial * C;
    T* yb = yd + b * spatial * C;
    for (int64_t i = 0; i < spatial; ++i)
      for (int64_t c = 0; c < C; ++c) {
        int64_t g = c / Cg;
        T xhat = (xb[i * C + c] - (*mean)[b * groups + g]) *
                 (*ivar)[b * groups + g];
        yb[i * C + c] = gd[c] * xhat + bd[c];
      }
  }

  if (tracing<T>({&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, gc = gamma, bc = beta, yc = y;
    Tape<T>::current()->record("group_norm", y, [=]() mutable {
      const auto& gy = yc.grad();
      const T* xd2 = xc.data();
      const T* gd2 = gc.data();
      if (gc.requires_grad() || bc.requires_grad()) {
        std::vector<T> gg(static_cast<size_t>(C), T(0));
        std::vector<T> gb(static_cast<size_t>(C), T(0));
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < spatial; ++i)
            for (int64_t c = 0; c < C; ++c) {
              int64_t g = c / Cg;
              int64_t ii = (b * spatial + i) * C + c;
              T xhat = (xd2[ii] - (*mean)[b * groups + g]) *
                       (*ivar)[b * groups + g];
              gg[c] += gy[ii] * xhat;
              gb[c] += gy[ii];
            }
        if (gc.requires_grad()) {
          T* p = gc.grad_buf().data();
          for (int64_t c = 0; c < C; ++c) p[c] += gg[c];
        }
        if (bc.requires_grad()) {
          T* p = bc.grad_buf().data();
          for (int64_t c = 0; c < C; ++c) p[c] += gb[c];
        }
      }
      if (xc.requires_grad()) {
        T* gx = xc.grad_buf().data();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t g = 0; g < groups; ++g) {
            T mu = (*mean)[b * groups + g];
            T iv = (*ivar)[b * groups + g];
            T s1 = T(0), s2 = T(0);
            for (int64_t i = 0; i < spatial; ++i)
              for (int64_t c = g * Cg; c < (g + 1) * Cg; ++c) {
                int64_t ii = (b * spatial + i) * C + c;
                T dxhat = gy[ii] * gd2[c];
                T xhat = (xd2[ii] - mu) * iv;
                s1 += dxhat;
                s2 += dxhat * xhat;
              }
            T invM = T(1) / static_cast<T>(M);
            for (int64_t i = 0; i < spatial; ++i)
              for (int64_t c = g * Cg; c < (g + 1) * Cg; ++c) {
                int64_t ii = (b * spatial + i) * C + c;
                T dxhat = gy[ii] * gd2[c];
                T xhat = (xd2[ii] - mu) * iv;
                gx[ii] += iv * invM *
                          (static_cast<T>(M) * dxhat - s1 - xhat * s2);
              }
          }
      }
    });
  }
  return y;
}

template <typename T>
bool has_nonfinite(const Tensor<T>& x) {
  const T* xd = x.data();
  for (int64_t i = 0; i < x.numel(); ++i)
    if (!std::isfinite(xd[i])) return true;
  return false;
}

#define TRISTREAM_INSTANTIATE_OPS(T)                                          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> scale<T>(const Tensor<T>&, double);                      \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, Stride3,   \
                               Padding);                                      \
  template Tensor<T> maxpool_spatial<T>(const Tensor<T>&, int64_t, int64_t,   \
                                        int64_t, Stride3, Padding);           \
  template Tensor<T> avgpool_global<T>(const Tensor<T>&);                     \
  template Tensor<T> relu<T>(const Tensor<T>&);                               \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                            \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&,               \
                                              const std::vector<int>&);       \
  template Tensor<T> mse<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                     \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                            \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&,        \
                                   const Tensor<T>&, Tensor<T>&, Tensor<T>&,  \
                                   bool, double, double);                     \
  template Tensor<T> group_norm<T>(const Tensor<T>&, const Tensor<T>&,        \
                                   const Tensor<T>&, int64_t, double);        \
  template bool has_nonfinite<T>(const Tensor<T>&);

TRISTREAM_INSTANTIATE_OPS(float)
TRISTREAM_INSTANTIATE_OPS(double)

}  // namespace tristream
