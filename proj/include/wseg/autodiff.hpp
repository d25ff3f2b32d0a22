#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wseg/blas.hpp"
#include "wseg/error.hpp"
#include "wseg/rng.hpp"
#include "wseg/tensor.hpp"

namespace wseg::ad {

/// A trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor(value.shape, 0.0f);
  }

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0f); }
};

struct ValueRef {
  int32_t id = -1;
};

enum class UpsampleKind { bilinear, lanczos3 };

namespace detail {

inline std::vector<float>& scratch(int which, size_t n) {
  thread_local std::vector<float> buf[4];
  auto& b = buf[which & 3];
  if (b.size() < n) b.resize(n);
  return b;
}

inline void im2col(const float* x, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t oh, int64_t ow, float* cols) {
  const int64_t n = oh * ow;
  for (int64_t c = 0; c < c_in; ++c) {
    const float* src = x + c * h * w;
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        float* row = cols + ((c * kh + i) * kw + j) * n;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride + i - pad;
          float* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0f);
            continue;
          }
          if (stride == 1) {
            const int64_t ox0 = std::max<int64_t>(0, pad - j);
            const int64_t ox1 = std::min(ow, w + pad - j);
            if (ox0 >= ox1) {
              std::fill(dst, dst + ow, 0.0f);
              continue;
            }
            std::fill(dst, dst + ox0, 0.0f);
            std::memcpy(dst + ox0, src + iy * w + (ox0 + j - pad),
                        static_cast<size_t>(ox1 - ox0) * sizeof(float));
            std::fill(dst + ox1, dst + ow, 0.0f);
          } else {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const int64_t ix = ox * stride + j - pad;
              dst[ox] = (ix >= 0 && ix < w) ? src[iy * w + ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

inline void col2im_add(const float* cols, int64_t c_in, int64_t h, int64_t w, int64_t kh,
                       int64_t kw, int64_t stride, int64_t pad, int64_t oh, int64_t ow,
                       float* gx) {
  const int64_t n = oh * ow;
  for (int64_t c = 0; c < c_in; ++c) {
    float* dst_plane = gx + c * h * w;
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        const float* row = cols + ((c * kh + i) * kw + j) * n;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride + i - pad;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + oy * ow;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride + j - pad;
            if (ix >= 0 && ix < w) dst_plane[iy * w + ix] += src[ox];
          }
        }
      }
    }
  }
}

struct Tap {
  int32_t count = 0;
  std::array<int32_t, 6> idx{};
  std::array<float, 6> w{};
};

inline double lanczos3(double t) {
  t = std::abs(t);
  if (t < 1e-9) return 1.0;
  if (t >= 3.0) return 0.0;
  const double pt = std::numbers::pi * t;
  return 3.0 * std::sin(pt) * std::sin(pt / 3.0) / (pt * pt);
}

/// Source taps for x2 upsampling of one axis, half-pixel-centre convention:
/// output o samples input coordinate o/2 - 0.25. Indices are edge-clamped.
/// The grid is mirror-symmetric, so the operator commutes with flips on any
/// input size.
inline std::vector<Tap> upsample2x_taps(int64_t in_size, UpsampleKind kind) {
  std::vector<Tap> taps(static_cast<size_t>(2 * in_size));
  for (int64_t o = 0; o < 2 * in_size; ++o) {
    const double src = 0.5 * static_cast<double>(o) - 0.25;
    const auto base = static_cast<int64_t>(std::floor(src));
    Tap t;
    if (kind == UpsampleKind::bilinear) {
      const double f = src - static_cast<double>(base);
      const int64_t lo = std::clamp<int64_t>(base, 0, in_size - 1);
      const int64_t hi = std::clamp<int64_t>(base + 1, 0, in_size - 1);
      t.count = 2;
      t.idx = {static_cast<int32_t>(lo), static_cast<int32_t>(hi)};
      t.w = {static_cast<float>(1.0 - f), static_cast<float>(f)};
    } else {
      double sum = 0.0;
      std::array<double, 6> wd{};
      for (int k = 0; k < 6; ++k) {
        const int64_t j = base - 2 + k;
        wd[static_cast<size_t>(k)] = lanczos3(src - static_cast<double>(j));
        sum += wd[static_cast<size_t>(k)];
      }
      t.count = 6;
      for (int k = 0; k < 6; ++k) {
        t.idx[static_cast<size_t>(k)] =
            static_cast<int32_t>(std::clamp<int64_t>(base - 2 + k, 0, in_size - 1));
        t.w[static_cast<size_t>(k)] = static_cast<float>(wd[static_cast<size_t>(k)] / sum);
      }
    }
    taps[static_cast<size_t>(o)] = t;
  }
  return taps;
}

}  // namespace detail

/// Records a forward computation over a closed layer set and replays it in
/// exact reverse order on backward(). Values are immutable once produced.
/// One tape serves one forward/backward pair; tapes are not thread-safe,
/// distinct tapes may run concurrently.
class Tape {
 public:
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Guided-rectifier mode alters the backward rule of ReLU-family nodes:
  /// gradient passes only where the forward pre-activation and the incoming
  /// gradient are both positive.
  void set_guided_rectifier(bool on) { guided_ = on; }
  bool guided_rectifier() const { return guided_; }

  ValueRef input(Tensor x, bool needs_grad = false) {
    Node n;
    n.owned = std::move(x);
    n.needs_grad = needs_grad && record_;
    nodes_.push_back(std::move(n));
    return {static_cast<int32_t>(nodes_.size() - 1)};
  }

  ValueRef param(Parameter& p) {
    Node n;
    n.external = &p.value;
    n.bound = &p;
    n.needs_grad = record_;
    nodes_.push_back(std::move(n));
    return {static_cast<int32_t>(nodes_.size() - 1)};
  }

  const Tensor& value(ValueRef r) const { return val(r.id); }

  /// Scalar reductions (vdot, losses) accumulate in double; this returns the
  /// unrounded accumulator for such nodes, the f32 value otherwise.
  double scalar_value(ValueRef r) const {
    const Tensor& v = val(r.id);
    if (v.numel() != 1) throw UsageError("scalar_value: value is not a scalar");
    auto it = scalar64_.find(r.id);
    return it != scalar64_.end() ? it->second : static_cast<double>(v.data[0]);
  }

  const Tensor& grad(ValueRef r) const {
    const Node& n = node(r.id);
    if (n.grad.data.empty()) throw UsageError("no gradient recorded for this value");
    return n.grad;
  }

  /// Reverse sweep from a scalar. Visits recorded operations in exact
  /// reverse order, then accumulates leaf gradients into bound Parameters.
  void backward(ValueRef loss) {
    if (!record_) throw UsageError("tape was created without gradient recording");
    if (backward_done_) throw UsageError("backward already ran on this tape");
    const Node& ln = node(loss.id);
    if ((ln.external ? ln.external->numel() : ln.owned.numel()) != 1) {
      throw UsageError("backward requires a scalar value");
    }
    backward_done_ = true;
    grad_buf(loss.id).data[0] = 1.0f;
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.backprop && n.needs_grad && !n.grad.data.empty()) n.backprop(*this);
    }
    for (Node& n : nodes_) {
      if (n.bound != nullptr && !n.grad.data.empty()) {
        float* dst = n.bound->grad.data.data();
        const float* src = n.grad.data.data();
        for (int64_t i = 0; i < n.grad.numel(); ++i) dst[i] += src[i];
      }
    }
  }

  // ---- operations ----------------------------------------------------

  ValueRef conv2d(ValueRef x, ValueRef w, ValueRef b, int64_t stride, int64_t padding) {
    const Tensor& xv = val(x.id);
    const Tensor& wv = val(w.id);
    const Tensor& bv = val(b.id);
    if (xv.rank() != 4 || wv.rank() != 4 || bv.rank() != 1) {
      throw ConfigError("conv2d: expected input[B,C,H,W], weight[O,C,kh,kw], bias[O]");
    }
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    const int64_t bsz = xv.shape[0], cin = xv.shape[1], h = xv.shape[2], wdt = xv.shape[3];
    const int64_t cout = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
    if (wv.shape[1] != cin) {
      throw ConfigError("conv2d: weight expects " + std::to_string(wv.shape[1]) +
                        " input channels, input has " + std::to_string(cin));
    }
    if (bv.shape[0] != cout) throw ConfigError("conv2d: bias size must equal output channels");
    const int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const int64_t ow = (wdt + 2 * padding - kw) / stride + 1;
    if (h + 2 * padding < kh || wdt + 2 * padding < kw || oh <= 0 || ow <= 0) {
      throw ConfigError("conv2d: non-positive output extent for input " + xv.shape_str());
    }

    const int64_t kdim = cin * kh * kw;
    const int64_t n = oh * ow;
    const bool one_by_one = (kh == 1 && kw == 1 && stride == 1 && padding == 0);
    Tensor out({bsz, cout, oh, ow});
    for (int64_t bi = 0; bi < bsz; ++bi) {
      const float* xb = xv.data.data() + bi * cin * h * wdt;
      float* ob = out.data.data() + bi * cout * n;
      const float* cols = xb;
      if (!one_by_one) {
        auto& buf = detail::scratch(0, static_cast<size_t>(kdim * n));
        detail::im2col(xb, cin, h, wdt, kh, kw, stride, padding, oh, ow, buf.data());
        cols = buf.data();
      }
      blas::gemm_nn(cout, n, kdim, wv.data.data(), cols, ob);
      for (int64_t o = 0; o < cout; ++o) {
        const float bias = bv.data[static_cast<size_t>(o)];
        float* row = ob + o * n;
        for (int64_t i = 0; i < n; ++i) row[i] += bias;
      }
    }

    const bool ng = needs(x) || needs(w) || needs(b);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id, wid = w.id, bid = b.id;
      nodes_.back().backprop = [=](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        const Tensor& xvv = t.val(xid);
        const Tensor& wvv = t.val(wid);
        const bool need_x = t.needs_id(xid);
        const bool need_w = t.needs_id(wid);
        if (t.needs_id(bid)) {
          Tensor& gb = t.grad_buf(bid);
          for (int64_t o = 0; o < cout; ++o) {
            double acc = 0.0;
            for (int64_t bi = 0; bi < bsz; ++bi) {
              const float* row = go.data.data() + (bi * cout + o) * n;
              for (int64_t i = 0; i < n; ++i) acc += row[i];
            }
            gb.data[static_cast<size_t>(o)] += static_cast<float>(acc);
          }
        }
        float* gw = need_w ? t.grad_buf(wid).data.data() : nullptr;
        float* gx = need_x ? t.grad_buf(xid).data.data() : nullptr;
        for (int64_t bi = 0; bi < bsz; ++bi) {
          const float* gob = go.data.data() + bi * cout * n;
          const float* xb = xvv.data.data() + bi * cin * h * wdt;
          const float* cols = xb;
          if (!one_by_one && need_w) {
            auto& buf = detail::scratch(1, static_cast<size_t>(kdim * n));
            detail::im2col(xb, cin, h, wdt, kh, kw, stride, padding, oh, ow, buf.data());
            cols = buf.data();
          }
          if (need_w) blas::gemm_nt(cout, kdim, n, gob, cols, gw, 1.0f);
          if (need_x) {
            float* gxb = gx + bi * cin * h * wdt;
            if (one_by_one) {
              blas::gemm_tn(kdim, n, cout, wvv.data.data(), gob, gxb, 1.0f);
            } else {
              auto& dbuf = detail::scratch(2, static_cast<size_t>(kdim * n));
              blas::gemm_tn(kdim, n, cout, wvv.data.data(), gob, dbuf.data());
              detail::col2im_add(dbuf.data(), cin, h, wdt, kh, kw, stride, padding, oh, ow, gxb);
            }
          }
        }
      };
    }
    return {out_id};
  }

  ValueRef relu(ValueRef x) {
    const Tensor& xv = val(x.id);
    Tensor out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out.data[i] = xv.data[i] > 0.0f ? xv.data[i] : 0.0f;
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [=](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        const Tensor& xvv = t.val(xid);
        Tensor& gx = t.grad_buf(xid);
        if (t.guided_) {
          for (int64_t i = 0; i < go.numel(); ++i) {
            if (xvv.data[i] > 0.0f && go.data[i] > 0.0f) gx.data[i] += go.data[i];
          }
        } else {
          for (int64_t i = 0; i < go.numel(); ++i) {
            if (xvv.data[i] > 0.0f) gx.data[i] += go.data[i];
          }
        }
      };
    }
    return {out_id};
  }

  ValueRef leaky_relu(ValueRef x, float slope) {
    const Tensor& xv = val(x.id);
    Tensor out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) {
      out.data[i] = xv.data[i] > 0.0f ? xv.data[i] : slope * xv.data[i];
    }
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [=](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        const Tensor& xvv = t.val(xid);
        Tensor& gx = t.grad_buf(xid);
        if (t.guided_) {
          // Guided rule treats the unit as a plain ReLU: the negative-slope
          // path contributes nothing.
          for (int64_t i = 0; i < go.numel(); ++i) {
            if (xvv.data[i] > 0.0f && go.data[i] > 0.0f) gx.data[i] += go.data[i];
          }
        } else {
          for (int64_t i = 0; i < go.numel(); ++i) {
            gx.data[i] += go.data[i] * (xvv.data[i] > 0.0f ? 1.0f : slope);
          }
        }
      };
    }
    return {out_id};
  }

  /// 2x2 max pooling, stride 2. Backward routes each gradient to the argmax
  /// of its window; ties go to the first element in row-major scan order.
  ValueRef max_pool2x2(ValueRef x) {
    const Tensor& xv = val(x.id);
    if (xv.rank() != 4) throw ConfigError("max_pool2x2: expected [B,C,H,W]");
    const int64_t bsz = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    if (h % 2 != 0 || w % 2 != 0) {
      throw ConfigError("max_pool2x2: spatial extents must be even, got " + xv.shape_str());
    }
    const int64_t oh = h / 2, ow = w / 2;
    Tensor out({bsz, c, oh, ow});
    std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
    int64_t oi = 0;
    for (int64_t bc = 0; bc < bsz * c; ++bc) {
      const float* plane = xv.data.data() + bc * h * w;
      const int64_t plane_off = bc * h * w;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox, ++oi) {
          const int64_t y0 = 2 * oy, x0 = 2 * ox;
          int64_t best = y0 * w + x0;
          float bv = plane[best];
          const int64_t cand[3] = {y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1};
          for (int64_t idx : cand) {
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
          out.data[static_cast<size_t>(oi)] = bv;
          argmax[static_cast<size_t>(oi)] = plane_off + best;
        }
      }
    }
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [out_id, xid, am = std::move(argmax)](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        Tensor& gx = t.grad_buf(xid);
        for (int64_t i = 0; i < go.numel(); ++i) {
          gx.data[static_cast<size_t>(am[static_cast<size_t>(i)])] += go.data[i];
        }
      };
    }
    return {out_id};
  }

  /// Interpolating x2 upsampling (bilinear or Lanczos a=3 windowed sinc),
  /// half-pixel centres, edge clamped. Linear in its input.
  ValueRef upsample2x(ValueRef x, UpsampleKind kind) {
    const Tensor& xv = val(x.id);
    if (xv.rank() != 4) throw ConfigError("upsample2x: expected [B,C,H,W]");
    const int64_t bsz = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    const auto ytaps = detail::upsample2x_taps(h, kind);
    const auto xtaps = detail::upsample2x_taps(w, kind);
    Tensor out({bsz, c, 2 * h, 2 * w});
    // H pass into a scratch plane, then W pass.
    auto& tmp = detail::scratch(0, static_cast<size_t>(2 * h * w));
    for (int64_t bc = 0; bc < bsz * c; ++bc) {
      const float* src = xv.data.data() + bc * h * w;
      float* dst = out.data.data() + bc * 4 * h * w;
      for (int64_t oy = 0; oy < 2 * h; ++oy) {
        const auto& tp = ytaps[static_cast<size_t>(oy)];
        float* row = tmp.data() + oy * w;
        std::fill(row, row + w, 0.0f);
        for (int32_t k = 0; k < tp.count; ++k) {
          const float* srow = src + static_cast<int64_t>(tp.idx[static_cast<size_t>(k)]) * w;
          const float wt = tp.w[static_cast<size_t>(k)];
          for (int64_t i = 0; i < w; ++i) row[i] += wt * srow[i];
        }
      }
      for (int64_t oy = 0; oy < 2 * h; ++oy) {
        const float* row = tmp.data() + oy * w;
        float* drow = dst + oy * 2 * w;
        for (int64_t ox = 0; ox < 2 * w; ++ox) {
          const auto& tp = xtaps[static_cast<size_t>(ox)];
          float acc = 0.0f;
          for (int32_t k = 0; k < tp.count; ++k) {
            acc += tp.w[static_cast<size_t>(k)] * row[tp.idx[static_cast<size_t>(k)]];
          }
          drow[ox] = acc;
        }
      }
    }
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [out_id, xid, ytaps, xtaps, bsz, c, h, w](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        Tensor& gx = t.grad_buf(xid);
        auto& tmp2 = detail::scratch(0, static_cast<size_t>(2 * h * w));
        for (int64_t bc = 0; bc < bsz * c; ++bc) {
          const float* gsrc = go.data.data() + bc * 4 * h * w;
          float* gdst = gx.data.data() + bc * h * w;
          std::fill(tmp2.data(), tmp2.data() + 2 * h * w, 0.0f);
          // transpose of the W pass
          for (int64_t oy = 0; oy < 2 * h; ++oy) {
            const float* grow = gsrc + oy * 2 * w;
            float* trow = tmp2.data() + oy * w;
            for (int64_t ox = 0; ox < 2 * w; ++ox) {
              const auto& tp = xtaps[static_cast<size_t>(ox)];
              const float g = grow[ox];
              for (int32_t k = 0; k < tp.count; ++k) {
                trow[tp.idx[static_cast<size_t>(k)]] += tp.w[static_cast<size_t>(k)] * g;
              }
            }
          }
          // transpose of the H pass
          for (int64_t oy = 0; oy < 2 * h; ++oy) {
            const auto& tp = ytaps[static_cast<size_t>(oy)];
            const float* trow = tmp2.data() + oy * w;
            for (int32_t k = 0; k < tp.count; ++k) {
              float* drow = gdst + static_cast<int64_t>(tp.idx[static_cast<size_t>(k)]) * w;
              const float wt = tp.w[static_cast<size_t>(k)];
              for (int64_t i = 0; i < w; ++i) drow[i] += wt * trow[i];
            }
          }
        }
      };
    }
    return {out_id};
  }

  /// Inverted dropout: train-time scaling by 1/(1-p) makes eval an identity
  /// (eval mode returns the input value unchanged). The Bernoulli mask is
  /// drawn from `rng` and recorded for backward.
  ValueRef dropout(ValueRef x, float p, bool train, Rng& rng) {
    if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout: p must be in [0,1)");
    if (!train || p == 0.0f) return x;
    const Tensor& xv = val(x.id);
    const float scale = 1.0f / (1.0f - p);
    std::vector<uint8_t> keep(static_cast<size_t>(xv.numel()));
    Tensor out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) {
      const bool k = rng.uniform() >= p;
      keep[static_cast<size_t>(i)] = k;
      out.data[i] = k ? xv.data[i] * scale : 0.0f;
    }
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [out_id, xid, scale, keep = std::move(keep)](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        Tensor& gx = t.grad_buf(xid);
        for (int64_t i = 0; i < go.numel(); ++i) {
          if (keep[static_cast<size_t>(i)]) gx.data[i] += go.data[i] * scale;
        }
      };
    }
    return {out_id};
  }

  /// Per-sample per-channel normalisation with learned scale/shift,
  /// epsilon 1e-5. Mean/variance accumulate in double.
  ValueRef instance_norm(ValueRef x, ValueRef gamma, ValueRef beta) {
    constexpr double kEps = 1e-5;
    const Tensor& xv = val(x.id);
    const Tensor& gv = val(gamma.id);
    const Tensor& bv = val(beta.id);
    if (xv.rank() != 4) throw ConfigError("instance_norm: expected [B,C,H,W]");
    const int64_t bsz = xv.shape[0], c = xv.shape[1], m = xv.shape[2] * xv.shape[3];
    if (gv.numel() != c || bv.numel() != c) {
      throw ConfigError("instance_norm: scale/shift must have one entry per channel");
    }
    Tensor out(xv.shape);
    std::vector<double> mean(static_cast<size_t>(bsz * c));
    std::vector<double> inv_std(static_cast<size_t>(bsz * c));
    for (int64_t bc = 0; bc < bsz * c; ++bc) {
      const float* src = xv.data.data() + bc * m;
      double s = 0.0;
      for (int64_t i = 0; i < m; ++i) s += src[i];
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (int64_t i = 0; i < m; ++i) {
        const double d = src[i] - mu;
        v += d * d;
      }
      const double inv = 1.0 / std::sqrt(v / static_cast<double>(m) + kEps);
      mean[static_cast<size_t>(bc)] = mu;
      inv_std[static_cast<size_t>(bc)] = inv;
      const float ga = gv.data[static_cast<size_t>(bc % c)];
      const float be = bv.data[static_cast<size_t>(bc % c)];
      float* dst = out.data.data() + bc * m;
      const float a = static_cast<float>(inv) * ga;
      for (int64_t i = 0; i < m; ++i) {
        dst[i] = static_cast<float>((src[i] - mu)) * a + be;
      }
    }
    const bool ng = needs(x) || needs(gamma) || needs(beta);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id, gid = gamma.id, bid = beta.id;
      nodes_.back().backprop = [out_id, xid, gid, bid, bsz, c, m, mean = std::move(mean),
                                inv_std = std::move(inv_std)](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        const Tensor& xvv = t.val(xid);
        const Tensor& gvv = t.val(gid);
        const bool need_x = t.needs_id(xid);
        const bool need_g = t.needs_id(gid);
        const bool need_b = t.needs_id(bid);
        std::vector<double> dgamma(need_g ? static_cast<size_t>(c) : 0, 0.0);
        std::vector<double> dbeta(need_b ? static_cast<size_t>(c) : 0, 0.0);
        for (int64_t bc = 0; bc < bsz * c; ++bc) {
          const float* src = xvv.data.data() + bc * m;
          const float* g = go.data.data() + bc * m;
          const double mu = mean[static_cast<size_t>(bc)];
          const double inv = inv_std[static_cast<size_t>(bc)];
          double s1 = 0.0, s2 = 0.0;
          for (int64_t i = 0; i < m; ++i) {
            const double xh = (src[i] - mu) * inv;
            s1 += g[i];
            s2 += g[i] * xh;
          }
          if (need_g) dgamma[static_cast<size_t>(bc % c)] += s2;
          if (need_b) dbeta[static_cast<size_t>(bc % c)] += s1;
          if (need_x) {
            Tensor& gx = t.grad_buf(xid);
            float* dst = gx.data.data() + bc * m;
            const double ga = gvv.data[static_cast<size_t>(bc % c)];
            const double k1 = s1 / static_cast<double>(m);
            const double k2 = s2 / static_cast<double>(m);
            const double a = ga * inv;
            for (int64_t i = 0; i < m; ++i) {
              const double xh = (src[i] - mu) * inv;
              dst[i] += static_cast<float>(a * (g[i] - k1 - xh * k2));
            }
          }
        }
        if (need_g) {
          Tensor& gg = t.grad_buf(gid);
          for (int64_t i = 0; i < c; ++i) {
            gg.data[static_cast<size_t>(i)] += static_cast<float>(dgamma[static_cast<size_t>(i)]);
          }
        }
        if (need_b) {
          Tensor& gb = t.grad_buf(bid);
          for (int64_t i = 0; i < c; ++i) {
            gb.data[static_cast<size_t>(i)] += static_cast<float>(dbeta[static_cast<size_t>(i)]);
          }
        }
      };
    }
    return {out_id};
  }

  ValueRef concat_channels(ValueRef a, ValueRef b) {
    const Tensor& av = val(a.id);
    const Tensor& bv = val(b.id);
    if (av.rank() != 4 || bv.rank() != 4 || av.shape[0] != bv.shape[0] ||
        av.shape[2] != bv.shape[2] || av.shape[3] != bv.shape[3]) {
      throw ConfigError("concat_channels: batch/spatial shapes must match, got " + av.shape_str() +
                        " vs " + bv.shape_str());
    }
    const int64_t bsz = av.shape[0], ca = av.shape[1], cb = bv.shape[1];
    const int64_t plane = av.shape[2] * av.shape[3];
    Tensor out({bsz, ca + cb, av.shape[2], av.shape[3]});
    for (int64_t bi = 0; bi < bsz; ++bi) {
      std::memcpy(out.data.data() + bi * (ca + cb) * plane, av.data.data() + bi * ca * plane,
                  static_cast<size_t>(ca * plane) * sizeof(float));
      std::memcpy(out.data.data() + (bi * (ca + cb) + ca) * plane,
                  bv.data.data() + bi * cb * plane,
                  static_cast<size_t>(cb * plane) * sizeof(float));
    }
    const bool ng = needs(a) || needs(b);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t aid = a.id, bid = b.id;
      nodes_.back().backprop = [=](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        if (t.needs_id(aid)) {
          Tensor& ga = t.grad_buf(aid);
          for (int64_t bi = 0; bi < bsz; ++bi) {
            const float* src = go.data.data() + bi * (ca + cb) * plane;
            float* dst = ga.data.data() + bi * ca * plane;
            for (int64_t i = 0; i < ca * plane; ++i) dst[i] += src[i];
          }
        }
        if (t.needs_id(bid)) {
          Tensor& gb = t.grad_buf(bid);
          for (int64_t bi = 0; bi < bsz; ++bi) {
            const float* src = go.data.data() + (bi * (ca + cb) + ca) * plane;
            float* dst = gb.data.data() + bi * cb * plane;
            for (int64_t i = 0; i < cb * plane; ++i) dst[i] += src[i];
          }
        }
      };
    }
    return {out_id};
  }

  ValueRef add(ValueRef a, ValueRef b) {
    const Tensor& av = val(a.id);
    const Tensor& bv = val(b.id);
    if (!av.same_shape(bv)) {
      throw ConfigError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    }
    Tensor out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
    const bool ng = needs(a) || needs(b);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t aid = a.id, bid = b.id;
      nodes_.back().backprop = [=](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        if (t.needs_id(aid)) {
          Tensor& ga = t.grad_buf(aid);
          for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
        }
        if (t.needs_id(bid)) {
          Tensor& gb = t.grad_buf(bid);
          for (int64_t i = 0; i < go.numel(); ++i) gb.data[i] += go.data[i];
        }
      };
    }
    return {out_id};
  }

  /// Spatial mean per (batch, channel): [B,C,H,W] -> [B,C]. Backward spreads
  /// the incoming gradient uniformly, scaled by 1/(H*W).
  ValueRef global_avg_pool(ValueRef x) {
    const Tensor& xv = val(x.id);
    if (xv.rank() != 4) throw ConfigError("global_avg_pool: expected [B,C,H,W]");
    const int64_t bsz = xv.shape[0], c = xv.shape[1], m = xv.shape[2] * xv.shape[3];
    Tensor out({bsz, c});
    for (int64_t bc = 0; bc < bsz * c; ++bc) {
      const float* src = xv.data.data() + bc * m;
      double s = 0.0;
      for (int64_t i = 0; i < m; ++i) s += src[i];
      out.data[static_cast<size_t>(bc)] = static_cast<float>(s / static_cast<double>(m));
    }
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [out_id, xid, bsz, c, m](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        Tensor& gx = t.grad_buf(xid);
        const float inv = 1.0f / static_cast<float>(m);
        for (int64_t bc = 0; bc < bsz * c; ++bc) {
          const float g = go.data[static_cast<size_t>(bc)] * inv;
          float* dst = gx.data.data() + bc * m;
          for (int64_t i = 0; i < m; ++i) dst[i] += g;
        }
      };
    }
    return {out_id};
  }

  /// [B, C*r^2, H, W] -> [B, C, H*r, W*r];
  /// out[b,c,y*r+dy,x*r+dx] = in[b, c*r^2 + dy*r + dx, y, x].
  ValueRef pixel_shuffle(ValueRef x, int64_t r) {
    const Tensor& xv = val(x.id);
    if (xv.rank() != 4) throw ConfigError("pixel_shuffle: expected [B,C,H,W]");
    if (r < 1) throw ConfigError("pixel_shuffle: r must be >= 1");
    if (xv.shape[1] % (r * r) != 0) {
      throw ConfigError("pixel_shuffle: channel count " + std::to_string(xv.shape[1]) +
                        " not divisible by r^2=" + std::to_string(r * r));
    }
    const int64_t bsz = xv.shape[0], cin = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    const int64_t c = cin / (r * r);
    Tensor out({bsz, c, h * r, w * r});
    packed_to_space(xv.data.data(), out.data.data(), bsz, c, r, h, w, false);
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [out_id, xid, bsz, c, r, h, w](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        Tensor& gx = t.grad_buf(xid);
        space_to_packed(go.data.data(), gx.data.data(), bsz, c, r, h, w, true);
      };
    }
    return {out_id};
  }

  /// Exact inverse of pixel_shuffle: [B,C,H*r,W*r] -> [B, C*r^2, H, W].
  ValueRef pixel_unshuffle(ValueRef x, int64_t r) {
    const Tensor& xv = val(x.id);
    if (xv.rank() != 4) throw ConfigError("pixel_unshuffle: expected [B,C,H,W]");
    if (r < 1) throw ConfigError("pixel_unshuffle: r must be >= 1");
    if (xv.shape[2] % r != 0 || xv.shape[3] % r != 0) {
      throw ConfigError("pixel_unshuffle: spatial extents of " + xv.shape_str() +
                        " not divisible by r=" + std::to_string(r));
    }
    const int64_t bsz = xv.shape[0], c = xv.shape[1], h = xv.shape[2] / r, w = xv.shape[3] / r;
    Tensor out({bsz, c * r * r, h, w});
    space_to_packed(xv.data.data(), out.data.data(), bsz, c, r, h, w, false);
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [out_id, xid, bsz, c, r, h, w](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        Tensor& gx = t.grad_buf(xid);
        // gradient of unshuffle = shuffle of the gradient
        packed_to_space(go.data.data(), gx.data.data(), bsz, c, r, h, w, true);
      };
    }
    return {out_id};
  }

  ValueRef reshape(ValueRef x, std::vector<int64_t> new_shape) {
    const Tensor& xv = val(x.id);
    if (Tensor::numel_of(new_shape) != xv.numel()) {
      throw UsageError("reshape: element count mismatch " + xv.shape_str() + " -> " +
                       Tensor::shape_string(new_shape));
    }
    Tensor out;
    out.shape = std::move(new_shape);
    out.data = xv.data;
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [=](Tape& t) {
        const Tensor& go = t.node(out_id).grad;
        Tensor& gx = t.grad_buf(xid);
        for (int64_t i = 0; i < go.numel(); ++i) gx.data[i] += go.data[i];
      };
    }
    return {out_id};
  }

  /// Scalar dot product with a fixed coefficient tensor; the workhorse for
  /// building scalar fragments in gradient checks.
  ValueRef vdot(ValueRef x, Tensor coeffs) {
    const Tensor& xv = val(x.id);
    if (!xv.same_shape(coeffs)) {
      throw UsageError("vdot: coefficient shape " + coeffs.shape_str() + " != value shape " +
                       xv.shape_str());
    }
    double acc = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) {
      acc += static_cast<double>(xv.data[i]) * static_cast<double>(coeffs.data[i]);
    }
    Tensor out({1});
    out.data[0] = static_cast<float>(acc);
    const bool ng = needs(x);
    const int32_t out_id = push(std::move(out), ng);
    scalar64_[out_id] = acc;
    if (ng) {
      const int32_t xid = x.id;
      nodes_.back().backprop = [out_id, xid, coeffs = std::move(coeffs)](Tape& t) {
        const float g = t.node(out_id).grad.data[0];
        Tensor& gx = t.grad_buf(xid);
        for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g * coeffs.data[i];
      };
    }
    return {out_id};
  }

  ValueRef sum(ValueRef x) { return vdot(x, Tensor(val(x.id).shape, 1.0f)); }

  /// Class-weighted softmax cross-entropy over a batch of logits:
  /// loss = sum_b w[y_b] * (-log softmax(logits_b)[y_b]) / D.
  /// D defaults to sum_b w[y_b]; pass an explicit `denom` (e.g. the weight
  /// total of a whole effective batch) to make micro-batch losses additive
  /// under gradient accumulation. Softmax uses max subtraction.
  ValueRef weighted_cross_entropy(ValueRef logits, const std::vector<int>& labels,
                                  const std::vector<float>& class_weights, double denom = -1.0) {
    const Tensor& lv = val(logits.id);
    if (lv.rank() != 2) throw ConfigError("weighted_cross_entropy: expected logits [B,K]");
    const int64_t bsz = lv.shape[0], k = lv.shape[1];
    if (static_cast<int64_t>(labels.size()) != bsz) {
      throw InputError("weighted_cross_entropy: label count != batch size");
    }
    if (static_cast<int64_t>(class_weights.size()) != k) {
      throw InputError("weighted_cross_entropy: expected one weight per class");
    }
    for (float w : class_weights) {
      if (!(w > 0.0f)) throw InputError("weighted_cross_entropy: class weights must be positive");
    }
    for (int y : labels) {
      if (y < 0 || y >= k) {
        throw InputError("weighted_cross_entropy: label " + std::to_string(y) +
                         " out of range [0," + std::to_string(k) + ")");
      }
    }
    std::vector<float> probs(static_cast<size_t>(bsz * k));
    double weight_total = 0.0;
    for (int64_t b = 0; b < bsz; ++b) {
      weight_total += class_weights[static_cast<size_t>(labels[static_cast<size_t>(b)])];
    }
    const double d = denom > 0.0 ? denom : weight_total;
    double loss = 0.0;
    for (int64_t b = 0; b < bsz; ++b) {
      const float* row = lv.data.data() + b * k;
      float mx = row[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double se = 0.0;
      for (int64_t j = 0; j < k; ++j) se += std::exp(static_cast<double>(row[j] - mx));
      const double lse = std::log(se);
      float* prow = probs.data() + b * k;
      for (int64_t j = 0; j < k; ++j) {
        prow[j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / se);
      }
      const int y = labels[static_cast<size_t>(b)];
      const double logp = static_cast<double>(row[y] - mx) - lse;
      loss += static_cast<double>(class_weights[static_cast<size_t>(y)]) * (-logp);
    }
    Tensor out({1});
    out.data[0] = static_cast<float>(loss / d);
    const bool ng = needs(logits);
    const int32_t out_id = push(std::move(out), ng);
    scalar64_[out_id] = loss / d;
    if (ng) {
      const int32_t lid = logits.id;
      nodes_.back().backprop = [out_id, lid, bsz, k, d, labels, class_weights,
                                probs = std::move(probs)](Tape& t) {
        const float g0 = t.node(out_id).grad.data[0];
        Tensor& gl = t.grad_buf(lid);
        for (int64_t b = 0; b < bsz; ++b) {
          const int y = labels[static_cast<size_t>(b)];
          const float scale =
              g0 * static_cast<float>(class_weights[static_cast<size_t>(y)] / d);
          const float* prow = probs.data() + b * k;
          float* grow = gl.data.data() + b * k;
          for (int64_t j = 0; j < k; ++j) {
            grow[j] += scale * (prow[j] - (j == y ? 1.0f : 0.0f));
          }
        }
      };
    }
    return {out_id};
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool needs_grad = false;
    Parameter* bound = nullptr;
    std::function<void(Tape&)> backprop;
  };

  const Tensor& val(int32_t id) const {
    const Node& n = node(id);
    return n.external ? *n.external : n.owned;
  }

  const Node& node(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
      throw UsageError("value reference does not belong to this tape");
    }
    return nodes_[static_cast<size_t>(id)];
  }

  Node& node(int32_t id) { return const_cast<Node&>(std::as_const(*this).node(id)); }

  bool needs(ValueRef r) const { return node(r.id).needs_grad; }
  bool needs_id(int32_t id) const { return node(id).needs_grad; }

  Tensor& grad_buf(int32_t id) {
    Node& n = node(id);
    if (n.grad.data.empty()) {
      n.grad = Tensor(n.external ? n.external->shape : n.owned.shape, 0.0f);
    }
    return n.grad;
  }

  int32_t push(Tensor value, bool needs_grad) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int32_t>(nodes_.size() - 1);
  }

  // Index mapping shared by pixel (un)shuffle: "packed" is the
  // [B,C*r^2,H,W] side, "space" the [B,C,H*r,W*r] side, with
  // space[b,c,y*r+dy,x*r+dx] == packed[b, c*r^2 + dy*r + dx, y, x].

  static void packed_to_space(const float* packed, float* space, int64_t bsz, int64_t c,
                              int64_t r, int64_t h, int64_t w, bool accumulate) {
    for_each_shuffle_row(bsz, c, r, h, w, [&](int64_t packed_off, int64_t space_off) {
      for (int64_t x = 0; x < w; ++x) {
        float& dst = space[space_off + x * r];
        dst = accumulate ? dst + packed[packed_off + x] : packed[packed_off + x];
      }
    });
  }

  static void space_to_packed(const float* space, float* packed, int64_t bsz, int64_t c,
                              int64_t r, int64_t h, int64_t w, bool accumulate) {
    for_each_shuffle_row(bsz, c, r, h, w, [&](int64_t packed_off, int64_t space_off) {
      for (int64_t x = 0; x < w; ++x) {
        float& dst = packed[packed_off + x];
        const float v = space[space_off + x * r];
        dst = accumulate ? dst + v : v;
      }
    });
  }

  template <typename RowFn>
  static void for_each_shuffle_row(int64_t bsz, int64_t c, int64_t r, int64_t h, int64_t w,
                                   RowFn&& fn) {
    for (int64_t bi = 0; bi < bsz; ++bi) {
      for (int64_t cc = 0; cc < c; ++cc) {
        for (int64_t dy = 0; dy < r; ++dy) {
          for (int64_t dx = 0; dx < r; ++dx) {
            const int64_t packed_c = cc * r * r + dy * r + dx;
            for (int64_t y = 0; y < h; ++y) {
              const int64_t packed_off = ((bi * c * r * r + packed_c) * h + y) * w;
              const int64_t space_off = ((bi * c + cc) * h * r + y * r + dy) * w * r + dx;
              fn(packed_off, space_off);
            }
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<int32_t, double> scalar64_;
  bool record_ = true;
  bool guided_ = false;
  bool backward_done_ = false;
};

// ---- finite-difference verification ------------------------------------

struct FiniteDiffCoord {
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct FiniteDiffReport {
  std::vector<FiniteDiffCoord> coords;
  double max_rel_err = 0.0;

  double fraction_within(double tol) const {
    if (coords.empty()) return 1.0;
    size_t ok = 0;
    for (const auto& c : coords) {
      if (c.rel_err < tol) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(coords.size());
  }
};

/// Compares tape gradients against central differences
/// (f(x+eps) - f(x-eps)) / (actual delta) on a random subsample of at least
/// 100 coordinates (all of them for small tensors). Relative error uses
/// denominator max(|analytic|, |numeric|, 1e-6). `exclude` lets callers skip
/// coordinates sitting on a kink (ReLU zero crossings, pooling ties).
inline FiniteDiffReport finite_diff_check(
    const std::function<double(const Tensor&)>& eval,
    const std::function<Tensor(const Tensor&)>& tape_grad, const Tensor& x, double epsilon,
    Rng& rng, int64_t max_coords = 100,
    const std::function<bool(int64_t)>& exclude = nullptr) {
  if (epsilon < 1e-4 || epsilon > 1e-2) {
    throw UsageError("finite_diff_check: epsilon must lie in [1e-4, 1e-2] for f32");
  }
  const Tensor analytic = tape_grad(x);
  if (!analytic.same_shape(x)) {
    throw UsageError("finite_diff_check: gradient shape does not match input");
  }
  std::vector<int64_t> idx(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) idx[static_cast<size_t>(i)] = i;
  rng.shuffle(idx);
  const int64_t want = std::min<int64_t>(x.numel(), std::max<int64_t>(max_coords, 100));

  FiniteDiffReport report;
  Tensor probe = x;
  for (int64_t s = 0; s < x.numel() && static_cast<int64_t>(report.coords.size()) < want; ++s) {
    const int64_t i = idx[static_cast<size_t>(s)];
    if (exclude && exclude(i)) continue;
    const float orig = probe.data[static_cast<size_t>(i)];
    const float hi = orig + static_cast<float>(epsilon);
    const float lo = orig - static_cast<float>(epsilon);
    probe.data[static_cast<size_t>(i)] = hi;
    const double fp = eval(probe);
    probe.data[static_cast<size_t>(i)] = lo;
    const double fm = eval(probe);
    probe.data[static_cast<size_t>(i)] = orig;
    const double delta = static_cast<double>(hi) - static_cast<double>(lo);
    const double numeric = (fp - fm) / delta;
    const double a = static_cast<double>(analytic.data[static_cast<size_t>(i)]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    const double rel = std::abs(a - numeric) / denom;
    report.coords.push_back({i, a, numeric, rel});
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  return report;
}

}  // namespace wseg::ad
