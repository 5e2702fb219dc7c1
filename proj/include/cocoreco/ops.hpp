#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "cocoreco/common.hpp"
#include "cocoreco/tensor.hpp"

namespace cocoreco {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapRM = Eigen::Map<const MatRM<S>>;
template <typename S>
using MapVec = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using CMapVec = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

template <typename S>
inline void check_finite(const Tensor<S>& t, const char* op) {
    CMapVec<S> v(t.data(), static_cast<Eigen::Index>(t.size()));
    if (!v.allFinite())
        throw numeric_error(std::string(op) +
                            ": non-finite values in output (overflow)");
}

template <typename S>
inline bool want_record(Tape<S>* tp, std::initializer_list<const Tensor<S>*> ins) {
    if (!tp) return false;
    for (const Tensor<S>* t : ins)
        if (tp->tracked(*t)) return true;
    return false;
}

// Unpacks [C,H,W] / [B,C,H,W] handling: B=1 for 3-d input.
struct Chw {
    int b, c, h, w;
    bool batched;
};

template <typename S>
inline Chw chw_of(const Tensor<S>& t, const char* op) {
    if (t.ndim() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
    if (t.ndim() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
    throw shape_error(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " +
                      shape_str(t.shape()));
}

// im2col for one sample: cols is [Cin*kh*kw, OH*OW] row-major.
template <typename S>
void im2col(const S* in, int C, int H, int W, int kh, int kw, int stride,
            int pad, int OH, int OW, S* cols) {
    const int ohw = OH * OW;
    for (int ci = 0; ci < C; ++ci) {
        const S* plane = in + static_cast<std::size_t>(ci) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                S* row = cols + (static_cast<std::size_t>((ci * kh + ky) * kw + kx)) * ohw;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    S* dst = row + static_cast<std::size_t>(oy) * OW;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + OW, S(0));
                        continue;
                    }
                    const S* src = plane + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : S(0);
                    }
                }
            }
        }
    }
}

// Reverse of im2col: scatter-adds cols back into the input gradient.
template <typename S>
void col2im_add(const S* cols, int C, int H, int W, int kh, int kw, int stride,
                int pad, int OH, int OW, S* gin) {
    const int ohw = OH * OW;
    for (int ci = 0; ci < C; ++ci) {
        S* plane = gin + static_cast<std::size_t>(ci) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const S* row = cols + (static_cast<std::size_t>((ci * kh + ky) * kw + kx)) * ohw;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const S* src = row + static_cast<std::size_t>(oy) * OW;
                    S* dst = plane + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation (no kernel flip), zero padding, floor-mode sizes.
// input [C,H,W] or [B,C,H,W]; kernel [Cout,Cin,kh,kw]; bias [Cout].
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel,
                 const Tensor<S>& bias, int stride, int padding) {
    if (kernel.ndim() != 4)
        throw shape_error("conv2d: kernel must be [Cout,Cin,kh,kw], got " +
                          shape_str(kernel.shape()));
    const auto in = detail::chw_of(input, "conv2d");
    const int cout = kernel.dim(0), cin = kernel.dim(1);
    const int kh = kernel.dim(2), kw = kernel.dim(3);
    if (in.c != cin)
        throw shape_error("conv2d: input channels do not match kernel; input " +
                          shape_str(input.shape()) + ", kernel " +
                          shape_str(kernel.shape()));
    if (bias.ndim() != 1 || bias.dim(0) != cout)
        throw shape_error("conv2d: bias must be [Cout]=[" + std::to_string(cout) +
                          "], got " + shape_str(bias.shape()));
    if (stride < 1) throw value_error("conv2d: stride must be >= 1");
    if (padding < 0) throw value_error("conv2d: padding must be >= 0");
    if (kh > in.h + 2 * padding || kw > in.w + 2 * padding)
        throw shape_error("conv2d: kernel " + shape_str(kernel.shape()) +
                          " larger than padded input " + shape_str(input.shape()) +
                          " at padding " + std::to_string(padding));
    const int oh = (in.h + 2 * padding - kh) / stride + 1;
    const int ow = (in.w + 2 * padding - kw) / stride + 1;

    const int K = cin * kh * kw;
    const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
    auto cols = std::make_shared<std::vector<S>>(
        static_cast<std::size_t>(in.b) * K * ohw);

    Tensor<S> out = Tensor<S>::zeros(
        in.batched ? std::vector<int>{in.b, cout, oh, ow}
                   : std::vector<int>{cout, oh, ow});

    detail::CMapRM<S> wm(kernel.data(), cout, K);
    detail::CMapVec<S> bv(bias.data(), cout);
    for (int b = 0; b < in.b; ++b) {
        S* cb = cols->data() + static_cast<std::size_t>(b) * K * ohw;
        detail::im2col(input.data() + static_cast<std::size_t>(b) * in.c * in.h * in.w,
                       in.c, in.h, in.w, kh, kw, stride, padding, oh, ow, cb);
        detail::CMapRM<S> cm(cb, K, static_cast<Eigen::Index>(ohw));
        detail::MapRM<S> om(out.data() + static_cast<std::size_t>(b) * cout * ohw,
                            cout, static_cast<Eigen::Index>(ohw));
        om.noalias() = wm * cm;
        om.colwise() += bv;
    }
    detail::check_finite(out, "conv2d");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&input, &kernel, &bias})) {
        int pi = tp->tracked(input) ? tp->parent_of(input) : -1;
        int pk = tp->tracked(kernel) ? tp->parent_of(kernel) : -1;
        int pb = tp->tracked(bias) ? tp->parent_of(bias) : -1;
        auto kdata = kernel.impl();
        const detail::Chw geom = in;
        tp->record("conv2d", out, {pi, pk, pb},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       const std::size_t ohw2 = ohw;
                       for (int b = 0; b < geom.b; ++b) {
                           detail::CMapRM<S> gm(gout.data() + static_cast<std::size_t>(b) * cout * ohw2,
                                                cout, static_cast<Eigen::Index>(ohw2));
                           const S* cb = cols->data() + static_cast<std::size_t>(b) * K * ohw2;
                           detail::CMapRM<S> cm(cb, K, static_cast<Eigen::Index>(ohw2));
                           if (pk >= 0) {
                               detail::MapRM<S> gw(t.grad_buf(pk).data(), cout, K);
                               gw.noalias() += gm * cm.transpose();
                           }
                           if (pb >= 0) {
                               detail::MapVec<S> gb(t.grad_buf(pb).data(), cout);
                               gb.noalias() += gm.rowwise().sum();
                           }
                           if (pi >= 0) {
                               std::vector<S> dcols(static_cast<std::size_t>(K) * ohw2);
                               detail::MapRM<S> dc(dcols.data(), K, static_cast<Eigen::Index>(ohw2));
                               detail::CMapRM<S> wmat(kdata->data.data(), cout, K);
                               dc.noalias() = wmat.transpose() * gm;
                               detail::col2im_add(dcols.data(), geom.c, geom.h, geom.w,
                                                  kh, kw, stride, padding, oh, ow,
                                                  t.grad_buf(pi).data() +
                                                      static_cast<std::size_t>(b) * geom.c * geom.h * geom.w);
                           }
                       }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling. Public pool2d is square; the rectangular kernel below also serves
// projection pooling and global average pooling.
// ---------------------------------------------------------------------------
enum class PoolKind { max, avg };

namespace detail {

template <typename S>
Tensor<S> pool_rect(const Tensor<S>& input, PoolKind kind, int kh, int kw,
                    int sh, int sw, const char* op) {
    const Chw in = chw_of(input, op);
    if (kh < 1 || kw < 1 || sh < 1 || sw < 1)
        throw value_error(std::string(op) + ": kernel and stride must be >= 1");
    if (kh > in.h || kw > in.w)
        throw value_error(std::string(op) + ": window " + std::to_string(kh) + "x" +
                          std::to_string(kw) + " exceeds input " +
                          shape_str(input.shape()));
    const int oh = (in.h - kh) / sh + 1;
    const int ow = (in.w - kw) / sw + 1;
    const int planes = in.b * in.c;

    Tensor<S> out = Tensor<S>::zeros(
        in.batched ? std::vector<int>{in.b, in.c, oh, ow}
                   : std::vector<int>{in.c, oh, ow});

    auto argmax = std::make_shared<std::vector<int>>();
    if (kind == PoolKind::max)
        argmax->resize(static_cast<std::size_t>(planes) * oh * ow);

    const S inv = S(1) / static_cast<S>(kh * kw);
    for (int p = 0; p < planes; ++p) {
        const S* src = input.data() + static_cast<std::size_t>(p) * in.h * in.w;
        S* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const int y0 = oy * sh, x0 = ox * sw;
                if (kind == PoolKind::avg) {
                    S acc = S(0);
                    for (int y = y0; y < y0 + kh; ++y)
                        for (int x = x0; x < x0 + kw; ++x)
                            acc += src[static_cast<std::size_t>(y) * in.w + x];
                    dst[oy * ow + ox] = acc * inv;
                } else {
                    // first row-major argmax wins ties
                    int best = y0 * in.w + x0;
                    S bv = src[best];
                    for (int y = y0; y < y0 + kh; ++y)
                        for (int x = x0; x < x0 + kw; ++x) {
                            const int idx = y * in.w + x;
                            if (src[idx] > bv) {
                                bv = src[idx];
                                best = idx;
                            }
                        }
                    dst[oy * ow + ox] = bv;
                    (*argmax)[static_cast<std::size_t>(p) * oh * ow + oy * ow + ox] = best;
                }
            }
        }
    }
    check_finite(out, op);

    Tape<S>* tp = Tape<S>::active();
    if (want_record(tp, {&input})) {
        int pi = tp->parent_of(input);
        const Chw geom = in;
        tp->record(op, out, {pi}, [=](const std::vector<S>& gout, Tape<S>& t) {
            if (pi < 0) return;
            S* gin = t.grad_buf(pi).data();
            for (int p = 0; p < planes; ++p) {
                const S* g = gout.data() + static_cast<std::size_t>(p) * oh * ow;
                S* gp = gin + static_cast<std::size_t>(p) * geom.h * geom.w;
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        const S gv = g[oy * ow + ox];
                        if (kind == PoolKind::max) {
                            gp[(*argmax)[static_cast<std::size_t>(p) * oh * ow + oy * ow + ox]] += gv;
                        } else {
                            const S share = gv * inv;
                            for (int y = oy * sh; y < oy * sh + kh; ++y)
                                for (int x = ox * sw; x < ox * sw + kw; ++x)
                                    gp[static_cast<std::size_t>(y) * geom.w + x] += share;
                        }
                    }
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
Tensor<S> pool2d(const Tensor<S>& input, PoolKind kind, int k, int stride) {
    return detail::pool_rect(input, kind, k, k, stride, stride, "pool2d");
}

// ---------------------------------------------------------------------------
// Bilinear upsampling with half-pixel centers and edge clamping:
// source coordinate = (i+0.5)*in/out - 0.5, clamped. The nested-lerp form
// reproduces constant inputs exactly.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> upsample_bilinear2d(const Tensor<S>& input, int out_h, int out_w) {
    const auto in = detail::chw_of(input, "upsample_bilinear2d");
    if (out_h < 1 || out_w < 1)
        throw value_error("upsample_bilinear2d: output dims must be >= 1");

    struct Axis {
        int i0, i1;
        S w;
    };
    auto make_axis = [](int out_n, int in_n) {
        std::vector<Axis> ax(static_cast<std::size_t>(out_n));
        for (int i = 0; i < out_n; ++i) {
            double s = (i + 0.5) * static_cast<double>(in_n) / out_n - 0.5;
            if (s < 0) s = 0;
            if (s > in_n - 1) s = in_n - 1;
            int i0 = static_cast<int>(s);
            if (i0 > in_n - 1) i0 = in_n - 1;
            int i1 = std::min(i0 + 1, in_n - 1);
            ax[static_cast<std::size_t>(i)] = {i0, i1, static_cast<S>(s - i0)};
        }
        return ax;
    };
    auto ys = std::make_shared<std::vector<Axis>>(make_axis(out_h, in.h));
    auto xs = std::make_shared<std::vector<Axis>>(make_axis(out_w, in.w));

    Tensor<S> out = Tensor<S>::zeros(
        in.batched ? std::vector<int>{in.b, in.c, out_h, out_w}
                   : std::vector<int>{in.c, out_h, out_w});
    const int planes = in.b * in.c;
    for (int p = 0; p < planes; ++p) {
        const S* src = input.data() + static_cast<std::size_t>(p) * in.h * in.w;
        S* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const Axis ay = (*ys)[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const Axis axx = (*xs)[static_cast<std::size_t>(ox)];
                const S v00 = src[ay.i0 * in.w + axx.i0];
                const S v01 = src[ay.i0 * in.w + axx.i1];
                const S v10 = src[ay.i1 * in.w + axx.i0];
                const S v11 = src[ay.i1 * in.w + axx.i1];
                const S top = v00 + axx.w * (v01 - v00);
                const S bot = v10 + axx.w * (v11 - v10);
                dst[oy * out_w + ox] = top + ay.w * (bot - top);
            }
        }
    }
    detail::check_finite(out, "upsample_bilinear2d");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&input})) {
        int pi = tp->parent_of(input);
        const auto geom = in;
        tp->record("upsample_bilinear2d", out, {pi},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       if (pi < 0) return;
                       S* gin = t.grad_buf(pi).data();
                       for (int p = 0; p < planes; ++p) {
                           const S* g = gout.data() + static_cast<std::size_t>(p) * out_h * out_w;
                           S* gp = gin + static_cast<std::size_t>(p) * geom.h * geom.w;
                           for (int oy = 0; oy < out_h; ++oy) {
                               const Axis ay = (*ys)[static_cast<std::size_t>(oy)];
                               for (int ox = 0; ox < out_w; ++ox) {
                                   const Axis axx = (*xs)[static_cast<std::size_t>(ox)];
                                   const S gv = g[oy * out_w + ox];
                                   gp[ay.i0 * geom.w + axx.i0] += gv * (S(1) - ay.w) * (S(1) - axx.w);
                                   gp[ay.i0 * geom.w + axx.i1] += gv * (S(1) - ay.w) * axx.w;
                                   gp[ay.i1 * geom.w + axx.i0] += gv * ay.w * (S(1) - axx.w);
                                   gp[ay.i1 * geom.w + axx.i1] += gv * ay.w * axx.w;
                               }
                           }
                       }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// dense: logits[B,K] = input[B,D] * weight[K,D]^T + bias[K]
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> dense(const Tensor<S>& input, const Tensor<S>& weight,
                const Tensor<S>& bias) {
    if (input.ndim() != 2)
        throw shape_error("dense: input must be [B,D], got " + shape_str(input.shape()));
    if (weight.ndim() != 2)
        throw shape_error("dense: weight must be [K,D], got " + shape_str(weight.shape()));
    const int B = input.dim(0), D = input.dim(1), Kk = weight.dim(0);
    if (weight.dim(1) != D)
        throw shape_error("dense: inner dims mismatch; input " + shape_str(input.shape()) +
                          ", weight " + shape_str(weight.shape()));
    if (bias.ndim() != 1 || bias.dim(0) != Kk)
        throw shape_error("dense: bias must be [K]=[" + std::to_string(Kk) + "], got " +
                          shape_str(bias.shape()));

    Tensor<S> out = Tensor<S>::zeros({B, Kk});
    {
        detail::CMapRM<S> x(input.data(), B, D);
        detail::CMapRM<S> w(weight.data(), Kk, D);
        detail::CMapVec<S> bv(bias.data(), Kk);
        detail::MapRM<S> y(out.data(), B, Kk);
        y.noalias() = x * w.transpose();
        y.rowwise() += bv.transpose();
    }
    detail::check_finite(out, "dense");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&input, &weight, &bias})) {
        int pi = tp->tracked(input) ? tp->parent_of(input) : -1;
        int pw = tp->tracked(weight) ? tp->parent_of(weight) : -1;
        int pb = tp->tracked(bias) ? tp->parent_of(bias) : -1;
        auto xi = input.impl();
        auto wi = weight.impl();
        tp->record("dense", out, {pi, pw, pb},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       detail::CMapRM<S> g(gout.data(), B, Kk);
                       if (pi >= 0) {
                           detail::CMapRM<S> w(wi->data.data(), Kk, D);
                           detail::MapRM<S> gx(t.grad_buf(pi).data(), B, D);
                           gx.noalias() += g * w;
                       }
                       if (pw >= 0) {
                           detail::CMapRM<S> x(xi->data.data(), B, D);
                           detail::MapRM<S> gw(t.grad_buf(pw).data(), Kk, D);
                           gw.noalias() += g.transpose() * x;
                       }
                       if (pb >= 0) {
                           detail::MapVec<S> gb(t.grad_buf(pb).data(), Kk);
                           gb.noalias() += g.colwise().sum().transpose();
                       }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise_add: strict same-shape addition.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> elementwise_add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw shape_error("elementwise_add: shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    {
        detail::CMapVec<S> av(a.data(), static_cast<Eigen::Index>(a.size()));
        detail::CMapVec<S> bv(b.data(), static_cast<Eigen::Index>(b.size()));
        detail::MapVec<S> ov(out.data(), static_cast<Eigen::Index>(out.size()));
        ov = av + bv;
    }
    detail::check_finite(out, "elementwise_add");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&a, &b})) {
        int pa = tp->tracked(a) ? tp->parent_of(a) : -1;
        int pb = tp->tracked(b) ? tp->parent_of(b) : -1;
        tp->record("elementwise_add", out, {pa, pb},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       for (int p : {pa, pb}) {
                           if (p < 0) continue;
                           auto& gb = t.grad_buf(p);
                           for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i];
                       }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// relu: max(x, 0); subgradient 0 at 0.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out.data()[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
    detail::check_finite(out, "relu");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&x})) {
        int px = tp->parent_of(x);
        auto xi = x.impl();
        tp->record("relu", out, {px}, [=](const std::vector<S>& gout, Tape<S>& t) {
            if (px < 0) return;
            auto& gx = t.grad_buf(px);
            for (std::size_t i = 0; i < gout.size(); ++i)
                if (xi->data[i] > S(0)) gx[i] += gout[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// scale_channels: multiply channel c of [C,H,W] / [B,C,H,W] by weights[c].
// weights is a tensor of shape [C] or [1] (scalar broadcast); differentiable
// w.r.t. both operands. A plain-scalar overload covers constant multipliers.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> scale_channels(const Tensor<S>& input, const Tensor<S>& weights) {
    const auto in = detail::chw_of(input, "scale_channels");
    if (weights.ndim() != 1 || (weights.dim(0) != in.c && weights.dim(0) != 1))
        throw shape_error("scale_channels: weights must be length C=" +
                          std::to_string(in.c) + " or scalar, got " +
                          shape_str(weights.shape()));
    const bool broadcast = weights.dim(0) == 1;
    const std::size_t plane = static_cast<std::size_t>(in.h) * in.w;

    Tensor<S> out = Tensor<S>::zeros(input.shape());
    for (int b = 0; b < in.b; ++b)
        for (int c = 0; c < in.c; ++c) {
            const S w = weights.data()[broadcast ? 0 : c];
            const S* src = input.data() + (static_cast<std::size_t>(b) * in.c + c) * plane;
            S* dst = out.data() + (static_cast<std::size_t>(b) * in.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * w;
        }
    detail::check_finite(out, "scale_channels");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&input, &weights})) {
        int pi = tp->tracked(input) ? tp->parent_of(input) : -1;
        int pw = tp->tracked(weights) ? tp->parent_of(weights) : -1;
        auto xi = input.impl();
        auto wi = weights.impl();
        const auto geom = in;
        tp->record("scale_channels", out, {pi, pw},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       const std::size_t pl = static_cast<std::size_t>(geom.h) * geom.w;
                       for (int b = 0; b < geom.b; ++b)
                           for (int c = 0; c < geom.c; ++c) {
                               const std::size_t off = (static_cast<std::size_t>(b) * geom.c + c) * pl;
                               const S w = wi->data[broadcast ? 0 : static_cast<std::size_t>(c)];
                               if (pi >= 0) {
                                   S* gx = t.grad_buf(pi).data() + off;
                                   for (std::size_t i = 0; i < pl; ++i)
                                       gx[i] += gout[off + i] * w;
                               }
                               if (pw >= 0) {
                                   S acc = S(0);
                                   for (std::size_t i = 0; i < pl; ++i)
                                       acc += gout[off + i] * xi->data[off + i];
                                   t.grad_buf(pw)[broadcast ? 0 : static_cast<std::size_t>(c)] += acc;
                               }
                           }
                   });
    }
    return out;
}

template <typename S>
Tensor<S> scale_channels(const Tensor<S>& input, S constant) {
    if (!std::isfinite(static_cast<double>(constant)))
        throw value_error("scale_channels: weight must be finite");
    Tensor<S> out = Tensor<S>::zeros(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i)
        out.data()[i] = input.data()[i] * constant;
    detail::check_finite(out, "scale_channels");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&input})) {
        int pi = tp->parent_of(input);
        tp->record("scale_channels", out, {pi},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       if (pi < 0) return;
                       auto& gx = t.grad_buf(pi);
                       for (std::size_t i = 0; i < gout.size(); ++i)
                           gx[i] += gout[i] * constant;
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reduce_spatial: [C,H,W] -> [C]; max routes gradient to the first row-major
// argmax.
// ---------------------------------------------------------------------------
enum class ReduceKind { max, sum, mean };

template <typename S>
Tensor<S> reduce_spatial(const Tensor<S>& input, ReduceKind kind) {
    if (input.ndim() != 3)
        throw shape_error("reduce_spatial: expected [C,H,W], got " +
                          shape_str(input.shape()));
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor<S> out = Tensor<S>::zeros({C});
    auto argmax = std::make_shared<std::vector<int>>();
    if (kind == ReduceKind::max) argmax->resize(static_cast<std::size_t>(C));

    for (int c = 0; c < C; ++c) {
        const S* src = input.data() + static_cast<std::size_t>(c) * plane;
        if (kind == ReduceKind::max) {
            int best = 0;
            S bv = src[0];
            for (std::size_t i = 1; i < plane; ++i)
                if (src[i] > bv) {
                    bv = src[i];
                    best = static_cast<int>(i);
                }
            out.data()[c] = bv;
            (*argmax)[static_cast<std::size_t>(c)] = best;
        } else {
            S acc = S(0);
            for (std::size_t i = 0; i < plane; ++i) acc += src[i];
            out.data()[c] = kind == ReduceKind::sum ? acc : acc / static_cast<S>(plane);
        }
    }
    detail::check_finite(out, "reduce_spatial");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&input})) {
        int pi = tp->parent_of(input);
        tp->record("reduce_spatial", out, {pi},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       if (pi < 0) return;
                       S* gx = t.grad_buf(pi).data();
                       for (int c = 0; c < C; ++c) {
                           const std::size_t off = static_cast<std::size_t>(c) * plane;
                           if (kind == ReduceKind::max) {
                               gx[off + static_cast<std::size_t>((*argmax)[static_cast<std::size_t>(c)])] += gout[static_cast<std::size_t>(c)];
                           } else {
                               const S share = kind == ReduceKind::sum
                                                   ? gout[static_cast<std::size_t>(c)]
                                                   : gout[static_cast<std::size_t>(c)] / static_cast<S>(plane);
                               for (std::size_t i = 0; i < plane; ++i) gx[off + i] += share;
                           }
                       }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax_cross_entropy: mean over the batch of -log softmax(logits)[label],
// stabilized by max subtraction.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits,
                                const std::vector<int>& labels) {
    if (logits.ndim() != 2)
        throw shape_error("softmax_cross_entropy: logits must be [B,K], got " +
                          shape_str(logits.shape()));
    const int B = logits.dim(0), Kk = logits.dim(1);
    if (static_cast<int>(labels.size()) != B)
        throw shape_error("softmax_cross_entropy: " + std::to_string(labels.size()) +
                          " labels for batch of " + std::to_string(B));
    for (int b = 0; b < B; ++b)
        if (labels[static_cast<std::size_t>(b)] < 0 || labels[static_cast<std::size_t>(b)] >= Kk)
            throw value_error("softmax_cross_entropy: label " +
                              std::to_string(labels[static_cast<std::size_t>(b)]) +
                              " out of range [0," + std::to_string(Kk) + ") at row " +
                              std::to_string(b));

    auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(B) * Kk);
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        const S* row = logits.data() + static_cast<std::size_t>(b) * Kk;
        S m = row[0];
        for (int k = 1; k < Kk; ++k) m = std::max(m, row[k]);
        double denom = 0.0;
        for (int k = 0; k < Kk; ++k)
            denom += std::exp(static_cast<double>(row[k] - m));
        const double lse = std::log(denom);
        total += lse - static_cast<double>(row[labels[static_cast<std::size_t>(b)]] - m);
        for (int k = 0; k < Kk; ++k)
            (*probs)[static_cast<std::size_t>(b) * Kk + k] =
                static_cast<S>(std::exp(static_cast<double>(row[k] - m)) / denom);
    }
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / B));
    detail::check_finite(out, "softmax_cross_entropy");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&logits})) {
        int pl = tp->parent_of(logits);
        auto lbl = std::make_shared<std::vector<int>>(labels);
        tp->record("softmax_cross_entropy", out, {pl},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       if (pl < 0) return;
                       const S g = gout[0] / static_cast<S>(B);
                       S* gl = t.grad_buf(pl).data();
                       for (int b = 0; b < B; ++b)
                           for (int k = 0; k < Kk; ++k) {
                               S v = (*probs)[static_cast<std::size_t>(b) * Kk + k];
                               if (k == (*lbl)[static_cast<std::size_t>(b)]) v -= S(1);
                               gl[static_cast<std::size_t>(b) * Kk + k] += v * g;
                           }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// mse_loss: mean of squared differences. With treat_b_constant the second
// operand is excluded from differentiation even if tracked.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> mse_loss(const Tensor<S>& a, const Tensor<S>& b,
                   bool treat_b_constant = false) {
    if (a.shape() != b.shape())
        throw shape_error("mse_loss: shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    const std::size_t n = a.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        acc += d * d;
    }
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
    detail::check_finite(out, "mse_loss");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&a, &b})) {
        int pa = tp->tracked(a) ? tp->parent_of(a) : -1;
        int pb = (!treat_b_constant && tp->tracked(b)) ? tp->parent_of(b) : -1;
        auto ai = a.impl();
        auto bi = b.impl();
        tp->record("mse_loss", out, {pa, pb},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       const S scale = S(2) * gout[0] / static_cast<S>(n);
                       if (pa >= 0) {
                           auto& ga = t.grad_buf(pa);
                           for (std::size_t i = 0; i < n; ++i)
                               ga[i] += scale * (ai->data[i] - bi->data[i]);
                       }
                       if (pb >= 0) {
                           auto& gb = t.grad_buf(pb);
                           for (std::size_t i = 0; i < n; ++i)
                               gb[i] -= scale * (ai->data[i] - bi->data[i]);
                       }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plumbing ops used by the network assembly (not part of the public math
// contract): reshape, scalar pick, batch split/stack.
// ---------------------------------------------------------------------------
namespace detail {

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<int> shape) {
    if (numel_of(shape) != x.size())
        throw shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " +
                          shape_str(shape));
    Tensor<S> out = Tensor<S>::from(std::move(shape), x.vec());
    Tape<S>* tp = Tape<S>::active();
    if (want_record(tp, {&x})) {
        int px = tp->parent_of(x);
        tp->record("reshape", out, {px}, [=](const std::vector<S>& gout, Tape<S>& t) {
            if (px < 0) return;
            auto& gx = t.grad_buf(px);
            for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> pick(const Tensor<S>& x, std::size_t flat_index) {
    if (flat_index >= x.size())
        throw value_error("pick: index " + std::to_string(flat_index) +
                          " out of range for " + shape_str(x.shape()));
    Tensor<S> out = Tensor<S>::scalar(x.data()[flat_index]);
    Tape<S>* tp = Tape<S>::active();
    if (want_record(tp, {&x})) {
        int px = tp->parent_of(x);
        tp->record("pick", out, {px}, [=](const std::vector<S>& gout, Tape<S>& t) {
            if (px >= 0) t.grad_buf(px)[flat_index] += gout[0];
        });
    }
    return out;
}

// One sample of a batched tensor, as its own [C,...] tensor.
template <typename S>
Tensor<S> slice_batch(const Tensor<S>& x, int b) {
    if (x.ndim() < 2)
        throw shape_error("slice_batch: need a batch dim, got " + shape_str(x.shape()));
    const int B = x.dim(0);
    if (b < 0 || b >= B)
        throw value_error("slice_batch: index " + std::to_string(b) + " out of range");
    std::vector<int> shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t n = numel_of(shape);
    std::vector<S> data(x.data() + static_cast<std::size_t>(b) * n,
                        x.data() + (static_cast<std::size_t>(b) + 1) * n);
    Tensor<S> out = Tensor<S>::from(std::move(shape), std::move(data));
    Tape<S>* tp = Tape<S>::active();
    if (want_record(tp, {&x})) {
        int px = tp->parent_of(x);
        tp->record("slice_batch", out, {px},
                   [=](const std::vector<S>& gout, Tape<S>& t) {
                       if (px < 0) return;
                       S* gx = t.grad_buf(px).data() + static_cast<std::size_t>(b) * n;
                       for (std::size_t i = 0; i < n; ++i) gx[i] += gout[i];
                   });
    }
    return out;
}

// Stacks same-shape tensors along a new leading batch dim.
template <typename S>
Tensor<S> stack_batch(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw value_error("stack_batch: empty input");
    const auto& base = parts.front().shape();
    for (const auto& p : parts)
        if (p.shape() != base)
            throw shape_error("stack_batch: mixed shapes " + shape_str(base) +
                              " vs " + shape_str(p.shape()));
    std::vector<int> shape;
    shape.push_back(static_cast<int>(parts.size()));
    shape.insert(shape.end(), base.begin(), base.end());
    const std::size_t n = numel_of(base);
    Tensor<S> out = Tensor<S>::zeros(std::move(shape));
    for (std::size_t b = 0; b < parts.size(); ++b)
        std::copy(parts[b].data(), parts[b].data() + n, out.data() + b * n);

    Tape<S>* tp = Tape<S>::active();
    bool any = false;
    if (tp)
        for (const auto& p : parts)
            if (tp->tracked(p)) any = true;
    if (any) {
        std::vector<int> ps;
        ps.reserve(parts.size());
        for (const auto& p : parts)
            ps.push_back(tp->tracked(p) ? tp->parent_of(p) : -1);
        tp->record("stack_batch", out, ps,
                   [ps, n](const std::vector<S>& gout, Tape<S>& t) {
                       for (std::size_t b = 0; b < ps.size(); ++b) {
                           if (ps[b] < 0) continue;
                           auto& gp = t.grad_buf(ps[b]);
                           const S* g = gout.data() + b * n;
                           for (std::size_t i = 0; i < n; ++i) gp[i] += g[i];
                       }
                   });
    }
    return out;
}

// Global average pool [B,C,H,W] -> [B,C] (or [C,H,W] -> [C]).
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    const auto in = chw_of(x, "global_avg_pool");
    Tensor<S> pooled = pool_rect(x, PoolKind::avg, in.h, in.w, in.h, in.w,
                                 "global_avg_pool");
    return reshape(pooled, in.batched ? std::vector<int>{in.b, in.c}
                                      : std::vector<int>{in.c});
}

}  // namespace detail

template <typename S>
Tensor<S> Tensor<S>::reshaped(std::vector<int> shape) const {
    return detail::reshape(*this, std::move(shape));
}

}  // namespace cocoreco
