#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "lbd/tensor.hpp"

// Raw layer kernels on NCHW tensors. Convolutions are valid (no padding).
// Loop nests keep the innermost loop contiguous so -O3 vectorizes them.

namespace lbd::kern {

inline int conv_out_dim(int in, int k, int stride) { return (in - k) / stride + 1; }

/// x: [n,ci,h,w], w: [co,ci,kh,kw], b: [co] -> [n,co,oh,ow]
inline Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("shape-mismatch: conv2d expects 4-d x and w");
    int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci) throw ShapeError("shape-mismatch: conv2d channel count");
    if (h < kh || wd < kw) throw ShapeError("shape-mismatch: conv2d input smaller than kernel");
    int oh = conv_out_dim(h, kh, stride), ow = conv_out_dim(wd, kw, stride);

    Tensor out(std::vector<int>{n, co, oh, ow});
    const double* xp = x.data();
    const double* wp = w.data();
    const double* bp = b.data();
    double* op = out.mutable_data();

    for (int in_ = 0; in_ < n; ++in_) {
        for (int c = 0; c < co; ++c) {
            double* oplane = op + ((static_cast<int64_t>(in_) * co + c) * oh) * ow;
            double bias = bp[c];
            for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) oplane[i] = bias;
            for (int ic = 0; ic < ci; ++ic) {
                const double* xplane = xp + ((static_cast<int64_t>(in_) * ci + ic) * h) * wd;
                const double* wplane = wp + ((static_cast<int64_t>(c) * ci + ic) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        double wv = wplane[ky * kw + kx];
                        for (int oy = 0; oy < oh; ++oy) {
                            const double* xrow = xplane + (oy * stride + ky) * wd + kx;
                            double* orow = oplane + static_cast<int64_t>(oy) * ow;
                            if (stride == 1) {
                                for (int ox = 0; ox < ow; ++ox) orow[ox] += wv * xrow[ox];
                            } else {
                                for (int ox = 0; ox < ow; ++ox) orow[ox] += wv * xrow[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

struct Conv2dGrads {
    Tensor dx, dw, db;
};

inline Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gout,
                                   int stride, bool need_dx) {
    int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int oh = gout.dim(2), ow = gout.dim(3);

    Conv2dGrads g;
    g.dw = Tensor(std::vector<int>(w.shape()));
    g.db = Tensor(std::vector<int>{co});
    if (need_dx) g.dx = Tensor(std::vector<int>(x.shape()));

    const double* xp = x.data();
    const double* wp = w.data();
    const double* gp = gout.data();
    double* dwp = g.dw.mutable_data();
    double* dbp = g.db.mutable_data();
    double* dxp = need_dx ? g.dx.mutable_data() : nullptr;

    for (int in_ = 0; in_ < n; ++in_) {
        for (int c = 0; c < co; ++c) {
            const double* gplane = gp + ((static_cast<int64_t>(in_) * co + c) * oh) * ow;
            double acc = 0.0;
            for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) acc += gplane[i];
            dbp[c] += acc;
            for (int ic = 0; ic < ci; ++ic) {
                const double* xplane = xp + ((static_cast<int64_t>(in_) * ci + ic) * h) * wd;
                const double* wplane = wp + ((static_cast<int64_t>(c) * ci + ic) * kh) * kw;
                double* dwplane = dwp + ((static_cast<int64_t>(c) * ci + ic) * kh) * kw;
                double* dxplane = need_dx ? dxp + ((static_cast<int64_t>(in_) * ci + ic) * h) * wd : nullptr;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        double wsum = 0.0;
                        double wv = wplane[ky * kw + kx];
                        for (int oy = 0; oy < oh; ++oy) {
                            const double* xrow = xplane + (oy * stride + ky) * wd + kx;
                            const double* grow = gplane + static_cast<int64_t>(oy) * ow;
                            if (stride == 1) {
                                for (int ox = 0; ox < ow; ++ox) wsum += grow[ox] * xrow[ox];
                            } else {
                                for (int ox = 0; ox < ow; ++ox) wsum += grow[ox] * xrow[ox * stride];
                            }
                            if (need_dx) {
                                double* dxrow = dxplane + (oy * stride + ky) * wd + kx;
                                if (stride == 1) {
                                    for (int ox = 0; ox < ow; ++ox) dxrow[ox] += wv * grow[ox];
                                } else {
                                    for (int ox = 0; ox < ow; ++ox) dxrow[ox * stride] += wv * grow[ox];
                                }
                            }
                        }
                        dwplane[ky * kw + kx] += wsum;
                    }
                }
            }
        }
    }
    return g;
}

/// Max pooling; records flat input index of each maximum for the backward pass.
inline Tensor maxpool2d_forward(const Tensor& x, int k, int stride, std::vector<int64_t>* argmax) {
    if (x.ndim() != 4) throw ShapeError("shape-mismatch: maxpool2d expects 4-d input");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < k || w < k) throw ShapeError("shape-mismatch: maxpool2d window larger than input");
    int oh = conv_out_dim(h, k, stride), ow = conv_out_dim(w, k, stride);

    Tensor out(std::vector<int>{n, c, oh, ow});
    const double* xp = x.data();
    double* op = out.mutable_data();
    if (argmax) argmax->assign(static_cast<size_t>(out.size()), 0);

    int64_t oi = 0;
    for (int in_ = 0; in_ < n; ++in_) {
        for (int ic = 0; ic < c; ++ic) {
            const double* plane = xp + ((static_cast<int64_t>(in_) * c + ic) * h) * w;
            int64_t plane_off = ((static_cast<int64_t>(in_) * c + ic) * h) * w;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t besti = 0;
                    for (int ky = 0; ky < k; ++ky) {
                        const double* row = plane + (oy * stride + ky) * w + ox * stride;
                        for (int kx = 0; kx < k; ++kx) {
                            if (row[kx] > best) {
                                best = row[kx];
                                besti = (oy * stride + ky) * static_cast<int64_t>(w) + ox * stride + kx;
                            }
                        }
                    }
                    op[oi] = best;
                    if (argmax) (*argmax)[static_cast<size_t>(oi)] = plane_off + besti;
                }
            }
        }
    }
    return out;
}

inline Tensor maxpool2d_backward(const std::vector<int>& in_shape,
                                 const std::vector<int64_t>& argmax, const Tensor& gout) {
    Tensor dx(in_shape);
    double* dxp = dx.mutable_data();
    const double* gp = gout.data();
    for (int64_t i = 0; i < gout.size(); ++i) dxp[argmax[static_cast<size_t>(i)]] += gp[i];
    return dx;
}

/// x: [n,in], w: [out,in], b: [out] -> [n,out]
inline Tensor fc_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 2 || w.ndim() != 2) throw ShapeError("shape-mismatch: fc expects 2-d x and w");
    int n = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in) throw ShapeError("shape-mismatch: fc input width");
    Tensor y(std::vector<int>{n, out});
    const double* xp = x.data();
    const double* wp = w.data();
    const double* bp = b.data();
    double* yp = y.mutable_data();
    for (int r = 0; r < n; ++r) {
        const double* xrow = xp + static_cast<int64_t>(r) * in;
        double* yrow = yp + static_cast<int64_t>(r) * out;
        for (int o = 0; o < out; ++o) {
            const double* wrow = wp + static_cast<int64_t>(o) * in;
            double acc = bp[o];
            for (int i = 0; i < in; ++i) acc += wrow[i] * xrow[i];
            yrow[o] = acc;
        }
    }
    return y;
}

struct FcGrads {
    Tensor dx, dw, db;
};

inline FcGrads fc_backward(const Tensor& x, const Tensor& w, const Tensor& gout, bool need_dx) {
    int n = x.dim(0), in = x.dim(1), out = w.dim(0);
    FcGrads g;
    g.dw = Tensor(std::vector<int>(w.shape()));
    g.db = Tensor(std::vector<int>{out});
    if (need_dx) g.dx = Tensor(std::vector<int>(x.shape()));
    const double* xp = x.data();
    const double* wp = w.data();
    const double* gp = gout.data();
    double* dwp = g.dw.mutable_data();
    double* dbp = g.db.mutable_data();
    double* dxp = need_dx ? g.dx.mutable_data() : nullptr;
    for (int r = 0; r < n; ++r) {
        const double* xrow = xp + static_cast<int64_t>(r) * in;
        const double* grow = gp + static_cast<int64_t>(r) * out;
        double* dxrow = need_dx ? dxp + static_cast<int64_t>(r) * in : nullptr;
        for (int o = 0; o < out; ++o) {
            double gv = grow[o];
            dbp[o] += gv;
            double* dwrow = dwp + static_cast<int64_t>(o) * in;
            const double* wrow = wp + static_cast<int64_t>(o) * in;
            for (int i = 0; i < in; ++i) dwrow[i] += gv * xrow[i];
            if (need_dx)
                for (int i = 0; i < in; ++i) dxrow[i] += gv * wrow[i];
        }
    }
    return g;
}

inline Tensor relu_forward(const Tensor& x) {
    Tensor y = x;
    double* p = y.mutable_data();
    for (int64_t i = 0; i < y.size(); ++i)
        if (p[i] < 0.0) p[i] = 0.0;
    return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& gout) {
    Tensor dx = gout;
    double* p = dx.mutable_data();
    const double* xp = x.data();
    for (int64_t i = 0; i < dx.size(); ++i)
        if (xp[i] <= 0.0) p[i] = 0.0;
    return dx;
}

}  // namespace lbd::kern
