#pragma once

// Forward/backward kernels for every layer in the network. Each forward call
// returns its output together with a cache that the matching backward call
// consumes; parameters are passed explicitly and never mutated by backward.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "cxrnet/error.hpp"
#include "cxrnet/rng.hpp"
#include "cxrnet/tensor.hpp"

namespace cxr {

enum class Mode { train, infer };

inline Extent conv_out_extent(Extent in, Extent k, Extent stride, Extent pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// col[(c*kh + m)*kw + n][i*ow + j] = x[c][i*s + m - pad][j*s + n - pad], 0 outside.
template <typename Real>
void im2col(const Real* x, Extent channels, Extent h, Extent w, Extent kh, Extent kw,
            Extent stride, Extent pad, Extent oh, Extent ow, Real* col) {
    const Extent plane = oh * ow;
    for (Extent c = 0; c < channels; ++c) {
        const Real* xc = x + c * h * w;
        for (Extent m = 0; m < kh; ++m) {
            for (Extent n = 0; n < kw; ++n) {
                Real* row = col + ((c * kh + m) * kw + n) * plane;
                for (Extent i = 0; i < oh; ++i) {
                    const Extent y = i * stride + m - pad;
                    Real* out = row + i * ow;
                    if (y < 0 || y >= h) {
                        std::fill(out, out + ow, Real(0));
                        continue;
                    }
                    const Real* xr = xc + y * w;
                    for (Extent j = 0; j < ow; ++j) {
                        const Extent xx = j * stride + n - pad;
                        out[j] = (xx >= 0 && xx < w) ? xr[xx] : Real(0);
                    }
                }
            }
        }
    }
}

template <typename Real>
void col2im(const Real* col, Extent channels, Extent h, Extent w, Extent kh, Extent kw,
            Extent stride, Extent pad, Extent oh, Extent ow, Real* x) {
    const Extent plane = oh * ow;
    for (Extent c = 0; c < channels; ++c) {
        Real* xc = x + c * h * w;
        for (Extent m = 0; m < kh; ++m) {
            for (Extent n = 0; n < kw; ++n) {
                const Real* row = col + ((c * kh + m) * kw + n) * plane;
                for (Extent i = 0; i < oh; ++i) {
                    const Extent y = i * stride + m - pad;
                    if (y < 0 || y >= h) continue;
                    Real* xr = xc + y * w;
                    const Real* in = row + i * ow;
                    for (Extent j = 0; j < ow; ++j) {
                        const Extent xx = j * stride + n - pad;
                        if (xx >= 0 && xx < w) xr[xx] += in[j];
                    }
                }
            }
        }
    }
}

inline void require_rank4(const Shape& s, const char* what) {
    require(s.size() == 4, ErrorKind::shape,
            std::string(what) + " expects [batch, ch, h, w], got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Standard convolution (cross-correlation, no kernel flip)

template <typename Real>
struct ConvParams {
    Tensor<Real> kernels;  // [out_ch, in_ch, kh, kw]
    Tensor<Real> bias;     // [out_ch]
    Extent stride = 1;
    Extent padding = 0;

    Extent out_channels() const { return kernels.dim(0); }
    Extent in_channels() const { return kernels.dim(1); }
    Extent kh() const { return kernels.dim(2); }
    Extent kw() const { return kernels.dim(3); }
};

template <typename Real>
struct ConvCache {
    Tensor<Real> input;
    Shape out_shape;
};

template <typename Real>
struct ConvGrads {
    Tensor<Real> input;
    Tensor<Real> kernels;
    Tensor<Real> bias;
};

template <typename Real>
Shape conv2d_output_shape(const Shape& in, const ConvParams<Real>& p) {
    detail::require_rank4(in, "conv2d");
    require(p.kernels.rank() == 4, ErrorKind::shape, "conv kernels must be rank 4");
    require(p.bias.size() == static_cast<std::size_t>(p.out_channels()), ErrorKind::shape,
            "conv bias length must equal out_ch");
    require(p.stride >= 1 && p.padding >= 0, ErrorKind::shape, "conv stride >= 1, padding >= 0");
    require(in[1] == p.in_channels(), ErrorKind::shape,
            "conv input channels " + std::to_string(in[1]) + " != kernel in_ch " +
                std::to_string(p.in_channels()));
    require(in[2] + 2 * p.padding >= p.kh() && in[3] + 2 * p.padding >= p.kw(), ErrorKind::shape,
            "kernel larger than padded input " + shape_str(in));
    return {in[0], p.out_channels(), conv_out_extent(in[2], p.kh(), p.stride, p.padding),
            conv_out_extent(in[3], p.kw(), p.stride, p.padding)};
}

template <typename Real>
std::pair<Tensor<Real>, ConvCache<Real>> conv2d_forward(const Tensor<Real>& input,
                                                         const ConvParams<Real>& p) {
    const Shape os = conv2d_output_shape(input.shape(), p);
    const Extent batch = os[0], oc = os[1], oh = os[2], ow = os[3];
    const Extent ic = input.dim(1), h = input.dim(2), w = input.dim(3);
    const Extent rows = ic * p.kh() * p.kw();
    const Extent plane = oh * ow;

    Tensor<Real> out(os, Real(0));
    std::vector<Real> col(static_cast<std::size_t>(rows * plane));
    for (Extent b = 0; b < batch; ++b) {
        detail::im2col(input.data() + b * ic * h * w, ic, h, w, p.kh(), p.kw(), p.stride,
                       p.padding, oh, ow, col.data());
        Real* ob = out.data() + b * oc * plane;
        gemm::nn(oc, rows, plane, p.kernels.data(), col.data(), ob);
        for (Extent o = 0; o < oc; ++o) {
            const Real bias = p.bias[static_cast<std::size_t>(o)];
            Real* r = ob + o * plane;
            for (Extent j = 0; j < plane; ++j) r[j] += bias;
        }
    }
    return {std::move(out), ConvCache<Real>{input, os}};
}

template <typename Real>
ConvGrads<Real> conv2d_backward(const Tensor<Real>& grad_out, const ConvCache<Real>& cache,
                                const ConvParams<Real>& p) {
    require_same_shape(grad_out.shape(), cache.out_shape, "conv2d_backward grad_out");
    const Tensor<Real>& x = cache.input;
    const Extent batch = x.dim(0), ic = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Extent oc = cache.out_shape[1], oh = cache.out_shape[2], ow = cache.out_shape[3];
    const Extent rows = ic * p.kh() * p.kw();
    const Extent plane = oh * ow;

    ConvGrads<Real> g{Tensor<Real>(x.shape(), Real(0)), Tensor<Real>(p.kernels.shape(), Real(0)),
                      Tensor<Real>(p.bias.shape(), Real(0))};
    std::vector<Real> col(static_cast<std::size_t>(rows * plane));
    std::vector<Real> dcol(col.size());
    for (Extent b = 0; b < batch; ++b) {
        const Real* gy = grad_out.data() + b * oc * plane;
        for (Extent o = 0; o < oc; ++o) {
            Real s = 0;
            for (Extent j = 0; j < plane; ++j) s += gy[o * plane + j];
            g.bias[static_cast<std::size_t>(o)] += s;
        }
        detail::im2col(x.data() + b * ic * h * w, ic, h, w, p.kh(), p.kw(), p.stride, p.padding,
                       oh, ow, col.data());
        gemm::nt(oc, plane, rows, gy, col.data(), g.kernels.data());
        std::fill(dcol.begin(), dcol.end(), Real(0));
        gemm::tn(rows, oc, plane, p.kernels.data(), gy, dcol.data());
        detail::col2im(dcol.data(), ic, h, w, p.kh(), p.kw(), p.stride, p.padding, oh, ow,
                       g.input.data() + b * ic * h * w);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Depthwise-separable convolution: per-channel spatial filter, then 1x1 mixing.

template <typename Real>
struct SepConvParams {
    Tensor<Real> depthwise;  // [in_ch, 1, kh, kw]
    Tensor<Real> pointwise;  // [out_ch, in_ch, 1, 1]
    Tensor<Real> bias;       // [out_ch]
    Extent stride = 1;
    Extent padding = 0;

    Extent in_channels() const { return depthwise.dim(0); }
    Extent out_channels() const { return pointwise.dim(0); }
    Extent kh() const { return depthwise.dim(2); }
    Extent kw() const { return depthwise.dim(3); }
};

template <typename Real>
struct SepConvCache {
    Tensor<Real> input;
    Tensor<Real> depthwise_out;
    Shape out_shape;
};

template <typename Real>
struct SepConvGrads {
    Tensor<Real> input;
    Tensor<Real> depthwise;
    Tensor<Real> pointwise;
    Tensor<Real> bias;
};

template <typename Real>
Shape sepconv_output_shape(const Shape& in, const SepConvParams<Real>& p) {
    detail::require_rank4(in, "sepconv");
    require(p.depthwise.rank() == 4 && p.depthwise.dim(1) == 1, ErrorKind::shape,
            "depthwise kernels must be [in_ch, 1, kh, kw]");
    require(p.pointwise.rank() == 4 && p.pointwise.dim(2) == 1 && p.pointwise.dim(3) == 1,
            ErrorKind::shape, "pointwise kernels must be [out_ch, in_ch, 1, 1]");
    require(p.pointwise.dim(1) == p.in_channels(), ErrorKind::shape,
            "pointwise in_ch must equal depthwise filter count");
    require(p.bias.size() == static_cast<std::size_t>(p.out_channels()), ErrorKind::shape,
            "sepconv bias length must equal out_ch");
    require(in[1] == p.in_channels(), ErrorKind::shape,
            "sepconv input channels " + std::to_string(in[1]) + " != depthwise filters " +
                std::to_string(p.in_channels()));
    require(p.stride >= 1 && p.padding >= 0, ErrorKind::shape, "sepconv stride >= 1, padding >= 0");
    require(in[2] + 2 * p.padding >= p.kh() && in[3] + 2 * p.padding >= p.kw(), ErrorKind::shape,
            "kernel larger than padded input " + shape_str(in));
    return {in[0], p.out_channels(), conv_out_extent(in[2], p.kh(), p.stride, p.padding),
            conv_out_extent(in[3], p.kw(), p.stride, p.padding)};
}

template <typename Real>
std::pair<Tensor<Real>, SepConvCache<Real>> sepconv_forward(const Tensor<Real>& input,
                                                             const SepConvParams<Real>& p) {
    const Shape os = sepconv_output_shape(input.shape(), p);
    const Extent batch = os[0], oc = os[1], oh = os[2], ow = os[3];
    const Extent ic = input.dim(1), h = input.dim(2), w = input.dim(3);
    const Extent kk = p.kh() * p.kw();
    const Extent plane = oh * ow;

    Tensor<Real> dw({batch, ic, oh, ow}, Real(0));
    Tensor<Real> out(os, Real(0));
    std::vector<Real> col(static_cast<std::size_t>(kk * plane));
    for (Extent b = 0; b < batch; ++b) {
        for (Extent c = 0; c < ic; ++c) {
            detail::im2col(input.data() + (b * ic + c) * h * w, 1, h, w, p.kh(), p.kw(), p.stride,
                           p.padding, oh, ow, col.data());
            gemm::nn(1, kk, plane, p.depthwise.data() + c * kk, col.data(),
                     dw.data() + (b * ic + c) * plane);
        }
        Real* ob = out.data() + b * oc * plane;
        gemm::nn(oc, ic, plane, p.pointwise.data(), dw.data() + b * ic * plane, ob);
        for (Extent o = 0; o < oc; ++o) {
            const Real bias = p.bias[static_cast<std::size_t>(o)];
            for (Extent j = 0; j < plane; ++j) ob[o * plane + j] += bias;
        }
    }
    return {std::move(out), SepConvCache<Real>{input, std::move(dw), os}};
}

template <typename Real>
SepConvGrads<Real> sepconv_backward(const Tensor<Real>& grad_out, const SepConvCache<Real>& cache,
                                    const SepConvParams<Real>& p) {
    require_same_shape(grad_out.shape(), cache.out_shape, "sepconv_backward grad_out");
    const Tensor<Real>& x = cache.input;
    const Extent batch = x.dim(0), ic = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Extent oc = cache.out_shape[1], oh = cache.out_shape[2], ow = cache.out_shape[3];
    const Extent kk = p.kh() * p.kw();
    const Extent plane = oh * ow;

    SepConvGrads<Real> g{Tensor<Real>(x.shape(), Real(0)), Tensor<Real>(p.depthwise.shape(), Real(0)),
                         Tensor<Real>(p.pointwise.shape(), Real(0)),
                         Tensor<Real>(p.bias.shape(), Real(0))};
    std::vector<Real> ddw(static_cast<std::size_t>(ic * plane));
    std::vector<Real> col(static_cast<std::size_t>(kk * plane));
    std::vector<Real> dcol(col.size());
    for (Extent b = 0; b < batch; ++b) {
        const Real* gy = grad_out.data() + b * oc * plane;
        const Real* dwb = cache.depthwise_out.data() + b * ic * plane;
        for (Extent o = 0; o < oc; ++o) {
            Real s = 0;
            for (Extent j = 0; j < plane; ++j) s += gy[o * plane + j];
            g.bias[static_cast<std::size_t>(o)] += s;
        }
        gemm::nt(oc, plane, ic, gy, dwb, g.pointwise.data());
        std::fill(ddw.begin(), ddw.end(), Real(0));
        gemm::tn(ic, oc, plane, p.pointwise.data(), gy, ddw.data());
        for (Extent c = 0; c < ic; ++c) {
            const Real* xc = x.data() + (b * ic + c) * h * w;
            const Real* gc = ddw.data() + c * plane;
            detail::im2col(xc, 1, h, w, p.kh(), p.kw(), p.stride, p.padding, oh, ow, col.data());
            gemm::nt(1, plane, kk, gc, col.data(), g.depthwise.data() + c * kk);
            std::fill(dcol.begin(), dcol.end(), Real(0));
            gemm::tn(kk, 1, plane, p.depthwise.data() + c * kk, gc, dcol.data());
            detail::col2im(dcol.data(), 1, h, w, p.kh(), p.kw(), p.stride, p.padding, oh, ow,
                           g.input.data() + (b * ic + c) * h * w);
        }
    }
    return g;
}

// Equivalent standard kernel: K[o][c][m][n] = pointwise[o][c] * depthwise[c][m][n].
template <typename Real>
ConvParams<Real> compose_separable(const SepConvParams<Real>& p) {
    const Extent oc = p.out_channels(), ic = p.in_channels(), kh = p.kh(), kw = p.kw();
    ConvParams<Real> c{Tensor<Real>({oc, ic, kh, kw}, Real(0)), p.bias, p.stride, p.padding};
    for (Extent o = 0; o < oc; ++o)
        for (Extent ch = 0; ch < ic; ++ch)
            for (Extent m = 0; m < kh; ++m)
                for (Extent n = 0; n < kw; ++n)
                    c.kernels(o, ch, m, n) = p.pointwise(o, ch, 0, 0) * p.depthwise(ch, 0, m, n);
    return c;
}

// ---------------------------------------------------------------------------
// ReLU. The subgradient at exactly 0 is 0.

template <typename Real>
struct ReluCache {
    Tensor<Real> input;
};

template <typename Real>
std::pair<Tensor<Real>, ReluCache<Real>> relu(const Tensor<Real>& input) {
    Tensor<Real> out = input;
    for (auto& v : out.span()) v = v > Real(0) ? v : Real(0);
    return {std::move(out), ReluCache<Real>{input}};
}

template <typename Real>
Tensor<Real> relu_backward(const Tensor<Real>& grad_out, const ReluCache<Real>& cache) {
    require_same_shape(grad_out.shape(), cache.input.shape(), "relu_backward");
    Tensor<Real> g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i)
        if (!(cache.input[i] > Real(0))) g[i] = Real(0);
    return g;
}

// ---------------------------------------------------------------------------
// 2x2 max-pool, stride 2, floor semantics. Ties route to the first position in
// row-major scan order.

struct PoolCache {
    Shape input_shape;
    std::vector<Extent> argmax;  // flat input index per output element
};

template <typename Real>
std::pair<Tensor<Real>, PoolCache> maxpool2(const Tensor<Real>& input) {
    detail::require_rank4(input.shape(), "maxpool2");
    const Extent batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
    require(h >= 2 && w >= 2, ErrorKind::shape,
            "maxpool2 needs h, w >= 2, got " + shape_str(input.shape()));
    const Extent oh = h / 2, ow = w / 2;
    Tensor<Real> out({batch, ch, oh, ow}, Real(0));
    PoolCache cache{input.shape(), std::vector<Extent>(out.size())};
    std::size_t k = 0;
    for (Extent bc = 0; bc < batch * ch; ++bc) {
        const Extent base = bc * h * w;
        for (Extent i = 0; i < oh; ++i) {
            for (Extent j = 0; j < ow; ++j, ++k) {
                Extent best = base + (2 * i) * w + 2 * j;
                for (Extent di = 0; di < 2; ++di)
                    for (Extent dj = 0; dj < 2; ++dj) {
                        const Extent idx = base + (2 * i + di) * w + 2 * j + dj;
                        if (input[static_cast<std::size_t>(idx)] >
                            input[static_cast<std::size_t>(best)])
                            best = idx;
                    }
                out[k] = input[static_cast<std::size_t>(best)];
                cache.argmax[k] = best;
            }
        }
    }
    return {std::move(out), std::move(cache)};
}

template <typename Real>
Tensor<Real> maxpool2_backward(const Tensor<Real>& grad_out, const PoolCache& cache) {
    require(grad_out.size() == cache.argmax.size(), ErrorKind::shape,
            "maxpool2_backward grad_out does not match cached forward");
    Tensor<Real> g(cache.input_shape, Real(0));
    for (std::size_t k = 0; k < grad_out.size(); ++k)
        g[static_cast<std::size_t>(cache.argmax[k])] += grad_out[k];
    return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over (batch, h, w) per channel.

template <typename Real>
struct BatchNormParams {
    Tensor<Real> gamma;
    Tensor<Real> beta;
    Tensor<Real> running_mean;
    Tensor<Real> running_var;
    double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
    double epsilon = 1e-5;

    static BatchNormParams make(Extent channels, double momentum = 0.9, double epsilon = 1e-5) {
        return {Tensor<Real>({channels}, Real(1)), Tensor<Real>({channels}, Real(0)),
                Tensor<Real>({channels}, Real(0)), Tensor<Real>({channels}, Real(1)), momentum,
                epsilon};
    }
};

template <typename Real>
struct BatchNormCache {
    Mode mode = Mode::infer;
    Tensor<Real> xhat;
    std::vector<Real> inv_std;
};

template <typename Real>
struct BatchNormGrads {
    Tensor<Real> input;
    Tensor<Real> gamma;
    Tensor<Real> beta;
};

template <typename Real>
std::pair<Tensor<Real>, BatchNormCache<Real>> batchnorm_forward(const Tensor<Real>& input,
                                                                BatchNormParams<Real>& p,
                                                                Mode mode) {
    detail::require_rank4(input.shape(), "batchnorm");
    const Extent batch = input.dim(0), ch = input.dim(1), plane = input.dim(2) * input.dim(3);
    require(static_cast<Extent>(p.gamma.size()) == ch, ErrorKind::shape,
            "batchnorm params do not match channel count");
    require(p.epsilon > 0, ErrorKind::parameter, "batchnorm epsilon must be > 0");
    const Extent count = batch * plane;
    if (mode == Mode::train)
        require(count >= 2, ErrorKind::degenerate_batch,
                "train-mode batch norm needs >= 2 values per channel");

    BatchNormCache<Real> cache{mode, Tensor<Real>(input.shape(), Real(0)),
                               std::vector<Real>(static_cast<std::size_t>(ch))};
    Tensor<Real> out(input.shape(), Real(0));
    for (Extent c = 0; c < ch; ++c) {
        double mean, var;
        if (mode == Mode::train) {
            double s = 0;
            for (Extent b = 0; b < batch; ++b) {
                const Real* x = input.data() + (b * ch + c) * plane;
                for (Extent j = 0; j < plane; ++j) s += x[j];
            }
            mean = s / static_cast<double>(count);
            double ss = 0;
            for (Extent b = 0; b < batch; ++b) {
                const Real* x = input.data() + (b * ch + c) * plane;
                for (Extent j = 0; j < plane; ++j) ss += (x[j] - mean) * (x[j] - mean);
            }
            var = ss / static_cast<double>(count);
            const auto ci = static_cast<std::size_t>(c);
            p.running_mean[ci] = static_cast<Real>(p.momentum * p.running_mean[ci] +
                                                   (1.0 - p.momentum) * mean);
            p.running_var[ci] = static_cast<Real>(p.momentum * p.running_var[ci] +
                                                  (1.0 - p.momentum) * var);
        } else {
            mean = p.running_mean[static_cast<std::size_t>(c)];
            var = p.running_var[static_cast<std::size_t>(c)];
        }
        const double inv_std = 1.0 / std::sqrt(var + p.epsilon);
        cache.inv_std[static_cast<std::size_t>(c)] = static_cast<Real>(inv_std);
        const double gamma = p.gamma[static_cast<std::size_t>(c)];
        const double beta = p.beta[static_cast<std::size_t>(c)];
        for (Extent b = 0; b < batch; ++b) {
            const Extent off = (b * ch + c) * plane;
            const Real* x = input.data() + off;
            Real* xh = cache.xhat.data() + off;
            Real* y = out.data() + off;
            for (Extent j = 0; j < plane; ++j) {
                const double n = (x[j] - mean) * inv_std;
                xh[j] = static_cast<Real>(n);
                y[j] = static_cast<Real>(gamma * n + beta);
            }
        }
    }
    return {std::move(out), std::move(cache)};
}

template <typename Real>
BatchNormGrads<Real> batchnorm_backward(const Tensor<Real>& grad_out,
                                        const BatchNormCache<Real>& cache,
                                        const BatchNormParams<Real>& p) {
    require_same_shape(grad_out.shape(), cache.xhat.shape(), "batchnorm_backward grad_out");
    const Extent batch = grad_out.dim(0), ch = grad_out.dim(1),
                 plane = grad_out.dim(2) * grad_out.dim(3);
    const double count = static_cast<double>(batch * plane);
    BatchNormGrads<Real> g{Tensor<Real>(grad_out.shape(), Real(0)), Tensor<Real>({ch}, Real(0)),
                           Tensor<Real>({ch}, Real(0))};
    for (Extent c = 0; c < ch; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        double sum_dy = 0, sum_dy_xhat = 0;
        for (Extent b = 0; b < batch; ++b) {
            const Extent off = (b * ch + c) * plane;
            for (Extent j = 0; j < plane; ++j) {
                sum_dy += grad_out.data()[off + j];
                sum_dy_xhat += grad_out.data()[off + j] * cache.xhat.data()[off + j];
            }
        }
        g.gamma[ci] = static_cast<Real>(sum_dy_xhat);
        g.beta[ci] = static_cast<Real>(sum_dy);
        const double gamma = p.gamma[ci];
        const double inv_std = cache.inv_std[ci];
        for (Extent b = 0; b < batch; ++b) {
            const Extent off = (b * ch + c) * plane;
            for (Extent j = 0; j < plane; ++j) {
                const double dy = grad_out.data()[off + j];
                double dx;
                if (cache.mode == Mode::train) {
                    const double xh = cache.xhat.data()[off + j];
                    dx = gamma * inv_std * (dy - sum_dy / count - xh * sum_dy_xhat / count);
                } else {
                    dx = gamma * inv_std * dy;
                }
                g.input.data()[off + j] = static_cast<Real>(dx);
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Inverted dropout: survivors scaled by 1 / (1 - p); identity at inference.

template <typename Real>
struct DropoutCache {
    std::vector<Real> mask;  // 0 or 1/(1-p) per element; empty means identity
};

template <typename Real>
std::pair<Tensor<Real>, DropoutCache<Real>> dropout_with_mask(const Tensor<Real>& input,
                                                              std::vector<Real> mask) {
    require(mask.size() == input.size(), ErrorKind::shape, "dropout mask length mismatch");
    Tensor<Real> out = input;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return {std::move(out), DropoutCache<Real>{std::move(mask)}};
}

template <typename Real>
std::pair<Tensor<Real>, DropoutCache<Real>> dropout(const Tensor<Real>& input, double p_drop,
                                                    Mode mode, Rng& rng) {
    require(p_drop >= 0.0 && p_drop < 1.0, ErrorKind::parameter,
            "dropout probability must be in [0, 1), got " + std::to_string(p_drop));
    if (mode == Mode::infer || p_drop == 0.0) return {input, DropoutCache<Real>{}};
    const Real scale = static_cast<Real>(1.0 / (1.0 - p_drop));
    std::vector<Real> mask(input.size());
    for (auto& m : mask) m = rng.bernoulli(p_drop) ? Real(0) : scale;
    return dropout_with_mask(input, std::move(mask));
}

template <typename Real>
Tensor<Real> dropout_backward(const Tensor<Real>& grad_out, const DropoutCache<Real>& cache) {
    if (cache.mask.empty()) return grad_out;
    require(cache.mask.size() == grad_out.size(), ErrorKind::shape,
            "dropout_backward grad_out does not match cached mask");
    Tensor<Real> g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= cache.mask[i];
    return g;
}

// ---------------------------------------------------------------------------
// Dense affine map y = x W + b.

template <typename Real>
struct DenseParams {
    Tensor<Real> weights;  // [in, out]
    Tensor<Real> bias;     // [out]
};

template <typename Real>
struct DenseCache {
    Tensor<Real> input;
};

template <typename Real>
struct DenseGrads {
    Tensor<Real> input;
    Tensor<Real> weights;
    Tensor<Real> bias;
};

template <typename Real>
std::pair<Tensor<Real>, DenseCache<Real>> dense_forward(const Tensor<Real>& input,
                                                        const DenseParams<Real>& p) {
    require(input.rank() == 2 && p.weights.rank() == 2, ErrorKind::shape,
            "dense expects input [batch, in] and weights [in, out]");
    require(input.dim(1) == p.weights.dim(0), ErrorKind::shape,
            "dense input width " + std::to_string(input.dim(1)) + " != weight rows " +
                std::to_string(p.weights.dim(0)));
    require(p.bias.size() == static_cast<std::size_t>(p.weights.dim(1)), ErrorKind::shape,
            "dense bias length must equal output width");
    const Extent batch = input.dim(0), in = input.dim(1), out_w = p.weights.dim(1);
    Tensor<Real> out({batch, out_w}, Real(0));
    gemm::nn(batch, in, out_w, input.data(), p.weights.data(), out.data());
    for (Extent b = 0; b < batch; ++b)
        for (Extent j = 0; j < out_w; ++j) out(b, j) += p.bias[static_cast<std::size_t>(j)];
    return {std::move(out), DenseCache<Real>{input}};
}

template <typename Real>
DenseGrads<Real> dense_backward(const Tensor<Real>& grad_out, const DenseCache<Real>& cache,
                                const DenseParams<Real>& p) {
    const Extent batch = cache.input.dim(0), in = cache.input.dim(1), out_w = p.weights.dim(1);
    require_same_shape(grad_out.shape(), Shape{batch, out_w}, "dense_backward grad_out");
    DenseGrads<Real> g{Tensor<Real>(cache.input.shape(), Real(0)),
                       Tensor<Real>(p.weights.shape(), Real(0)), Tensor<Real>(p.bias.shape(), Real(0))};
    gemm::tn(in, batch, out_w, cache.input.data(), grad_out.data(), g.weights.data());
    gemm::nt(batch, out_w, in, grad_out.data(), p.weights.data(), g.input.data());
    for (Extent b = 0; b < batch; ++b)
        for (Extent j = 0; j < out_w; ++j) g.bias[static_cast<std::size_t>(j)] += grad_out(b, j);
    return g;
}

// ---------------------------------------------------------------------------
// Logistic sigmoid. Both branches avoid exp overflow; outputs are clamped to
// the open interval (0, 1) so saturated inputs never yield exactly 0 or 1.

template <typename Real>
Real sigmoid_scalar(Real z) {
    double s;
    if (z >= 0) {
        s = 1.0 / (1.0 + std::exp(-static_cast<double>(z)));
    } else {
        const double e = std::exp(static_cast<double>(z));
        s = e / (1.0 + e);
    }
    const Real lo = std::numeric_limits<Real>::min();
    const Real hi = std::nextafter(Real(1), Real(0));
    return std::clamp(static_cast<Real>(s), lo, hi);
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& z) {
    Tensor<Real> out = z;
    for (auto& v : out.span()) v = sigmoid_scalar(v);
    return out;
}

template <typename Real>
Tensor<Real> sigmoid_backward(const Tensor<Real>& grad_out, const Tensor<Real>& output) {
    require_same_shape(grad_out.shape(), output.shape(), "sigmoid_backward");
    Tensor<Real> g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= output[i] * (Real(1) - output[i]);
    return g;
}

}  // namespace cxr
