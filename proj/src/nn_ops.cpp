#include "s3seg/nn_ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace s3seg {

namespace {

using detail::any_requires_grad;
using detail::finish_op;
using detail::make_node;

void require_rank4(const Tensor& t, const char* what) {
    if (t.rank() != 4) {
        throw ShapeError(std::string(what) + ": expected rank-4 [N,C,H,W], got rank " +
                         std::to_string(t.rank()));
    }
}

// (C, H+2p, W+2p) zero-padded copy of image n's channels.
std::vector<double> padded_copy(const std::vector<double>& v, std::int64_t n, std::int64_t c,
                                std::int64_t h, std::int64_t w, std::int64_t p) {
    const std::int64_t ph = h + 2 * p;
    const std::int64_t pw = w + 2 * p;
    std::vector<double> out(static_cast<std::size_t>(c * ph * pw), 0.0);
    const double* src = v.data() + n * c * h * w;
    for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t y = 0; y < h; ++y) {
            const double* srow = src + (ci * h + y) * w;
            std::copy(srow, srow + w, out.begin() + ((ci * ph + y + p) * pw + p));
        }
    }
    return out;
}

// Adds the interior of a (C, H+2p, W+2p) buffer into image n of grad.
void crop_accumulate(const std::vector<double>& dpadded, std::vector<double>& grad,
                     std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
                     std::int64_t p) {
    const std::int64_t ph = h + 2 * p;
    const std::int64_t pw = w + 2 * p;
    double* dst = grad.data() + n * c * h * w;
    for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t y = 0; y < h; ++y) {
            const double* srow = dpadded.data() + ((ci * ph + y + p) * pw + p);
            double* drow = dst + (ci * h + y) * w;
            for (std::int64_t x = 0; x < w; ++x) {
                drow[x] += srow[x];
            }
        }
    }
}

struct ConvDims {
    std::int64_t n, cin, h, w, cout, k, ho, wo, cin_g, cout_g;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight, const Tensor* bias,
                   const ConvSpec& spec) {
    spec.validate();
    require_rank4(input, "conv2d input");
    require_rank4(weight, "conv2d weight");
    ConvDims d;
    d.n = input.extent(0);
    d.cin = input.extent(1);
    d.h = input.extent(2);
    d.w = input.extent(3);
    d.cout = spec.out_channels;
    d.k = spec.kernel;
    d.cin_g = spec.in_channels / spec.groups;
    d.cout_g = spec.out_channels / spec.groups;
    if (d.cin != spec.in_channels) {
        throw ShapeError("conv2d: input has " + std::to_string(d.cin) + " channels, spec says " +
                         std::to_string(spec.in_channels));
    }
    if (weight.shape() != Shape{d.cout, d.cin_g, d.k, d.k}) {
        throw ShapeError("conv2d: weight shape mismatch");
    }
    if (bias != nullptr && bias->shape() != Shape{d.cout}) {
        throw ShapeError("conv2d: bias shape mismatch");
    }
    d.ho = spec.out_extent(d.h);
    d.wo = spec.out_extent(d.w);
    if (d.ho < 1 || d.wo < 1) {
        throw ShapeError("conv2d: output extent < 1 for input " + std::to_string(d.h) + "x" +
                         std::to_string(d.w));
    }
    return d;
}

}  // namespace

void ConvSpec::validate() const {
    if (in_channels < 1 || out_channels < 1) {
        throw ShapeError("ConvSpec: channel counts must be >= 1");
    }
    if (kernel < 1 || stride < 1 || dilation < 1 || padding < 0 || groups < 1) {
        throw ShapeError("ConvSpec: invalid geometry");
    }
    if (in_channels % groups != 0 || out_channels % groups != 0) {
        throw ShapeError("ConvSpec: channels not divisible by groups");
    }
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias,
              const ConvSpec& spec) {
    const ConvDims d = conv_dims(input, weight, bias, spec);
    const std::int64_t p = spec.padding;
    const std::int64_t st = spec.stride;
    const std::int64_t dil = spec.dilation;
    const std::int64_t ph = d.h + 2 * p;
    const std::int64_t pw = d.w + 2 * p;

    auto out = make_node({d.n, d.cout, d.ho, d.wo});
    const std::vector<double>& av = input.values();
    const std::vector<double>& wv = weight.values();
    double* ov = out->values.data();

    for (std::int64_t n = 0; n < d.n; ++n) {
        const std::vector<double> padded = padded_copy(av, n, d.cin, d.h, d.w, p);
        for (std::int64_t g = 0; g < spec.groups; ++g) {
            for (std::int64_t coi = 0; coi < d.cout_g; ++coi) {
                const std::int64_t co = g * d.cout_g + coi;
                double* optr = ov + (n * d.cout + co) * d.ho * d.wo;
                if (bias != nullptr) {
                    std::fill(optr, optr + d.ho * d.wo, bias->values()[co]);
                }
                for (std::int64_t cii = 0; cii < d.cin_g; ++cii) {
                    const std::int64_t ci = g * d.cin_g + cii;
                    const double* pch = padded.data() + ci * ph * pw;
                    const double* wtap = wv.data() + (co * d.cin_g + cii) * d.k * d.k;
                    for (std::int64_t ky = 0; ky < d.k; ++ky) {
                        for (std::int64_t kx = 0; kx < d.k; ++kx) {
                            const double wgt = wtap[ky * d.k + kx];
                            for (std::int64_t oy = 0; oy < d.ho; ++oy) {
                                const double* prow = pch + (oy * st + ky * dil) * pw + kx * dil;
                                double* orow = optr + oy * d.wo;
                                if (st == 1) {
                                    for (std::int64_t ox = 0; ox < d.wo; ++ox) {
                                        orow[ox] += wgt * prow[ox];
                                    }
                                } else {
                                    for (std::int64_t ox = 0; ox < d.wo; ++ox) {
                                        orow[ox] += wgt * prow[ox * st];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    const bool rec = bias != nullptr ? any_requires_grad({&input, &weight, bias})
                                     : any_requires_grad({&input, &weight});
    auto an = input.node();
    auto wn = weight.node();
    auto bnode = bias != nullptr ? bias->node() : nullptr;
    auto on = out;
    const ConvSpec sp = spec;
    return finish_op(std::move(out), rec, [an, wn, bnode, on, sp, d, p, st, dil, ph, pw] {
        const bool gin = an->requires_grad;
        const bool gw = wn->requires_grad;
        const bool gb = bnode != nullptr && bnode->requires_grad;
        if (gin) {
            an->ensure_grad();
        }
        if (gw) {
            wn->ensure_grad();
        }
        if (gb) {
            bnode->ensure_grad();
        }
        const std::vector<double>& og = on->grad;
        for (std::int64_t n = 0; n < d.n; ++n) {
            const std::vector<double> padded =
                gw ? padded_copy(an->values, n, d.cin, d.h, d.w, p) : std::vector<double>();
            std::vector<double> dpadded;
            if (gin) {
                dpadded.assign(static_cast<std::size_t>(d.cin * ph * pw), 0.0);
            }
            for (std::int64_t g = 0; g < sp.groups; ++g) {
                for (std::int64_t coi = 0; coi < d.cout_g; ++coi) {
                    const std::int64_t co = g * d.cout_g + coi;
                    const double* gout = og.data() + (n * d.cout + co) * d.ho * d.wo;
                    if (gb) {
                        double s = 0.0;
                        for (std::int64_t i = 0; i < d.ho * d.wo; ++i) {
                            s += gout[i];
                        }
                        bnode->grad[static_cast<std::size_t>(co)] += s;
                    }
                    for (std::int64_t cii = 0; cii < d.cin_g; ++cii) {
                        const std::int64_t ci = g * d.cin_g + cii;
                        const double* pch = gw ? padded.data() + ci * ph * pw : nullptr;
                        double* dpch = gin ? dpadded.data() + ci * ph * pw : nullptr;
                        for (std::int64_t ky = 0; ky < d.k; ++ky) {
                            for (std::int64_t kx = 0; kx < d.k; ++kx) {
                                const std::size_t widx = static_cast<std::size_t>(
                                    ((co * d.cin_g + cii) * d.k + ky) * d.k + kx);
                                const double wgt = wn->values[widx];
                                double wacc = 0.0;
                                for (std::int64_t oy = 0; oy < d.ho; ++oy) {
                                    const std::int64_t prow_off =
                                        (oy * st + ky * dil) * pw + kx * dil;
                                    const double* grow = gout + oy * d.wo;
                                    if (gin) {
                                        double* dprow = dpch + prow_off;
                                        if (st == 1) {
                                            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
                                                dprow[ox] += wgt * grow[ox];
                                            }
                                        } else {
                                            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
                                                dprow[ox * st] += wgt * grow[ox];
                                            }
                                        }
                                    }
                                    if (gw) {
                                        const double* prow = pch + prow_off;
                                        if (st == 1) {
                                            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
                                                wacc += prow[ox] * grow[ox];
                                            }
                                        } else {
                                            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
                                                wacc += prow[ox * st] * grow[ox];
                                            }
                                        }
                                    }
                                }
                                if (gw) {
                                    wn->grad[widx] += wacc;
                                }
                            }
                        }
                    }
                }
            }
            if (gin) {
                crop_accumulate(dpadded, an->grad, n, d.cin, d.h, d.w, p);
            }
        }
    });
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, const ConvSpec& spec) {
    spec.validate();
    require_rank4(input, "depthwise input");
    require_rank4(weight, "depthwise weight");
    if (spec.groups != spec.in_channels || spec.out_channels != spec.in_channels) {
        throw ShapeError("depthwise_conv2d: requires groups == in_channels == out_channels");
    }
    const std::int64_t n_img = input.extent(0);
    const std::int64_t c = input.extent(1);
    const std::int64_t h = input.extent(2);
    const std::int64_t w = input.extent(3);
    const std::int64_t k = spec.kernel;
    if (c != spec.in_channels) {
        throw ShapeError("depthwise_conv2d: channel mismatch");
    }
    if (weight.shape() != Shape{c, 1, k, k}) {
        throw ShapeError("depthwise_conv2d: weight must be (C,1,k,k)");
    }
    const std::int64_t p = spec.padding;
    const std::int64_t st = spec.stride;
    const std::int64_t dil = spec.dilation;
    const std::int64_t ho = spec.out_extent(h);
    const std::int64_t wo = spec.out_extent(w);
    if (ho < 1 || wo < 1) {
        throw ShapeError("depthwise_conv2d: output extent < 1");
    }
    const std::int64_t ph = h + 2 * p;
    const std::int64_t pw = w + 2 * p;

    auto out = make_node({n_img, c, ho, wo});
    const std::vector<double>& av = input.values();
    const std::vector<double>& wv = weight.values();
    double* ov = out->values.data();

    for (std::int64_t n = 0; n < n_img; ++n) {
        const std::vector<double> padded = padded_copy(av, n, c, h, w, p);
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const double* pch = padded.data() + ci * ph * pw;
            double* optr = ov + (n * c + ci) * ho * wo;
            const double* wtap = wv.data() + ci * k * k;
            for (std::int64_t ky = 0; ky < k; ++ky) {
                for (std::int64_t kx = 0; kx < k; ++kx) {
                    const double wgt = wtap[ky * k + kx];
                    for (std::int64_t oy = 0; oy < ho; ++oy) {
                        const double* prow = pch + (oy * st + ky * dil) * pw + kx * dil;
                        double* orow = optr + oy * wo;
                        if (st == 1) {
                            for (std::int64_t ox = 0; ox < wo; ++ox) {
                                orow[ox] += wgt * prow[ox];
                            }
                        } else {
                            for (std::int64_t ox = 0; ox < wo; ++ox) {
                                orow[ox] += wgt * prow[ox * st];
                            }
                        }
                    }
                }
            }
        }
    }

    const bool rec = any_requires_grad({&input, &weight});
    auto an = input.node();
    auto wn = weight.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, wn, on, n_img, c, h, w, k, p, st, dil, ho, wo, ph,
                                           pw] {
        const bool gin = an->requires_grad;
        const bool gw = wn->requires_grad;
        if (gin) {
            an->ensure_grad();
        }
        if (gw) {
            wn->ensure_grad();
        }
        const std::vector<double>& og = on->grad;
        for (std::int64_t n = 0; n < n_img; ++n) {
            const std::vector<double> padded =
                gw ? padded_copy(an->values, n, c, h, w, p) : std::vector<double>();
            std::vector<double> dpadded;
            if (gin) {
                dpadded.assign(static_cast<std::size_t>(c * ph * pw), 0.0);
            }
            for (std::int64_t ci = 0; ci < c; ++ci) {
                const double* gout = og.data() + (n * c + ci) * ho * wo;
                const double* pch = gw ? padded.data() + ci * ph * pw : nullptr;
                double* dpch = gin ? dpadded.data() + ci * ph * pw : nullptr;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const std::size_t widx =
                            static_cast<std::size_t>(ci * k * k + ky * k + kx);
                        const double wgt = wn->values[widx];
                        double wacc = 0.0;
                        for (std::int64_t oy = 0; oy < ho; ++oy) {
                            const std::int64_t off = (oy * st + ky * dil) * pw + kx * dil;
                            const double* grow = gout + oy * wo;
                            for (std::int64_t ox = 0; ox < wo; ++ox) {
                                const std::int64_t px = off + ox * st;
                                if (gin) {
                                    dpch[px] += wgt * grow[ox];
                                }
                                if (gw) {
                                    wacc += pch[px] * grow[ox];
                                }
                            }
                        }
                        if (gw) {
                            wn->grad[widx] += wacc;
                        }
                    }
                }
            }
            if (gin) {
                crop_accumulate(dpadded, an->grad, n, c, h, w, p);
            }
        }
    });
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank4(input, "batchnorm input");
    if (eps <= 0.0) {
        throw DomainError("batchnorm2d: eps must be > 0");
    }
    const std::int64_t n_img = input.extent(0);
    const std::int64_t c = input.extent(1);
    const std::int64_t hw = input.extent(2) * input.extent(3);
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
        throw ShapeError("batchnorm2d: gamma/beta must be (C)");
    }
    const std::int64_t m = n_img * hw;

    auto out = make_node(input.shape());
    const std::vector<double>& av = input.values();
    std::vector<double> meanv(static_cast<std::size_t>(c), 0.0);
    std::vector<double> invstdv(static_cast<std::size_t>(c), 0.0);

    for (std::int64_t ci = 0; ci < c; ++ci) {
        double s = 0.0;
        for (std::int64_t n = 0; n < n_img; ++n) {
            const double* ch = av.data() + (n * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                s += ch[i];
            }
        }
        const double mu = s / static_cast<double>(m);
        double varsum = 0.0;
        for (std::int64_t n = 0; n < n_img; ++n) {
            const double* ch = av.data() + (n * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                const double dlt = ch[i] - mu;
                varsum += dlt * dlt;
            }
        }
        const double invstd = 1.0 / std::sqrt(varsum / static_cast<double>(m) + eps);
        meanv[static_cast<std::size_t>(ci)] = mu;
        invstdv[static_cast<std::size_t>(ci)] = invstd;
        const double g = gamma.values()[static_cast<std::size_t>(ci)];
        const double b = beta.values()[static_cast<std::size_t>(ci)];
        for (std::int64_t n = 0; n < n_img; ++n) {
            const double* ch = av.data() + (n * c + ci) * hw;
            double* och = out->values.data() + (n * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                och[i] = g * (ch[i] - mu) * invstd + b;
            }
        }
    }

    const bool rec = any_requires_grad({&input, &gamma, &beta});
    auto an = input.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, gn, bn, on, n_img, c, hw, m, meanv, invstdv] {
        const bool gin = an->requires_grad;
        const bool gg = gn->requires_grad;
        const bool gb = bn->requires_grad;
        if (gin) {
            an->ensure_grad();
        }
        if (gg) {
            gn->ensure_grad();
        }
        if (gb) {
            bn->ensure_grad();
        }
        const std::vector<double>& og = on->grad;
        const double dm = static_cast<double>(m);
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const double mu = meanv[static_cast<std::size_t>(ci)];
            const double invstd = invstdv[static_cast<std::size_t>(ci)];
            const double g = gn->values[static_cast<std::size_t>(ci)];
            double sum_dy = 0.0;
            double sum_dy_xhat = 0.0;
            for (std::int64_t n = 0; n < n_img; ++n) {
                const double* ch = an->values.data() + (n * c + ci) * hw;
                const double* gy = og.data() + (n * c + ci) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double xhat = (ch[i] - mu) * invstd;
                    sum_dy += gy[i];
                    sum_dy_xhat += gy[i] * xhat;
                }
            }
            if (gb) {
                bn->grad[static_cast<std::size_t>(ci)] += sum_dy;
            }
            if (gg) {
                gn->grad[static_cast<std::size_t>(ci)] += sum_dy_xhat;
            }
            if (gin) {
                const double coeff = g * invstd / dm;
                for (std::int64_t n = 0; n < n_img; ++n) {
                    const double* ch = an->values.data() + (n * c + ci) * hw;
                    const double* gy = og.data() + (n * c + ci) * hw;
                    double* gx = an->grad.data() + (n * c + ci) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const double xhat = (ch[i] - mu) * invstd;
                        gx[i] += coeff * (dm * gy[i] - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
        }
    });
}

namespace {

// Four-corner bilinear stencil around a continuous (row, col) coordinate.
struct BilinearTap {
    std::int64_t y0, x0;
    double fy, fx;  // fractional parts toward (y0+1, x0+1)
};

inline BilinearTap bilinear_tap(double sy, double sx) {
    BilinearTap t;
    const double fy0 = std::floor(sy);
    const double fx0 = std::floor(sx);
    t.y0 = static_cast<std::int64_t>(fy0);
    t.x0 = static_cast<std::int64_t>(fx0);
    t.fy = sy - fy0;
    t.fx = sx - fx0;
    return t;
}

inline double read0(const double* ch, std::int64_t h, std::int64_t w, std::int64_t y,
                    std::int64_t x) {
    if (y < 0 || y >= h || x < 0 || x >= w) {
        return 0.0;
    }
    return ch[y * w + x];
}

inline void scatter0(double* ch, std::int64_t h, std::int64_t w, std::int64_t y, std::int64_t x,
                     double v) {
    if (y >= 0 && y < h && x >= 0 && x < w) {
        ch[y * w + x] += v;
    }
}

}  // namespace

Tensor bilinear_sample(const Tensor& input, const SampleGrid& grid) {
    require_rank4(input, "bilinear_sample input");
    require_rank4(grid.coords, "bilinear_sample grid");
    const std::int64_t n_img = input.extent(0);
    const std::int64_t c = input.extent(1);
    const std::int64_t h = input.extent(2);
    const std::int64_t w = input.extent(3);
    if (grid.coords.extent(0) != n_img || grid.coords.extent(1) != 2) {
        throw ShapeError("bilinear_sample: grid must be [N,2,H',W']");
    }
    const std::int64_t ho = grid.h();
    const std::int64_t wo = grid.w();

    auto out = make_node({n_img, c, ho, wo});
    const std::vector<double>& av = input.values();
    const std::vector<double>& gv = grid.coords.values();

    for (std::int64_t n = 0; n < n_img; ++n) {
        const double* rows = gv.data() + (n * 2 + 0) * ho * wo;
        const double* cols = gv.data() + (n * 2 + 1) * ho * wo;
        for (std::int64_t i = 0; i < ho * wo; ++i) {
            const BilinearTap t = bilinear_tap(rows[i], cols[i]);
            const double w00 = (1.0 - t.fy) * (1.0 - t.fx);
            const double w01 = (1.0 - t.fy) * t.fx;
            const double w10 = t.fy * (1.0 - t.fx);
            const double w11 = t.fy * t.fx;
            for (std::int64_t ci = 0; ci < c; ++ci) {
                const double* ch = av.data() + (n * c + ci) * h * w;
                const double v = w00 * read0(ch, h, w, t.y0, t.x0) +
                                 w01 * read0(ch, h, w, t.y0, t.x0 + 1) +
                                 w10 * read0(ch, h, w, t.y0 + 1, t.x0) +
                                 w11 * read0(ch, h, w, t.y0 + 1, t.x0 + 1);
                out->values[static_cast<std::size_t>((n * c + ci) * ho * wo + i)] = v;
            }
        }
    }

    const bool rec = any_requires_grad({&input, &grid.coords});
    auto an = input.node();
    auto cn = grid.coords.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, cn, on, n_img, c, h, w, ho, wo] {
        const bool gin = an->requires_grad;
        const bool gcoord = cn->requires_grad;
        if (gin) {
            an->ensure_grad();
        }
        if (gcoord) {
            cn->ensure_grad();
        }
        const std::vector<double>& og = on->grad;
        for (std::int64_t n = 0; n < n_img; ++n) {
            const double* rows = cn->values.data() + (n * 2 + 0) * ho * wo;
            const double* cols = cn->values.data() + (n * 2 + 1) * ho * wo;
            for (std::int64_t i = 0; i < ho * wo; ++i) {
                const BilinearTap t = bilinear_tap(rows[i], cols[i]);
                const double w00 = (1.0 - t.fy) * (1.0 - t.fx);
                const double w01 = (1.0 - t.fy) * t.fx;
                const double w10 = t.fy * (1.0 - t.fx);
                const double w11 = t.fy * t.fx;
                double dsy = 0.0;
                double dsx = 0.0;
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    const double g = og[static_cast<std::size_t>((n * c + ci) * ho * wo + i)];
                    if (g == 0.0) {
                        continue;
                    }
                    if (gin) {
                        double* dch = an->grad.data() + (n * c + ci) * h * w;
                        scatter0(dch, h, w, t.y0, t.x0, g * w00);
                        scatter0(dch, h, w, t.y0, t.x0 + 1, g * w01);
                        scatter0(dch, h, w, t.y0 + 1, t.x0, g * w10);
                        scatter0(dch, h, w, t.y0 + 1, t.x0 + 1, g * w11);
                    }
                    if (gcoord) {
                        const double* ch = an->values.data() + (n * c + ci) * h * w;
                        const double v00 = read0(ch, h, w, t.y0, t.x0);
                        const double v01 = read0(ch, h, w, t.y0, t.x0 + 1);
                        const double v10 = read0(ch, h, w, t.y0 + 1, t.x0);
                        const double v11 = read0(ch, h, w, t.y0 + 1, t.x0 + 1);
                        dsy += g * ((v10 - v00) * (1.0 - t.fx) + (v11 - v01) * t.fx);
                        dsx += g * ((v01 - v00) * (1.0 - t.fy) + (v11 - v10) * t.fy);
                    }
                }
                if (gcoord) {
                    cn->grad[static_cast<std::size_t>((n * 2 + 0) * ho * wo + i)] += dsy;
                    cn->grad[static_cast<std::size_t>((n * 2 + 1) * ho * wo + i)] += dsx;
                }
            }
        }
    });
}

Tensor deformable_conv2d(const Tensor& input, const Tensor& offsets, const Tensor& weight,
                         const Tensor* bias, const ConvSpec& spec) {
    spec.validate();
    if (spec.stride != 1 || spec.groups != 1) {
        throw ShapeError("deformable_conv2d: only stride 1, groups 1 supported");
    }
    require_rank4(input, "deformable input");
    require_rank4(offsets, "deformable offsets");
    require_rank4(weight, "deformable weight");
    const std::int64_t n_img = input.extent(0);
    const std::int64_t cin = input.extent(1);
    const std::int64_t h = input.extent(2);
    const std::int64_t w = input.extent(3);
    const std::int64_t cout = spec.out_channels;
    const std::int64_t k = spec.kernel;
    const std::int64_t k2 = k * k;
    if (cin != spec.in_channels) {
        throw ShapeError("deformable_conv2d: channel mismatch");
    }
    if (weight.shape() != Shape{cout, cin, k, k}) {
        throw ShapeError("deformable_conv2d: weight shape mismatch");
    }
    if (bias != nullptr && bias->shape() != Shape{cout}) {
        throw ShapeError("deformable_conv2d: bias shape mismatch");
    }
    const std::int64_t ho = spec.out_extent(h);
    const std::int64_t wo = spec.out_extent(w);
    if (ho < 1 || wo < 1) {
        throw ShapeError("deformable_conv2d: output extent < 1");
    }
    if (offsets.shape() != Shape{n_img, 2 * k2, ho, wo}) {
        throw ShapeError("deformable_conv2d: offsets must be [N," + std::to_string(2 * k2) +
                         ",H',W']");
    }
    const std::int64_t p = spec.padding;
    const std::int64_t dil = spec.dilation;

    auto out = make_node({n_img, cout, ho, wo});
    const std::vector<double>& av = input.values();
    const std::vector<double>& offv = offsets.values();
    const std::vector<double>& wv = weight.values();

    std::vector<double> vbuf(static_cast<std::size_t>(cin * k2));
    for (std::int64_t n = 0; n < n_img; ++n) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                const std::int64_t pix = oy * wo + ox;
                for (std::int64_t t = 0; t < k2; ++t) {
                    const double dy = offv[static_cast<std::size_t>(
                        ((n * 2 * k2 + 2 * t) * ho) * wo + pix)];
                    const double dx = offv[static_cast<std::size_t>(
                        ((n * 2 * k2 + 2 * t + 1) * ho) * wo + pix)];
                    const double sy = static_cast<double>(oy - p + (t / k) * dil) + dy;
                    const double sx = static_cast<double>(ox - p + (t % k) * dil) + dx;
                    const BilinearTap bt = bilinear_tap(sy, sx);
                    const double w00 = (1.0 - bt.fy) * (1.0 - bt.fx);
                    const double w01 = (1.0 - bt.fy) * bt.fx;
                    const double w10 = bt.fy * (1.0 - bt.fx);
                    const double w11 = bt.fy * bt.fx;
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                        const double* ch = av.data() + (n * cin + ci) * h * w;
                        vbuf[static_cast<std::size_t>(ci * k2 + t)] =
                            w00 * read0(ch, h, w, bt.y0, bt.x0) +
                            w01 * read0(ch, h, w, bt.y0, bt.x0 + 1) +
                            w10 * read0(ch, h, w, bt.y0 + 1, bt.x0) +
                            w11 * read0(ch, h, w, bt.y0 + 1, bt.x0 + 1);
                    }
                }
                for (std::int64_t co = 0; co < cout; ++co) {
                    double acc = bias != nullptr ? bias->values()[static_cast<std::size_t>(co)]
                                                 : 0.0;
                    const double* wrow = wv.data() + co * cin * k2;
                    for (std::int64_t j = 0; j < cin * k2; ++j) {
                        acc += wrow[j] * vbuf[static_cast<std::size_t>(j)];
                    }
                    out->values[static_cast<std::size_t>((n * cout + co) * ho * wo + pix)] = acc;
                }
            }
        }
    }

    const bool rec = bias != nullptr ? any_requires_grad({&input, &offsets, &weight, bias})
                                     : any_requires_grad({&input, &offsets, &weight});
    auto an = input.node();
    auto offn = offsets.node();
    auto wn = weight.node();
    auto bnode = bias != nullptr ? bias->node() : nullptr;
    auto on = out;
    return finish_op(std::move(out), rec, [an, offn, wn, bnode, on, n_img, cin, cout, h, w, k, k2,
                                           ho, wo, p, dil] {
        const bool gin = an->requires_grad;
        const bool goff = offn->requires_grad;
        const bool gw = wn->requires_grad;
        const bool gb = bnode != nullptr && bnode->requires_grad;
        if (gin) {
            an->ensure_grad();
        }
        if (goff) {
            offn->ensure_grad();
        }
        if (gw) {
            wn->ensure_grad();
        }
        if (gb) {
            bnode->ensure_grad();
        }
        const std::vector<double>& og = on->grad;
        std::vector<double> vbuf(static_cast<std::size_t>(cin * k2));
        std::vector<double> dv(static_cast<std::size_t>(cin * k2));
        for (std::int64_t n = 0; n < n_img; ++n) {
            for (std::int64_t oy = 0; oy < ho; ++oy) {
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                    const std::int64_t pix = oy * wo + ox;
                    // rebuild the sampled tap values for this pixel
                    std::array<BilinearTap, 64> taps_small;
                    std::vector<BilinearTap> taps_big;
                    BilinearTap* taps = nullptr;
                    if (k2 <= 64) {
                        taps = taps_small.data();
                    } else {
                        taps_big.resize(static_cast<std::size_t>(k2));
                        taps = taps_big.data();
                    }
                    for (std::int64_t t = 0; t < k2; ++t) {
                        const double dy = offn->values[static_cast<std::size_t>(
                            ((n * 2 * k2 + 2 * t) * ho) * wo + pix)];
                        const double dx = offn->values[static_cast<std::size_t>(
                            ((n * 2 * k2 + 2 * t + 1) * ho) * wo + pix)];
                        const double sy = static_cast<double>(oy - p + (t / k) * dil) + dy;
                        const double sx = static_cast<double>(ox - p + (t % k) * dil) + dx;
                        taps[t] = bilinear_tap(sy, sx);
                        const BilinearTap bt = taps[t];
                        const double w00 = (1.0 - bt.fy) * (1.0 - bt.fx);
                        const double w01 = (1.0 - bt.fy) * bt.fx;
                        const double w10 = bt.fy * (1.0 - bt.fx);
                        const double w11 = bt.fy * bt.fx;
                        for (std::int64_t ci = 0; ci < cin; ++ci) {
                            const double* ch = an->values.data() + (n * cin + ci) * h * w;
                            vbuf[static_cast<std::size_t>(ci * k2 + t)] =
                                w00 * read0(ch, h, w, bt.y0, bt.x0) +
                                w01 * read0(ch, h, w, bt.y0, bt.x0 + 1) +
                                w10 * read0(ch, h, w, bt.y0 + 1, bt.x0) +
                                w11 * read0(ch, h, w, bt.y0 + 1, bt.x0 + 1);
                        }
                    }
                    std::fill(dv.begin(), dv.end(), 0.0);
                    for (std::int64_t co = 0; co < cout; ++co) {
                        const double g =
                            og[static_cast<std::size_t>((n * cout + co) * ho * wo + pix)];
                        if (g == 0.0) {
                            continue;
                        }
                        if (gb) {
                            bnode->grad[static_cast<std::size_t>(co)] += g;
                        }
                        const double* wrow = wn->values.data() + co * cin * k2;
                        if (gw) {
                            double* wgrow = wn->grad.data() + co * cin * k2;
                            for (std::int64_t j = 0; j < cin * k2; ++j) {
                                wgrow[j] += g * vbuf[static_cast<std::size_t>(j)];
                            }
                        }
                        for (std::int64_t j = 0; j < cin * k2; ++j) {
                            dv[static_cast<std::size_t>(j)] += g * wrow[j];
                        }
                    }
                    if (!gin && !goff) {
                        continue;
                    }
                    for (std::int64_t t = 0; t < k2; ++t) {
                        const BilinearTap bt = taps[t];
                        const double w00 = (1.0 - bt.fy) * (1.0 - bt.fx);
                        const double w01 = (1.0 - bt.fy) * bt.fx;
                        const double w10 = bt.fy * (1.0 - bt.fx);
                        const double w11 = bt.fy * bt.fx;
                        double dsy = 0.0;
                        double dsx = 0.0;
                        for (std::int64_t ci = 0; ci < cin; ++ci) {
                            const double g = dv[static_cast<std::size_t>(ci * k2 + t)];
                            if (g == 0.0) {
                                continue;
                            }
                            if (gin) {
                                double* dch = an->grad.data() + (n * cin + ci) * h * w;
                                scatter0(dch, h, w, bt.y0, bt.x0, g * w00);
                                scatter0(dch, h, w, bt.y0, bt.x0 + 1, g * w01);
                                scatter0(dch, h, w, bt.y0 + 1, bt.x0, g * w10);
                                scatter0(dch, h, w, bt.y0 + 1, bt.x0 + 1, g * w11);
                            }
                            if (goff) {
                                const double* ch = an->values.data() + (n * cin + ci) * h * w;
                                const double v00 = read0(ch, h, w, bt.y0, bt.x0);
                                const double v01 = read0(ch, h, w, bt.y0, bt.x0 + 1);
                                const double v10 = read0(ch, h, w, bt.y0 + 1, bt.x0);
                                const double v11 = read0(ch, h, w, bt.y0 + 1, bt.x0 + 1);
                                dsy += g * ((v10 - v00) * (1.0 - bt.fx) + (v11 - v01) * bt.fx);
                                dsx += g * ((v01 - v00) * (1.0 - bt.fy) + (v11 - v10) * bt.fy);
                            }
                        }
                        if (goff) {
                            offn->grad[static_cast<std::size_t>(((n * 2 * k2 + 2 * t) * ho) * wo +
                                                                pix)] += dsy;
                            offn->grad[static_cast<std::size_t>(
                                ((n * 2 * k2 + 2 * t + 1) * ho) * wo + pix)] += dsx;
                        }
                    }
                }
            }
        }
    });
}

Tensor relu(const Tensor& input) {
    auto out = make_node(input.shape());
    const std::vector<double>& av = input.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        out->values[i] = av[i] > 0.0 ? av[i] : 0.0;
    }
    const bool rec = any_requires_grad({&input});
    auto an = input.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, on] {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
            if (an->values[i] > 0.0) {
                an->grad[i] += on->grad[i];
            }
        }
    });
}

Tensor zero_pad2d(const Tensor& input, std::int64_t pad) {
    require_rank4(input, "zero_pad2d input");
    if (pad < 0) {
        throw ShapeError("zero_pad2d: pad must be >= 0");
    }
    const std::int64_t n_img = input.extent(0);
    const std::int64_t c = input.extent(1);
    const std::int64_t h = input.extent(2);
    const std::int64_t w = input.extent(3);
    const std::int64_t ph = h + 2 * pad;
    const std::int64_t pw = w + 2 * pad;

    auto out = make_node({n_img, c, ph, pw});
    const std::vector<double>& av = input.values();
    for (std::int64_t n = 0; n < n_img; ++n) {
        for (std::int64_t ci = 0; ci < c; ++ci) {
            for (std::int64_t y = 0; y < h; ++y) {
                const double* srow = av.data() + ((n * c + ci) * h + y) * w;
                std::copy(srow, srow + w,
                          out->values.begin() + (((n * c + ci) * ph + y + pad) * pw + pad));
            }
        }
    }

    const bool rec = any_requires_grad({&input});
    auto an = input.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, on, n_img, c, h, w, ph, pw, pad] {
        an->ensure_grad();
        for (std::int64_t n = 0; n < n_img; ++n) {
            for (std::int64_t ci = 0; ci < c; ++ci) {
                for (std::int64_t y = 0; y < h; ++y) {
                    const double* grow =
                        on->grad.data() + (((n * c + ci) * ph + y + pad) * pw + pad);
                    double* drow = an->grad.data() + ((n * c + ci) * h + y) * w;
                    for (std::int64_t x = 0; x < w; ++x) {
                        drow[x] += grow[x];
                    }
                }
            }
        }
    });
}

}  // namespace s3seg
