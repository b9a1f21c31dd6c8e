#pragma once

#include <cmath>
#include <vector>

#include "jotr/attention.hpp"
#include "jotr/nn.hpp"
#include "jotr/ops.hpp"

namespace jotr {

// Depth rescaling psi(z) = z^lambda; convex and increasing for lambda > 1.
// Differentiable in both arguments through the pow op.
template <typename T>
Tensor<T> psi(const Tensor<T>& z, const Tensor<T>& lambda) {
    return pow(z, lambda);
}

inline double psi(double z, double lambda) { return std::pow(z, lambda); }

inline constexpr double kLambdaInit = 3.0;
inline constexpr double kLambdaFloor = 1.0 + 1e-4;

// Rescaled relative coordinates as a [3,D,H,W] channel block in (0,1):
// x(k) = (k+0.5)/W and y(j) = (j+0.5)/H uniform, z(i) = psi((i+0.5)/D).
// Rebuilt every forward pass because lambda is learnable.
template <typename T>
Tensor<T> build_rrc(std::size_t d, std::size_t h, std::size_t w, const Tensor<T>& lambda) {
    if (d == 0 || h == 0 || w == 0) throw ShapeError("build_rrc: extents must be positive");
    std::vector<T> xs(d * h * w), ys(d * h * w);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < h; ++j)
            for (std::size_t k = 0; k < w; ++k) {
                xs[(i * h + j) * w + k] = (T(k) + T(0.5)) / T(w);
                ys[(i * h + j) * w + k] = (T(j) + T(0.5)) / T(h);
            }
    Tensor<T> xc = Tensor<T>::from({1, d, h, w}, std::move(xs));
    Tensor<T> yc = Tensor<T>::from({1, d, h, w}, std::move(ys));

    std::vector<T> zbase(d);
    for (std::size_t i = 0; i < d; ++i) zbase[i] = (T(i) + T(0.5)) / T(d);
    Tensor<T> zcol = psi(Tensor<T>::from({1, d, 1, 1}, std::move(zbase)), lambda);
    Tensor<T> zc = mul(Tensor<T>::filled({1, d, h, w}, T(1)), zcol);
    return concat<T>({xc, yc, zc}, 0);
}

// ---------------------------------------------------------------------------
// conv3d: x [Cin,D,H,W] * w [Cout,Cin,k,k,k] + b [Cout] -> [Cout,Do,Ho,Wo]

namespace detail {

template <typename T>
void im2col_3d(const T* x, std::size_t cin, std::size_t d, std::size_t h, std::size_t w,
               std::size_t k, std::size_t stride, std::size_t pad, std::size_t dout,
               std::size_t ho, std::size_t wo, T* col) {
    const std::size_t cols = dout * ho * wo;
    std::size_t row_idx = 0;
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t kd = 0; kd < k; ++kd)
            for (std::size_t ki = 0; ki < k; ++ki)
                for (std::size_t kj = 0; kj < k; ++kj) {
                    T* row = col + row_idx * cols;
                    ++row_idx;
                    std::size_t o = 0;
                    for (std::size_t od = 0; od < dout; ++od) {
                        const long dd = long(od * stride + kd) - long(pad);
                        for (std::size_t oi = 0; oi < ho; ++oi) {
                            const long ii = long(oi * stride + ki) - long(pad);
                            for (std::size_t oj = 0; oj < wo; ++oj, ++o) {
                                const long jj = long(oj * stride + kj) - long(pad);
                                row[o] = (dd < 0 || dd >= long(d) || ii < 0 || ii >= long(h) ||
                                          jj < 0 || jj >= long(w))
                                             ? T(0)
                                             : x[((c * d + std::size_t(dd)) * h + std::size_t(ii)) * w +
                                                 std::size_t(jj)];
                            }
                        }
                    }
                }
}

template <typename T>
void col2im_3d(const T* col, std::size_t cin, std::size_t d, std::size_t h, std::size_t w,
               std::size_t k, std::size_t stride, std::size_t pad, std::size_t dout,
               std::size_t ho, std::size_t wo, T* x) {
    const std::size_t cols = dout * ho * wo;
    std::size_t row_idx = 0;
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t kd = 0; kd < k; ++kd)
            for (std::size_t ki = 0; ki < k; ++ki)
                for (std::size_t kj = 0; kj < k; ++kj) {
                    const T* row = col + row_idx * cols;
                    ++row_idx;
                    std::size_t o = 0;
                    for (std::size_t od = 0; od < dout; ++od) {
                        const long dd = long(od * stride + kd) - long(pad);
                        const bool dok = dd >= 0 && dd < long(d);
                        for (std::size_t oi = 0; oi < ho; ++oi) {
                            const long ii = long(oi * stride + ki) - long(pad);
                            const bool iok = ii >= 0 && ii < long(h);
                            for (std::size_t oj = 0; oj < wo; ++oj, ++o) {
                                const long jj = long(oj * stride + kj) - long(pad);
                                if (!dok || !iok || jj < 0 || jj >= long(w)) continue;
                                x[((c * d + std::size_t(dd)) * h + std::size_t(ii)) * w +
                                  std::size_t(jj)] += row[o];
                            }
                        }
                    }
                }
}

} // namespace detail

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t pad) {
    if (x.rank() != 4) throw ShapeError("conv3d: input must be [C,D,H,W]");
    if (w.rank() != 5 || w.dim(2) != w.dim(3) || w.dim(3) != w.dim(4))
        throw ShapeError("conv3d: weight must be [Co,Ci,k,k,k]");
    const std::size_t cin = x.dim(0), d = x.dim(1), h = x.dim(2), wid = x.dim(3);
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin) throw ShapeError("conv3d: channel mismatch");
    if (b.size() != cout) throw ShapeError("conv3d: bias must have Cout entries");
    if (d + 2 * pad < k || h + 2 * pad < k || wid + 2 * pad < k)
        throw ConfigError("conv3d: kernel exceeds padded extent");
    const std::size_t dout = (d + 2 * pad - k) / stride + 1;
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (wid + 2 * pad - k) / stride + 1;

    const std::size_t krows = cin * k * k * k;
    std::vector<T> col(krows * dout * ho * wo);
    detail::im2col_3d(x.data(), cin, d, h, wid, k, stride, pad, dout, ho, wo, col.data());

    Tensor<T> out = detail::make_result<T>({cout, dout, ho, wo}, x, w, b);
    detail::gemm_nn(w.data(), col.data(), out.data(), cout, krows, dout * ho * wo);
    for (std::size_t c = 0; c < cout; ++c) {
        const T bias = b[c];
        T* row = out.data() + c * dout * ho * wo;
        for (std::size_t i = 0; i < dout * ho * wo; ++i) row[i] += bias;
    }

    if (out.requires_grad()) {
        auto xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([xn, wn, bn, on, col = std::move(col), cin, d, h, wid, k,
                                    stride, pad, dout, ho, wo, cout, krows]() {
            if (on->grad.empty()) return;
            const std::size_t cols = dout * ho * wo;
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t c = 0; c < cout; ++c) {
                    T acc(0);
                    for (std::size_t i = 0; i < cols; ++i) acc += on->grad[c * cols + i];
                    bn->grad[c] += acc;
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                detail::gemm_nt(on->grad.data(), col.data(), wn->grad.data(), cout, cols, krows);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<T> dcol(krows * cols, T(0));
                detail::gemm_tn(wn->val.data(), on->grad.data(), dcol.data(), krows, cout, cols);
                detail::col2im_3d(dcol.data(), cin, d, h, wid, k, stride, pad, dout, ho, wo,
                                  xn->grad.data());
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// lifting module: F_2D -> coarse 3D -> coordinate-aware conv -> 3D encoder

// Helpers between channel-first grids and token rows.
template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) { // [C, ...] -> [cells, C]
    const std::size_t c = grid.dim(0);
    return transpose(reshape(grid, {c, grid.size() / c}));
}

template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, Dims grid_dims) { // [cells, C] -> [C, ...]
    return reshape(transpose(tokens), std::move(grid_dims));
}

template <typename T>
struct Lifting {
    std::size_t channels = 0, depth_cells = 0, grid_h = 0, grid_w = 0;
    Mlp<T> lift_mlp;                 // per-cell C -> D*C
    Tensor<T> conv_weight, conv_bias; // [C, C+3, 3,3,3]
    LayerNorm<T> conv_norm;
    TransformerEncoder<T> encoder;
    Tensor<T> lambda; // [1], init 3.0

    Lifting() = default;
    Lifting(ParamRegistry<T>& reg, const std::string& name, std::size_t c, std::size_t d,
            std::size_t h, std::size_t w, std::size_t heads, std::size_t encoder_depth, Rng& rng)
        : channels(c), depth_cells(d), grid_h(h), grid_w(w),
          lift_mlp(reg, name + ".mlp", {c, c, c * d}, rng),
          conv_norm(reg, name + ".conv_norm", c),
          encoder(reg, name + ".encoder", d * h * w, c, heads, 2 * c, encoder_depth, rng) {
        const std::size_t fan_in = (c + 3) * 27;
        conv_weight = reg.add(name + ".conv.weight",
                              Tensor<T>::from({c, c + 3, 3, 3, 3},
                                              init_normal<T>(c * fan_in,
                                                             std::sqrt(2.0 / double(fan_in)), rng)));
        conv_bias = reg.add(name + ".conv.bias", Tensor<T>::zeros({c}));
        lambda = reg.add(name + ".lambda", Tensor<T>::from({1}, {T(kLambdaInit)}));
    }

    // Per-column MLP lift of F_2D [C,H,W] into a coarse grid [C,D,H,W]. The
    // MLP emits D-vectors per channel (column layout [c*D + depth]) so a
    // transpose puts depth under each channel without a permute.
    Tensor<T> lift_coarse(const Tensor<T>& f2d) const {
        if (f2d.dims() != Dims{channels, grid_h, grid_w})
            throw ShapeError("lift: F_2D must be " + dims_str({channels, grid_h, grid_w}) +
                             ", got " + dims_str(f2d.dims()));
        Tensor<T> rows = grid_to_tokens(f2d);    // [H*W, C]
        Tensor<T> lifted = lift_mlp(rows);       // [H*W, C*D]
        Tensor<T> by_channel = transpose(lifted); // [C*D, H*W]
        return reshape(by_channel, {channels, depth_cells, grid_h, grid_w});
    }

    // CoordConv-style block: concat RRC channels, one 3x3x3 conv back to C
    // channels, per-cell layer norm, gelu.
    Tensor<T> lift(const Tensor<T>& f2d) const {
        Tensor<T> coarse = lift_coarse(f2d);
        Tensor<T> rrc = build_rrc(depth_cells, grid_h, grid_w, lambda);
        Tensor<T> cat = concat<T>({coarse, rrc}, 0); // [C+3,D,H,W]
        Tensor<T> y = conv3d(cat, conv_weight, conv_bias, 1, 1);
        Tensor<T> tokens = grid_to_tokens(y); // [cells, C]
        tokens = gelu(conv_norm(tokens));
        return tokens_to_grid(tokens, {channels, depth_cells, grid_h, grid_w});
    }

    // H_3D = TransformerEncoder(F~_3D) over D*H*W cell tokens.
    Tensor<T> encode3d(const Tensor<T>& f3d) const {
        Tensor<T> tokens = grid_to_tokens(f3d);
        tokens = encoder(tokens);
        return tokens_to_grid(tokens, {channels, depth_cells, grid_h, grid_w});
    }

    Tensor<T> operator()(const Tensor<T>& f2d) const { return encode3d(lift(f2d)); }
};

} // namespace jotr
