#pragma once

#include <cmath>
#include <vector>

#include "jotr/nn.hpp"
#include "jotr/ops.hpp"
#include "jotr/tensor.hpp"

namespace jotr {

// ---------------------------------------------------------------------------
// conv2d: x [Cin,H,W] * w [Cout,Cin,kh,kw] + b [Cout] -> [Cout,Ho,Wo]

namespace detail {

template <typename T>
void im2col_2d(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
               std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
    // col is [cin*k*k, ho*wo]
    const std::size_t cols = ho * wo;
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* row = col + ((c * k + ki) * k + kj) * cols;
                for (std::size_t oi = 0; oi < ho; ++oi) {
                    const long ii = long(oi * stride + ki) - long(pad);
                    for (std::size_t oj = 0; oj < wo; ++oj) {
                        const long jj = long(oj * stride + kj) - long(pad);
                        row[oi * wo + oj] =
                            (ii < 0 || ii >= long(h) || jj < 0 || jj >= long(w))
                                ? T(0)
                                : x[(c * h + std::size_t(ii)) * w + std::size_t(jj)];
                    }
                }
            }
}

template <typename T>
void col2im_2d(const T* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
               std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
    const std::size_t cols = ho * wo;
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
                const T* row = col + ((c * k + ki) * k + kj) * cols;
                for (std::size_t oi = 0; oi < ho; ++oi) {
                    const long ii = long(oi * stride + ki) - long(pad);
                    if (ii < 0 || ii >= long(h)) continue;
                    for (std::size_t oj = 0; oj < wo; ++oj) {
                        const long jj = long(oj * stride + kj) - long(pad);
                        if (jj < 0 || jj >= long(w)) continue;
                        x[(c * h + std::size_t(ii)) * w + std::size_t(jj)] += row[oi * wo + oj];
                    }
                }
            }
}

} // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t pad) {
    if (x.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W]");
    if (w.rank() != 4 || w.dim(2) != w.dim(3)) throw ShapeError("conv2d: weight must be [Co,Ci,k,k]");
    const std::size_t cin = x.dim(0), h = x.dim(1), wid = x.dim(2);
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin) throw ShapeError("conv2d: channel mismatch");
    if (b.size() != cout) throw ShapeError("conv2d: bias must have Cout entries");
    if (h + 2 * pad < k || wid + 2 * pad < k)
        throw ConfigError("conv2d: kernel " + std::to_string(k) + " exceeds padded extent " +
                          std::to_string(h) + "x" + std::to_string(wid));
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (wid + 2 * pad - k) / stride + 1;

    std::vector<T> col(cin * k * k * ho * wo);
    detail::im2col_2d(x.data(), cin, h, wid, k, stride, pad, ho, wo, col.data());

    Tensor<T> out = detail::make_result<T>({cout, ho, wo}, x, w, b);
    detail::gemm_nn(w.data(), col.data(), out.data(), cout, cin * k * k, ho * wo);
    for (std::size_t c = 0; c < cout; ++c) {
        const T bias = b[c];
        T* row = out.data() + c * ho * wo;
        for (std::size_t i = 0; i < ho * wo; ++i) row[i] += bias;
    }

    if (out.requires_grad()) {
        auto xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([xn, wn, bn, on, col = std::move(col), cin, h, wid, k, stride,
                                    pad, ho, wo, cout]() {
            if (on->grad.empty()) return;
            const std::size_t cols = ho * wo;
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
                detail::gemm_nt(on->grad.data(), col.data(), wn->grad.data(), cout, cols,
                                cin * k * k);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<T> dcol(cin * k * k * cols, T(0));
                detail::gemm_tn(wn->val.data(), on->grad.data(), dcol.data(), cin * k * k, cout,
                                cols);
                detail::col2im_2d(dcol.data(), cin, h, wid, k, stride, pad, ho, wo,
                                  xn->grad.data());
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// joint heatmaps

// Gaussian likelihood maps on the SxS pixel grid. Joint coordinates are
// normalized image coordinates in [-1,1]; joints outside that square give
// an all-zero map. sigma is in pixels.
template <typename T>
Tensor<T> make_heatmaps(const Tensor<T>& joints2d, std::size_t s, double sigma) {
    if (joints2d.rank() != 2 || joints2d.dim(1) != 2)
        throw ShapeError("make_heatmaps: joints must be [N,2]");
    if (!(sigma > 0)) throw ConfigError("make_heatmaps: sigma must be positive");
    const std::size_t n = joints2d.dim(0);
    Tensor<T> maps = Tensor<T>::zeros({n, s, s});
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t q = 0; q < n; ++q) {
        const double x = double(joints2d.at(q, 0));
        const double y = double(joints2d.at(q, 1));
        if (x < -1.0 || x > 1.0 || y < -1.0 || y > 1.0) continue;
        const double px = (x + 1.0) / 2.0 * double(s) - 0.5;
        const double py = (y + 1.0) / 2.0 * double(s) - 0.5;
        T* map = maps.data() + q * s * s;
        for (std::size_t i = 0; i < s; ++i) {
            const double dy = double(i) - py;
            for (std::size_t j = 0; j < s; ++j) {
                const double dx = double(j) - px;
                map[i * s + j] = T(std::exp(-(dx * dx + dy * dy) * inv));
            }
        }
    }
    return maps;
}

// ---------------------------------------------------------------------------
// pose-guided feature extractor: image + heatmaps -> F_2D

struct ConvBlockSpec {
    std::size_t out_channels;
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t pad = 1;
};

// Plain strided conv stack standing in for the big pretrained backbone.
template <typename T>
struct Extractor {
    std::vector<ConvBlockSpec> specs;
    std::vector<Tensor<T>> weights;
    std::vector<Tensor<T>> biases;

    Extractor() = default;
    Extractor(ParamRegistry<T>& reg, const std::string& name, std::size_t in_channels,
              std::vector<ConvBlockSpec> blocks, Rng& rng)
        : specs(std::move(blocks)) {
        std::size_t cin = in_channels;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            const auto& s = specs[i];
            const std::size_t fan_in = cin * s.kernel * s.kernel;
            weights.push_back(reg.add(
                name + ".block" + std::to_string(i) + ".weight",
                Tensor<T>::from({s.out_channels, cin, s.kernel, s.kernel},
                                init_normal<T>(s.out_channels * fan_in,
                                               std::sqrt(2.0 / double(fan_in)), rng))));
            biases.push_back(reg.add(name + ".block" + std::to_string(i) + ".bias",
                                     Tensor<T>::zeros({s.out_channels})));
            cin = s.out_channels;
        }
    }

    // input: [3+N, S, S] (image channels with heatmaps concatenated)
    Tensor<T> operator()(Tensor<T> x) const {
        for (std::size_t i = 0; i < specs.size(); ++i) {
            x = conv2d(x, weights[i], biases[i], specs[i].stride, specs[i].pad);
            x = gelu(x);
        }
        return x;
    }
};

// Default paper-shape stack: S=64 -> 8x8 with 256 channels.
inline std::vector<ConvBlockSpec> default_extractor_blocks(std::size_t out_channels,
                                                           std::size_t input_size,
                                                           std::size_t grid_size) {
    if (input_size % grid_size != 0) throw ConfigError("extractor: grid must divide input size");
    std::size_t ratio = input_size / grid_size;
    std::size_t nblocks = 0;
    while (ratio > 1) {
        if (ratio % 2 != 0) throw ConfigError("extractor: input/grid ratio must be a power of two");
        ratio /= 2;
        ++nblocks;
    }
    if (nblocks == 0) throw ConfigError("extractor: input must be larger than the grid");
    std::vector<ConvBlockSpec> blocks;
    for (std::size_t i = 0; i < nblocks; ++i) {
        const std::size_t shift = nblocks - 1 - i;
        blocks.push_back({std::max<std::size_t>(out_channels >> shift, 8), 3, 2, 1});
    }
    blocks.back().out_channels = out_channels;
    return blocks;
}

} // namespace jotr
