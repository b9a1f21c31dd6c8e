#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "jotr/archive.hpp"
#include "jotr/attention.hpp"
#include "jotr/lifting.hpp"
#include "jotr/nn.hpp"
#include "jotr/ops.hpp"

namespace jotr {

// ---------------------------------------------------------------------------
// trilinear feature sampling

// The 8 enclosing cells and their weights for one point, in the half-pixel
// cell-center convention shared with build_rrc: coordinate c in [0,1] maps
// to continuous cell position c*extent - 0.5, clamped to the border cells.
struct TrilinearFootprint {
    std::array<std::size_t, 8> cell; // flat index into D*H*W
    std::array<double, 8> weight;
};

namespace detail {

struct AxisTaps {
    std::size_t lo, hi;
    double frac;    // weight of hi
    bool interior;  // false when the position was clamped
};

inline AxisTaps axis_taps(double coord, std::size_t extent) {
    double p = coord * double(extent) - 0.5;
    bool interior = true;
    if (p < 0.0) {
        p = 0.0;
        interior = false;
    }
    const double pmax = double(extent - 1);
    if (p > pmax) {
        p = pmax;
        interior = false;
    }
    AxisTaps t;
    t.lo = std::size_t(p);
    if (t.lo >= extent - 1 && extent > 1) t.lo = extent - 2;
    if (extent == 1) t.lo = 0;
    t.hi = std::min(t.lo + 1, extent - 1);
    t.frac = p - double(t.lo);
    t.interior = interior;
    return t;
}

} // namespace detail

inline TrilinearFootprint trilinear_footprint(double x, double y, double z, std::size_t d,
                                              std::size_t h, std::size_t w) {
    const auto tx = detail::axis_taps(x, w);
    const auto ty = detail::axis_taps(y, h);
    const auto tz = detail::axis_taps(z, d);
    TrilinearFootprint f;
    int i = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx, ++i) {
                const std::size_t zi = dz ? tz.hi : tz.lo;
                const std::size_t yi = dy ? ty.hi : ty.lo;
                const std::size_t xi = dx ? tx.hi : tx.lo;
                f.cell[std::size_t(i)] = (zi * h + yi) * w + xi;
                f.weight[std::size_t(i)] = (dz ? tz.frac : 1.0 - tz.frac) *
                                           (dy ? ty.frac : 1.0 - ty.frac) *
                                           (dx ? tx.frac : 1.0 - tx.frac);
            }
    return f;
}

namespace detail {

// Core interpolation on already-rescaled coordinates; differentiable in the
// grid and in the points (zero coordinate gradient where clamped).
template <typename T>
Tensor<T> trilinear_raw(const Tensor<T>& grid, const Tensor<T>& points) {
    if (grid.rank() != 4) throw ShapeError("trilinear_sample: grid must be [C,D,H,W]");
    if (points.rank() != 2 || points.dim(1) != 3)
        throw ShapeError("trilinear_sample: points must be [N,3]");
    const std::size_t c = grid.dim(0), d = grid.dim(1), h = grid.dim(2), w = grid.dim(3);
    const std::size_t n = points.dim(0);
    const std::size_t cell_stride = d * h * w;

    Tensor<T> out = make_result<T>({n, c}, grid, points);
    for (std::size_t q = 0; q < n; ++q) {
        const auto f = trilinear_footprint(double(points.at(q, 0)), double(points.at(q, 1)),
                                           double(points.at(q, 2)), d, h, w);
        for (std::size_t ch = 0; ch < c; ++ch) {
            T acc(0);
            for (int i = 0; i < 8; ++i)
                acc += T(f.weight[std::size_t(i)]) * grid.values()[ch * cell_stride + f.cell[std::size_t(i)]];
            out.data()[q * c + ch] = acc;
        }
    }

    if (out.requires_grad()) {
        auto gn = grid.node(), pn = points.node(), on = out.node();
        Tape<T>::current()->record([gn, pn, on, c, d, h, w, n, cell_stride]() {
            if (on->grad.empty()) return;
            const bool need_grid = gn->requires_grad;
            const bool need_pts = pn->requires_grad;
            if (need_grid) gn->ensure_grad();
            if (need_pts) pn->ensure_grad();
            for (std::size_t q = 0; q < n; ++q) {
                const double x = double(pn->val[q * 3 + 0]);
                const double y = double(pn->val[q * 3 + 1]);
                const double z = double(pn->val[q * 3 + 2]);
                const auto tx = axis_taps(x, w);
                const auto ty = axis_taps(y, h);
                const auto tz = axis_taps(z, d);
                const std::size_t xs[2] = {tx.lo, tx.hi};
                const std::size_t ys[2] = {ty.lo, ty.hi};
                const std::size_t zs[2] = {tz.lo, tz.hi};
                const double wx[2] = {1.0 - tx.frac, tx.frac};
                const double wy[2] = {1.0 - ty.frac, ty.frac};
                const double wz[2] = {1.0 - tz.frac, tz.frac};
                double gx = 0, gy = 0, gz = 0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t cell = (zs[dz] * h + ys[dy]) * w + xs[dx];
                            const double weight = wz[dz] * wy[dy] * wx[dx];
                            double gdot = 0;
                            for (std::size_t ch = 0; ch < c; ++ch) {
                                const double go = double(on->grad[q * c + ch]);
                                const double gv = double(gn->val[ch * cell_stride + cell]);
                                if (need_grid)
                                    gn->grad[ch * cell_stride + cell] += T(go * weight);
                                gdot += go * gv;
                            }
                            if (need_pts) {
                                const double sx = dx ? 1.0 : -1.0;
                                const double sy = dy ? 1.0 : -1.0;
                                const double sz = dz ? 1.0 : -1.0;
                                gx += gdot * sx * wz[dz] * wy[dy];
                                gy += gdot * sy * wz[dz] * wx[dx];
                                gz += gdot * sz * wy[dy] * wx[dx];
                            }
                        }
                if (need_pts) {
                    if (tx.interior) pn->grad[q * 3 + 0] += T(gx * double(w));
                    if (ty.interior) pn->grad[q * 3 + 1] += T(gy * double(h));
                    if (tz.interior) pn->grad[q * 3 + 2] += T(gz * double(d));
                }
            }
        });
    }
    return out;
}

} // namespace detail

// H_{J3D} = F(H_3D, J'), with the depth axis rescaled by psi before the
// cell lookup so sampling lands in the same warped space as the RRC grid.
template <typename T>
Tensor<T> trilinear_sample(const Tensor<T>& grid, const Tensor<T>& points,
                           const Tensor<T>& lambda) {
    Tensor<T> xy = slice(points, 1, 0, 2);
    Tensor<T> z = psi(slice(points, 1, 2, 1), lambda);
    return detail::trilinear_raw(grid, concat<T>({xy, z}, 1));
}

// 2D variant used by the joint-feature-sampling ablation. points are [N,2]
// (x, y) in [0,1]^2 over an [C,H,W] grid.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& grid, const Tensor<T>& points) {
    if (grid.rank() != 3) throw ShapeError("bilinear_sample: grid must be [C,H,W]");
    if (points.rank() != 2 || points.dim(1) != 2)
        throw ShapeError("bilinear_sample: points must be [N,2]");
    const std::size_t c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
    // route through the trilinear core with a depth-1 grid and z = 0.5
    Tensor<T> grid3 = reshape(grid, {c, 1, h, w});
    Tensor<T> z = Tensor<T>::filled({points.dim(0), 1}, T(0.5));
    return detail::trilinear_raw(grid3, concat<T>({points, z}, 1));
}

// ---------------------------------------------------------------------------
// fusion transformer

struct FusionConfig {
    std::size_t channels = 256;
    std::size_t grid_d = 8, grid_h = 8, grid_w = 8;
    std::size_t heads = 4;
    std::size_t init_decoder_depth = 1;
    std::size_t refine_layers = 3; // cascade refinement depth (Table-5 axis)
    std::size_t joint_tokens = kNumEvalJoints;
    bool smpl_token = true;       // decoupled SMPL queries; off = mean-pooled joint tokens
    bool feat2d_sampling = false; // refining keys: false = flatting, true = joint sampling
    bool feat3d_sampling = true;  // false = no 3D keys (and no contrast)
    std::size_t pose_latent_dim = 32;
    std::size_t theta_dim = 72;
};

// One regression round: pose latent, shape, raw camera and normalized joint
// reference points, plus the decoder hidden state they were read from.
template <typename T>
struct StageOutput {
    Tensor<T> latent;  // [1, latent_dim]
    Tensor<T> beta;    // [1, 10]
    Tensor<T> cam_raw; // [1, 3] residuals: s = exp(r0), t = (r1, r2)
    Tensor<T> jnorm;   // [Nj, 3] clamped to [0,1]^3
    Tensor<T> hidden;  // [Nq, C]
};

// Raw camera residuals -> weak-perspective parameters (s positive by
// construction).
template <typename T>
Tensor<T> camera_from_raw(const Tensor<T>& cam_raw) {
    Tensor<T> s = exp(slice(cam_raw, 1, 0, 1));
    Tensor<T> t = slice(cam_raw, 1, 1, 2);
    return reshape(concat<T>({s, t}, 1), {3});
}

template <typename T>
struct Fusion {
    FusionConfig cfg;
    Tensor<T> queries; // [Nq, C]
    std::vector<DecoderLayer<T>> init_layers;
    std::vector<DecoderLayer<T>> refine_layers;
    Mlp<T> latent_head, beta_head, cam_head, joint_head;
    std::vector<Mlp<T>> latent_res, beta_res, cam_res, joint_res;
    Linear<T> pose_decoder; // latent -> theta

    Fusion() = default;
    Fusion(ParamRegistry<T>& reg, const std::string& name, const FusionConfig& config, Rng& rng)
        : cfg(config) {
        const std::size_t c = cfg.channels;
        const std::size_t nq = query_count();
        queries = reg.add(name + ".queries",
                          Tensor<T>::from({nq, c}, init_normal<T>(nq * c, 0.02, rng)));
        for (std::size_t l = 0; l < cfg.init_decoder_depth; ++l)
            init_layers.emplace_back(reg, name + ".init" + std::to_string(l), c, cfg.heads, 2 * c,
                                     rng);
        for (std::size_t l = 0; l < cfg.refine_layers; ++l)
            refine_layers.emplace_back(reg, name + ".refine" + std::to_string(l), c, cfg.heads,
                                       2 * c, rng);
        latent_head = Mlp<T>(reg, name + ".head.latent", {c, c, cfg.pose_latent_dim}, rng);
        beta_head = Mlp<T>(reg, name + ".head.beta", {c, c, 10}, rng);
        cam_head = Mlp<T>(reg, name + ".head.cam", {c, c, 3}, rng);
        joint_head = Mlp<T>(reg, name + ".head.joint", {c, c, 3}, rng);
        for (std::size_t l = 0; l < cfg.refine_layers; ++l) {
            const std::string p = name + ".res" + std::to_string(l);
            latent_res.emplace_back(reg, p + ".latent",
                                    std::vector<std::size_t>{c + cfg.pose_latent_dim, c,
                                                             cfg.pose_latent_dim},
                                    rng);
            beta_res.emplace_back(reg, p + ".beta", std::vector<std::size_t>{c + 10, c, 10}, rng);
            cam_res.emplace_back(reg, p + ".cam", std::vector<std::size_t>{c + 3, c, 3}, rng);
            joint_res.emplace_back(reg, p + ".joint", std::vector<std::size_t>{c + 3, c, 3}, rng);
        }
        pose_decoder = Linear<T>(reg, name + ".pose_decoder", cfg.pose_latent_dim, cfg.theta_dim,
                                 rng);
        // residual branches start as the identity so round 0 output survives
        // the cascade untouched at initialization
        auto zero_last = [](std::vector<Mlp<T>>& heads) {
            for (auto& m : heads) {
                auto& w = m.layers.back().weight.mutable_values();
                std::fill(w.begin(), w.end(), T(0));
            }
        };
        zero_last(latent_res);
        zero_last(beta_res);
        zero_last(cam_res);
        zero_last(joint_res);
    }

    std::size_t query_count() const {
        return (cfg.smpl_token ? 3 : 0) + cfg.joint_tokens;
    }

    // Token rows on which SMPL parameter heads run: the three decoupled SMPL
    // tokens, or the mean-pooled joint tokens for the ablation.
    struct HeadInputs {
        Tensor<T> pose, shape, cam; // [1, C] each
        Tensor<T> joints;           // [Nj, C]
    };

    HeadInputs split_tokens(const Tensor<T>& hidden) const {
        HeadInputs h;
        if (cfg.smpl_token) {
            h.pose = slice(hidden, 0, 0, 1);
            h.shape = slice(hidden, 0, 1, 1);
            h.cam = slice(hidden, 0, 2, 1);
            h.joints = slice(hidden, 0, 3, cfg.joint_tokens);
        } else {
            h.joints = hidden;
            Tensor<T> pooled = mean_axis(hidden, 0);
            h.pose = pooled;
            h.shape = pooled;
            h.cam = pooled;
        }
        return h;
    }

    // 2D-based initial regression: decoder over H_2D tokens, then per-token
    // MLP heads. Joint coordinates come out sigmoid-bounded to (0,1)^3.
    StageOutput<T> initial_regress(const Tensor<T>& h2d_tokens) const {
        Tensor<T> x = queries;
        for (const auto& layer : init_layers) x = layer(x, h2d_tokens);
        auto tok = split_tokens(x);
        StageOutput<T> s;
        s.latent = latent_head(tok.pose);
        s.beta = beta_head(tok.shape);
        s.cam_raw = cam_head(tok.cam);
        s.jnorm = sigmoid(joint_head(tok.joints));
        s.hidden = x;
        return s;
    }

    // Keys for a refining layer: flattened H_2D (or joint-sampled 2D
    // features) concatenated with trilinear-sampled 3D joint features.
    Tensor<T> refine_keys(const StageOutput<T>& stage, const Tensor<T>& h2d_tokens,
                          const Tensor<T>* h3d, const Tensor<T>& lambda,
                          std::size_t* n2d_keys) const {
        Tensor<T> keys2d;
        if (cfg.feat2d_sampling) {
            Tensor<T> grid2d =
                tokens_to_grid(h2d_tokens, {cfg.channels, cfg.grid_h, cfg.grid_w});
            keys2d = bilinear_sample(grid2d, slice(stage.jnorm, 1, 0, 2));
        } else {
            keys2d = h2d_tokens;
        }
        *n2d_keys = keys2d.dim(0);
        if (!cfg.feat3d_sampling || h3d == nullptr) return keys2d;
        Tensor<T> hj3d = trilinear_sample(*h3d, stage.jnorm, lambda);
        return concat<T>({keys2d, hj3d}, 0);
    }

    // One cascade round per refining layer (Eq. 2): the decoder hidden state
    // advances, each parameter gets an additive MLP correction, and the
    // reference points are re-clamped so the next round samples inside the
    // grid.
    std::vector<StageOutput<T>> refine(const StageOutput<T>& initial, const Tensor<T>& h2d_tokens,
                                       const Tensor<T>* h3d, const Tensor<T>& lambda,
                                       std::vector<std::vector<T>>* attn_capture = nullptr,
                                       std::size_t* n2d_keys_out = nullptr) const {
        std::vector<StageOutput<T>> stages = {initial};
        Tensor<T> x = initial.hidden;
        if (attn_capture) attn_capture->resize(refine_layers.size());
        std::size_t n2d = 0;
        for (std::size_t l = 0; l < refine_layers.size(); ++l) {
            const StageOutput<T>& prev = stages.back();
            Tensor<T> keys = refine_keys(prev, h2d_tokens, h3d, lambda, &n2d);
            x = refine_layers[l](x, keys, attn_capture ? &(*attn_capture)[l] : nullptr);
            auto tok = split_tokens(x);
            StageOutput<T> next;
            next.latent = add(prev.latent, latent_res[l](concat<T>({prev.latent, tok.pose}, 1)));
            next.beta = add(prev.beta, beta_res[l](concat<T>({prev.beta, tok.shape}, 1)));
            next.cam_raw = add(prev.cam_raw, cam_res[l](concat<T>({prev.cam_raw, tok.cam}, 1)));
            next.jnorm = clamp(
                add(prev.jnorm, joint_res[l](concat<T>({prev.jnorm, tok.joints}, 1))), T(0), T(1));
            next.hidden = x;
            stages.push_back(next);
        }
        if (n2d_keys_out) *n2d_keys_out = n2d;
        return stages;
    }

    // All rounds: initial 2D-based regression plus one snapshot per refining
    // layer (refine_layers + 1 snapshots).
    std::vector<StageOutput<T>> operator()(const Tensor<T>& h2d_tokens, const Tensor<T>* h3d,
                                           const Tensor<T>& lambda,
                                           std::vector<std::vector<T>>* attn_capture = nullptr,
                                           std::size_t* n2d_keys_out = nullptr) const {
        return refine(initial_regress(h2d_tokens), h2d_tokens, h3d, lambda, attn_capture,
                      n2d_keys_out);
    }

    Tensor<T> decode_pose_latent(const Tensor<T>& latent) const {
        return reshape(pose_decoder(reshape(latent, {1, cfg.pose_latent_dim})), {cfg.theta_dim});
    }
};

// Per-layer cross-attention export: head-averaged weights of every refining
// layer as `layer{l}.attn`, plus the attention mass split between the 2D and
// 3D key blocks.
struct AttentionMassSplit {
    double mass_2d = 0.0;
    double mass_3d = 0.0;
};

template <typename T>
AttentionMassSplit export_attention(const std::vector<std::vector<T>>& captures,
                                    std::size_t n_queries, std::size_t n2d_keys,
                                    Archive& archive) {
    AttentionMassSplit split;
    double total = 0, mass2d = 0;
    for (std::size_t l = 0; l < captures.size(); ++l) {
        const auto& a = captures[l];
        if (a.empty() || a.size() % n_queries != 0)
            throw ShapeError("export_attention: bad capture extent");
        const std::size_t keys = a.size() / n_queries;
        std::vector<float> data(a.begin(), a.end());
        archive.add("layer" + std::to_string(l) + ".attn", {n_queries, keys}, std::move(data));
        for (std::size_t q = 0; q < n_queries; ++q)
            for (std::size_t k = 0; k < keys; ++k) {
                total += double(a[q * keys + k]);
                if (k < n2d_keys) mass2d += double(a[q * keys + k]);
            }
    }
    if (total > 0) {
        split.mass_2d = mass2d / total;
        split.mass_3d = 1.0 - split.mass_2d;
    }
    return split;
}

} // namespace jotr
