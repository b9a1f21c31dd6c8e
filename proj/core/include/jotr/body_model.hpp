#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "jotr/archive.hpp"
#include "jotr/ops.hpp"
#include "jotr/rng.hpp"
#include "jotr/tensor.hpp"

namespace jotr {

// Canonical evaluation joints. Ground truth and predictions share this
// ordering; index 0 is the pelvis used for root alignment.
inline constexpr std::size_t kNumEvalJoints = 17;
inline constexpr std::size_t kPelvis = 0;

inline const std::vector<std::string>& joint_labels() {
    static const std::vector<std::string> labels = {
        "pelvis",        "left_hip",      "right_hip",  "left_knee",  "right_knee",
        "left_ankle",    "right_ankle",   "spine",      "neck",       "nose",
        "head",          "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
        "left_wrist",    "right_wrist"};
    return labels;
}

// Pose (axis-angle per kinematic joint), shape coefficients and
// weak-perspective camera (s, tx, ty).
template <typename T>
struct BodyParams {
    Tensor<T> theta; // [3*J]
    Tensor<T> beta;  // [10]
    Tensor<T> cam;   // [3]
};

template <typename T>
struct BodyModelAsset {
    Tensor<T> template_verts;   // [V,3], meters
    Tensor<T> shapedirs;        // [10, V*3]
    Tensor<T> skin_weights;     // [V,J], rows sum to 1
    std::vector<int> parents;   // J entries, parents[0] == -1, parents[j] < j
    Tensor<T> joint_regressor;  // [J,V], rows sum to 1
    Tensor<T> eval_regressor;   // [17,V], rows sum to 1
    std::vector<std::array<int, 3>> faces;

    std::size_t vertex_count() const { return template_verts.dim(0); }
    std::size_t joint_count() const { return parents.size(); }

    void validate() const;
};

template <typename T>
void BodyModelAsset<T>::validate() const {
    const std::size_t v = vertex_count();
    const std::size_t j = joint_count();
    if (template_verts.rank() != 2 || template_verts.dim(1) != 3)
        throw ShapeError("asset: template must be [V,3]");
    if (shapedirs.dims() != Dims{10, v * 3}) throw ShapeError("asset: shapedirs must be [10, V*3]");
    if (skin_weights.dims() != Dims{v, j}) throw ShapeError("asset: weights must be [V,J]");
    if (joint_regressor.dims() != Dims{j, v}) throw ShapeError("asset: joint regressor must be [J,V]");
    if (eval_regressor.dims() != Dims{kNumEvalJoints, v})
        throw ShapeError("asset: eval regressor must be [17,V]");
    if (parents.empty() || parents[0] != -1)
        throw ConfigError("asset: kinematic tree must be rooted at joint 0");
    for (std::size_t k = 1; k < j; ++k)
        if (parents[k] < 0 || std::size_t(parents[k]) >= k)
            throw ConfigError("asset: parents must be topologically ordered (parent < child)");
    auto check_rows = [](const Tensor<T>& m, const char* what) {
        const std::size_t rows = m.dim(0), cols = m.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            T s(0);
            for (std::size_t c = 0; c < cols; ++c) s += m.at(r, c);
            if (std::fabs(double(s) - 1.0) > 1e-6)
                throw ConfigError(std::string("asset: ") + what + " row " + std::to_string(r) +
                                  " sums to " + std::to_string(double(s)));
        }
    };
    check_rows(skin_weights, "skin weight");
    check_rows(joint_regressor, "joint regressor");
    check_rows(eval_regressor, "eval regressor");
}

// ---------------------------------------------------------------------------
// rodrigues: batched axis-angle [J,3] -> rotation matrices [J,3,3]

namespace detail {

// a = sin(t)/t and b = (1-cos(t))/t^2 plus derivatives in u = t^2; series
// below t^2 = 1e-8 keeps everything smooth through t = 0.
template <typename T>
void rodrigues_coeffs(T u, T& a, T& b, T& da_du, T& db_du) {
    if (u < T(1e-8)) {
        a = T(1) - u / T(6) + u * u / T(120);
        b = T(0.5) - u / T(24) + u * u / T(720);
        da_du = T(-1) / T(6) + u / T(60);
        db_du = T(-1) / T(24) + u / T(360);
        return;
    }
    const T t = std::sqrt(u);
    const T s = std::sin(t), c = std::cos(t);
    a = s / t;
    b = (T(1) - c) / u;
    da_du = (t * c - s) / (T(2) * u * t);
    db_du = (t * s / T(2) - (T(1) - c)) / (u * u);
}

template <typename T>
void skew3(const T w[3], T k[9]) {
    k[0] = 0;      k[1] = -w[2]; k[2] = w[1];
    k[3] = w[2];   k[4] = 0;     k[5] = -w[0];
    k[6] = -w[1];  k[7] = w[0];  k[8] = 0;
}

template <typename T>
void mat3_mul(const T x[9], const T y[9], T out[9]) {
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            T acc(0);
            for (int p = 0; p < 3; ++p) acc += x[i * 3 + p] * y[p * 3 + j];
            out[i * 3 + j] = acc;
        }
}

} // namespace detail

template <typename T>
Tensor<T> rodrigues(const Tensor<T>& axis_angle) {
    if (axis_angle.rank() != 2 || axis_angle.dim(1) != 3)
        throw ShapeError("rodrigues: expected [J,3], got " + dims_str(axis_angle.dims()));
    const std::size_t j = axis_angle.dim(0);
    Tensor<T> out = detail::make_result<T>({j, 3, 3}, axis_angle);
    const T* pw = axis_angle.data();
    T* po = out.data();
    for (std::size_t q = 0; q < j; ++q) {
        const T* w = pw + q * 3;
        const T u = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
        T a, b, da, db;
        detail::rodrigues_coeffs(u, a, b, da, db);
        T k[9], kk[9];
        detail::skew3(w, k);
        detail::mat3_mul(k, k, kk);
        T* r = po + q * 9;
        for (int i = 0; i < 9; ++i) r[i] = a * k[i] + b * kk[i];
        r[0] += T(1);
        r[4] += T(1);
        r[8] += T(1);
    }

    if (out.requires_grad()) {
        auto xn = axis_angle.node(), on = out.node();
        Tape<T>::current()->record([xn, on, j]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t q = 0; q < j; ++q) {
                const T* w = xn->val.data() + q * 3;
                const T* g = on->grad.data() + q * 9;
                const T u = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
                T a, b, da, db;
                detail::rodrigues_coeffs(u, a, b, da, db);
                T k[9], kk[9];
                detail::skew3(w, k);
                detail::mat3_mul(k, k, kk);
                const T gk = std::inner_product(g, g + 9, k, T(0));
                const T gkk = std::inner_product(g, g + 9, kk, T(0));
                for (int axis = 0; axis < 3; ++axis) {
                    T e[3] = {0, 0, 0};
                    e[axis] = T(1);
                    T ek[9], ekk[9], kek[9];
                    detail::skew3(e, ek);
                    detail::mat3_mul(ek, k, ekk); // E_k K
                    detail::mat3_mul(k, ek, kek); // K E_k
                    T ge(0), gmix(0);
                    for (int i = 0; i < 9; ++i) {
                        ge += g[i] * ek[i];
                        gmix += g[i] * (ekk[i] + kek[i]);
                    }
                    xn->grad[q * 3 + axis] +=
                        T(2) * w[axis] * (da * gk + db * gkk) + a * ge + b * gmix;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// forward kinematics + linear blend skinning

// Vertices for (theta, beta) on the given asset. Row-vector convention:
// points transform as x' = x R^T. Skinning is applied in delta form,
//   v' = v + sum_j w_vj [ v (R_j^T - I) + D_j + J_j (I - R_j^T) ],
// which reproduces the rest template bit-exactly at theta = 0 instead of
// relying on the weight rows summing to one.
template <typename T>
Tensor<T> forward_mesh(const BodyParams<T>& params, const BodyModelAsset<T>& asset) {
    const std::size_t v = asset.vertex_count();
    const std::size_t j = asset.joint_count();
    if (params.theta.size() != 3 * j)
        throw ShapeError("forward_mesh: theta must have " + std::to_string(3 * j) + " values");
    if (params.beta.size() != 10) throw ShapeError("forward_mesh: beta must have 10 values");

    // shaped template: T + sum_i beta_i S_i
    Tensor<T> blend = matmul(reshape(params.beta, {1, 10}), asset.shapedirs); // [1, V*3]
    Tensor<T> shaped = add(asset.template_verts, reshape(blend, {v, 3}));

    // rest joints from the shaped template
    Tensor<T> rest_joints = matmul(asset.joint_regressor, shaped); // [J,3]

    Tensor<T> rot = rodrigues(reshape(params.theta, {j, 3})); // [J,3,3]

    static const Tensor<T> eye3 = Tensor<T>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});

    std::vector<Tensor<T>> rot_global(j);   // [3,3] each
    std::vector<Tensor<T>> disp_global(j);  // [1,3]: global joint position minus rest position
    for (std::size_t q = 0; q < j; ++q) {
        Tensor<T> local = reshape(slice(rot, 0, q, 1), {3, 3});
        if (q == 0) {
            rot_global[0] = local;
            disp_global[0] = Tensor<T>::zeros({1, 3});
            continue;
        }
        const std::size_t p = std::size_t(asset.parents[q]);
        rot_global[q] = matmul(rot_global[p], local);
        Tensor<T> offset = sub(slice(rest_joints, 0, q, 1), slice(rest_joints, 0, p, 1)); // [1,3]
        // D_q = offset (R_p^T - I) + D_p
        disp_global[q] =
            add(matmul(offset, sub(transpose(rot_global[p]), eye3)), disp_global[p]);
    }

    Tensor<T> posed = shaped;
    for (std::size_t q = 0; q < j; ++q) {
        Tensor<T> rt_minus_i = sub(transpose(rot_global[q]), eye3); // [3,3]
        Tensor<T> jq = slice(rest_joints, 0, q, 1);                 // [1,3]
        // per-joint contribution: v (R^T - I) + D + J (I - R^T)
        Tensor<T> trans = sub(disp_global[q], matmul(jq, rt_minus_i)); // [1,3]
        Tensor<T> moved = add(matmul(shaped, rt_minus_i), trans);      // [V,3]
        Tensor<T> wcol = slice(asset.skin_weights, 1, q, 1);           // [V,1]
        posed = add(posed, mul(wcol, moved));
    }
    return posed;
}

// J_3D = W M.
template <typename T>
Tensor<T> regress_joints(const Tensor<T>& vertices, const Tensor<T>& regressor) {
    if (vertices.rank() != 2 || vertices.dim(1) != 3)
        throw ShapeError("regress_joints: vertices must be [V,3]");
    if (regressor.rank() != 2 || regressor.dim(1) != vertices.dim(0))
        throw ShapeError("regress_joints: regressor " + dims_str(regressor.dims()) +
                         " does not match vertices " + dims_str(vertices.dims()));
    return matmul(regressor, vertices);
}

// Weak perspective: (x, y) = s (X, Y) + (tx, ty); depth is discarded.
template <typename T>
Tensor<T> project(const Tensor<T>& joints, const Tensor<T>& cam) {
    if (joints.rank() != 2 || joints.dim(1) != 3)
        throw ShapeError("project: joints must be [N,3]");
    if (cam.size() != 3) throw ShapeError("project: camera must have 3 values");
    Tensor<T> xy = slice(joints, 1, 0, 2);                       // [N,2]
    Tensor<T> s = reshape(slice(cam, 0, 0, 1), {1, 1});          // [1,1]
    Tensor<T> t = reshape(slice(cam, 0, 1, 2), {1, 2});          // [1,2]
    return add(mul(xy, s), t);
}

// ---------------------------------------------------------------------------
// archive round trip

template <typename T>
void save_asset(const BodyModelAsset<T>& asset, Archive& archive) {
    const std::size_t v = asset.vertex_count();
    archive.add("template", asset.template_verts);
    archive.add("shapedirs", Tensor<T>::from({10, v, 3}, asset.shapedirs.values()));
    archive.add("weights", asset.skin_weights);
    std::vector<float> parents(asset.parents.size());
    for (std::size_t i = 0; i < parents.size(); ++i) parents[i] = float(asset.parents[i]);
    archive.add("parents", {parents.size()}, parents);
    archive.add("J_regressor_model", asset.joint_regressor);
    archive.add("J_regressor_eval", asset.eval_regressor);
    if (!asset.faces.empty()) {
        std::vector<float> f;
        f.reserve(asset.faces.size() * 3);
        for (const auto& tri : asset.faces)
            for (int idx : tri) f.push_back(float(idx));
        archive.add("faces", {asset.faces.size(), 3}, std::move(f));
    }
}

template <typename T>
BodyModelAsset<T> load_asset(const Archive& archive) {
    BodyModelAsset<T> asset;
    auto to_t = [&](const std::string& name) {
        const auto& e = archive.at(name);
        std::vector<T> vals(e.data.begin(), e.data.end());
        return Tensor<T>::from(e.dims, std::move(vals));
    };
    asset.template_verts = to_t("template");
    Tensor<T> sd = to_t("shapedirs");
    if (sd.rank() != 3 || sd.dim(0) != 10 || sd.dim(2) != 3)
        throw ShapeError("asset: shapedirs must be [10,V,3]");
    asset.shapedirs = reshape(sd, {10, sd.dim(1) * 3});
    asset.skin_weights = to_t("weights");
    const auto& pe = archive.at("parents");
    asset.parents.resize(pe.data.size());
    for (std::size_t i = 0; i < pe.data.size(); ++i) asset.parents[i] = int(pe.data[i]);
    asset.joint_regressor = to_t("J_regressor_model");
    asset.eval_regressor = to_t("J_regressor_eval");
    if (archive.contains("faces")) {
        const auto& fe = archive.at("faces");
        for (std::size_t i = 0; i + 2 < fe.data.size() + 1; i += 3)
            asset.faces.push_back({int(fe.data[i]), int(fe.data[i + 1]), int(fe.data[i + 2])});
    }
    // exact row normalization so the delta-form skinning and the plain form
    // agree to roundoff
    auto renorm = [](Tensor<T>& m) {
        const std::size_t rows = m.dim(0), cols = m.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            T s(0);
            for (std::size_t c = 0; c < cols; ++c) s += m.data()[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) m.data()[r * cols + c] /= s;
        }
    };
    renorm(asset.skin_weights);
    asset.validate();
    return asset;
}

// ---------------------------------------------------------------------------
// procedurally generated toy asset: 64 vertices in 16 rings of 4 over a
// 6-joint tree (pelvis, chest, head, left arm, right arm, legs)

template <typename T>
BodyModelAsset<T> toy_asset(std::uint64_t seed = 2024) {
    Rng rng(mix64(seed ^ 0x70790a55e7ull));
    const std::vector<std::array<double, 3>> joints = {
        {0.0, 0.0, 0.0},    // 0 pelvis
        {0.0, 0.25, 0.0},   // 1 chest
        {0.0, 0.55, 0.0},   // 2 head
        {-0.35, 0.25, 0.0}, // 3 left arm tip
        {0.35, 0.25, 0.0},  // 4 right arm tip
        {0.0, -0.45, 0.0},  // 5 legs tip
    };
    const std::vector<int> parents = {-1, 0, 1, 1, 1, 0};

    struct Segment {
        int from, to, rings;
        double radius;
        std::vector<double> ts;
    };
    const std::vector<Segment> segments = {
        {0, 1, 4, 0.12, {0.10, 0.35, 0.65, 0.90}},
        {1, 2, 3, 0.08, {0.33, 0.66, 1.00}},
        {1, 3, 3, 0.05, {0.33, 0.66, 1.00}},
        {1, 4, 3, 0.05, {0.33, 0.66, 1.00}},
        {0, 5, 3, 0.09, {0.33, 0.66, 1.00}},
    };

    std::vector<double> verts;
    std::vector<std::array<int, 3>> faces;
    for (const auto& seg : segments) {
        const auto& a = joints[std::size_t(seg.from)];
        const auto& b = joints[std::size_t(seg.to)];
        double dir[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
        const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        for (auto& d : dir) d /= len;
        // orthonormal frame (u, v) perpendicular to dir
        double u[3] = {-dir[1], dir[0], 0.0};
        double un = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        if (un < 1e-6) {
            u[0] = 1;
            u[1] = 0;
            u[2] = 0;
            un = 1;
        }
        for (auto& x : u) x /= un;
        const double w[3] = {dir[1] * u[2] - dir[2] * u[1], dir[2] * u[0] - dir[0] * u[2],
                             dir[0] * u[1] - dir[1] * u[0]};

        const int ring_base = int(verts.size() / 3);
        for (int r = 0; r < seg.rings; ++r) {
            const double t = seg.ts[std::size_t(r)];
            const double twist = 0.2 * r;
            for (int k = 0; k < 4; ++k) {
                const double ang = twist + 0.25 * 3.141592653589793 + 0.5 * 3.141592653589793 * k;
                const double rad = seg.radius * (1.0 + 0.15 * rng.uniform(-1.0, 1.0));
                for (int c = 0; c < 3; ++c)
                    verts.push_back(a[std::size_t(c)] + t * len * dir[c] +
                                    rad * (std::cos(ang) * u[c] + std::sin(ang) * w[c]));
            }
        }
        for (int r = 0; r + 1 < seg.rings; ++r) {
            const int lo = ring_base + 4 * r, hi = lo + 4;
            for (int k = 0; k < 4; ++k) {
                const int kn = (k + 1) % 4;
                faces.push_back({lo + k, lo + kn, hi + k});
                faces.push_back({lo + kn, hi + kn, hi + k});
            }
        }
    }
    const std::size_t v = verts.size() / 3;

    // skinning weights: RBF to the joints, exact row normalization
    std::vector<double> weights(v * joints.size());
    for (std::size_t i = 0; i < v; ++i) {
        double sum = 0;
        for (std::size_t q = 0; q < joints.size(); ++q) {
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = verts[i * 3 + std::size_t(c)] - joints[q][std::size_t(c)];
                d2 += d * d;
            }
            const double wgt = std::exp(-d2 / 0.02);
            weights[i * joints.size() + q] = wgt;
            sum += wgt;
        }
        for (std::size_t q = 0; q < joints.size(); ++q) weights[i * joints.size() + q] /= sum;
    }

    // model joint regressor: inverse-distance over the 4 nearest vertices
    std::vector<double> jreg(joints.size() * v, 0.0);
    for (std::size_t q = 0; q < joints.size(); ++q) {
        std::vector<std::pair<double, std::size_t>> dist(v);
        for (std::size_t i = 0; i < v; ++i) {
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = verts[i * 3 + std::size_t(c)] - joints[q][std::size_t(c)];
                d2 += d * d;
            }
            dist[i] = {d2, i};
        }
        std::sort(dist.begin(), dist.end());
        double sum = 0;
        for (int k = 0; k < 4; ++k) sum += 1.0 / (std::sqrt(dist[std::size_t(k)].first) + 1e-3);
        for (int k = 0; k < 4; ++k)
            jreg[q * v + dist[std::size_t(k)].second] =
                (1.0 / (std::sqrt(dist[std::size_t(k)].first) + 1e-3)) / sum;
    }

    // eval regressor over 17 canonical joints; vertex groups are ring
    // subsets, split left/right by x where a label is sided
    auto ring = [](int base, int r) { return std::array<int, 4>{base + 4 * r, base + 4 * r + 1, base + 4 * r + 2, base + 4 * r + 3}; };
    const int spine0 = 0, head0 = 16, larm0 = 28, rarm0 = 40, legs0 = 52;
    std::vector<std::vector<int>> groups(kNumEvalJoints);
    auto side = [&](std::array<int, 4> idx, bool left) {
        std::vector<int> out;
        for (int i : idx)
            if ((verts[std::size_t(i) * 3] < 0) == left) out.push_back(i);
        return out;
    };
    auto whole = [](std::array<int, 4> idx) { return std::vector<int>(idx.begin(), idx.end()); };
    groups[0] = whole(ring(spine0, 0));                  // pelvis
    groups[1] = side(ring(legs0, 0), true);              // left hip
    groups[2] = side(ring(legs0, 0), false);             // right hip
    groups[3] = side(ring(legs0, 1), true);              // left knee
    groups[4] = side(ring(legs0, 1), false);             // right knee
    groups[5] = side(ring(legs0, 2), true);              // left ankle
    groups[6] = side(ring(legs0, 2), false);             // right ankle
    groups[7] = whole(ring(spine0, 2));                  // spine
    groups[8] = whole(ring(spine0, 3));                  // neck
    groups[9] = side(ring(head0, 1), true);              // nose (arbitrary half)
    groups[10] = whole(ring(head0, 2));                  // head
    groups[11] = whole(ring(larm0, 0));                  // left shoulder
    groups[12] = whole(ring(rarm0, 0));                  // right shoulder
    groups[13] = whole(ring(larm0, 1));                  // left elbow
    groups[14] = whole(ring(rarm0, 1));                  // right elbow
    groups[15] = whole(ring(larm0, 2));                  // left wrist
    groups[16] = whole(ring(rarm0, 2));                  // right wrist
    std::vector<double> ereg(kNumEvalJoints * v, 0.0);
    for (std::size_t q = 0; q < kNumEvalJoints; ++q) {
        if (groups[q].empty()) throw ConfigError("toy asset: empty eval group");
        const double w = 1.0 / double(groups[q].size());
        for (int i : groups[q]) ereg[q * v + std::size_t(i)] = w;
    }

    // smooth deterministic blend shapes, centimeter scale; the first one is
    // a global inflate so beta_0 visibly changes body size
    std::vector<double> shapedirs(10 * v * 3);
    for (int s = 0; s < 10; ++s) {
        double dir[3], nrm[3];
        for (int c = 0; c < 3; ++c) dir[c] = rng.normal();
        for (int c = 0; c < 3; ++c) nrm[c] = rng.normal();
        const double dn = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        const double nn = std::sqrt(nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]);
        const double freq = rng.uniform(2.0, 6.0);
        const double phase = rng.uniform(0.0, 6.28);
        for (std::size_t i = 0; i < v; ++i) {
            double proj = 0;
            for (int c = 0; c < 3; ++c) proj += verts[i * 3 + std::size_t(c)] * nrm[c] / nn;
            for (int c = 0; c < 3; ++c) {
                double val;
                if (s == 0)
                    val = 0.05 * verts[i * 3 + std::size_t(c)];
                else
                    val = 0.02 * (dir[c] / dn) * std::sin(freq * proj + phase);
                shapedirs[(std::size_t(s) * v + i) * 3 + std::size_t(c)] = val;
            }
        }
    }

    auto to_tensor = [](Dims dims, const std::vector<double>& src) {
        std::vector<T> vals(src.begin(), src.end());
        return Tensor<T>::from(std::move(dims), std::move(vals));
    };
    BodyModelAsset<T> asset;
    asset.template_verts = to_tensor({v, 3}, verts);
    asset.shapedirs = to_tensor({10, v * 3}, shapedirs);
    asset.skin_weights = to_tensor({v, joints.size()}, weights);
    asset.parents = parents;
    asset.joint_regressor = to_tensor({joints.size(), v}, jreg);
    asset.eval_regressor = to_tensor({kNumEvalJoints, v}, ereg);
    asset.faces = faces;
    asset.validate();
    return asset;
}

} // namespace jotr
