#pragma once

#include <cmath>
#include <vector>

#include "jotr/nn.hpp"
#include "jotr/ops.hpp"

namespace jotr {

// softmax(Q K^T / sqrt(d)) V on already-projected single-head inputs.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("attention: rank-2 operands expected");
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
        throw ShapeError("attention: got Q " + dims_str(q.dims()) + ", K " + dims_str(k.dims()) +
                         ", V " + dims_str(v.dims()));
    const T scale = T(1) / std::sqrt(T(q.dim(1)));
    Tensor<T> scores = mul_scalar(matmul(q, transpose(k)), scale);
    return matmul(softmax(scores, 1), v);
}

// Multi-head wrapper with learned projections. The optional capture slot
// receives the head-averaged attention matrix [n_q, n_k] of the forward
// pass (plain values, no gradient).
template <typename T>
struct MultiHeadAttention {
    Linear<T> wq, wk, wv, wo;
    std::size_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamRegistry<T>& reg, const std::string& name, std::size_t channels,
                       std::size_t head_count, Rng& rng)
        : wq(reg, name + ".wq", channels, channels, rng),
          wk(reg, name + ".wk", channels, channels, rng),
          wv(reg, name + ".wv", channels, channels, rng),
          wo(reg, name + ".wo", channels, channels, rng),
          heads(head_count) {
        if (head_count == 0 || channels % head_count != 0)
            throw ConfigError("attention: head count " + std::to_string(head_count) +
                              " must divide channels " + std::to_string(channels));
    }

    Tensor<T> operator()(const Tensor<T>& query_in, const Tensor<T>& key_in,
                         std::vector<T>* attn_capture = nullptr) const {
        const std::size_t c = wq.out_features();
        const std::size_t dh = c / heads;
        Tensor<T> q = wq(query_in);
        Tensor<T> k = wk(key_in);
        Tensor<T> v = wv(key_in);
        const T scale = T(1) / std::sqrt(T(dh));

        if (attn_capture) attn_capture->assign(q.dim(0) * k.dim(0), T(0));

        std::vector<Tensor<T>> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor<T> qh = slice(q, 1, h * dh, dh);
            Tensor<T> kh = slice(k, 1, h * dh, dh);
            Tensor<T> vh = slice(v, 1, h * dh, dh);
            Tensor<T> weights = softmax(mul_scalar(matmul(qh, transpose(kh)), scale), 1);
            if (attn_capture) {
                const T inv = T(1) / T(heads);
                for (std::size_t i = 0; i < weights.size(); ++i)
                    (*attn_capture)[i] += weights[i] * inv;
            }
            outs.push_back(matmul(weights, vh));
        }
        Tensor<T> merged = heads == 1 ? outs[0] : concat(outs, 1);
        return wo(merged);
    }
};

// Pre-norm encoder layer: x += MHA(LN(x)); x += FFN(LN(x)).
template <typename T>
struct EncoderLayer {
    LayerNorm<T> ln1, ln2;
    MultiHeadAttention<T> attn;
    Linear<T> ff1, ff2;

    EncoderLayer() = default;
    EncoderLayer(ParamRegistry<T>& reg, const std::string& name, std::size_t channels,
                 std::size_t heads, std::size_t ff_width, Rng& rng)
        : ln1(reg, name + ".ln1", channels),
          ln2(reg, name + ".ln2", channels),
          attn(reg, name + ".attn", channels, heads, rng),
          ff1(reg, name + ".ff1", channels, ff_width, rng),
          ff2(reg, name + ".ff2", ff_width, channels, rng) {}

    Tensor<T> operator()(Tensor<T> x) const {
        Tensor<T> h = ln1(x);
        x = add(x, attn(h, h));
        Tensor<T> f = ln2(x);
        return add(x, ff2(gelu(ff1(f))));
    }
};

// Encoder stack over a fixed token count with learned positional embeddings.
template <typename T>
struct TransformerEncoder {
    Tensor<T> pos; // [tokens, C]
    std::vector<EncoderLayer<T>> layers;

    TransformerEncoder() = default;
    TransformerEncoder(ParamRegistry<T>& reg, const std::string& name, std::size_t tokens,
                       std::size_t channels, std::size_t heads, std::size_t ff_width,
                       std::size_t depth, Rng& rng) {
        pos = reg.add(name + ".pos",
                      Tensor<T>::from({tokens, channels},
                                      init_normal<T>(tokens * channels, 0.02, rng)));
        for (std::size_t l = 0; l < depth; ++l)
            layers.emplace_back(reg, name + ".layer" + std::to_string(l), channels, heads,
                                ff_width, rng);
    }

    Tensor<T> operator()(Tensor<T> tokens) const {
        tokens = add(tokens, pos);
        for (const auto& layer : layers) tokens = layer(tokens);
        return tokens;
    }
};

// Pre-norm decoder layer: self-attention over queries, cross-attention to
// the fused keys, then the feed-forward block.
template <typename T>
struct DecoderLayer {
    LayerNorm<T> ln1, ln2, ln3;
    MultiHeadAttention<T> self_attn, cross_attn;
    Linear<T> ff1, ff2;

    DecoderLayer() = default;
    DecoderLayer(ParamRegistry<T>& reg, const std::string& name, std::size_t channels,
                 std::size_t heads, std::size_t ff_width, Rng& rng)
        : ln1(reg, name + ".ln1", channels),
          ln2(reg, name + ".ln2", channels),
          ln3(reg, name + ".ln3", channels),
          self_attn(reg, name + ".self", channels, heads, rng),
          cross_attn(reg, name + ".cross", channels, heads, rng),
          ff1(reg, name + ".ff1", channels, ff_width, rng),
          ff2(reg, name + ".ff2", ff_width, channels, rng) {}

    Tensor<T> operator()(Tensor<T> x, const Tensor<T>& keys,
                         std::vector<T>* attn_capture = nullptr) const {
        Tensor<T> h = ln1(x);
        x = add(x, self_attn(h, h));
        Tensor<T> q = ln2(x);
        x = add(x, cross_attn(q, keys, attn_capture));
        Tensor<T> f = ln3(x);
        return add(x, ff2(gelu(ff1(f))));
    }
};

} // namespace jotr
