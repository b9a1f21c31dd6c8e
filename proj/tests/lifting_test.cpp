#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "jotr/grad_check.hpp"
#include "jotr/lifting.hpp"

using namespace jotr;

namespace {

Tensor<double> random_tensor(Dims dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel(dims));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(dims), std::move(v));
}

Tensor<double> projection_loss(const Tensor<double>& y, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(y.size());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return sum(mul(y, Tensor<double>::from(y.dims(), std::move(w))));
}

double gelu_ref(double x) {
    return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

void zero_params(ParamRegistry<double>& reg, const std::string& except_substring = "") {
    for (auto& [name, t] : reg.items()) {
        if (!except_substring.empty() && name.find(except_substring) != std::string::npos) continue;
        auto& vals = const_cast<Tensor<double>&>(t).mutable_values();
        std::fill(vals.begin(), vals.end(), 0.0);
    }
}

} // namespace

TEST_CASE("psi values and lambda gradient") {
    for (double lam : {1.5, 3.0, 7.0}) {
        auto one = psi(Tensor<double>::from({1}, {1.0}), Tensor<double>::from({1}, {lam}));
        CHECK(one.value() == 1.0);
    }
    auto half = psi(Tensor<double>::from({1}, {0.5}), Tensor<double>::from({1}, {3.0}));
    CHECK(half.value() == 0.125);

    // d psi / d lambda at (0.5, 3) = 0.125 * ln 0.5
    auto lam = Tensor<double>::from({1}, {3.0});
    lam.set_requires_grad(true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        tape.backward(psi(Tensor<double>::from({1}, {0.5}), lam));
    }
    const double expect = 0.125 * std::log(0.5);
    CHECK(lam.grad()[0] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(lam.grad()[0] == doctest::Approx(-0.08664).epsilon(1e-3));

    auto rep = grad_check(
        [](const std::vector<Tensor<double>>& in) { return sum(psi(in[0], in[1])); },
        {Tensor<double>::from({3}, {0.2, 0.5, 0.9}), Tensor<double>::from({1}, {3.0})});
    INFO(rep.worst);
    CHECK(rep.pass);
}

TEST_CASE("build_rrc coordinate formulas") {
    auto lam3 = Tensor<double>::from({1}, {3.0});
    auto rrc = build_rrc(2, 2, 2, lam3); // [3,2,2,2]
    REQUIRE(rrc.dims() == Dims{3, 2, 2, 2});
    auto at = [&](std::size_t c, std::size_t i, std::size_t j, std::size_t k) {
        return rrc[((c * 2 + i) * 2 + j) * 2 + k];
    };
    // x over k: {0.25, 0.75}
    CHECK(at(0, 0, 0, 0) == 0.25);
    CHECK(at(0, 0, 0, 1) == 0.75);
    CHECK(at(0, 1, 1, 1) == 0.75);
    // y over j
    CHECK(at(1, 0, 0, 0) == 0.25);
    CHECK(at(1, 0, 1, 0) == 0.75);
    // z over i with lambda 3: {0.25^3, 0.75^3}
    CHECK(at(2, 0, 0, 0) == doctest::Approx(0.015625).epsilon(1e-15));
    CHECK(at(2, 1, 0, 0) == doctest::Approx(0.421875).epsilon(1e-15));
    for (std::size_t i = 0; i < rrc.size(); ++i) {
        CHECK(rrc[i] > 0.0);
        CHECK(rrc[i] < 1.0);
    }

    // lambda at the clamp boundary gives uniform z spacing
    auto flat = build_rrc(4, 1, 1, Tensor<double>::from({1}, {1.0}));
    for (int i = 0; i + 1 < 4; ++i) {
        const double gap = flat[std::size_t(2 * 4 + i + 1)] - flat[std::size_t(2 * 4 + i)];
        CHECK(gap == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("rrc depth spacing grows strictly for lambda > 1") {
    for (double lam : {1.2, 2.0, 3.0, 5.5}) {
        auto rrc = build_rrc(8, 1, 1, Tensor<double>::from({1}, {lam}));
        double prev_z = -1, prev_gap = -1;
        for (int i = 0; i < 8; ++i) {
            const double z = rrc[std::size_t(2 * 8 + i)];
            CHECK(z > prev_z); // strictly increasing in depth index
            if (prev_z >= 0) {
                const double gap = z - prev_z;
                if (prev_gap >= 0) CHECK(gap > prev_gap); // convexity: gaps grow
                prev_gap = gap;
            }
            prev_z = z;
        }
    }
}

TEST_CASE("lift zero propagation and shape contract") {
    Rng rng(11);
    ParamRegistry<double> reg;
    Lifting<double> lifting(reg, "lift", 4, 2, 2, 2, 2, 1, rng);

    auto coarse = lifting.lift_coarse(Tensor<double>::zeros({4, 2, 2}));
    REQUIRE(coarse.dims() == Dims{4, 2, 2, 2});
    for (std::size_t i = 0; i < coarse.size(); ++i) CHECK(coarse[i] == 0.0);

    // with zero features the conv block sees exactly [zeros ; RRC]
    auto out = lifting.lift(Tensor<double>::zeros({4, 2, 2}));
    REQUIRE(out.dims() == Dims{4, 2, 2, 2});
    auto rrc = build_rrc(2, 2, 2, lifting.lambda);
    auto manual_in = concat<double>({Tensor<double>::zeros({4, 2, 2, 2}), rrc}, 0);
    auto manual = conv3d(manual_in, lifting.conv_weight, lifting.conv_bias, 1, 1);
    auto tokens = gelu(lifting.conv_norm(grid_to_tokens(manual)));
    auto manual_out = tokens_to_grid(tokens, {4, 2, 2, 2});
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == manual_out[i]);

    auto rnd = random_tensor({4, 2, 2}, rng);
    CHECK(lifting.lift(rnd).dims() == Dims{4, 2, 2, 2});
}

TEST_CASE("single-cell lift matches a dense-layer oracle") {
    Rng rng(13);
    const std::size_t c = 3;
    ParamRegistry<double> reg;
    Lifting<double> lifting(reg, "lift", c, 1, 1, 1, 1, 1, rng);
    auto f2d = random_tensor({c, 1, 1}, rng);

    auto out = lifting.lift(f2d);
    REQUIRE(out.dims() == Dims{c, 1, 1, 1});

    // oracle: 2-layer MLP, concat RRC point (0.5, 0.5, 0.5^lambda), center
    // tap of the 3x3x3 conv, layer norm, gelu
    std::vector<double> hidden(c, 0.0);
    for (std::size_t o = 0; o < c; ++o) {
        double acc = lifting.lift_mlp.layers[0].bias[o];
        for (std::size_t i = 0; i < c; ++i)
            acc += f2d[i] * lifting.lift_mlp.layers[0].weight.at(i, o);
        hidden[o] = gelu_ref(acc);
    }
    std::vector<double> lifted(c, 0.0); // D=1 so C*D == C
    for (std::size_t o = 0; o < c; ++o) {
        double acc = lifting.lift_mlp.layers[1].bias[o];
        for (std::size_t i = 0; i < c; ++i)
            acc += hidden[i] * lifting.lift_mlp.layers[1].weight.at(i, o);
        lifted[o] = acc;
    }
    std::vector<double> cell(c + 3);
    for (std::size_t i = 0; i < c; ++i) cell[i] = lifted[i];
    cell[c] = 0.5;
    cell[c + 1] = 0.5;
    cell[c + 2] = std::pow(0.5, lifting.lambda.value());
    std::vector<double> conv(c, 0.0);
    for (std::size_t o = 0; o < c; ++o) {
        double acc = lifting.conv_bias[o];
        for (std::size_t i = 0; i < c + 3; ++i) {
            // kernel center of [C, C+3, 3,3,3]
            const std::size_t idx = ((o * (c + 3) + i) * 27) + 13;
            acc += lifting.conv_weight[idx] * cell[i];
        }
        conv[o] = acc;
    }
    const double mu = std::accumulate(conv.begin(), conv.end(), 0.0) / double(c);
    double var = 0;
    for (double v : conv) var += (v - mu) * (v - mu);
    var /= double(c);
    for (std::size_t o = 0; o < c; ++o) {
        const double normed = (conv[o] - mu) / std::sqrt(var + 1e-5);
        const double expect = gelu_ref(normed); // gain 1, bias 0 at init
        CHECK(out[o] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("encoder with zeroed weights is the identity") {
    Rng rng(17);
    ParamRegistry<double> reg;
    TransformerEncoder<double> enc(reg, "enc", 4, 6, 2, 12, 2, rng);
    zero_params(reg, ".ln"); // keep layer norm gains at 1? they were zeroed too
    // restore layer norm gains to 1 (zeroing swept them)
    for (auto& [name, t] : reg.items())
        if (name.find(".gain") != std::string::npos) {
            auto& vals = const_cast<Tensor<double>&>(t).mutable_values();
            std::fill(vals.begin(), vals.end(), 1.0);
        }
    auto x = random_tensor({4, 6}, rng);
    auto y = enc(x);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("single-token attention reduces to value/output projection") {
    Rng rng(19);
    ParamRegistry<double> reg;
    MultiHeadAttention<double> mha(reg, "mha", 4, 2, rng);
    auto q = random_tensor({3, 4}, rng);
    auto kv = random_tensor({1, 4}, rng);
    auto out = mha(q, kv);
    // softmax over one key is 1, so every query row sees wo(wv(kv))
    auto expect = mha.wo(mha.wv(kv));
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(out.at(r, c) == doctest::Approx(expect.at(0, c)).epsilon(1e-12));
}

TEST_CASE("two-token encoder layer matches a hand-computed oracle") {
    Rng rng(23);
    const std::size_t c = 4;
    ParamRegistry<double> reg;
    EncoderLayer<double> layer(reg, "layer", c, 1, 8, rng);
    // give the zero-initialized biases some texture
    for (auto& [name, t] : reg.items())
        if (name.find(".bias") != std::string::npos) {
            auto& vals = const_cast<Tensor<double>&>(t).mutable_values();
            for (auto& v : vals) v = rng.uniform(-0.3, 0.3);
        }
    auto x = random_tensor({2, c}, rng);
    auto out = layer(x);

    auto dense = [&](const Linear<double>& lin, const std::vector<double>& in) {
        std::vector<double> r(lin.out_features());
        for (std::size_t o = 0; o < r.size(); ++o) {
            double acc = lin.bias[o];
            for (std::size_t i = 0; i < in.size(); ++i) acc += in[i] * lin.weight.at(i, o);
            r[o] = acc;
        }
        return r;
    };
    auto lnorm = [&](const LayerNorm<double>& ln, std::vector<double> in) {
        double mu = std::accumulate(in.begin(), in.end(), 0.0) / double(in.size());
        double var = 0;
        for (double v : in) var += (v - mu) * (v - mu);
        var /= double(in.size());
        for (std::size_t i = 0; i < in.size(); ++i)
            in[i] = (in[i] - mu) / std::sqrt(var + 1e-5) * ln.gain[i] + ln.bias[i];
        return in;
    };

    std::vector<std::vector<double>> rows = {{x[0], x[1], x[2], x[3]}, {x[4], x[5], x[6], x[7]}};
    std::vector<std::vector<double>> h = {lnorm(layer.ln1, rows[0]), lnorm(layer.ln1, rows[1])};
    std::vector<std::vector<double>> qs, ks, vs;
    for (auto& r : h) {
        qs.push_back(dense(layer.attn.wq, r));
        ks.push_back(dense(layer.attn.wk, r));
        vs.push_back(dense(layer.attn.wv, r));
    }
    for (int r = 0; r < 2; ++r) {
        // Eq. 1, single head: softmax(q k^T / sqrt(C)) v
        double s0 = 0, s1 = 0;
        for (std::size_t i = 0; i < c; ++i) {
            s0 += qs[std::size_t(r)][i] * ks[0][i];
            s1 += qs[std::size_t(r)][i] * ks[1][i];
        }
        s0 /= std::sqrt(double(c));
        s1 /= std::sqrt(double(c));
        const double m = std::max(s0, s1);
        const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
        const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        std::vector<double> attn_out(c);
        for (std::size_t i = 0; i < c; ++i) attn_out[i] = a0 * vs[0][i] + a1 * vs[1][i];
        attn_out = dense(layer.attn.wo, attn_out);
        std::vector<double> mid(c);
        for (std::size_t i = 0; i < c; ++i) mid[i] = rows[std::size_t(r)][i] + attn_out[i];

        auto f = lnorm(layer.ln2, mid);
        auto ff = dense(layer.ff1, f);
        for (auto& v : ff) v = gelu_ref(v);
        ff = dense(layer.ff2, ff);
        for (std::size_t i = 0; i < c; ++i) {
            const double expect = mid[i] + ff[i];
            CHECK(std::fabs(out.at(std::size_t(r), i) - expect) < 1e-10);
        }
    }
}

TEST_CASE("encode3d is consistent under cell permutations") {
    Rng rng(29);
    ParamRegistry<double> reg;
    Lifting<double> lifting(reg, "lift", 4, 2, 2, 2, 2, 1, rng);
    auto f3d = random_tensor({4, 2, 2, 2}, rng);
    auto out = lifting.encode3d(f3d);

    // permute the (h, w) cells within every depth slice, and the positional
    // rows with them
    const std::size_t hw = 4, d = 2, c = 4;
    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    auto permuted = Tensor<double>::zeros({4, 2, 2, 2});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dd = 0; dd < d; ++dd)
            for (std::size_t p = 0; p < hw; ++p)
                permuted.mutable_values()[(ch * d + dd) * hw + perm[p]] =
                    f3d[(ch * d + dd) * hw + p];

    auto& pos = lifting.encoder.pos;
    auto saved = pos.values();
    for (std::size_t dd = 0; dd < d; ++dd)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch)
                pos.mutable_values()[(dd * hw + perm[p]) * c + ch] =
                    saved[(dd * hw + p) * c + ch];

    auto out_perm = lifting.encode3d(permuted);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dd = 0; dd < d; ++dd)
            for (std::size_t p = 0; p < hw; ++p)
                CHECK(out_perm[(ch * d + dd) * hw + perm[p]] ==
                      doctest::Approx(out[(ch * d + dd) * hw + p]).epsilon(1e-12));
}

TEST_CASE("lift and encode3d pass grad_check including lambda") {
    Rng rng(31);
    ParamRegistry<double> reg;
    Lifting<double> lifting(reg, "lift", 4, 2, 2, 2, 2, 1, rng);
    for (int trial = 0; trial < 3; ++trial) {
        auto f2d = random_tensor({4, 2, 2}, rng);
        auto rep = grad_check(
            [&lifting](const std::vector<Tensor<double>>& in) {
                return projection_loss(lifting.encode3d(lifting.lift(in[0])), 47);
            },
            {f2d, lifting.lambda, lifting.conv_weight, lifting.lift_mlp.layers[0].weight});
        INFO(rep.worst);
        CHECK(rep.pass);
    }
}

TEST_CASE("conv3d matches a direct oracle") {
    Rng rng(37);
    const std::size_t cin = 2, cout = 2, e = 3, k = 3, pad = 1;
    auto x = random_tensor({cin, e, e, e}, rng);
    auto w = random_tensor({cout, cin, k, k, k}, rng);
    auto b = random_tensor({cout}, rng);
    auto y = conv3d(x, w, b, 1, pad);
    REQUIRE(y.dims() == Dims{cout, e, e, e});
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t od = 0; od < e; ++od)
            for (std::size_t oi = 0; oi < e; ++oi)
                for (std::size_t oj = 0; oj < e; ++oj) {
                    double acc = b[co];
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t kd = 0; kd < k; ++kd)
                            for (std::size_t ki = 0; ki < k; ++ki)
                                for (std::size_t kj = 0; kj < k; ++kj) {
                                    const long dd = long(od + kd) - long(pad);
                                    const long ii = long(oi + ki) - long(pad);
                                    const long jj = long(oj + kj) - long(pad);
                                    if (dd < 0 || dd >= long(e) || ii < 0 || ii >= long(e) ||
                                        jj < 0 || jj >= long(e))
                                        continue;
                                    acc += w[(((co * cin + ci) * k + kd) * k + ki) * k + kj] *
                                           x[((ci * e + std::size_t(dd)) * e + std::size_t(ii)) * e +
                                             std::size_t(jj)];
                                }
                    CHECK(std::fabs(y[((co * e + od) * e + oi) * e + oj] - acc) < 1e-12);
                }
}
