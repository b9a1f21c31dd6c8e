#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>

#include "jotr/archive.hpp"
#include "jotr/grad_check.hpp"
#include "jotr/nn.hpp"
#include "jotr/ops.hpp"
#include "jotr/rng.hpp"

using namespace jotr;

namespace {

Tensor<double> random_tensor(Dims dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel(dims));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(dims), std::move(v));
}

// Fixed random projection so vector-valued ops reduce to a scalar loss.
Tensor<double> project_loss(const Tensor<double>& y, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(y.size());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return sum(mul(y, Tensor<double>::from(y.dims(), std::move(w))));
}

} // namespace

TEST_CASE("matmul identity and annihilator") {
    Rng rng(7);
    auto b = random_tensor({3, 5}, rng);
    auto eye = Tensor<double>::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.mutable_values()[i * 3 + i] = 1.0;
    auto prod = matmul(eye, b);
    for (std::size_t i = 0; i < b.size(); ++i) CHECK(prod[i] == b[i]);

    auto zero = Tensor<double>::zeros({5, 2});
    auto z = matmul(b, zero);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0);
}

TEST_CASE("matmul value and gradients match triple-loop oracle") {
    Rng rng(11);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto r = random_tensor({3, 2}, rng); // projection weights

    // oracle forward
    double c_oracle[3][2] = {};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 4; ++k) c_oracle[i][j] += a.at(i, k) * b.at(k, j);

    // oracle gradients of loss = sum_ij r_ij * c_ij
    double da_oracle[3][4] = {}, db_oracle[4][2] = {};
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 4; ++k)
            for (int j = 0; j < 2; ++j) da_oracle[i][k] += r.at(i, j) * b.at(k, j);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 2; ++j)
            for (int i = 0; i < 3; ++i) db_oracle[k][j] += a.at(i, k) * r.at(i, j);

    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto c = matmul(a, b);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 2; ++j)
                CHECK(std::fabs(c.at(i, j) - c_oracle[i][j]) < 1e-12);
        tape.backward(sum(mul(c, r)));
    }
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 4; ++k)
            CHECK(std::fabs(a.grad()[i * 4 + k] - da_oracle[i][k]) < 1e-12);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 2; ++j)
            CHECK(std::fabs(b.grad()[k * 2 + j] - db_oracle[k][j]) < 1e-12);
}

TEST_CASE("matmul shape mismatch raises") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    CHECK_THROWS_AS((void)matmul(a, b), ShapeError);
}

TEST_CASE("softmax symmetry, stability, oracle") {
    auto two = softmax(Tensor<double>::from({2}, {0.0, 0.0}), 0);
    CHECK(two[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(two[1] == doctest::Approx(0.5).epsilon(1e-15));

    auto hot = softmax(Tensor<double>::from({2}, {1000.0, 0.0}), 0);
    CHECK(std::fabs(hot[0] - 1.0) < 1e-12);
    CHECK(std::fabs(hot[1] - 0.0) < 1e-12);
    CHECK(std::isfinite(hot[0]));

    Rng rng(3);
    auto x = random_tensor({5}, rng, -2.0, 2.0);
    auto y = softmax(x, 0);
    double denom = 0;
    for (std::size_t i = 0; i < 5; ++i) denom += std::exp(x[i]);
    double rowsum = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        const double expect = std::exp(x[i]) / denom;
        CHECK(std::fabs(y[i] - expect) / expect < 1e-12);
        rowsum += y[i];
    }
    CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("grad_check examples: matmul, softmax, constant") {
    Rng rng(21);
    auto a = random_tensor({3, 3}, rng);
    auto b = random_tensor({3, 3}, rng);
    auto rep = grad_check(
        [](const std::vector<Tensor<double>>& in) {
            return project_loss(matmul(in[0], in[1]), 99);
        },
        {a, b});
    INFO(rep.worst);
    CHECK(rep.pass);

    auto x = random_tensor({6}, rng, -2.0, 2.0);
    rep = grad_check(
        [](const std::vector<Tensor<double>>& in) { return project_loss(softmax(in[0], 0), 5); },
        {x});
    INFO(rep.worst);
    CHECK(rep.pass);

    // constant function: gradient exactly zero
    auto c = random_tensor({4}, rng);
    c.set_requires_grad(true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto loss = sum(mul(c.detach(), c.detach())); // no path to c
        auto anchored = add(loss, mul_scalar(sum(c), 0.0));
        tape.backward(anchored);
    }
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.grad()[i] == 0.0);
}

TEST_CASE("grad_check covers the whole diffcore op set") {
    Rng rng(1234);
    struct Case {
        const char* name;
        std::function<Tensor<double>(const std::vector<Tensor<double>>&)> fn;
        std::vector<Tensor<double>> inputs;
    };
    auto pos = [&](Dims d) { return random_tensor(d, rng, 0.3, 1.7); };
    auto any = [&](Dims d) { return random_tensor(d, rng, -1.5, 1.5); };

    std::vector<Case> cases;
    cases.push_back({"add_bcast",
                     [](const std::vector<Tensor<double>>& in) {
                         return project_loss(add(in[0], in[1]), 1);
                     },
                     {any({3, 4}), any({1, 4})}});
    cases.push_back({"sub", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(sub(in[0], in[1]), 2);
                     }, {any({5}), any({5})}});
    cases.push_back({"mul_bcast",
                     [](const std::vector<Tensor<double>>& in) {
                         return project_loss(mul(in[0], in[1]), 3);
                     },
                     {any({2, 3}), any({2, 1})}});
    cases.push_back({"div", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(div(in[0], in[1]), 4);
                     }, {any({4}), pos({4})}});
    cases.push_back({"exp", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(exp(in[0]), 5);
                     }, {any({6})}});
    cases.push_back({"log", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(log(in[0]), 6);
                     }, {pos({6})}});
    cases.push_back({"pow_const", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(pow(in[0], 2.7), 7);
                     }, {pos({5})}});
    cases.push_back({"pow_learnable_exponent",
                     [](const std::vector<Tensor<double>>& in) {
                         return project_loss(pow(in[0], in[1]), 8);
                     },
                     {pos({5}), pos({1})}});
    cases.push_back({"sigmoid", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(sigmoid(in[0]), 9);
                     }, {any({7})}});
    cases.push_back({"tanh", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(tanh(in[0]), 10);
                     }, {any({7})}});
    cases.push_back({"gelu", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(gelu(in[0]), 11);
                     }, {any({7})}});
    cases.push_back({"clamp_interior", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(clamp(in[0], -10.0, 10.0), 12);
                     }, {any({6})}});
    cases.push_back({"concat",
                     [](const std::vector<Tensor<double>>& in) {
                         return project_loss(concat<double>({in[0], in[1]}, 1), 13);
                     },
                     {any({2, 3}), any({2, 2})}});
    cases.push_back({"slice", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(slice(in[0], 1, 1, 2), 14);
                     }, {any({3, 4})}});
    cases.push_back({"gather", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(gather(in[0], {2, 0, 2}), 15);
                     }, {any({3, 3})}});
    cases.push_back({"sum", [](const std::vector<Tensor<double>>& in) { return sum(in[0]); },
                     {any({3, 3})}});
    cases.push_back({"mean_axis", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(mean_axis(in[0], 0), 16);
                     }, {any({4, 3})}});
    cases.push_back({"softmax_rows", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(softmax(in[0], 1), 17);
                     }, {any({3, 5})}});
    cases.push_back({"layer_norm",
                     [](const std::vector<Tensor<double>>& in) {
                         return project_loss(layer_norm(in[0], in[1], in[2]), 18);
                     },
                     {any({3, 6}), pos({6}), any({6})}});
    cases.push_back({"l2_normalize", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(l2_normalize(in[0]), 19);
                     }, {pos({3, 5})}});
    cases.push_back({"transpose", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(transpose(in[0]), 20);
                     }, {any({3, 4})}});
    cases.push_back({"reshape", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(reshape(in[0], {6, 2}), 21);
                     }, {any({3, 4})}});
    cases.push_back({"abs_away_from_zero", [](const std::vector<Tensor<double>>& in) {
                         return project_loss(abs(in[0]), 22);
                     }, {pos({6})}});

    for (auto& c : cases) {
        // 10 random restarts per op: perturb inputs with fresh noise
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<Tensor<double>> inputs;
            for (auto& base : c.inputs) {
                auto t = base.detach();
                for (auto& v : t.mutable_values()) v += rng.uniform(-0.05, 0.05);
                inputs.push_back(t);
            }
            auto rep = grad_check(c.fn, inputs);
            INFO(c.name << " trial " << trial << ": " << rep.worst
                        << " (max rel err " << rep.max_rel_err << ")");
            CHECK(rep.pass);
        }
    }
}

TEST_CASE("backward of a sum of losses equals sum of backwards") {
    Rng rng(77);
    auto a0 = random_tensor({4, 4}, rng);
    auto b0 = random_tensor({4, 4}, rng);

    auto loss1 = [](const Tensor<double>& a, const Tensor<double>& b) {
        return sum(mul(matmul(a, b), matmul(a, b)));
    };
    auto loss2 = [](const Tensor<double>& a, const Tensor<double>& b) {
        return mean(exp(mul_scalar(add(a, b), 0.3)));
    };

    // combined
    auto a = a0.detach(), b = b0.detach();
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        tape.backward(add(loss1(a, b), loss2(a, b)));
    }
    auto ga_combined = a.grad();
    auto gb_combined = b.grad();

    // separate
    auto a2 = a0.detach(), b2 = b0.detach();
    a2.set_requires_grad(true);
    b2.set_requires_grad(true);
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        tape.backward(loss1(a2, b2));
    }
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        tape.backward(loss2(a2, b2));
    }
    for (std::size_t i = 0; i < ga_combined.size(); ++i) {
        CHECK(std::fabs(ga_combined[i] - a2.grad()[i]) < 1e-10);
        CHECK(std::fabs(gb_combined[i] - b2.grad()[i]) < 1e-10);
    }
}

TEST_CASE("independent tapes run on separate threads") {
    auto worker = [](std::uint64_t seed, double* out) {
        Rng rng(seed);
        auto a = random_tensor({8, 8}, rng);
        a.set_requires_grad(true);
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto loss = sum(mul(matmul(a, transpose(a)), Tensor<double>::filled({8, 8}, 0.5)));
        tape.backward(loss);
        *out = a.grad()[3];
    };
    double r1 = 0, r2 = 0, r1_again = 0;
    std::thread t1(worker, 1, &r1);
    std::thread t2(worker, 2, &r2);
    t1.join();
    t2.join();
    worker(1, &r1_again);
    CHECK(r1 == r1_again); // same seed, same result regardless of the other thread
    CHECK(r1 != r2);
}

TEST_CASE("named tensor archive round-trips bit-exactly") {
    Rng rng(5);
    Archive a;
    a.add("template", {4, 3}, {1.f, 2.5f, -3.f, 0.f, 1e-7f, 42.f, -0.5f, 9.f, 8.f, 7.f, 6.f, 5.f});
    std::vector<float> big(60);
    for (auto& f : big) f = float(rng.normal());
    a.add("weights", {5, 4, 3}, big);
    a.add("scalar", {1}, {3.14f});

    const auto bytes = a.to_bytes();
    Archive back = Archive::from_bytes(bytes);
    const auto bytes2 = back.to_bytes();
    REQUIRE(bytes.size() == bytes2.size());
    CHECK(bytes == bytes2);

    CHECK(back.at("weights").dims == Dims{5, 4, 3});
    CHECK(back.at("template").data[1] == 2.5f);

    // property: random archives survive the round trip byte for byte
    for (int trial = 0; trial < 20; ++trial) {
        Archive r;
        const int n = 1 + int(rng.below(5));
        for (int e = 0; e < n; ++e) {
            Dims dims;
            const int rank = 1 + int(rng.below(4));
            for (int d = 0; d < rank; ++d) dims.push_back(1 + std::size_t(rng.below(4)));
            std::vector<float> data(numel(dims));
            for (auto& f : data) f = float(rng.normal(0.0, 100.0));
            r.add("entry" + std::to_string(e), dims, std::move(data));
        }
        const auto b1 = r.to_bytes();
        const auto b2 = Archive::from_bytes(b1).to_bytes();
        CHECK(b1 == b2);
    }
}

TEST_CASE("archive rejects malformed input") {
    Archive a;
    a.add("x", {2}, {1.f, 2.f});
    auto bytes = a.to_bytes();

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(Archive::from_bytes(bad_magic), IoError);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    CHECK_THROWS_AS(Archive::from_bytes(truncated), IoError);

    CHECK_THROWS_AS(a.add("x", {1}, {0.f}), IoError); // duplicate name
}

TEST_CASE("broadcasting rejects incompatible shapes") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({2, 4});
    CHECK_THROWS_AS((void)add(a, b), ShapeError);
    auto c = Tensor<double>::zeros({3});
    CHECK_THROWS_AS((void)add(a, c), ShapeError); // rank mismatch, not scalar
}
