#include <cmath>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "fedlora/ops.hpp"
#include "fedlora/rng.hpp"
#include "fedlora/tensor.hpp"

using namespace fedlora;
using namespace fedlora::ad;
using fedlora::testing::finite_difference_check;

namespace {

Tensor rand_param(Tape& tape, Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::param(tape, std::move(shape), std::move(v));
}

Tensor rand_const(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::constant(std::move(shape), std::move(v));
}

// Random rank-1..3 shape with small dims.
Shape rand_shape(Rng& rng) {
    std::size_t r = 1 + rng.uniform_index(3);
    Shape s(r);
    for (auto& d : s) d = 1 + rng.uniform_index(4);
    return s;
}

// Scalarizes a tensor against a fixed weight so FD has a scalar root. The
// weight must be created once, outside the forward closure.
Tensor pin(const Tensor& w, const Tensor& t) {
    return sum_all(mul(t, w));
}

}  // namespace

TEST_CASE("sha256 known answers") {
    CHECK(sha256_hex(std::string("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    std::string longer(1000, 'x');
    CHECK(sha256_hex(longer) == sha256_hex(longer));
}

TEST_CASE("matmul identity maps any matrix to itself") {
    Rng rng(7);
    Tensor eye = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor a = rand_const(rng, {3, 3});
    Tensor out = matmul(eye, a);
    for (std::size_t i = 0; i < 9; ++i) CHECK(out.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-15));
}

TEST_CASE("analytic gradient of sum(x*x)") {
    Tape tape;
    Tensor x = Tensor::param(tape, {3}, {1, 2, 3});
    Tensor loss = sum_all(mul(x, x));
    CHECK(loss.item() == doctest::Approx(14.0));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("finite differences: elementwise ops with broadcasting") {
    Rng rng(11);
    for (int rep = 0; rep < 5; ++rep) {
        Tape tape;
        Shape suffix = rand_shape(rng);
        Shape full = suffix;
        full.insert(full.begin(), 1 + rng.uniform_index(3));
        Tensor a = rand_param(tape, rng, full);
        Tensor b = rand_param(tape, rng, suffix);
        auto report = finite_difference_check(tape, {a, b}, [&] {
            Tensor s = add(a, b);
            Tensor m = mul(a, b);
            return sum_all(mul(s, m));
        });
        CHECK(report.max_rel_err < 1e-4);
        Tensor w = rand_const(rng, full);
        auto report2 = finite_difference_check(tape, {a, b}, [&] { return pin(w, sub(scale(a, 1.7), b)); });
        CHECK(report2.max_rel_err < 1e-4);
    }
}

TEST_CASE("finite differences: matmul and bmm") {
    Rng rng(13);
    for (int rep = 0; rep < 5; ++rep) {
        Tape tape;
        std::size_t m = 1 + rng.uniform_index(4), k = 1 + rng.uniform_index(4), n = 1 + rng.uniform_index(4);
        Tensor a = rand_param(tape, rng, {m, k});
        Tensor b = rand_param(tape, rng, {k, n});
        Tensor w = rand_const(rng, {m, n});
        auto report = finite_difference_check(tape, {a, b}, [&] { return sum_all(mul(matmul(a, b), w)); });
        CHECK(report.max_rel_err < 1e-4);

        std::size_t bs = 1 + rng.uniform_index(3);
        Tensor ba = rand_param(tape, rng, {bs, m, k});
        Tensor bb = rand_param(tape, rng, {bs, k, n});
        Tensor bw = rand_const(rng, {bs, m, n});
        auto breport = finite_difference_check(tape, {ba, bb}, [&] { return sum_all(mul(bmm(ba, bb), bw)); });
        CHECK(breport.max_rel_err < 1e-4);
    }
}

TEST_CASE("finite differences: layout ops") {
    Rng rng(17);
    for (int rep = 0; rep < 5; ++rep) {
        Tape tape;
        Tensor a = rand_param(tape, rng, {2, 3, 4});
        Tensor w_resh = rand_const(rng, {6, 4});
        auto r1 = finite_difference_check(tape, {a}, [&] { return pin(w_resh, reshape(a, {6, 4})); });
        CHECK(r1.max_rel_err < 1e-4);
        Tensor w_perm = rand_const(rng, {4, 2, 3});
        auto r2 = finite_difference_check(tape, {a}, [&] { return pin(w_perm, permute(a, {2, 0, 1})); });
        CHECK(r2.max_rel_err < 1e-4);
        Tensor w_slice = rand_const(rng, {2, 2, 4});
        auto r3 = finite_difference_check(tape, {a}, [&] { return pin(w_slice, slice(a, 1, 1, 3)); });
        CHECK(r3.max_rel_err < 1e-4);
        Tensor b = rand_param(tape, rng, {2, 2, 4});
        Tensor w_cat = rand_const(rng, {2, 5, 4});
        auto r4 = finite_difference_check(tape, {a, b}, [&] { return pin(w_cat, concat({a, b}, 1)); });
        CHECK(r4.max_rel_err < 1e-4);
        Tensor m = rand_param(tape, rng, {4, 3});
        Tensor w_tr = rand_const(rng, {3, 4});
        auto r5 = finite_difference_check(tape, {m}, [&] { return pin(w_tr, transpose(m)); });
        CHECK(r5.max_rel_err < 1e-4);
        Tensor table = rand_param(tape, rng, {5, 3});
        std::vector<std::size_t> idx = {4, 0, 2, 0};
        Tensor w_gather = rand_const(rng, {4, 3});
        auto r6 = finite_difference_check(tape, {table}, [&] { return pin(w_gather, gather_rows(table, idx)); });
        CHECK(r6.max_rel_err < 1e-4);
    }
}

TEST_CASE("finite differences: nonlinearities and normalization") {
    Rng rng(19);
    for (int rep = 0; rep < 5; ++rep) {
        Tape tape;
        Shape s = rand_shape(rng);
        // keep relu inputs away from the kink
        std::vector<double> rv(shape_numel(s));
        for (auto& x : rv) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
        Tensor xr = Tensor::param(tape, s, rv);
        Tensor ws = rand_const(rng, s);
        auto r1 = finite_difference_check(tape, {xr}, [&] { return pin(ws, relu(xr)); });
        CHECK(r1.max_rel_err < 1e-4);

        Tensor xg = rand_param(tape, rng, s, -2.0, 2.0);
        auto r2 = finite_difference_check(tape, {xg}, [&] { return pin(ws, gelu(xg)); });
        CHECK(r2.max_rel_err < 1e-4);

        Tensor xs = rand_param(tape, rng, {2, 5}, -2.0, 2.0);
        Tensor wsm = rand_const(rng, {2, 5});
        auto r3 = finite_difference_check(tape, {xs}, [&] { return pin(wsm, softmax(xs)); });
        CHECK(r3.max_rel_err < 1e-4);

        std::size_t d = 4 + rng.uniform_index(4);
        Tensor xl = rand_param(tape, rng, {3, d});
        Tensor g = rand_param(tape, rng, {d}, 0.5, 1.5);
        Tensor b = rand_param(tape, rng, {d});
        Tensor wln = rand_const(rng, {3, d});
        auto r4 = finite_difference_check(tape, {xl, g, b}, [&] { return pin(wln, layer_norm(xl, g, b)); });
        CHECK(r4.max_rel_err < 1e-4);
    }
}

TEST_CASE("finite differences: cross entropy through a linear layer on 4x5 logits") {
    Rng rng(23);
    for (int seed = 0; seed < 5; ++seed) {
        Tape tape;
        Tensor x = rand_param(tape, rng, {4, 3});
        Tensor w = rand_param(tape, rng, {5, 3});
        Tensor b = rand_param(tape, rng, {5});
        std::vector<int> labels = {0, 3, 4, 1};
        auto report = finite_difference_check(tape, {x, w, b}, [&] {
            return mean_all(cross_entropy_logits(linear(x, w, b), labels));
        });
        CHECK(report.max_rel_err < 1e-4);
    }
}

TEST_CASE("finite differences: squared distance and reductions") {
    Rng rng(29);
    for (int rep = 0; rep < 5; ++rep) {
        Tape tape;
        Shape s = rand_shape(rng);
        Tensor a = rand_param(tape, rng, s);
        Tensor b = rand_param(tape, rng, s);
        auto r1 = finite_difference_check(tape, {a, b}, [&] { return squared_distance(a, b); });
        CHECK(r1.max_rel_err < 1e-4);
        auto r2 = finite_difference_check(tape, {a}, [&] { return mean_all(mul(a, a)); });
        CHECK(r2.max_rel_err < 1e-4);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(31);
    Tensor x = rand_const(rng, {6, 7}, -3.0, 3.0);
    Tensor y = softmax(x);
    for (std::size_t r = 0; r < 6; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < 7; ++j) total += y.data()[r * 7 + j];
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("backward contract") {
    SUBCASE("non-scalar root is rejected") {
        Tape tape;
        Tensor x = Tensor::param(tape, {3}, {1, 2, 3});
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), ContractError);
    }
    SUBCASE("constant root leaves grads zero") {
        Tape tape;
        Tensor x = Tensor::param(tape, {2}, {1, 2});
        x.zero_grad();
        Tensor c = Tensor::scalar(5.0);
        tape.backward(c);
        CHECK(x.grad()[0] == 0.0);
        CHECK(x.grad()[1] == 0.0);
    }
    SUBCASE("root = sum(leaf) gives unit grads and clears the tape") {
        Tape tape;
        Tensor x = Tensor::param(tape, {4}, {1, 2, 3, 4});
        Tensor loss = sum_all(x);
        CHECK(tape.size() > 0);
        tape.backward(loss);
        CHECK(tape.size() == 0);
        for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
    }
}

TEST_CASE("gradient accumulation is additive across backward calls") {
    Rng rng(37);
    auto run_combined = [&](std::uint64_t seed) {
        Rng r(seed);
        Tape tape;
        Tensor x = rand_param(tape, r, {5});
        Tensor l1 = sum_all(mul(x, x));
        Tensor l2 = mean_all(gelu(x));
        tape.backward(add(l1, l2));
        return x.grad();
    };
    auto run_split = [&](std::uint64_t seed) {
        Rng r(seed);
        Tape tape;
        Tensor x = rand_param(tape, r, {5});
        tape.backward(sum_all(mul(x, x)));
        tape.backward(mean_all(gelu(x)));
        return x.grad();
    };
    auto g1 = run_combined(99), g2 = run_split(99);
    for (std::size_t i = 0; i < 5; ++i) CHECK(g1[i] == doctest::Approx(g2[i]).epsilon(1e-12));
}

TEST_CASE("determinism: identical seeds give bit-identical results") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tape tape;
        Tensor a = rand_param(tape, rng, {4, 4});
        Tensor b = rand_param(tape, rng, {4, 4});
        Tensor out = softmax(matmul(gelu(a), b));
        tape.backward(mean_all(out));
        return std::make_pair(out.data(), a.grad());
    };
    auto [v1, g1] = run(123);
    auto [v2, g2] = run(123);
    CHECK(v1 == v2);
    CHECK(g1 == g2);
    auto [v3, g3] = run(124);
    CHECK(v1 != v3);
}

TEST_CASE("shape errors name the primitive and the shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
    CHECK_THROWS_AS(reshape(a, {7}), ShapeError);
    CHECK_THROWS_AS(slice(a, 0, 1, 5), ShapeError);
}

TEST_CASE("non-finite outputs raise a numeric error") {
    Tensor big = Tensor::full({2}, 1e308);
    CHECK_THROWS_AS(mul(big, big), NumericError);
    CHECK_THROWS_AS(Tensor::constant({1}, {std::nan("")}), NumericError);
}

TEST_CASE("no-grad scope suppresses recording") {
    Tape tape;
    Tensor x = Tensor::param(tape, {3}, {1, 2, 3});
    {
        NoGradScope ng(tape);
        Tensor y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
        CHECK(tape.size() == 0);
    }
    Tensor y = mul(x, x);
    CHECK(y.requires_grad());
    CHECK(tape.size() == 1);
    tape.clear();
}

TEST_CASE("mixing tensors from different tapes is an error") {
    Tape t1, t2;
    Tensor a = Tensor::param(t1, {2}, {1, 2});
    Tensor b = Tensor::param(t2, {2}, {3, 4});
    CHECK_THROWS_AS(add(a, b), ContractError);
}

TEST_CASE("cross entropy rejects out-of-range labels") {
    Tensor logits = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(cross_entropy_logits(logits, {0, 3}), ContractError);
    CHECK_THROWS_AS(cross_entropy_logits(logits, {0}), ShapeError);
}
