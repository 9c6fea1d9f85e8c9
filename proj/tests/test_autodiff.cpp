#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "memorykt/gradcheck.hpp"
#include "memorykt/ops.hpp"
#include "memorykt/params.hpp"
#include "memorykt/tape.hpp"

using namespace memorykt::ad;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, scale);
    for (long i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

// Finite-difference check of a single primitive: inputs live in a ParamStore,
// the builder applies the op and reduces to a scalar with sum_all.
double fd_check_primitive(
    ParamStore<double>& store,
    const std::function<Var<double>(Tape<double>&, ParamBinder&)>& build) {
    return grad_check(store, build, 1e-5, 1e-4).worst();
}

}  // namespace

TEST_CASE("closed forms of elementwise primitives") {
    Tape<double> t;
    auto x = t.constant(Tensor<double>({3}, {0.0, -1.0, 1.0}));

    auto sp = softplus(x);
    CHECK(t.value(sp)[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));

    auto sg = sigmoid(x);
    CHECK(t.value(sg)[0] == Catch::Approx(0.5).epsilon(1e-12));

    auto rl = relu(x);
    CHECK(t.value(rl)[0] == 0.0);
    CHECK(t.value(rl)[1] == 0.0);
    CHECK(t.value(rl)[2] == 1.0);
}

TEST_CASE("relu subgradient convention: 0 at the kink") {
    Tape<double> t;
    auto x = t.leaf(Tensor<double>({3}, {-1.0, 0.0, 1.0}));
    auto loss = sum_all(relu(x));
    t.backward(loss);
    const auto& g = t.grad(x);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == 1.0);
}

TEST_CASE("sum gradient is all-ones") {
    Tape<double> t;
    auto w = t.leaf(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto loss = sum_all(w);
    t.backward(loss);
    const auto& g = t.grad(w);
    for (long i = 0; i < g.numel(); ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("mse of constants yields zero gradients for unrelated params") {
    Tape<double> t;
    auto w = t.leaf(Tensor<double>({2}, {1.0, -1.0}));
    auto x = t.constant(Tensor<double>({4}, {0.5, 0.25, -1.0, 2.0}));
    auto loss = add(mse(x, x), scale(sum_all(w), 0.0));
    t.backward(loss);
    CHECK(t.value(loss)[0] == 0.0);
    const auto& g = t.grad(w);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
}

TEST_CASE("shape mismatches are rejected with the op named") {
    Tape<double> t;
    auto a = t.constant(Tensor<double>({2, 3}));
    auto b = t.constant(Tensor<double>({2, 2}));
    CHECK_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("matmul"));
    CHECK_THROWS_WITH(mul(a, b), Catch::Matchers::ContainsSubstring("mul"));
    auto p = t.constant(Tensor<double>({2, 3}));
    CHECK_THROWS_AS(select_per_row(p, {0, 5}), std::invalid_argument);
    CHECK_THROWS_AS(slice_cols(p, 2, 5), std::invalid_argument);
}

TEST_CASE("backward requires a scalar loss") {
    Tape<double> t;
    auto a = t.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    auto y = relu(a);
    CHECK_THROWS_AS(t.backward(y), std::invalid_argument);
}

TEST_CASE("every primitive matches central finite differences") {
    std::mt19937_64 rng(20240817);

    SECTION("matmul") {
        for (int trial = 0; trial < 3; ++trial) {
            std::uniform_int_distribution<int> d(1, 4);
            const int m = d(rng), k = d(rng), n = d(rng);
            ParamStore<double> s;
            s.add("a", random_tensor({m, k}, rng));
            s.add("b", random_tensor({k, n}, rng));
            const double err = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
                return sum_all(matmul(bind("a"), bind("b")));
            });
            CHECK(err < 1e-4);
        }
    }

    SECTION("add with row broadcast") {
        ParamStore<double> s;
        s.add("a", random_tensor({3, 4}, rng));
        s.add("b", random_tensor({4}, rng));
        const double err = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            return sum_all(mul(add(bind("a"), bind("b")), add(bind("a"), bind("b"))));
        });
        CHECK(err < 1e-4);
    }

    SECTION("activations") {
        ParamStore<double> s;
        s.add("x", random_tensor({2, 5}, rng));
        for (auto* fn : {+[](Var<double> v) { return relu(v); },
                         +[](Var<double> v) { return sigmoid(v); },
                         +[](Var<double> v) { return softplus(v); },
                         +[](Var<double> v) { return tanh_op(v); }}) {
            const double err = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
                return sum_all(mul(fn(bind("x")), fn(bind("x"))));
            });
            CHECK(err < 1e-4);
        }
    }

    SECTION("concat and slice") {
        ParamStore<double> s;
        s.add("a", random_tensor({3, 2}, rng));
        s.add("b", random_tensor({3, 3}, rng));
        const double err = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            auto c = concat_cols(bind("a"), bind("b"));
            auto sl = slice_cols(c, 1, 3);
            return sum_all(mul(sl, sl));
        });
        CHECK(err < 1e-4);
    }

    SECTION("gather and select") {
        ParamStore<double> s;
        s.add("table", random_tensor({5, 3}, rng));
        s.add("p", random_tensor({4, 6}, rng));
        const double err1 = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            auto rows = gather_rows(bind("table"), {0, 2, 2, 4});
            return sum_all(mul(rows, rows));
        });
        CHECK(err1 < 1e-4);
        const double err2 = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            auto sel = select_per_row(bind("p"), {1, 0, 5, 3});
            return sum_all(mul(sel, sel));
        });
        CHECK(err2 < 1e-4);
    }

    SECTION("reductions, mse, sq_l2_rows") {
        ParamStore<double> s;
        s.add("a", random_tensor({3, 4}, rng));
        s.add("b", random_tensor({3, 4}, rng));
        const double err1 = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            auto rs = row_sum(bind("a"));
            return sum_all(mul(rs, rs));
        });
        CHECK(err1 < 1e-4);
        const double err2 = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            return mse(bind("a"), bind("b"));
        });
        CHECK(err2 < 1e-4);
        const double err3 = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            auto sq = sq_l2_rows(bind("a"), bind("b"));
            return sum_all(mul(sq, sq));
        });
        CHECK(err3 < 1e-4);
    }

    SECTION("kl_rows") {
        ParamStore<double> s;
        s.add("mu_e", random_tensor({2, 3}, rng));
        s.add("mu_p", random_tensor({2, 3}, rng));
        // keep sigmas well away from the floor so FD perturbations stay valid
        Tensor<double> se({2, 3}), sp({2, 3});
        std::uniform_real_distribution<double> sd(0.3, 2.0);
        for (long i = 0; i < se.numel(); ++i) se[i] = sd(rng);
        for (long i = 0; i < sp.numel(); ++i) sp[i] = sd(rng);
        s.add("sig_e", se);
        s.add("sig_p", sp);
        const double err = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            auto kl = kl_rows(bind("mu_e"), bind("sig_e"), bind("mu_p"), bind("sig_p"));
            return sum_all(kl);
        });
        CHECK(err < 1e-4);
    }

    SECTION("masked_bce_sum") {
        ParamStore<double> s;
        Tensor<double> p({4});
        p[0] = 0.2;
        p[1] = 0.8;
        p[2] = 0.5;
        p[3] = 0.35;
        s.add("p", p);
        const double err = fd_check_primitive(s, [&](Tape<double>& t, ParamBinder& bind) {
            return masked_bce_sum(bind("p"), std::vector<double>{1, 0, 1, 0},
                                  std::vector<double>{1, 1, 0, 1});
        });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("two-layer MLP passes the finite-difference oracle") {
    std::mt19937_64 rng(7);
    ParamStore<double> s;
    s.add("W1", random_tensor({4, 6}, rng, 0.5));
    s.add("b1", random_tensor({6}, rng, 0.1));
    s.add("W2", random_tensor({6, 2}, rng, 0.5));
    s.add("b2", random_tensor({2}, rng, 0.1));
    Tensor<double> x = random_tensor({3, 4}, rng);
    Tensor<double> y = random_tensor({3, 2}, rng);

    auto report = grad_check(
        s,
        [&](Tape<double>& t, ParamBinder& bind) {
            auto xin = t.constant(x);
            auto target = t.constant(y);
            auto h = relu(add(matmul(xin, bind("W1")), bind("b1")));
            auto out = add(matmul(h, bind("W2")), bind("b2"));
            return mse(out, target);
        },
        1e-5, 1e-4);
    CHECK(report.pass);
    CHECK(report.worst() < 1e-4);
}

TEST_CASE("grad_check flags a corrupted backward") {
    // A deliberately wrong gradient: scale forward by 1, backward by 2.
    auto bad_identity = [](Var<double> a) {
        Tape<double>& t = *a.tape;
        Tensor<double> out = t.value(a);
        const int aid = a.id;
        return t.push(std::move(out), t.requires_grad(aid),
                      [aid](Tape<double>& tp, const Tensor<double>& g) {
                          if (auto* ga = tp.grad_if_needed(aid)) {
                              for (long i = 0; i < g.numel(); ++i) (*ga)[i] += 2.0 * g[i];
                          }
                      });
    };
    std::mt19937_64 rng(11);
    ParamStore<double> s;
    s.add("x", random_tensor({2, 2}, rng));
    auto report = grad_check(
        s,
        [&](Tape<double>& t, ParamBinder& bind) { return sum_all(bad_identity(bind("x"))); },
        1e-5, 1e-4);
    CHECK_FALSE(report.pass);
}

TEST_CASE("gradients accumulate when a value is reused") {
    Tape<double> t;
    auto x = t.leaf(Tensor<double>({2}, {3.0, -2.0}));
    auto y = mul(x, x);  // x^2
    auto loss = sum_all(add(y, x));
    t.backward(loss);
    const auto& g = t.grad(x);
    CHECK(g[0] == Catch::Approx(2 * 3.0 + 1));
    CHECK(g[1] == Catch::Approx(2 * -2.0 + 1));
}

TEST_CASE("tape replay determinism") {
    std::mt19937_64 rng(99);
    Tensor<double> a = random_tensor({3, 3}, rng);
    Tensor<double> b = random_tensor({3, 3}, rng);
    auto run = [&]() {
        Tape<double> t;
        auto va = t.constant(a);
        auto vb = t.constant(b);
        auto out = sigmoid(matmul(va, vb));
        return t.value(out);
    };
    Tensor<double> r1 = run();
    Tensor<double> r2 = run();
    for (long i = 0; i < r1.numel(); ++i) CHECK(r1[i] == r2[i]);
}
