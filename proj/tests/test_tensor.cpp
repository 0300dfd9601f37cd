#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "s3seg/tensor.hpp"

using namespace s3seg;

namespace {

// Central finite difference of a scalar-valued function of a flat parameter
// vector, used as the independent oracle for analytic gradients.
std::vector<double> central_fd(const std::function<double(const std::vector<double>&)>& fn,
                               std::vector<double> x, double h) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = fn(x);
        x[i] = x0 - h;
        const double fm = fn(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1.0});
    return std::abs(a - b) / denom;
}

}  // namespace

TEST_CASE("create: zeros, constant, determinism") {
    Tensor z = Tensor::zeros({2, 2});
    for (double v : z.values()) {
        CHECK(v == 0.0);
    }

    Tensor c = Tensor::full({3}, 1.5);
    CHECK(c.values() == std::vector<double>{1.5, 1.5, 1.5});

    Tensor k1 = Tensor::create({4, 9}, Init::kaiming_fan_in(), 7);
    Tensor k2 = Tensor::create({4, 9}, Init::kaiming_fan_in(), 7);
    CHECK(std::memcmp(k1.values().data(), k2.values().data(),
                      k1.values().size() * sizeof(double)) == 0);

    const double bound = std::sqrt(6.0 / 9.0);
    for (double v : k1.values()) {
        CHECK(std::abs(v) <= bound);
    }

    CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
}

TEST_CASE("elementwise: abs, add identity, domain errors") {
    Tensor x = Tensor::from_values({3}, {-2.0, 0.0, 3.0});
    Tensor a = abs(x);
    CHECK(a.values() == std::vector<double>{2.0, 0.0, 3.0});

    Tensor y = add(x, zeros_like(x));
    CHECK(y.values() == x.values());

    Tensor bad = Tensor::zeros({2});
    CHECK_THROWS_AS(add(x, bad), ShapeError);
    CHECK_THROWS_AS(log(Tensor::from_values({1}, {0.0})), DomainError);
    CHECK_THROWS_AS(log(Tensor::from_values({1}, {-1.0})), DomainError);
}

TEST_CASE("log gradient at x=2 matches central finite difference") {
    Tensor x = Tensor::from_values({1}, {2.0});
    x.set_requires_grad(true);
    {
        Tape tape;
        Tensor l = sum(log(x));
        tape.backward(l);
    }
    CHECK(x.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));

    auto fn = [](const std::vector<double>& v) { return std::log(v[0]); };
    std::vector<double> fd = central_fd(fn, {2.0}, 1e-6);
    CHECK(std::abs(x.grad()[0] - fd[0]) < 1e-6);
}

TEST_CASE("reduce: sum, mean, axes") {
    Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    CHECK(sum(m).scalar() == 10.0);
    CHECK(mean(Tensor::full({5, 3}, 2.5)).scalar() == doctest::Approx(2.5).epsilon(1e-15));

    m.set_requires_grad(true);
    {
        Tape tape;
        Tensor s = sum(m);
        tape.backward(s);
    }
    for (double g : m.grad()) {
        CHECK(g == 1.0);
    }

    Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor s0 = sum(t, {0});
    CHECK(s0.shape() == Shape{3});
    CHECK(s0.values() == std::vector<double>{5, 7, 9});
    Tensor s1 = sum(t, {1});
    CHECK(s1.shape() == Shape{2});
    CHECK(s1.values() == std::vector<double>{6, 15});
    Tensor m1 = mean(t, {1});
    CHECK(m1.values() == std::vector<double>{2, 5});

    CHECK_THROWS_AS(sum(t, {2}), ShapeError);
    CHECK_THROWS_AS(sum(t, {0, 0}), ShapeError);
}

TEST_CASE("mean axes gradient is 1/count") {
    Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    t.set_requires_grad(true);
    {
        Tape tape;
        Tensor l = sum(mean(t, {1}));
        tape.backward(l);
    }
    for (double g : t.grad()) {
        CHECK(g == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
}

TEST_CASE("softmax_channels: symmetry, analytic values, shift invariance") {
    Tensor u = Tensor::full({1, 4, 2, 2}, 3.0);
    Tensor su = softmax_channels(u);
    for (double v : su.values()) {
        CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }

    Tensor two = Tensor::from_values({1, 2, 1, 1}, {0.0, std::log(3.0)});
    Tensor s2 = softmax_channels(two);
    CHECK(s2.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s2.values()[1] == doctest::Approx(0.75).epsilon(1e-12));

    // dyadic logits so logits+5 is exact and invariance can be checked bitwise
    Tensor logits = Tensor::from_values({1, 3, 1, 2}, {0.25, -1.0, 2.0, 0.125, -0.5, 1.75});
    Tensor shifted = Tensor::from_values(
        {1, 3, 1, 2}, {0.25 + 5, -1.0 + 5, 2.0 + 5, 0.125 + 5, -0.5 + 5, 1.75 + 5});
    Tensor sa = softmax_channels(logits);
    Tensor sb = softmax_channels(shifted);
    for (std::size_t i = 0; i < sa.values().size(); ++i) {
        CHECK(sa.values()[i] == sb.values()[i]);
    }

    CHECK_THROWS_AS(softmax_channels(Tensor::zeros({2, 2})), ShapeError);
}

TEST_CASE("backward: sum(x*x) analytic gradient and contract errors") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    {
        Tape tape;
        Tensor l = sum(mul(x, x));
        tape.backward(l);
    }
    CHECK(x.grad() == std::vector<double>{2.0, 4.0});

    {
        Tape tape;
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), ContractError);
    }
    {
        Tape tape;
        Tensor off = Tensor::scalar_value(5.0);
        CHECK_THROWS_AS(tape.backward(off), ContractError);
    }
}

TEST_CASE("backward: reset vs accumulate") {
    auto run = [](bool reset) {
        Tensor x = Tensor::from_values({2}, {1.0, 2.0});
        x.set_requires_grad(true);
        for (int pass = 0; pass < 2; ++pass) {
            if (reset) {
                x.zero_grad();
            }
            Tape tape;
            Tensor l = sum(mul(x, x));
            tape.backward(l);
        }
        return x.grad();
    };
    CHECK(run(true) == std::vector<double>{2.0, 4.0});
    CHECK(run(false) == std::vector<double>{4.0, 8.0});
}

TEST_CASE("gradient accumulates into shared inputs") {
    Tensor x = Tensor::from_values({2}, {3.0, -1.0});
    x.set_requires_grad(true);
    {
        Tape tape;
        Tensor l = sum(add(mul(x, x), x));  // x^2 + x -> 2x + 1
        tape.backward(l);
    }
    CHECK(x.grad()[0] == doctest::Approx(7.0).epsilon(1e-15));
    CHECK(x.grad()[1] == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("detach blocks gradient flow") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    {
        Tape tape;
        Tensor d = x.detach();
        CHECK_FALSE(d.requires_grad());
        Tensor l = sum(mul(x, d));  // d treated as a constant
        tape.backward(l);
    }
    CHECK(x.grad() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("composite gradients match central finite differences") {
    // softplus-free composite over the implemented op set
    auto build = [](const std::vector<double>& vals) {
        Tensor x = Tensor::from_values({2, 3}, vals);
        x.set_requires_grad(true);
        return x;
    };
    auto expr = [](const Tensor& x) {
        Tensor p = add(mul(x, x), Tensor::full(x.shape(), 1.5));  // strictly positive
        Tensor l = log(p);
        Tensor a = abs(sub(x, Tensor::full(x.shape(), 0.2)));
        return add(scalar_mul(sum(mul(l, a)), 0.7), mean(mul(x, x)));
    };

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        std::vector<double> vals(6);
        for (double& v : vals) {
            v = rng.uniform(-2.0, 2.0);
        }
        Tensor x = build(vals);
        {
            Tape tape;
            Tensor loss = expr(x);
            tape.backward(loss);
        }
        auto fn = [&](const std::vector<double>& v) {
            Tensor t = Tensor::from_values({2, 3}, v);
            return expr(t).scalar();
        };
        std::vector<double> fd = central_fd(fn, vals, 1e-4);
        for (std::size_t i = 0; i < fd.size(); ++i) {
            CHECK(rel_err(x.grad()[i], fd[i]) < 1e-4);
        }
    }
}

TEST_CASE("softmax gradient matches central finite differences") {
    for (std::uint64_t seed = 11; seed <= 15; ++seed) {
        Rng rng(seed);
        std::vector<double> vals(1 * 3 * 2 * 2);
        std::vector<double> w(vals.size());
        for (double& v : vals) {
            v = rng.uniform(-1.5, 1.5);
        }
        for (double& v : w) {
            v = rng.uniform(-1.0, 1.0);
        }
        Tensor weights = Tensor::from_values({1, 3, 2, 2}, w);

        Tensor x = Tensor::from_values({1, 3, 2, 2}, vals);
        x.set_requires_grad(true);
        {
            Tape tape;
            Tensor loss = sum(mul(softmax_channels(x), weights));
            tape.backward(loss);
        }
        auto fn = [&](const std::vector<double>& v) {
            Tensor t = Tensor::from_values({1, 3, 2, 2}, v);
            return sum(mul(softmax_channels(t), weights)).scalar();
        };
        std::vector<double> fd = central_fd(fn, vals, 1e-4);
        for (std::size_t i = 0; i < fd.size(); ++i) {
            CHECK(rel_err(x.grad()[i], fd[i]) < 1e-4);
        }
    }
}

TEST_CASE("backward linearity") {
    const std::vector<double> vals = {0.8, -1.2, 2.1, 0.4};
    const double ca = 1.7;
    const double cb = -0.6;

    auto grad_of = [&](const std::function<Tensor(const Tensor&)>& make) {
        Tensor x = Tensor::from_values({4}, vals);
        x.set_requires_grad(true);
        Tape tape;
        Tensor l = make(x);
        tape.backward(l);
        return x.grad();
    };

    auto f = [](const Tensor& x) { return sum(mul(x, x)); };
    auto g = [](const Tensor& x) { return sum(abs(x)); };
    std::vector<double> gf = grad_of(f);
    std::vector<double> gg = grad_of(g);
    std::vector<double> gc = grad_of([&](const Tensor& x) {
        return add(scalar_mul(f(x), ca), scalar_mul(g(x), cb));
    });

    for (std::size_t i = 0; i < gc.size(); ++i) {
        CHECK(std::abs(gc[i] - (ca * gf[i] + cb * gg[i])) < 1e-10);
    }
}

TEST_CASE("fixed seed gives bit-identical forward and backward") {
    auto run = [] {
        Tensor x = Tensor::create({3, 4}, Init::uniform(-1.0, 1.0), 99);
        x.set_requires_grad(true);
        Tape tape;
        Tensor l = sum(mul(abs(x), x));
        tape.backward(l);
        std::vector<double> out = l.values();
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        return out;
    };
    std::vector<double> r1 = run();
    std::vector<double> r2 = run();
    CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}
