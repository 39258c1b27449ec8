#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "diffnet/autodiff.hpp"
#include "diffnet/model.hpp"
#include "diffnet/rng.hpp"
#include "test_util.hpp"

using namespace diffnet;

namespace {

Tensor random_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

/// Direct six-loop 3x3 cross-correlation with zero padding; conv oracle.
Tensor naive_conv3x3(const Tensor& x, const Tensor& k, const Tensor& bias) {
    const int b = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int co = k.shape[0];
    Tensor y({b, co, h, w});
    for (int bb = 0; bb < b; ++bb)
        for (int c = 0; c < co; ++c)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                    double acc = bias.data[static_cast<std::size_t>(c)];
                    for (int cc = 0; cc < ci; ++cc)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = yy + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                                acc += k.data[((static_cast<std::size_t>(c) * ci + cc) * 3 + ky) *
                                                  3 +
                                              kx] *
                                       x.data[((static_cast<std::size_t>(bb) * ci + cc) * h + sy) *
                                                  w +
                                              sx];
                            }
                    y.data[((static_cast<std::size_t>(bb) * co + c) * h + yy) * w + xx] = acc;
                }
    return y;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

/// Central finite differences on sampled coordinates of a parameter, checked
/// against the gradient a single backward pass produced.
void check_param_against_fd(Param& p, const std::function<double()>& loss_value,
                            const Tensor& analytic, Rng& rng, int coords, double tol,
                            double h = 1e-5) {
    for (int c = 0; c < coords; ++c) {
        const std::size_t j = static_cast<std::size_t>(rng.below(p.value.numel()));
        const double saved = p.value.data[j];
        p.value.data[j] = saved + h;
        const double fp = loss_value();
        p.value.data[j] = saved - h;
        const double fm = loss_value();
        p.value.data[j] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        INFO("param " << p.name << " coord " << j << " fd=" << fd << " ad=" << analytic.data[j]);
        REQUIRE(rel_err(fd, analytic.data[j]) < tol);
    }
}

}  // namespace

TEST_CASE("conv3x3 forward semantics") {
    Rng rng(101);
    SECTION("identity kernel passes the input through") {
        Param k("k", Tensor({1, 1, 3, 3}, 0.0));
        k.value.data[4] = 1.0;  // center tap
        Param b("b", Tensor({1}, 0.0));
        Tape t;
        const Tensor x = random_tensor({2, 1, 5, 6}, rng);
        const int y = t.conv3x3(t.constant(x), k, b);
        for (std::size_t i = 0; i < x.numel(); ++i)
            REQUIRE(t.value(y).data[i] == Catch::Approx(x.data[i]).margin(1e-15));
    }
    SECTION("zero kernel with bias gives a constant") {
        Param k("k", Tensor({3, 2, 3, 3}, 0.0));
        Param b("b", Tensor({3}, 0.0));
        b.value.data = {0.5, -1.0, 2.0};
        Tape t;
        const int y = t.conv3x3(t.constant(random_tensor({1, 2, 4, 4}, rng)), k, b);
        const Tensor& yv = t.value(y);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 16; ++i)
                REQUIRE(yv.data[static_cast<std::size_t>(c) * 16 + i] == b.value.data[c]);
    }
    SECTION("random case matches the six-loop reference") {
        Param k("k", random_tensor({4, 3, 3, 3}, rng));
        Param b("b", random_tensor({4}, rng));
        const Tensor x = random_tensor({2, 3, 7, 6}, rng);
        Tape t;
        const int y = t.conv3x3(t.constant(x), k, b);
        const Tensor ref = naive_conv3x3(x, k.value, b.value);
        double gap = 0.0;
        for (std::size_t i = 0; i < ref.numel(); ++i)
            gap = std::max(gap, std::abs(ref.data[i] - t.value(y).data[i]));
        REQUIRE(gap < 1e-12);
    }
    SECTION("channel mismatch is rejected") {
        Param k("k", Tensor({2, 3, 3, 3}, 0.0));
        Param b("b", Tensor({2}, 0.0));
        Tape t;
        const int x = t.constant(Tensor({1, 2, 4, 4}, 0.0));
        CHECK_THROWS_AS(t.conv3x3(x, k, b), ShapeError);
    }
}

TEST_CASE("pointwise primitives forward semantics") {
    Rng rng(103);
    SECTION("relu clamps negatives") {
        Tape t;
        Tensor x({1, 1, 1, 2});
        x.data = {-1.0, 2.0};
        const int y = t.relu(t.constant(x));
        CHECK(t.value(y).data[0] == 0.0);
        CHECK(t.value(y).data[1] == 2.0);
    }
    SECTION("shift then opposite shift is the identity on the interior") {
        Tape t;
        const Tensor x = random_tensor({1, 1, 6, 6}, rng);
        const int y = t.shift(t.shift(t.constant(x), Dir::North), Dir::South);
        for (int yy = 1; yy < 5; ++yy)
            for (int xx = 1; xx < 5; ++xx)
                REQUIRE(t.value(y).data[static_cast<std::size_t>(yy) * 6 + xx] ==
                        x.data[static_cast<std::size_t>(yy) * 6 + xx]);
    }
    SECTION("mse of identical tensors is zero with zero gradient") {
        Param p("p", random_tensor({1, 1, 3, 3}, rng));
        Tape t;
        const int a = t.param(p);
        const int loss = t.mse_loss(a, t.constant(p.value));
        CHECK(t.value(loss).data[0] == 0.0);
        p.zero_grad();
        t.backward(loss);
        for (double g : p.grad.data) CHECK(g == 0.0);
    }
    SECTION("sum of scale: d/ds sum(s*x) = sum(x)") {
        Param s("s", Tensor::scalar(0.7));
        const Tensor x = random_tensor({1, 1, 4, 4}, rng);
        double xsum = 0.0;
        for (double v : x.data) xsum += v;
        Tape t;
        const int loss = t.sum(t.scale(t.constant(x), t.param(s)));
        s.zero_grad();
        t.backward(loss);
        CHECK(s.grad.data[0] == Catch::Approx(xsum).epsilon(1e-13));
    }
}

TEST_CASE("shift backward is the adjoint of shift") {
    Rng rng(107);
    for (Dir d : {Dir::North, Dir::West, Dir::South, Dir::East}) {
        const Tensor x = random_tensor({1, 1, 7, 5}, rng);
        const Tensor y = random_tensor({1, 1, 7, 5}, rng);
        // <shift(x), y>
        Tape t1;
        const int sx = t1.shift(t1.constant(x), d);
        double lhs = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) lhs += t1.value(sx).data[i] * y.data[i];
        // shift^T(y) via backward of sum(shift(p) .* y)
        Param p("p", x);
        p.zero_grad();
        Tape t2;
        const int loss = t2.sum(t2.pointwise_mul(t2.shift(t2.param(p), d), t2.constant(y)));
        t2.backward(loss);
        double rhs = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.data[i] * p.grad.data[i];
        REQUIRE(std::abs(lhs - rhs) < 1e-12);
    }
}

TEST_CASE("every primitive passes central finite differences") {
    Rng rng(109);
    const double tol = 1e-5;

    SECTION("conv3x3 (kernel, bias and input)") {
        Param k("k", random_tensor({3, 2, 3, 3}, rng));
        Param b("b", random_tensor({3}, rng));
        Param xin("x", random_tensor({1, 2, 5, 5}, rng));
        const Tensor target = random_tensor({1, 3, 5, 5}, rng);
        auto loss_value = [&] {
            Tape t;
            return t.value(t.mse_loss(t.conv3x3(t.param(xin), k, b), t.constant(target))).data[0];
        };
        k.zero_grad();
        b.zero_grad();
        xin.zero_grad();
        {
            Tape t;
            t.backward(t.mse_loss(t.conv3x3(t.param(xin), k, b), t.constant(target)));
        }
        check_param_against_fd(k, loss_value, k.grad, rng, 10, tol);
        check_param_against_fd(b, loss_value, b.grad, rng, 3, tol);
        check_param_against_fd(xin, loss_value, xin.grad, rng, 10, tol);
    }

    SECTION("relu, mul, add, sub, shift, scale, channel, scale_const") {
        Param a("a", random_tensor({1, 2, 4, 4}, rng));
        Param b("b", random_tensor({1, 2, 4, 4}, rng));
        Param s("s", Tensor::scalar(0.8));
        const Tensor target = random_tensor({1, 1, 4, 4}, rng);
        auto graph = [&](Tape& t) {
            const int an = t.param(a);
            const int bn = t.param(b);
            int z = t.pointwise_mul(t.relu(an), t.sub(bn, t.scale_const(an, 0.3)));
            z = t.add(z, t.shift(bn, Dir::East));
            int c0 = t.channel(z, 0);
            int c1 = t.channel(z, 1);
            int out = t.scale(t.add(c0, c1), t.param(s));
            return t.mse_loss(out, t.constant(target));
        };
        auto loss_value = [&] {
            Tape t;
            return t.value(graph(t)).data[0];
        };
        a.zero_grad();
        b.zero_grad();
        s.zero_grad();
        {
            Tape t;
            t.backward(graph(t));
        }
        check_param_against_fd(a, loss_value, a.grad, rng, 10, tol);
        check_param_against_fd(b, loss_value, b.grad, rng, 10, tol);
        check_param_against_fd(s, loss_value, s.grad, rng, 1, tol);
    }

    SECTION("mul_plane broadcast") {
        Param plane("plane", random_tensor({4, 4}, rng));
        Param x("x", random_tensor({2, 1, 4, 4}, rng));
        const Tensor target = random_tensor({2, 1, 4, 4}, rng);
        auto graph = [&](Tape& t) {
            return t.mse_loss(t.mul_plane(t.param(x), t.param(plane)), t.constant(target));
        };
        auto loss_value = [&] {
            Tape t;
            return t.value(graph(t)).data[0];
        };
        plane.zero_grad();
        x.zero_grad();
        {
            Tape t;
            t.backward(graph(t));
        }
        check_param_against_fd(plane, loss_value, plane.grad, rng, 10, tol);
        check_param_against_fd(x, loss_value, x.grad, rng, 10, tol);
    }
}

TEST_CASE("full network gradient matches finite differences") {
    Rng rng(113);
    DiffNetConfig cfg;
    cfg.diffusion_layers = 2;
    cfg.estimator.depth = 3;
    cfg.learn_dt = true;
    cfg.final_relu = true;
    DiffNetModel model = DiffNetModel::create(cfg, 77);

    const Tensor input = random_tensor({1, 1, 8, 8}, rng, 0.0, 1.0);
    const Tensor target = random_tensor({1, 1, 8, 8}, rng, 0.0, 1.0);
    auto loss_value = [&] {
        Tape t;
        return t.value(t.mse_loss(model.forward(t, t.constant(input)), t.constant(target))).data[0];
    };
    model.params.zero_grads();
    {
        Tape t;
        t.backward(t.mse_loss(model.forward(t, t.constant(input)), t.constant(target)));
    }
    // 20 coordinates sampled across every parameter tensor; the composed loss
    // has large third derivatives, so a smaller h keeps truncation below tol
    auto params = model.params.all();
    for (int c = 0; c < 20; ++c) {
        Param& p = *params[static_cast<std::size_t>(rng.below(params.size()))];
        check_param_against_fd(p, loss_value, p.grad, rng, 1, 1e-4, 1e-6);
    }
}

TEST_CASE("backward is deterministic") {
    Rng rng(127);
    DiffNetConfig cfg;
    cfg.diffusion_layers = 1;
    cfg.estimator.depth = 2;
    DiffNetModel model = DiffNetModel::create(cfg, 5);
    const Tensor input = random_tensor({1, 1, 6, 6}, rng);
    const Tensor target = random_tensor({1, 1, 6, 6}, rng);

    auto run = [&] {
        model.params.zero_grads();
        Tape t;
        t.backward(t.mse_loss(model.forward(t, t.constant(input)), t.constant(target)));
        std::vector<double> flat;
        for (const Param* p : model.params.all())
            flat.insert(flat.end(), p->grad.data.begin(), p->grad.data.end());
        return flat;
    };
    const auto g1 = run();
    const auto g2 = run();
    REQUIRE(g1 == g2);  // bitwise
}

TEST_CASE("backward rejects non-scalar losses") {
    Tape t;
    const int x = t.constant(Tensor({1, 1, 2, 2}, 1.0));
    CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
    Param s("s", Tensor::scalar(1.0));
    const Tensor x = Tensor({1, 1, 2, 2}, 1.0);
    s.zero_grad();
    for (int i = 0; i < 3; ++i) {
        Tape t;
        t.backward(t.sum(t.scale(t.constant(x), t.param(s))));
    }
    CHECK(s.grad.data[0] == Catch::Approx(12.0));  // 3 passes x sum(x)=4
}
