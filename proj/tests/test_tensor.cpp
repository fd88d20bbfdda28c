#include "caml/tensor.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace caml;

TEST_CASE("softmax of a symmetric row splits mass evenly") {
    Tensor z = Tensor::from(1, 2, {0.0, 0.0});
    Tensor p = softmax_rows(z);
    CHECK(p.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("layer_norm maps a constant vector to the affine shift") {
    Tensor x = Tensor::from(1, 4, {3.0, 3.0, 3.0, 3.0});
    Tensor g = Tensor::full(1, 4, 1.0);
    Tensor b = Tensor::zeros(1, 4);
    Tensor y = layer_norm(x, g, b);
    for (int j = 0; j < 4; ++j) {
        CHECK(std::abs(y.at(0, j)) < 1e-12);
    }
}

TEST_CASE("matmul against the identity") {
    Tensor a = Tensor::from(2, 2, {1, 2, 3, 4});
    Tensor id = Tensor::from(2, 2, {1, 0, 0, 1});
    Tensor c = matmul(a, id);
    CHECK(c.values() == a.values());
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros(2, 3);
    Tensor b = Tensor::zeros(4, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), ShapeError);
}

TEST_CASE("non-finite forward output raises a numeric error") {
    Tensor p = Tensor::from(1, 2, {1.0, 0.0});
    std::vector<int> t{1};
    CHECK_THROWS_AS(cross_entropy(p, t), NumericError);
}

TEST_CASE("backward of x*x at x=3 gives 6") {
    Tensor x = Tensor::scalar(3.0, true);
    Tensor y = mul(x, x);
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar root") {
    Tensor x = Tensor::from(1, 2, {1.0, 2.0}, true);
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(backward(y), UsageError);
}

TEST_CASE("cross_entropy(softmax(z), k) has the closed-form gradient") {
    Tensor z = Tensor::from(1, 3, {0.2, -1.0, 0.5}, true);
    Tensor p = softmax_rows(z);
    std::vector<int> target{2};
    Tensor loss = cross_entropy(p, target);
    backward(loss);
    for (int j = 0; j < 3; ++j) {
        const double expected = p.at(0, j) - (j == 2 ? 1.0 : 0.0);
        CHECK(z.grad()[j] == doctest::Approx(expected).epsilon(1e-10));
    }
}

TEST_CASE("repeated backward accumulates; reset restores the first result") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y = mul(x, x);
    backward(y);
    const double once = x.grad()[0];
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(2.0 * once));
    x.zero_grad();
    backward(y);
    CHECK(x.grad()[0] == once);
}

namespace {

// Random 3-layer MLP with every op under test in the graph; returns the
// scalar loss from the current parameter values.
struct Mlp {
    Tensor w1, b1, w2, b2, w3, b3, gain, bias;
    Tensor input;
    std::vector<int> targets;

    explicit Mlp(uint64_t seed) {
        Rng rng(seed);
        auto randt = [&](int r, int c) {
            Tensor t = Tensor::zeros(r, c, true);
            for (double& v : t.values()) v = rng.normal() * 0.5;
            return t;
        };
        w1 = randt(6, 8);
        b1 = randt(1, 8);
        w2 = randt(8, 8);
        b2 = randt(1, 8);
        w3 = randt(8, 5);
        b3 = randt(1, 5);
        gain = randt(1, 8);
        bias = randt(1, 8);
        input = randt(4, 6);
        input.node()->requires_grad = false;
        targets = {0, 2, 4, 1};
    }

    Tensor loss() const {
        Tensor h1 = relu(add(matmul(input, w1), b1));
        Tensor h2 = layer_norm(add(matmul(h1, w2), b2), gain, bias);
        Tensor left = slice(h2, 0, h2.rows(), 0, 4);
        Tensor right = slice(h2, 0, h2.rows(), 4, 8);
        Tensor joined = concat({left, right}, 1);
        Tensor logits = add(matmul(joined, w3), b3);
        Tensor probs = softmax_rows(logits);
        return cross_entropy(probs, targets);
    }

    std::vector<Tensor*> param_list() {
        return {&w1, &b1, &w2, &b2, &w3, &b3, &gain, &bias};
    }
};

} // namespace

TEST_CASE("3-layer MLP analytic gradients match central finite differences") {
    Mlp mlp(17);
    Tensor l = mlp.loss();
    backward(l);
    for (Tensor* p : mlp.param_list()) {
        const std::vector<double> analytic = p->grad();
        const std::vector<double> fd =
            oracles::finite_diff_grad(*p, [&] { return mlp.loss().item(); });
        CHECK(oracles::max_rel_error(analytic, fd) < 1e-4);
    }
}

TEST_CASE("per-op gradient checks against finite differences") {
    Rng rng(99);
    auto randt = [&](int r, int c, bool rg = true) {
        Tensor t = Tensor::zeros(r, c, rg);
        for (double& v : t.values()) v = rng.normal();
        return t;
    };

    auto check_unary = [&](const char* name, Tensor& x, const std::function<Tensor()>& f) {
        INFO(std::string(name));
        x.clear_grad();
        Tensor out = mean_all(f());
        backward(out);
        const std::vector<double> analytic = x.grad();
        const std::vector<double> fd =
            oracles::finite_diff_grad(x, [&] { return mean_all(f()).item(); });
        CHECK(oracles::max_rel_error(analytic, fd) < 1e-4);
        x.zero_grad();
    };

    Tensor a = randt(3, 4);
    Tensor b = randt(4, 5);
    check_unary("matmul_lhs", a, [&] { return matmul(a, b); });
    check_unary("matmul_rhs", b, [&] { return matmul(a, b); });

    Tensor c = randt(3, 4);
    check_unary("add", c, [&] { return add(a, c); });
    Tensor row = randt(1, 4);
    check_unary("add_broadcast", row, [&] { return add(a, row); });
    check_unary("mul", c, [&] { return mul(a, c); });
    check_unary("scale", a, [&] { return scale(a, -1.7); });
    check_unary("transpose", a, [&] { return transpose(a); });
    check_unary("softmax", a, [&] { return softmax_rows(a); });
    check_unary("log_softmax", a, [&] { return log_softmax_rows(a); });
    check_unary("slice", a, [&] { return slice(a, 1, 3, 0, 3); });
    check_unary("concat", a, [&] { return concat({a, c}, 0); });

    Tensor g = randt(1, 4);
    Tensor bb = randt(1, 4);
    check_unary("layer_norm_x", a, [&] { return layer_norm(a, g, bb); });
    check_unary("layer_norm_gain", g, [&] { return layer_norm(a, g, bb); });
    check_unary("layer_norm_bias", bb, [&] { return layer_norm(a, g, bb); });

    // relu away from the kink
    Tensor r = Tensor::from(2, 2, {0.5, -0.7, 1.2, -2.0}, true);
    check_unary("relu", r, [&] { return relu(r); });

    Tensor table = randt(6, 3);
    std::vector<int> ids{0, 5, 2, 5};
    check_unary("embedding_lookup", table, [&] { return embedding_lookup(table, ids); });

    std::vector<int> rowsel{2, 0};
    check_unary("select_rows", a, [&] { return select_rows(a, rowsel); });
    std::vector<int> colids{1, 3, 0};
    check_unary("gather_cols", a, [&] { return gather_cols(a, colids); });

    Tensor pr = softmax_rows(randt(3, 4, false));
    Tensor prv = Tensor::from(3, 4, pr.values(), true);
    std::vector<int> tg{1, 0, 3};
    check_unary("cross_entropy", prv, [&] { return cross_entropy(prv, tg); });

    Rng mrng(4);
    Tensor mask = make_dropout_mask(3, 4, 0.25, mrng);
    check_unary("dropout_mask_apply", a, [&] { return dropout_mask_apply(a, mask); });
}

TEST_CASE("no-grad mode records no tape") {
    Tensor x = Tensor::scalar(2.0, true);
    NoGradGuard ng;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->inputs.empty());
}

TEST_CASE("dropout mask is 0 or 1/(1-rate) and roughly the right density") {
    Rng rng(7);
    Tensor m = make_dropout_mask(50, 50, 0.2, rng);
    int zeros = 0;
    for (double v : m.values()) {
        const bool ok = v == 0.0 || v == doctest::Approx(1.25);
        CHECK(ok);
        if (v == 0.0) zeros++;
    }
    CHECK(zeros > 300);
    CHECK(zeros < 700);
}
