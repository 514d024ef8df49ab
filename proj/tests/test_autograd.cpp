#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nerveseg/autograd.hpp"
#include "nerveseg/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace nerveseg;

namespace {

bool close_abs(float a, float b, float tol) { return std::abs(a - b) <= tol; }

Tensor rand_tensor(int n, int c, int h, int w, Rng& rng, double lo = -1, double hi = 1) {
    Tensor t(n, c, h, w);
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

VarId make_conv(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad,
                int dil, bool grads = false) {
    return g.conv2d(g.leaf(x, grads), g.leaf(w, grads), g.leaf(b, grads), stride, pad, dil);
}

}  // namespace

TEST_CASE("conv2d ones counting") {
    Graph g;
    const VarId out = make_conv(g, Tensor(1, 1, 3, 3, 1.0f), Tensor(1, 1, 3, 3, 1.0f),
                                Tensor(1, 1, 1, 1, 0.0f), 1, 1, 1);
    const Tensor& o = g.value(out);
    REQUIRE(o.h == 3);
    CHECK(o.at(0, 0, 1, 1) == 9.0f);
    CHECK(o.at(0, 0, 0, 1) == 6.0f);
    CHECK(o.at(0, 0, 1, 0) == 6.0f);
    CHECK(o.at(0, 0, 0, 0) == 4.0f);
    CHECK(o.at(0, 0, 2, 2) == 4.0f);
}

TEST_CASE("conv2d identity kernel") {
    Rng rng(7);
    const Tensor x = rand_tensor(1, 1, 5, 4, rng);
    Tensor w(1, 1, 3, 3, 0.0f);
    w.at(0, 0, 1, 1) = 1.0f;
    Graph g;
    const VarId out = make_conv(g, x, w, Tensor(1, 1, 1, 1, 0.0f), 1, 1, 1);
    CHECK(g.value(out).data == x.data);
}

TEST_CASE("conv2d dilated delta") {
    Tensor x(1, 1, 5, 5, 0.0f);
    x.at(0, 0, 2, 2) = 1.0f;
    Graph g;
    const VarId out = make_conv(g, x, Tensor(1, 1, 3, 3, 1.0f), Tensor(1, 1, 1, 1, 0.0f), 1, 2, 2);
    const Tensor& o = g.value(out);
    REQUIRE(o.h == 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            const bool hit = (i == 0 || i == 2 || i == 4) && (j == 0 || j == 2 || j == 4);
            CHECK(o.at(0, 0, i, j) == (hit ? 1.0f : 0.0f));
        }
}

TEST_CASE("conv2d errors") {
    Graph g;
    const VarId x = g.leaf(Tensor(1, 2, 4, 4), false);
    const VarId w = g.leaf(Tensor(1, 3, 3, 3), false);
    const VarId b = g.leaf(Tensor(1, 1, 1, 1), false);
    CHECK_THROWS_AS(g.conv2d(x, w, b, 1, 1, 1), std::invalid_argument);

    const VarId w2 = g.leaf(Tensor(1, 2, 3, 3), false);
    CHECK_THROWS_AS(g.conv2d(x, w2, b, 1, 0, 4), std::invalid_argument);  // span exceeds input
}

TEST_CASE("conv2d forward matches the naive oracle") {
    Rng rng(42);
    int cases = 0;
    while (cases < 50) {
        const int n = rng.next_int(1, 2), cin = rng.next_int(1, 3), cout = rng.next_int(1, 3);
        const int h = rng.next_int(5, 9), w = rng.next_int(5, 9);
        const int dils[] = {1, 2, 4};
        const int dil = dils[rng.next_int(0, 2)];
        const int pad = rng.next_int(0, 2);
        const int stride = rng.next_int(1, 2);
        if (h + 2 * pad < 2 * dil + 1 || w + 2 * pad < 2 * dil + 1) continue;
        const Tensor x = rand_tensor(n, cin, h, w, rng);
        const Tensor wt = rand_tensor(cout, cin, 3, 3, rng);
        const Tensor b = rand_tensor(1, cout, 1, 1, rng);

        Graph g;
        const Tensor& got = g.value(make_conv(g, x, wt, b, stride, pad, dil));
        const Tensor want = oracle::naive_conv2d(x, wt, b, stride, pad, dil);
        REQUIRE(got.size() == want.size());
        for (size_t i = 0; i < got.size(); ++i)
            CHECK(close_abs(got.data[i], want.data[i], 1e-5f));
        ++cases;
    }
}

TEST_CASE("conv2d with zero bias is homogeneous in x") {
    Rng rng(3);
    const Tensor x = rand_tensor(1, 2, 6, 6, rng);
    const Tensor w = rand_tensor(2, 2, 3, 3, rng);
    const Tensor b(1, 2, 1, 1, 0.0f);
    const float alpha = 3.5f;
    Tensor xs = x;
    for (auto& v : xs.data) v *= alpha;

    Graph g;
    const Tensor& base = g.value(make_conv(g, x, w, b, 1, 1, 1));
    const Tensor& scaled = g.value(make_conv(g, xs, w, b, 1, 1, 1));
    for (size_t i = 0; i < base.size(); ++i)
        CHECK(close_abs(scaled.data[i], alpha * base.data[i], 1e-5f));
}

TEST_CASE("transposed_conv2d single pixel stamp") {
    Tensor x(1, 1, 1, 1, 1.0f);
    Tensor w(1, 1, 2, 2);
    w.data = {1, 2, 3, 4};
    Graph g;
    const VarId out =
        g.transposed_conv2d(g.leaf(x, false), g.leaf(w, false), g.leaf(Tensor(1, 1, 1, 1), false));
    CHECK(g.value(out).data == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("transposed_conv2d non-overlapping tiles of ones") {
    Graph g;
    const VarId out = g.transposed_conv2d(g.leaf(Tensor(1, 1, 2, 2, 1.0f), false),
                                          g.leaf(Tensor(1, 1, 2, 2, 1.0f), false),
                                          g.leaf(Tensor(1, 1, 1, 1, 0.0f), false));
    const Tensor& o = g.value(out);
    REQUIRE(o.h == 4);
    for (float v : o.data) CHECK(v == 1.0f);
}

TEST_CASE("transposed_conv2d matches the scatter-add oracle") {
    Rng rng(9);
    const Tensor x = rand_tensor(1, 2, 3, 3, rng);
    const Tensor w = rand_tensor(2, 1, 2, 2, rng);
    const Tensor b = rand_tensor(1, 1, 1, 1, rng);
    Graph g;
    const Tensor& got =
        g.value(g.transposed_conv2d(g.leaf(x, false), g.leaf(w, false), g.leaf(b, false)));
    const Tensor want = oracle::scatter_tconv2d(x, w, b);
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(close_abs(got.data[i], want.data[i], 1e-5f));
}

TEST_CASE("transposed_conv2d input grad equals stride-2 conv of the output grad") {
    Rng rng(21);
    const Tensor x = rand_tensor(2, 3, 4, 4, rng);
    const Tensor w = rand_tensor(3, 2, 2, 2, rng);
    const Tensor b = rand_tensor(1, 2, 1, 1, rng);
    const Tensor upstream = rand_tensor(2, 2, 8, 8, rng);

    Graph g;
    const VarId xi = g.leaf(x, true);
    const VarId out = g.transposed_conv2d(xi, g.leaf(w, false), g.leaf(b, false));
    g.backward(g.weighted_sum(out, upstream));
    const Tensor& gx = g.grad(xi);

    Graph g2;
    const Tensor& conv = g2.value(g2.conv2d(g2.leaf(upstream, false), g2.leaf(w, false),
                                            g2.leaf(Tensor(1, 3, 1, 1, 0.0f), false), 2, 0, 1));
    REQUIRE(gx.size() == conv.size());
    for (size_t i = 0; i < gx.size(); ++i)
        CHECK(close_abs(gx.data[i], conv.data[i], 1e-5f));
}

TEST_CASE("maxpool2d") {
    SUBCASE("2x2 max selection") {
        Tensor x(1, 1, 2, 2);
        x.data = {1, 2, 3, 4};
        Graph g;
        CHECK(g.value(g.maxpool2d(g.leaf(x, false))).data == std::vector<float>{4});
    }
    SUBCASE("4x4 window maxima") {
        Tensor x(1, 1, 4, 4);
        for (int i = 0; i < 16; ++i) x.data[i] = static_cast<float>(i + 1);
        Graph g;
        CHECK(g.value(g.maxpool2d(g.leaf(x, false))).data == std::vector<float>{6, 8, 14, 16});
    }
    SUBCASE("constant input routes grad to first window element") {
        Graph g;
        const VarId x = g.leaf(Tensor(1, 1, 4, 4, 2.0f), true);
        g.backward(g.sum(g.maxpool2d(x)));
        const Tensor& gx = g.grad(x);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                CHECK(gx.at(0, 0, i, j) == ((i % 2 == 0 && j % 2 == 0) ? 1.0f : 0.0f));
    }
    SUBCASE("odd extent rejected") {
        Graph g;
        const VarId x = g.leaf(Tensor(1, 1, 3, 4), false);
        CHECK_THROWS_AS(g.maxpool2d(x), std::invalid_argument);
    }
}

TEST_CASE("prelu") {
    SUBCASE("positive passthrough and slope multiply") {
        Tensor x(1, 1, 1, 2);
        x.data = {3.0f, -2.0f};
        Graph g;
        const VarId out = g.prelu(g.leaf(x, false), g.leaf(Tensor(1, 1, 1, 1, 0.25f), false));
        CHECK(g.value(out).data == std::vector<float>{3.0f, -0.5f});
    }
    SUBCASE("slope grad is the sum of negative-side inputs") {
        Tensor x(1, 1, 2, 2);
        x.data = {-1.0f, -2.0f, -3.0f, -4.0f};
        Graph g;
        const VarId a = g.leaf(Tensor(1, 1, 1, 1, 0.25f), true);
        g.backward(g.sum(g.prelu(g.leaf(x, false), a)));
        CHECK(g.grad(a).data[0] == doctest::Approx(-10.0f));
    }
    SUBCASE("channel mismatch rejected") {
        Graph g;
        const VarId x = g.leaf(Tensor(1, 2, 2, 2), false);
        CHECK_THROWS_AS(g.prelu(x, g.leaf(Tensor(1, 3, 1, 1), false)), std::invalid_argument);
    }
}

TEST_CASE("sigmoid values and range") {
    Tensor x(1, 1, 1, 4);
    x.data = {0.0f, 40.0f, 1.0f, -100.0f};
    Graph g;
    const Tensor& o = g.value(g.sigmoid(g.leaf(x, false)));
    CHECK(o.data[0] == doctest::Approx(0.5));
    CHECK(o.data[1] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(o.data[2] == doctest::Approx(0.731059).epsilon(1e-6));
    for (float v : o.data) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    CHECK(o.all_finite());
}

TEST_CASE("bilinear upsample") {
    SUBCASE("constant stays constant") {
        Graph g;
        const Tensor& o = g.value(g.bilinear_upsample2d(g.leaf(Tensor(1, 2, 3, 3, 1.75f), false)));
        REQUIRE(o.h == 6);
        for (float v : o.data) CHECK(v == 1.75f);
    }
    SUBCASE("degenerate 1x1 grid") {
        Graph g;
        const Tensor& o = g.value(g.bilinear_upsample2d(g.leaf(Tensor(1, 1, 1, 1, 4.25f), false)));
        CHECK(o.data == std::vector<float>{4.25f, 4.25f, 4.25f, 4.25f});
    }
    SUBCASE("half-pixel weights on a [0,1] row") {
        Tensor x(1, 1, 1, 2);
        x.data = {0.0f, 1.0f};
        Graph g;
        const Tensor& o = g.value(g.bilinear_upsample2d(g.leaf(x, false)));
        REQUIRE(o.w == 4);
        CHECK(o.data[0] == doctest::Approx(0.0));
        CHECK(o.data[1] == doctest::Approx(0.25));
        CHECK(o.data[2] == doctest::Approx(0.75));
        CHECK(o.data[3] == doctest::Approx(1.0));
    }
}

TEST_CASE("concat_channels") {
    Graph g;
    const VarId a = g.leaf(Tensor(1, 1, 2, 2, 2.0f), true);
    const VarId b = g.leaf(Tensor(1, 1, 2, 2, 3.0f), true);
    const VarId cat = g.concat_channels(a, b);
    const Tensor& o = g.value(cat);
    REQUIRE(o.c == 2);
    for (int i = 0; i < 4; ++i) {
        CHECK(o.data[i] == 2.0f);
        CHECK(o.data[4 + i] == 3.0f);
    }
    g.backward(g.sum(cat));
    for (float v : g.grad(a).data) CHECK(v == 1.0f);
    for (float v : g.grad(b).data) CHECK(v == 1.0f);

    const VarId c = g.leaf(Tensor(1, 1, 3, 2), false);
    CHECK_THROWS_AS(g.concat_channels(a, c), std::invalid_argument);
}

TEST_CASE("concat round-trips its inputs bit-exactly") {
    Rng rng(31);
    const Tensor a = rand_tensor(2, 2, 3, 4, rng);
    const Tensor b = rand_tensor(2, 3, 3, 4, rng);
    Graph g;
    const Tensor& o = g.value(g.concat_channels(g.leaf(a, false), g.leaf(b, false)));
    for (int n = 0; n < 2; ++n) {
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 12; ++i) CHECK(o.plane(n, c)[i] == a.plane(n, c)[i]);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 12; ++i) CHECK(o.plane(n, 2 + c)[i] == b.plane(n, c)[i]);
    }
}

TEST_CASE("residual_add") {
    Tensor a(1, 1, 1, 2), b(1, 1, 1, 2);
    a.data = {1, 2};
    b.data = {3, 4};
    Graph g;
    const VarId ai = g.leaf(a, true);
    const VarId bi = g.leaf(b, true);
    const VarId sum = g.residual_add(ai, bi);
    CHECK(g.value(sum).data == std::vector<float>{4, 6});

    const VarId zi = g.leaf(Tensor(1, 1, 1, 2, 0.0f), false);
    CHECK(g.value(g.residual_add(ai, zi)).data == a.data);

    g.backward(g.sum(sum));
    CHECK(g.grad(ai).data == std::vector<float>{1, 1});
    CHECK(g.grad(bi).data == std::vector<float>{1, 1});

    CHECK_THROWS_AS(g.residual_add(ai, g.leaf(Tensor(1, 1, 2, 2), false)), std::invalid_argument);
}

TEST_CASE("bce_loss") {
    SUBCASE("confident correct prediction is near zero") {
        Graph g;
        const VarId z = g.leaf(Tensor(1, 1, 1, 1, 40.0f), false);
        const float loss = g.value(g.bce_loss(z, Tensor(1, 1, 1, 1, 1.0f))).data[0];
        CHECK(loss >= 0.0f);
        CHECK(loss < 1e-6f);
    }
    SUBCASE("z=0, y=1 gives ln 2") {
        Graph g;
        const VarId z = g.leaf(Tensor(1, 1, 1, 1, 0.0f), false);
        CHECK(g.value(g.bce_loss(z, Tensor(1, 1, 1, 1, 1.0f))).data[0] ==
              doctest::Approx(0.693147).epsilon(1e-6));
    }
    SUBCASE("gradient at z=0 is (0.5 - y)/count") {
        Tensor target(1, 1, 2, 2);
        target.data = {1, 0, 1, 0};
        Graph g;
        const VarId z = g.leaf(Tensor(1, 1, 2, 2, 0.0f), true);
        g.backward(g.bce_loss(z, target));
        const Tensor& gz = g.grad(z);
        for (int i = 0; i < 4; ++i)
            CHECK(gz.data[i] == doctest::Approx((0.5 - target.data[i]) / 4.0));
    }
    SUBCASE("finite for extreme logits") {
        Tensor z(1, 1, 1, 2);
        z.data = {500.0f, -500.0f};
        Tensor y(1, 1, 1, 2);
        y.data = {0.0f, 1.0f};
        Graph g;
        CHECK(std::isfinite(g.value(g.bce_loss(g.leaf(z, false), y)).data[0]));
    }
    SUBCASE("non-binary target rejected") {
        Graph g;
        const VarId z = g.leaf(Tensor(1, 1, 1, 1, 0.0f), false);
        CHECK_THROWS_AS(g.bce_loss(z, Tensor(1, 1, 1, 1, 0.5f)), std::invalid_argument);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("seed gradient of a lone scalar") {
        Graph g;
        const VarId p = g.leaf(Tensor(1, 1, 1, 1, 2.0f), true);
        g.backward(p);
        CHECK(g.grad(p).data[0] == 1.0f);
    }
    SUBCASE("fan-out accumulates") {
        Graph g;
        const VarId p = g.leaf(Tensor(1, 1, 1, 1, 2.0f), true);
        g.backward(g.residual_add(p, p));
        CHECK(g.grad(p).data[0] == 2.0f);
    }
    SUBCASE("non-scalar loss rejected") {
        Graph g;
        const VarId p = g.leaf(Tensor(1, 1, 2, 2), true);
        CHECK_THROWS_AS(g.backward(p), std::invalid_argument);
    }
    SUBCASE("zero_grad clears accumulations") {
        Graph g;
        const VarId p = g.leaf(Tensor(1, 1, 1, 1, 2.0f), true);
        g.backward(p);
        g.zero_grad();
        CHECK(g.grad(p).data[0] == 0.0f);
    }
}

TEST_CASE("finite differences: linear graph is exact") {
    Rng rng(17);
    TensorT<double> a(1, 1, 2, 2), b(1, 1, 2, 2);
    for (auto& v : a.data) v = rng.uniform(-1, 1);
    for (auto& v : b.data) v = rng.uniform(-1, 1);
    auto builder = [](GraphT<double>& g, const std::vector<TensorT<double>>& in)
        -> std::pair<VarId, std::vector<VarId>> {
        const VarId ai = g.leaf(in[0], true);
        const VarId bi = g.leaf(in[1], true);
        return {g.sum(g.residual_add(g.residual_add(ai, bi), ai)), {ai, bi}};
    };
    const CheckReport rep = finite_diff_check(builder, {a, b});
    CHECK(rep.max_rel_err <= 1e-9);
}

TEST_CASE("finite differences: conv -> prelu -> bce composite") {
    Rng rng(23);
    TensorT<double> x(1, 2, 5, 5), w(2, 2, 3, 3), b(1, 2, 1, 1), slope(1, 2, 1, 1);
    for (auto& v : x.data) v = rng.uniform(-1, 1);
    for (auto& v : w.data) v = rng.uniform(-0.5, 0.5);
    for (auto& v : b.data) v = rng.uniform(-0.5, 0.5);
    for (auto& v : slope.data) v = rng.uniform(0.1, 0.4);
    TensorT<double> target(1, 2, 5, 5);
    for (auto& v : target.data) v = rng.next_double() < 0.5 ? 1.0 : 0.0;

    auto builder = [target](GraphT<double>& g, const std::vector<TensorT<double>>& in)
        -> std::pair<VarId, std::vector<VarId>> {
        std::vector<VarId> ids;
        for (const auto& t : in) ids.push_back(g.leaf(t, true));
        const VarId conv = g.conv2d(ids[0], ids[1], ids[2], 1, 1, 1);
        return {g.bce_loss(g.prelu(conv, ids[3]), target), ids};
    };
    const CheckReport rep = finite_diff_check(builder, {x, w, b, slope});
    CHECK(rep.max_rel_err <= 1e-5);
    CHECK(rep.checked > 0);
}
