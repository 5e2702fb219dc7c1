#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "cocoreco/common.hpp"
#include "cocoreco/gradcheck.hpp"
#include "cocoreco/ops.hpp"
#include "cocoreco/tensor.hpp"
#include "oracles.hpp"

using namespace cocoreco;

namespace {

TensorD random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                      double hi = 1.0) {
    TensorD t = TensorD::zeros(std::move(shape));
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

bool close(double a, double b, double tol = 1e-9) {
    return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), 1.0});
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 input and kernel, pad 1") {
    TensorD x = TensorD::full({1, 3, 3}, 1.0);
    TensorD k = TensorD::full({1, 1, 3, 3}, 1.0);
    TensorD b = TensorD::zeros({1});
    TensorD y = conv2d(x, k, b, 1, 1);
    REQUIRE(y.shape() == std::vector<int>({1, 3, 3}));
    // overlap counting: corners 4, edge centers 6, center 9
    const double want[9] = {4, 6, 4, 6, 9, 6, 4, 6, 4};
    for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(want[i]));
}

TEST_CASE("conv2d: 1x1 unit kernel is identity") {
    Rng rng(7);
    TensorD x = random_tensor({3, 4, 5}, rng);
    TensorD k = TensorD::zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) k.data()[c * 3 + c] = 1.0;
    TensorD y = conv2d(x, k, TensorD::zeros({3}), 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches nested-loop oracle") {
    Rng rng(11);
    // the stated instance: 2-channel 5x5 input, three 3x3 kernels, stride 2
    TensorD x = random_tensor({2, 5, 5}, rng);
    TensorD k = random_tensor({3, 2, 3, 3}, rng);
    TensorD b = random_tensor({3}, rng);
    TensorD y = conv2d(x, k, b, 2, 0);
    int oh = 0, ow = 0;
    auto ref = oracle::conv2d_ref(x.vec(), 2, 5, 5, k.vec(), 3, 3, 3, b.vec(), 2, 0, oh, ow);
    REQUIRE(y.shape() == std::vector<int>({3, oh, ow}));
    for (size_t i = 0; i < ref.size(); ++i)
        CHECK(close(y.data()[i], ref[i], 1e-6));

    // randomized configurations, batched and unbatched
    for (int trial = 0; trial < 40; ++trial) {
        int C = 1 + static_cast<int>(rng.below(3));
        int H = 3 + static_cast<int>(rng.below(6));
        int W = 3 + static_cast<int>(rng.below(6));
        int Cout = 1 + static_cast<int>(rng.below(3));
        int kk = 1 + static_cast<int>(rng.below(3));
        int stride = 1 + static_cast<int>(rng.below(2));
        int pad = static_cast<int>(rng.below(2));
        if (kk > H + 2 * pad || kk > W + 2 * pad) continue;
        int B = 1 + static_cast<int>(rng.below(2));
        TensorD xb = random_tensor({B, C, H, W}, rng);
        TensorD kb = random_tensor({Cout, C, kk, kk}, rng);
        TensorD bb = random_tensor({Cout}, rng);
        TensorD yb = conv2d(xb, kb, bb, stride, pad);
        for (int s = 0; s < B; ++s) {
            std::vector<double> sample(xb.data() + static_cast<size_t>(s) * C * H * W,
                                       xb.data() + static_cast<size_t>(s + 1) * C * H * W);
            auto r = oracle::conv2d_ref(sample, C, H, W, kb.vec(), Cout, kk, kk,
                                        bb.vec(), stride, pad, oh, ow);
            const double* got = yb.data() + static_cast<size_t>(s) * r.size();
            for (size_t i = 0; i < r.size(); ++i) CHECK(close(got[i], r[i], 1e-6));
        }
    }
}

TEST_CASE("conv2d with zero bias is homogeneous") {
    Rng rng(13);
    TensorD x = random_tensor({2, 6, 6}, rng);
    TensorD k = random_tensor({3, 2, 3, 3}, rng);
    TensorD b = TensorD::zeros({3});
    TensorD base = conv2d(x, k, b, 1, 1);
    for (double alpha : {-2.0, 0.5, 3.0}) {
        TensorD xs = x.clone();
        for (auto& v : xs.vec()) v *= alpha;
        TensorD y = conv2d(xs, k, b, 1, 1);
        for (size_t i = 0; i < y.size(); ++i)
            CHECK(close(y.data()[i], alpha * base.data()[i], 1e-6));
    }
}

TEST_CASE("conv2d shape errors carry both shapes") {
    TensorD x = TensorD::zeros({2, 4, 4});
    TensorD k = TensorD::zeros({1, 3, 3, 3});
    CHECK_THROWS_WITH_AS(conv2d(x, k, TensorD::zeros({1}), 1, 0),
                         doctest::Contains("[2,4,4]"), shape_error);
    CHECK_THROWS_AS(conv2d(x, TensorD::zeros({1, 2, 7, 7}), TensorD::zeros({1}), 1, 0),
                    shape_error);
    CHECK_THROWS_AS(conv2d(x, TensorD::zeros({1, 2, 3, 3}), TensorD::zeros({2}), 1, 0),
                    shape_error);
    CHECK_THROWS_AS(conv2d(x, TensorD::zeros({1, 2, 3, 3}), TensorD::zeros({1}), 0, 0),
                    value_error);
}

TEST_CASE("pool2d: trivial cases") {
    TensorD c = TensorD::full({2, 4, 4}, 3.25);
    TensorD avg = pool2d(c, PoolKind::avg, 2, 2);
    for (size_t i = 0; i < avg.size(); ++i) CHECK(avg.data()[i] == 3.25);

    TensorD x = TensorD::from({1, 2, 2}, {1, 2, 3, 4});
    TensorD mx = pool2d(x, PoolKind::max, 2, 2);
    REQUIRE(mx.shape() == std::vector<int>({1, 1, 1}));
    CHECK(mx.data()[0] == 4.0);

    CHECK_THROWS_AS(pool2d(x, PoolKind::max, 0, 1), value_error);
    CHECK_THROWS_AS(pool2d(x, PoolKind::max, 2, 0), value_error);
}

TEST_CASE("pool2d matches loop oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        int C = 1 + static_cast<int>(rng.below(3));
        int H = 2 + static_cast<int>(rng.below(7));
        int W = 2 + static_cast<int>(rng.below(7));
        int k = 1 + static_cast<int>(rng.below(std::min(H, W)));
        int s = 1 + static_cast<int>(rng.below(3));
        TensorD x = random_tensor({C, H, W}, rng);
        for (bool is_max : {true, false}) {
            TensorD y = pool2d(x, is_max ? PoolKind::max : PoolKind::avg, k, s);
            int oh = 0, ow = 0;
            auto ref = oracle::pool2d_ref(x.vec(), C, H, W, is_max, k, s, oh, ow);
            REQUIRE(y.shape() == std::vector<int>({C, oh, ow}));
            for (size_t i = 0; i < ref.size(); ++i)
                CHECK(close(y.data()[i], ref[i], 1e-6));
        }
    }
}

TEST_CASE("upsample_bilinear2d: constants and 1x1") {
    TensorD c = TensorD::full({2, 3, 3}, 0.7);
    TensorD up = upsample_bilinear2d(c, 7, 5);
    for (size_t i = 0; i < up.size(); ++i) CHECK(up.data()[i] == 0.7);

    TensorD one = TensorD::from({1, 1, 1}, {0.42});
    TensorD up1 = upsample_bilinear2d(one, 4, 6);
    for (size_t i = 0; i < up1.size(); ++i) CHECK(up1.data()[i] == 0.42);
}

TEST_CASE("upsample_bilinear2d matches closed-form oracle") {
    Rng rng(19);
    TensorD x = random_tensor({1, 2, 2}, rng);
    TensorD y = upsample_bilinear2d(x, 4, 4);
    auto ref = oracle::upsample_ref(x.vec(), 1, 2, 2, 4, 4);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(close(y.data()[i], ref[i], 1e-6));

    for (int trial = 0; trial < 30; ++trial) {
        int C = 1 + static_cast<int>(rng.below(3));
        int H = 1 + static_cast<int>(rng.below(5));
        int W = 1 + static_cast<int>(rng.below(5));
        int oh = 1 + static_cast<int>(rng.below(8));
        int ow = 1 + static_cast<int>(rng.below(8));
        TensorD xb = random_tensor({C, H, W}, rng);
        TensorD yb = upsample_bilinear2d(xb, oh, ow);
        auto rb = oracle::upsample_ref(xb.vec(), C, H, W, oh, ow);
        for (size_t i = 0; i < rb.size(); ++i) CHECK(close(yb.data()[i], rb[i], 1e-6));
    }
}

TEST_CASE("avg pool then bilinear upsample reproduces a constant exactly") {
    TensorD c = TensorD::full({3, 8, 8}, 1.0 / 3.0);
    TensorD down = pool2d(c, PoolKind::avg, 2, 2);
    TensorD back = upsample_bilinear2d(down, 8, 8);
    for (size_t i = 0; i < back.size(); ++i) CHECK(back.data()[i] == c.data()[i]);
}

TEST_CASE("dense: identity, zero weight, oracle") {
    TensorD x = TensorD::from({2, 3}, {1, 2, 3, 4, 5, 6});
    TensorD eye = TensorD::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
    TensorD y = dense(x, eye, TensorD::zeros({3}));
    for (size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);

    TensorD b = TensorD::from({4}, {1, -1, 2, 0.5});
    TensorD z = dense(x, TensorD::zeros({4, 3}), b);
    for (int r = 0; r < 2; ++r)
        for (int k = 0; k < 4; ++k) CHECK(z.data()[r * 4 + k] == b.data()[k]);

    Rng rng(23);
    for (int trial = 0; trial < 30; ++trial) {
        int B = 1 + static_cast<int>(rng.below(4));
        int D = 1 + static_cast<int>(rng.below(6));
        int K = 1 + static_cast<int>(rng.below(5));
        TensorD xb = random_tensor({B, D}, rng);
        TensorD wb = random_tensor({K, D}, rng);
        TensorD bb = random_tensor({K}, rng);
        TensorD yb = dense(xb, wb, bb);
        auto ref = oracle::dense_ref(xb.vec(), B, D, wb.vec(), K, bb.vec());
        for (size_t i = 0; i < ref.size(); ++i) CHECK(close(yb.data()[i], ref[i], 1e-6));
    }
    CHECK_THROWS_AS(dense(x, TensorD::zeros({4, 5}), TensorD::zeros({4})), shape_error);
}

TEST_CASE("elementwise_add: identity, commutativity, oracle") {
    Rng rng(29);
    TensorD a = random_tensor({2, 3, 4}, rng);
    TensorD zero = TensorD::zeros({2, 3, 4});
    TensorD y = elementwise_add(a, zero);
    for (size_t i = 0; i < a.size(); ++i) CHECK(y.data()[i] == a.data()[i]);

    TensorD b = random_tensor({2, 3, 4}, rng);
    TensorD ab = elementwise_add(a, b);
    TensorD ba = elementwise_add(b, a);
    for (size_t i = 0; i < ab.size(); ++i) {
        CHECK(ab.data()[i] == ba.data()[i]);
        CHECK(close(ab.data()[i], a.data()[i] + b.data()[i], 1e-12));
    }
    CHECK_THROWS_AS(elementwise_add(a, TensorD::zeros({2, 3, 5})), shape_error);
}

TEST_CASE("scale_channels: identities and single-channel doubling") {
    Rng rng(31);
    TensorD x = random_tensor({3, 2, 2}, rng);
    TensorD ones = TensorD::full({3}, 1.0);
    TensorD same = scale_channels(x, ones);
    for (size_t i = 0; i < x.size(); ++i) CHECK(same.data()[i] == x.data()[i]);

    TensorD zeros = TensorD::zeros({3});
    TensorD gone = scale_channels(x, zeros);
    for (size_t i = 0; i < x.size(); ++i) CHECK(gone.data()[i] == 0.0);

    TensorD w = TensorD::from({3}, {2.0, 1.0, 1.0});
    TensorD y = scale_channels(x, w);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i)
            CHECK(y.data()[c * 4 + i] == (c == 0 ? 2.0 : 1.0) * x.data()[c * 4 + i]);

    CHECK_THROWS_AS(scale_channels(x, TensorD::zeros({2})), shape_error);
}

TEST_CASE("reduce_spatial: trivial and oracle") {
    TensorD peak = TensorD::zeros({1, 3, 3});
    peak.data()[4] = 5.5;
    CHECK(reduce_spatial(peak, ReduceKind::max).data()[0] == 5.5);

    TensorD ones = TensorD::full({1, 4, 4}, 1.0);
    CHECK(reduce_spatial(ones, ReduceKind::sum).data()[0] == 16.0);

    Rng rng(37);
    for (int trial = 0; trial < 30; ++trial) {
        int C = 1 + static_cast<int>(rng.below(4));
        int H = 1 + static_cast<int>(rng.below(5));
        int W = 1 + static_cast<int>(rng.below(5));
        TensorD x = random_tensor({C, H, W}, rng);
        for (auto kind : {ReduceKind::max, ReduceKind::sum, ReduceKind::mean}) {
            TensorD y = reduce_spatial(x, kind);
            auto ref = oracle::reduce_ref(x.vec(), C, H, W,
                                          kind == ReduceKind::max   ? oracle::Red::max
                                          : kind == ReduceKind::sum ? oracle::Red::sum
                                                                    : oracle::Red::mean);
            for (int c = 0; c < C; ++c) CHECK(close(y.data()[c], ref[static_cast<size_t>(c)], 1e-9));
        }
    }
}

TEST_CASE("softmax_cross_entropy examples") {
    TensorD equal = TensorD::zeros({1, 5});
    CHECK(close(softmax_cross_entropy(equal, {2}).item(), std::log(5.0), 1e-12));

    TensorD sure = TensorD::from({1, 3}, {0.0, 1000.0, 0.0});
    CHECK(softmax_cross_entropy(sure, {1}).item() < 1e-6);

    TensorD l = TensorD::from({1, 3}, {1.0, 2.0, 3.0});
    double want = std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
    CHECK(close(softmax_cross_entropy(l, {2}).item(), want, 1e-12));
    CHECK(softmax_cross_entropy(l, {2}).item() == doctest::Approx(0.40761).epsilon(1e-4));

    CHECK_THROWS_AS(softmax_cross_entropy(l, {3}), value_error);
    CHECK_THROWS_AS(softmax_cross_entropy(l, {-1}), value_error);

    Rng rng(41);
    for (int trial = 0; trial < 30; ++trial) {
        int B = 1 + static_cast<int>(rng.below(4));
        int K = 2 + static_cast<int>(rng.below(5));
        TensorD logits = random_tensor({B, K}, rng, -3, 3);
        std::vector<int> labels;
        for (int b = 0; b < B; ++b) labels.push_back(static_cast<int>(rng.below(K)));
        CHECK(close(softmax_cross_entropy(logits, labels).item(),
                    oracle::softmax_ce_ref(logits.vec(), B, K, labels), 1e-9));
    }
}

TEST_CASE("mse_loss examples") {
    Rng rng(43);
    TensorD a = random_tensor({2, 3}, rng);
    CHECK(mse_loss(a, a).item() == 0.0);

    TensorD shifted = a.clone();
    for (auto& v : shifted.vec()) v += 1.0;
    CHECK(close(mse_loss(a, shifted).item(), 1.0, 1e-12));

    TensorD b = random_tensor({2, 3}, rng);
    CHECK(close(mse_loss(a, b).item(), oracle::mse_ref(a.vec(), b.vec()), 1e-12));
    CHECK_THROWS_AS(mse_loss(a, TensorD::zeros({3, 2})), shape_error);
}

TEST_CASE("relu basics") {
    TensorD x = TensorD::from({4}, {-2.0, 0.0, 0.5, 3.0});
    TensorD y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 0.5);
    CHECK(y.data()[3] == 3.0);
}

TEST_CASE("forward ops reject non-finite results") {
    TensorD big = TensorD::full({1, 2, 2}, 1e308);
    TensorD k = TensorD::full({1, 1, 1, 1}, 1e308);
    CHECK_THROWS_AS(conv2d(big, k, TensorD::zeros({1}), 1, 0), numeric_error);
}

TEST_CASE("backward: sum gradient is all ones") {
    TensorD x = TensorD::full({1, 2, 3}, 0.5);
    x.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    TensorD y = reduce_spatial(x, ReduceKind::sum);
    backward(y);
    REQUIRE(x.has_grad());
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward: unused input receives exact zeros") {
    TensorD a = TensorD::full({2}, 1.0);
    TensorD b = TensorD::full({2}, 2.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    TensorD unused = elementwise_add(b, b);  // on tape but off the loss path
    TensorD loss = mse_loss(a, TensorD::zeros({2}));
    backward(loss);
    REQUIRE(b.has_grad());
    for (double g : b.grad()) CHECK(g == 0.0);
    (void)unused;
}

TEST_CASE("backward twice accumulates exactly double") {
    TensorD x = TensorD::from({1, 2, 2}, {1, 2, 3, 4});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    TensorD y = reduce_spatial(relu(x), ReduceKind::sum);
    backward(y);
    auto once = x.grad();
    backward(y);
    auto twice = x.grad();
    for (size_t i = 0; i < once.size(); ++i) CHECK(twice[i] == 2.0 * once[i]);
}

TEST_CASE("backward error paths") {
    TensorD x = TensorD::full({2, 2}, 1.0);
    CHECK_THROWS_AS(backward(x), value_error);  // no active tape
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    CHECK_THROWS_AS(backward(x), shape_error);  // non-scalar
    TensorD s = TensorD::scalar(1.0);
    CHECK_THROWS_AS(backward(s), value_error);  // detached
}

TEST_CASE("forward ops are bit-deterministic") {
    Rng rng(47);
    TensorD x = random_tensor({2, 3, 8, 8}, rng);
    TensorD k = random_tensor({4, 3, 3, 3}, rng);
    TensorD b = random_tensor({4}, rng);
    TensorD y1 = conv2d(x, k, b, 2, 1);
    TensorD y2 = conv2d(x, k, b, 2, 1);
    CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(double)) == 0);
}

TEST_CASE("grad_check: every differentiable op") {
    Rng rng(53);
    const double eps = 1e-5, tol = 1e-4;

    for (int inst = 0; inst < 5; ++inst) {
        // conv2d w.r.t. input, kernel, bias
        {
            TensorD x = random_tensor({2, 4, 4}, rng);
            TensorD k = random_tensor({3, 2, 3, 3}, rng);
            TensorD b = random_tensor({3}, rng);
            auto fn = [](const std::vector<TensorD>& in) {
                TensorD y = conv2d(in[0], in[1], in[2], 1, 1);
                return mse_loss(y, TensorD::zeros(y.shape()));
            };
            CHECK(grad_check<double>(fn, {x, k, b}, eps) < tol);
        }
        // pooling
        for (auto kind : {PoolKind::avg, PoolKind::max}) {
            TensorD x = random_tensor({2, 4, 4}, rng);
            auto fn = [kind](const std::vector<TensorD>& in) {
                TensorD y = pool2d(in[0], kind, 2, 2);
                return mse_loss(y, TensorD::zeros(y.shape()));
            };
            CHECK(grad_check<double>(fn, {x}, eps) < tol);
        }
        // upsample
        {
            TensorD x = random_tensor({2, 3, 3}, rng);
            auto fn = [](const std::vector<TensorD>& in) {
                TensorD y = upsample_bilinear2d(in[0], 5, 7);
                return mse_loss(y, TensorD::zeros(y.shape()));
            };
            CHECK(grad_check<double>(fn, {x}, eps) < tol);
        }
        // dense
        {
            TensorD x = random_tensor({2, 3}, rng);
            TensorD w = random_tensor({4, 3}, rng);
            TensorD b = random_tensor({4}, rng);
            auto fn = [](const std::vector<TensorD>& in) {
                TensorD y = dense(in[0], in[1], in[2]);
                return mse_loss(y, TensorD::zeros(y.shape()));
            };
            CHECK(grad_check<double>(fn, {x, w, b}, eps) < tol);
        }
        // add, relu, scale_channels, reductions, losses
        {
            TensorD a = random_tensor({2, 3, 3}, rng);
            TensorD b = random_tensor({2, 3, 3}, rng);
            auto fn = [](const std::vector<TensorD>& in) {
                TensorD y = relu(elementwise_add(in[0], in[1]));
                return mse_loss(y, TensorD::full(y.shape(), 0.3));
            };
            CHECK(grad_check<double>(fn, {a, b}, eps) < tol);
        }
        {
            TensorD x = random_tensor({3, 2, 2}, rng);
            TensorD w = random_tensor({3}, rng, 0.1, 2.0);
            auto fn = [](const std::vector<TensorD>& in) {
                TensorD y = scale_channels(in[0], in[1]);
                return mse_loss(y, TensorD::zeros(y.shape()));
            };
            CHECK(grad_check<double>(fn, {x, w}, eps) < tol);
        }
        for (auto kind : {ReduceKind::max, ReduceKind::sum, ReduceKind::mean}) {
            TensorD x = random_tensor({3, 3, 3}, rng);
            auto fn = [kind](const std::vector<TensorD>& in) {
                TensorD y = reduce_spatial(in[0], kind);
                return mse_loss(y, TensorD::zeros(y.shape()));
            };
            CHECK(grad_check<double>(fn, {x}, eps) < tol);
        }
        {
            TensorD logits = random_tensor({3, 4}, rng, -2, 2);
            std::vector<int> labels = {0, 2, 3};
            auto fn = [labels](const std::vector<TensorD>& in) {
                return softmax_cross_entropy(in[0], labels);
            };
            CHECK(grad_check<double>(fn, {logits}, eps) < tol);
        }
        {
            TensorD a = random_tensor({2, 3}, rng);
            TensorD b = random_tensor({2, 3}, rng);
            auto fn = [](const std::vector<TensorD>& in) {
                return mse_loss(in[0], in[1]);
            };
            CHECK(grad_check<double>(fn, {a, b}, eps) < tol);
        }
    }
}

TEST_CASE("grad_check: linear map is exact to 1e-10") {
    TensorD x = TensorD::from({3}, {0.2, -0.4, 0.9});
    auto fn = [](const std::vector<TensorD>& in) {
        TensorD w = TensorD::from({1, 3}, {2.0, -1.0, 0.5});
        TensorD flat = in[0].reshaped({1, 3});
        return dense(flat, w, TensorD::zeros({1})).reshaped({1});
    };
    CHECK(grad_check<double>(fn, {x}, 1e-5) < 1e-10);
}

TEST_CASE("grad_check flags a corrupted backward rule") {
    // custom node whose backward rule is wrong on purpose: y = x^2 recorded
    // with gradient 3x instead of 2x
    auto corrupt_square = [](const TensorD& x) {
        TensorD out = TensorD::zeros(x.shape());
        for (size_t i = 0; i < x.size(); ++i)
            out.data()[i] = x.data()[i] * x.data()[i];
        auto* tp = Tape<double>::active();
        if (tp && tp->tracked(x)) {
            int px = tp->parent_of(x);
            auto xi = x.impl();
            tp->record("corrupt_square", out, {px},
                       [px, xi](const std::vector<double>& g, Tape<double>& t) {
                           if (px < 0) return;
                           auto& gx = t.grad_buf(px);
                           for (size_t i = 0; i < g.size(); ++i)
                               gx[i] += 3.0 * xi->data[i] * g[i];
                       });
        }
        return out;
    };
    TensorD x = TensorD::from({3}, {0.5, 1.5, -0.7});
    auto fn = [&](const std::vector<TensorD>& in) {
        return reduce_spatial(corrupt_square(in[0]).reshaped({1, 1, 3}),
                              ReduceKind::sum);
    };
    CHECK(grad_check<double>(fn, {x}, 1e-5) > 1e-4);
}

TEST_CASE("independent tapes on separate tensors") {
    // two tapes over disjoint tensors; gradients stay independent
    TensorD x1 = TensorD::full({2}, 1.0);
    TensorD x2 = TensorD::full({2}, 2.0);
    x1.set_requires_grad(true);
    x2.set_requires_grad(true);
    {
        Tape<double> t1;
        Tape<double>::Scope s1(t1);
        backward(mse_loss(x1, TensorD::zeros({2})));
    }
    {
        Tape<double> t2;
        Tape<double>::Scope s2(t2);
        backward(mse_loss(x2, TensorD::zeros({2})));
    }
    CHECK(x1.grad()[0] == doctest::Approx(1.0));
    CHECK(x2.grad()[0] == doctest::Approx(2.0));
}
