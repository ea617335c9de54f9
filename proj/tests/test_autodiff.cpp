#include <doctest.h>

#include <cmath>

#include "latentbank/autodiff.hpp"

using namespace latentbank;

TEST_CASE("backward through frozen weight reaches trainable input only") {
    // loss = sum(W x) with W frozen: d/dx = column sums of W
    TensorD w{{1.0, 2.0}, {3.0, 4.0}};
    TensorD x{{5.0}, {6.0}};
    Tape<double> tape;
    Var<double> wv = tape.leaf(w, false);
    Var<double> xv = tape.leaf(x, true);
    Var<double> loss = ad::sum_all(ad::matmul(wv, xv));
    tape.backward(loss);
    TensorD gx = tape.grad(xv);
    CHECK(gx(0, 0) == doctest::Approx(4.0)); // 1 + 3
    CHECK(gx(1, 0) == doctest::Approx(6.0)); // 2 + 4
    CHECK_THROWS_AS(tape.grad(wv), ContractError); // frozen leaves carry no gradient
}

TEST_CASE("loss independent of leaf gives zero gradient") {
    Tape<double> tape;
    Var<double> a = tape.leaf(TensorD{{1.0, 2.0}}, true);
    Var<double> b = tape.leaf(TensorD{{3.0, 4.0}}, true);
    Var<double> loss = ad::sum_all(ad::hadamard(a, a));
    tape.backward(loss);
    TensorD gb = tape.grad(b);
    CHECK(gb(0, 0) == 0.0);
    CHECK(gb(0, 1) == 0.0);
}

TEST_CASE("softmax gradient matches central differences at 64-bit") {
    TensorD x{{0.3, -1.2, 0.7}, {2.0, 0.1, -0.5}};
    double err = grad_check<double>(
        [](Tape<double>& t, const std::vector<Var<double>>& leaves) {
            Var<double> y = ad::softmax_rows(leaves[0]);
            Var<double> w = t.constant(TensorD{{0.2, -0.7, 1.3}, {0.5, 0.4, -0.1}});
            return ad::sum_all(ad::hadamard(y, w));
        },
        {x}, 1e-5);
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check quadratic") {
    // f(x) = x^T x, gradient 2x
    TensorD x{{1.0}, {2.0}};
    double err = grad_check<double>(
        [](Tape<double>&, const std::vector<Var<double>>& leaves) {
            return ad::sum_all(ad::hadamard(leaves[0], leaves[0]));
        },
        {x}, 1e-5);
    CHECK(err <= 1e-9);
}

TEST_CASE("grad_check linear") {
    TensorD x{{1.5, -2.0, 0.25}};
    double err = grad_check<double>(
        [](Tape<double>& t, const std::vector<Var<double>>& leaves) {
            Var<double> c = t.constant(TensorD{{2.0, 3.0, -1.0}});
            return ad::sum_all(ad::hadamard(leaves[0], c));
        },
        {x}, 1e-4);
    CHECK(err <= 1e-10);
}

TEST_CASE("sigmoid derivative at zero is one quarter") {
    Tape<double> tape;
    Var<double> x = tape.leaf(TensorD{{0.0}}, true);
    Var<double> y = ad::sigmoid(x);
    tape.backward(ad::sum_all(y));
    CHECK(tape.grad(x)(0, 0) == doctest::Approx(0.25));
}

TEST_CASE("composite of primitives matches finite differences") {
    // attention-flavoured composite: softmax(QK^T) V -> rmsnorm -> gate
    Rng rng(3);
    TensorD q = TensorD::normal(3, 4, 1.0, rng.stream("q"));
    TensorD k = TensorD::normal(5, 4, 1.0, rng.stream("k"));
    TensorD v = TensorD::normal(5, 4, 1.0, rng.stream("v"));
    auto build = [](Tape<double>& t, const std::vector<Var<double>>& leaves) {
        Var<double> scores = ad::scale(ad::matmul(leaves[0], ad::transpose(leaves[1])), 0.5);
        Var<double> attn = ad::matmul(ad::softmax_rows(scores), leaves[2]);
        Var<double> normed = ad::rmsnorm_rows(attn, 1e-6);
        Var<double> gate = ad::sigmoid(ad::row_mean(normed));
        return ad::mean_all(ad::mul_rowvec(normed, gate));
    };
    CHECK(grad_check<double>(build, {q, k, v}, 1e-6) <= 1e-6);

    // 32-bit backward against the 64-bit FD oracle stays within the coarse
    // tolerance; FD at float precision would drown in rounding noise.
    TensorF qf(3, 4), kf(5, 4), vf(5, 4);
    for (size_t i = 0; i < q.size(); ++i) qf.data()[i] = static_cast<float>(q.data()[i]);
    for (size_t i = 0; i < k.size(); ++i) kf.data()[i] = static_cast<float>(k.data()[i]);
    for (size_t i = 0; i < v.size(); ++i) vf.data()[i] = static_cast<float>(v.data()[i]);
    auto buildf = [](Tape<float>& t, const std::vector<Var<float>>& leaves) {
        (void)t;
        Var<float> scores = ad::scale(ad::matmul(leaves[0], ad::transpose(leaves[1])), 0.5f);
        Var<float> attn = ad::matmul(ad::softmax_rows(scores), leaves[2]);
        Var<float> normed = ad::rmsnorm_rows(attn, 1e-6f);
        Var<float> gate = ad::sigmoid(ad::row_mean(normed));
        return ad::mean_all(ad::mul_rowvec(normed, gate));
    };
    Tape<float> ftape;
    std::vector<Var<float>> fvars{ftape.leaf(qf, true), ftape.leaf(kf, true),
                                  ftape.leaf(vf, true)};
    ftape.backward(buildf(ftape, fvars));

    Tape<double> dtape;
    std::vector<Var<double>> dvars{dtape.leaf(q, true), dtape.leaf(k, true),
                                   dtape.leaf(v, true)};
    dtape.backward(build(dtape, dvars));

    for (size_t li = 0; li < fvars.size(); ++li) {
        TensorF gf = ftape.grad(fvars[li]);
        TensorD gd = dtape.grad(dvars[li]);
        for (size_t i = 0; i < gf.size(); ++i) {
            double a = static_cast<double>(gf.data()[i]);
            double b = gd.data()[i];
            double rel = std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
            CHECK(rel <= 1e-3);
        }
    }
}

TEST_CASE("detach blocks gradient flow to ancestors") {
    Tape<double> tape;
    Var<double> x = tape.leaf(TensorD{{2.0, 3.0}}, true);
    Var<double> d = ad::detach(ad::hadamard(x, x));
    Var<double> loss = ad::sum_all(ad::hadamard(d, x));
    tape.backward(loss);
    // only the direct (non-detached) path contributes: d loss/dx = d.value
    TensorD gx = tape.grad(x);
    CHECK(gx(0, 0) == doctest::Approx(4.0));
    CHECK(gx(0, 1) == doctest::Approx(9.0));
}

TEST_CASE("detached-only dependency contributes exactly zero") {
    Tape<double> tape;
    Var<double> x = tape.leaf(TensorD{{2.0}}, true);
    Var<double> loss = ad::sum_all(ad::detach(ad::hadamard(x, x)));
    tape.backward(loss);
    CHECK(tape.grad(x)(0, 0) == 0.0);
}

TEST_CASE("frozen leaf bytes identical after backward") {
    TensorD w{{1.25, -0.5}, {0.75, 2.0}};
    uint64_t before = w.byte_hash();
    Tape<double> tape;
    Var<double> wv = tape.leaf(w, false);
    Var<double> xv = tape.leaf(TensorD{{1.0}, {1.0}}, true);
    tape.backward(ad::sum_all(ad::matmul(wv, xv)));
    CHECK(wv.value().byte_hash() == before);
    CHECK(w.byte_hash() == before);
}

TEST_CASE("non-scalar loss rejected") {
    Tape<double> tape;
    Var<double> x = tape.leaf(TensorD{{1.0, 2.0}}, true);
    CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("cross entropy of uniform logits is log vocab") {
    Tape<double> tape;
    Var<double> logits = tape.leaf(TensorD::zeros(3, 64), true);
    Var<double> loss = ad::cross_entropy_rows(logits, {5, 11, 63});
    CHECK(loss.value().scalar() == doctest::Approx(std::log(64.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy gradient matches finite differences") {
    Rng rng(11);
    TensorD logits = TensorD::normal(4, 7, 1.0, rng.stream("l"));
    double err = grad_check<double>(
        [](Tape<double>&, const std::vector<Var<double>>& leaves) {
            return ad::cross_entropy_rows(leaves[0], {0, 3, 6, 2});
        },
        {logits}, 1e-6);
    CHECK(err <= 1e-7);
}

TEST_CASE("concat and slice gradients route to the right rows") {
    TensorD a{{1.0, 1.0}};
    TensorD b{{2.0, 2.0}, {3.0, 3.0}};
    double err = grad_check<double>(
        [](Tape<double>&, const std::vector<Var<double>>& leaves) {
            Var<double> cat = ad::concat_rows(leaves[0], leaves[1]);
            return ad::sum_all(ad::hadamard(ad::slice_rows(cat, 1, 3),
                                            ad::slice_rows(cat, 0, 2)));
        },
        {a, b}, 1e-5);
    CHECK(err <= 1e-8);
}

TEST_CASE("scale_by scalar node gradient") {
    TensorD c{{1.0, -2.0}, {0.5, 3.0}};
    TensorD beta{{0.25, 0.75}};
    double err = grad_check<double>(
        [](Tape<double>&, const std::vector<Var<double>>& leaves) {
            Var<double> bmean = ad::mean_all(leaves[1]);
            return ad::sum_all(ad::scale_by(leaves[0], bmean));
        },
        {c, beta}, 1e-6);
    CHECK(err <= 1e-8);
}
