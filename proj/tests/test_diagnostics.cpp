#include "statfem/diagnostics.hpp"
#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace statfem;

TEST(EffectiveRank, EqualSpectrum) {
    EXPECT_DOUBLE_EQ(effective_rank(Vector(Vector::Constant(7, 0.3))), 7.0);
}

TEST(EffectiveRank, SingleEigenvalue) {
    Vector s = Vector::Zero(5);
    s(0) = 2.5;
    EXPECT_DOUBLE_EQ(effective_rank(s), 1.0);
}

TEST(EffectiveRank, TwoValueFormula) {
    EXPECT_NEAR(effective_rank(Vector(Vector::Map(std::vector<double>{4.0, 1.0}.data(), 2))), 1.8, 1e-12);
}

TEST(EffectiveRank, ZeroSpectrumThrows) {
    EXPECT_THROW(effective_rank(Vector(Vector::Zero(3))), std::invalid_argument);
}

TEST(EffectiveRank, BoundsScaleAndPermutation) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 100; ++t) {
        Vector s(12);
        for (Index i = 0; i < s.size(); ++i) s(i) = std::pow(u(rng), 4);
        const double d = effective_rank(s);
        EXPECT_GE(d, 1.0);
        EXPECT_LE(d, 12.0 + 1e-12);
        EXPECT_NEAR(effective_rank(Vector(1e-7 * s)), d, 1e-12 * d);
        Vector p = s;
        std::shuffle(p.data(), p.data() + p.size(), rng);
        EXPECT_NEAR(effective_rank(p), d, 1e-12 * d);
    }
}

TEST(RelativeError, Cases) {
    const Vector t = Vector::LinSpaced(6, 1.0, 6.0);
    EXPECT_EQ(relative_error(t, t), 0.0);
    EXPECT_NEAR(relative_error(Vector(2.0 * t), t), 1.0, 1e-15);
    Vector p = t;
    p(0) += 1e-3;
    EXPECT_NEAR(relative_error(p, t), 1e-3 / t.norm(), 1e-15);
    EXPECT_THROW(relative_error(t, Vector(Vector::Zero(6))), std::invalid_argument);
    EXPECT_THROW(relative_error(t, Vector(Vector::Ones(3))), std::invalid_argument);
}

TEST(Divergence, Threshold) {
    Vector m = Vector::Constant(10, 0.9);
    EXPECT_FALSE(divergence_check(m).diverged);
    m(4) = 1e4;
    const DivergenceReport r = divergence_check(m);
    EXPECT_TRUE(r.diverged);
    EXPECT_FALSE(r.non_finite);
    EXPECT_EQ(r.offending, std::vector<Index>{4});
    m(4) = 9999.0;
    EXPECT_FALSE(divergence_check(m).diverged);
}

TEST(Divergence, NonFinite) {
    Vector m = Vector::Zero(4);
    m(2) = std::numeric_limits<double>::quiet_NaN();
    const DivergenceReport r = divergence_check(m);
    EXPECT_TRUE(r.diverged);
    EXPECT_TRUE(r.non_finite);
    EXPECT_EQ(r.reason, "non-finite mean");
    m(2) = -std::numeric_limits<double>::infinity();
    EXPECT_TRUE(divergence_check(m).non_finite);
    EXPECT_THROW(divergence_check(m, 0.0), std::invalid_argument);
}

TEST(Divergence, Monotone) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int t = 0; t < 200; ++t) {
        Vector m(8);
        for (Index i = 0; i < 8; ++i) m(i) = u(rng);
        Vector bigger = m;
        for (Index i = 0; i < 8; ++i) bigger(i) += u(rng);
        if (divergence_check(m, 1.8).diverged) EXPECT_TRUE(divergence_check(bigger, 1.8).diverged);
    }
}

TEST(VarianceField, Cases) {
    Matrix e1 = Matrix::Zero(5, 1);
    e1(0, 0) = 1.0;
    Vector expected = Vector::Zero(5);
    expected(0) = 1.0;
    EXPECT_EQ((variance_field(e1) - expected).norm(), 0.0);

    std::mt19937_64 rng(3);
    const Matrix L = statfem::testing::random_matrix(30, 7, rng);
    const Vector dense = Matrix(L * L.transpose()).diagonal();
    EXPECT_LE((variance_field(L) - dense).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix Q = L.householderQr().householderQ() * Matrix::Identity(30, 7);
    EXPECT_LE((variance_field(Q) - Q.rowwise().squaredNorm()).norm(), 0.0);
    EXPECT_GE(variance_field(L).minCoeff(), 0.0);
}
