#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fclr/simulation.hpp"
#include "test_support.hpp"

namespace {

// Exact Gram matrix of a basis by 5-point Gauss-Legendre on every knot span.
Eigen::MatrixXd exact_basis_gram(const fclr::BasisSpec& spec)
{
    static const double x[5] = {-0.9061798459386640, -0.5384693101056831, 0.0, 0.5384693101056831,
                                0.9061798459386640};
    static const double w[5] = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889, 0.4786286704993665,
                                0.2369268850561891};
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(spec.count, spec.count);
    for (std::size_t s = 0; s + 1 < spec.knots.size(); ++s) {
        const double a = spec.knots[s], b = spec.knots[s + 1];
        if (!(b > a)) {
            continue;
        }
        for (int i = 0; i < 5; ++i) {
            const double t = 0.5 * (a + b) + 0.5 * (b - a) * x[i];
            const Eigen::VectorXd phi = fclr::eval_basis(spec, t);
            g += 0.5 * (b - a) * w[i] * phi * phi.transpose();
        }
    }
    return g;
}

TEST(Truth, FirstBlockRows)
{
    const auto t = fclr::truth_coefficients(40, 4);
    ASSERT_EQ(t.B.rows(), 40);
    Eigen::RowVectorXd b1(5), b2(5), b3(5);
    b1 << 1, -1, 0, 0, 0;
    b2 << 0, 0, -0.5, 1, 0;
    b3 << -1, 1, 0.5, -1, 0;
    EXPECT_EQ(t.B.row(0), b1);
    EXPECT_EQ(t.B.row(1), b2);
    EXPECT_EQ(t.B.row(2), b3);
    EXPECT_EQ(t.B.middleRows(3, 7).cwiseAbs().sum(), 0.0);
    Eigen::RowVectorXd b31(5);
    b31 << 1, 0, 0.5, 0, -1;
    EXPECT_EQ(t.B.row(30), b31);
    EXPECT_EQ(t.active, (std::vector<int>{0, 1, 2, 10, 11, 12, 20, 21, 22, 30, 31, 32}));
}

TEST(Truth, BlockSumsVanish)
{
    for (auto [p, q] : {std::pair{40, 4}, std::pair{100, 4}, std::pair{40, 1}, std::pair{20, 4}}) {
        const auto t = fclr::truth_coefficients(p, q);
        const int pj = p / q;
        for (int j = 0; j < q; ++j) {
            EXPECT_EQ(t.B.middleRows(j * pj, pj).colwise().sum().cwiseAbs().maxCoeff(), 0.0);
        }
        int nonzero = 0;
        for (Eigen::Index r = 0; r < t.B.rows(); ++r) {
            nonzero += t.B.row(r).cwiseAbs().sum() > 0.0 ? 1 : 0;
        }
        EXPECT_EQ(nonzero, 12);
    }
}

TEST(Truth, SingleCompositionUsesSameRows)
{
    const auto a = fclr::truth_coefficients(40, 1);
    const auto b = fclr::truth_coefficients(40, 4);
    EXPECT_EQ(a.B, b.B);
    EXPECT_EQ(a.active, b.active);
    const auto big = fclr::truth_coefficients(100, 4);
    EXPECT_EQ(big.active, (std::vector<int>{0, 1, 2, 25, 26, 27, 50, 51, 52, 75, 76, 77}));
}

TEST(Truth, InsufficientBlock)
{
    try {
        fclr::truth_coefficients(16, 4);
        FAIL();
    } catch (const fclr::Error& e) {
        EXPECT_EQ(e.kind(), fclr::ErrorKind::insufficient_block);
    }
}

TEST(Generator, CompositionsOnSimplex)
{
    fclr::SimConfig cfg;
    cfg.n = 10;
    std::mt19937_64 rng(1);
    const auto panel = fclr::gen_compositions(cfg, cfg.n, rng);
    EXPECT_NO_THROW(panel.validate(1e-12));
    EXPECT_EQ(panel.blocks.size(), 4u);
    EXPECT_EQ(panel.grid.size(), 20u);
    EXPECT_DOUBLE_EQ(panel.grid.back(), 1.0);
}

TEST(Generator, IndependentLatentCovariance)
{
    std::mt19937_64 rng(7);
    const int N = 20000, parts = 3, times = 4;
    const int d = parts * times;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(d, d);
    for (int r = 0; r < N; ++r) {
        const Eigen::MatrixXd w = fclr::gen_latent(parts, times, 0.0, 0.0, 9.0, rng);
        const Eigen::VectorXd v = w.reshaped();
        sum += v * v.transpose();
    }
    const Eigen::MatrixXd cov = sum / N;
    for (int a = 0; a < d; ++a) {
        for (int b = 0; b < d; ++b) {
            // SE of a variance is sigma^2 sqrt(2/N); of a covariance sigma^2/sqrt(N).
            const double se = a == b ? 9.0 * std::sqrt(2.0 / N) : 9.0 / std::sqrt(static_cast<double>(N));
            EXPECT_NEAR(cov(a, b), a == b ? 9.0 : 0.0, 3.0 * se) << a << "," << b;
        }
    }
}

TEST(Generator, LagOneAutocorrelation)
{
    std::mt19937_64 rng(8);
    const int N = 20000;
    const double rho_t = 0.6;
    double sxy = 0.0, sxx = 0.0, syy = 0.0, cross = 0.0;
    for (int r = 0; r < N; ++r) {
        const Eigen::MatrixXd w = fclr::gen_latent(4, 20, 0.2, rho_t, 9.0, rng);
        sxy += w(9, 1) * w(10, 1);
        sxx += w(9, 1) * w(9, 1);
        syy += w(10, 1) * w(10, 1);
        cross += w(9, 1) * w(9, 2);
    }
    const double corr = sxy / std::sqrt(sxx * syy);
    const double se = (1.0 - rho_t * rho_t) / std::sqrt(static_cast<double>(N));
    EXPECT_NEAR(corr, rho_t, 3.0 * se);
    // Across parts the correlation is rho_X.
    EXPECT_NEAR(cross / sxx, 0.2, 3.0 * (1.0 - 0.04) / std::sqrt(static_cast<double>(N)));
}

TEST(Generator, InvalidCorrelation)
{
    std::mt19937_64 rng(1);
    try {
        fclr::gen_latent(4, 5, 0.2, 1.0, 9.0, rng);
        FAIL();
    } catch (const fclr::Error& e) {
        EXPECT_EQ(e.kind(), fclr::ErrorKind::invalid_correlation);
    }
    EXPECT_THROW(fclr::gen_latent(4, 5, -0.5, 0.2, 9.0, rng), fclr::Error);
}

TEST(CalibrateNoise, Examples)
{
    std::mt19937_64 rng(2);
    const Eigen::MatrixXd s = fclr::testing::normal_matrix(10, 20, rng, 3.0);
    const double var = (s.array() - s.mean()).square().mean();
    EXPECT_DOUBLE_EQ(fclr::calibrate_noise(s, 1.0), var);
    EXPECT_NEAR(std::sqrt(fclr::calibrate_noise(s, 4.0)), 0.5 * std::sqrt(var), 1e-14);
    EXPECT_NEAR(fclr::calibrate_noise(2.0 * s, 2.0), 4.0 * fclr::calibrate_noise(s, 2.0), 1e-12);
    try {
        fclr::calibrate_noise(Eigen::MatrixXd::Constant(3, 3, 1.5), 2.0);
        FAIL();
    } catch (const fclr::Error& e) {
        EXPECT_EQ(e.kind(), fclr::ErrorKind::degenerate_signal);
    }
}

TEST(GenResponse, NoiselessAndPureNoise)
{
    fclr::SimConfig cfg;
    cfg.n = 200;
    std::mt19937_64 rng(3);
    const auto data = fclr::regression_data(fclr::gen_compositions(cfg, cfg.n, rng), fclr::Domain{0.0, 1.0});
    const auto truth = fclr::truth_coefficients(40, 4);
    EXPECT_EQ(fclr::gen_response(data.z, data.grid, truth, 0.0, rng), fclr::true_signal(data.z, data.grid, truth));

    auto zero = truth;
    zero.B.setZero();
    const Eigen::MatrixXd y = fclr::gen_response(data.z, data.grid, zero, 2.5, rng);
    const double var = (y.array() - y.mean()).square().sum() / static_cast<double>(y.size() - 1);
    EXPECT_NEAR(var, 2.5, 3.0 * 2.5 * std::sqrt(2.0 / static_cast<double>(y.size())));

    std::mt19937_64 a(9), b(9);
    EXPECT_EQ(fclr::gen_response(data.z, data.grid, truth, 1.0, a), fclr::gen_response(data.z, data.grid, truth, 1.0, b));
}

TEST(Metrics, PredictionError)
{
    fclr::SimConfig cfg;
    cfg.n = 30;
    std::mt19937_64 rng(4);
    const auto truth = fclr::truth_coefficients(40, 4);
    const auto data = fclr::regression_data(fclr::gen_compositions(cfg, cfg.n, rng), fclr::Domain{0.0, 1.0});
    const Eigen::MatrixXd y = fclr::gen_response(data.z, data.grid, truth, 0.0, rng);

    fclr::FitResult perfect;
    perfect.k = 5;
    perfect.b_hat = truth.stacked();
    perfect.b_c_hat = Eigen::VectorXd::Zero(5);
    EXPECT_LE(fclr::prediction_error(perfect, truth.spec, data.z, data.zc, y, data.grid), 1e-24);

    fclr::FitResult empty = perfect;
    empty.b_hat.setZero();
    EXPECT_NEAR(fclr::prediction_error(empty, truth.spec, data.z, data.zc, y, data.grid), y.array().square().mean(),
                1e-12);
}

TEST(Metrics, PredictionErrorMatchesDirectFormula)
{
    fclr::SimConfig cfg;
    cfg.n = 40;
    auto inst = fclr::testing::sim_instance(cfg, 12);
    const fclr::ModelSetup setup(inst.data, {}, 4, 5);
    const auto sys = setup.gram();
    const auto lambdas = fclr::lambda_grid(fclr::lambda_max(sys), 15, 0.05);
    const auto fit = fclr::solve_path(sys, setup.constraints(), lambdas, fclr::SolverConfig{}).back();
    const auto& d = inst.data;
    double total = 0.0;
    for (std::size_t v = 0; v < d.grid.size(); ++v) {
        const Eigen::VectorXd beta = fclr::expand_basis(setup.spec(), d.grid[v], 40) * fit.b_hat;
        const double b0 = fclr::eval_basis(setup.spec(), d.grid[v]).dot(fit.b_c_hat);
        const Eigen::VectorXd r = d.y.col(static_cast<Eigen::Index>(v)).array() - b0 - (d.z[v] * beta).array();
        total += r.squaredNorm();
    }
    total /= static_cast<double>(20 * d.n());
    EXPECT_NEAR(fclr::prediction_error(fit, setup.spec(), d.z, d.zc, d.y, d.grid), total, 1e-12 * total);
    // Training error never exceeds that of the intercept-only fit.
    fclr::FitResult null_fit = fit;
    null_fit.b_hat.setZero();
    null_fit.b_c_hat = fclr::recover_control(sys, null_fit.b_hat);
    EXPECT_LE(fclr::prediction_error(fit, setup.spec(), d.z, d.zc, d.y, d.grid),
              fclr::prediction_error(null_fit, setup.spec(), d.z, d.zc, d.y, d.grid));
}

TEST(Metrics, EstimationError)
{
    const auto truth = fclr::truth_coefficients(40, 4);
    fclr::FitResult same;
    same.k = 5;
    same.b_hat = truth.stacked();
    EXPECT_EQ(fclr::estimation_error(same, truth.spec, truth), 0.0);

    fclr::FitResult zero = same;
    zero.b_hat.setZero();
    const Eigen::MatrixXd g = exact_basis_gram(truth.spec);
    double expect = 0.0;
    for (int j = 0; j < 40; ++j) {
        const Eigen::VectorXd bj = truth.B.row(j).transpose();
        expect += std::sqrt(bj.dot(g * bj));
    }
    expect /= 40.0;
    // 501-point trapezoid error is O(h^2).
    EXPECT_NEAR(fclr::estimation_error(zero, truth.spec, truth), expect, 1e-4 * expect);

    // A fit on a different basis that represents the same curves.
    fclr::TruthCoefficients other = truth;
    other.B *= 0.5;
    EXPECT_GT(fclr::estimation_error(same, truth.spec, other), 0.0);
}

TEST(Metrics, SelectionRates)
{
    const std::vector<int> s{0, 1, 2, 10, 11, 12, 20, 21, 22, 30, 31, 32};
    auto r = fclr::fpr_fnr(s, s, 40);
    EXPECT_EQ(r.fpr, 0.0);
    EXPECT_EQ(r.fnr, 0.0);
    r = fclr::fpr_fnr(std::vector<int>{}, s, 40);
    EXPECT_EQ(r.fpr, 0.0);
    EXPECT_EQ(r.fnr, 1.0);
    r = fclr::fpr_fnr(std::vector<int>{0, 1, 5}, s, 40);
    EXPECT_DOUBLE_EQ(r.fpr, 1.0 / 28);
    EXPECT_DOUBLE_EQ(r.fnr, 10.0 / 12);
    EXPECT_THROW(fclr::fpr_fnr(s, std::vector<int>{}, 40), fclr::Error);
    std::vector<int> all(5);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_THROW(fclr::fpr_fnr(s, all, 5), fclr::Error);
}

TEST(Scenarios, ReferenceGrid)
{
    const auto all = fclr::reference_scenarios();
    EXPECT_EQ(all.size(), 24u);
    const auto row1 = fclr::find_scenario("table3-row1");
    ASSERT_TRUE(row1);
    EXPECT_EQ(row1->config.p, 40);
    EXPECT_EQ(row1->config.q, 1);
    EXPECT_EQ(row1->config.snr, 2.0);
    const auto row6 = fclr::find_scenario("table4-row6");
    ASSERT_TRUE(row6);
    EXPECT_EQ(row6->config.p, 100);
    EXPECT_EQ(row6->config.rho_x, 0.2);
    EXPECT_EQ(row6->config.rho_t, 0.6);
    const auto row8 = fclr::find_scenario("table6-row8");
    ASSERT_TRUE(row8);
    EXPECT_EQ(row8->config.snr, 4.0);
    EXPECT_EQ(row8->config.rho_x, 0.6);
    EXPECT_EQ(row8->config.q, 4);
    EXPECT_FALSE(fclr::find_scenario("table7-row1"));
}

fclr::StudyOptions small_study(int replicates)
{
    fclr::StudyOptions opt;
    opt.replicates = replicates;
    opt.seed = 11;
    opt.tuning.k_grid = {4, 5};
    opt.tuning.lambdas.count = 10;
    opt.tuning.lambdas.ratio = 0.01;
    opt.tuning.folds = 5;
    return opt;
}

fclr::Scenario small_scenario()
{
    fclr::Scenario s{"small", {}};
    s.config.n = 25;
    s.config.p = 20;
    s.config.test_size = 50;
    return s;
}

TEST(Study, SingleReplicateHasNoStandardError)
{
    const auto s = small_scenario();
    const auto rows = fclr::run_study(std::span(&s, 1), small_study(1));
    ASSERT_EQ(rows.size(), 8u);
    for (const auto& r : rows) {
        EXPECT_FALSE(r.se.has_value());
        EXPECT_EQ(r.replicates, 1);
        EXPECT_TRUE(std::isfinite(r.mean));
    }
    EXPECT_EQ(rows[0].metric, "fpr_pct");
    EXPECT_EQ(rows[4].method, fclr::Method::bgl);
}

TEST(Study, DeterministicUnderSeedAndThreads)
{
    const auto s = small_scenario();
    auto opt = small_study(3);
    const auto a = fclr::run_study(std::span(&s, 1), opt);
    const auto b = fclr::run_study(std::span(&s, 1), opt);
    opt.threads = 3;
    const auto c = fclr::run_study(std::span(&s, 1), opt);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].mean, b[i].mean);
        EXPECT_EQ(a[i].se, b[i].se);
        EXPECT_EQ(a[i].mean, c[i].mean);
        EXPECT_TRUE(a[i].se.has_value());
    }
}

TEST(Study, SnrSharesRandomStreams)
{
    fclr::SimConfig a, b;
    b.snr = 4.0;
    EXPECT_EQ(fclr::scenario_tags(a), fclr::scenario_tags(b));
    b.rho_x = 0.6;
    EXPECT_NE(fclr::scenario_tags(a), fclr::scenario_tags(b));
}

} // namespace
