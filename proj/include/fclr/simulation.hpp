#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fclr/basis.hpp"
#include "fclr/design.hpp"
#include "fclr/error.hpp"
#include "fclr/parallel.hpp"
#include "fclr/quadrature.hpp"
#include "fclr/selection.hpp"
#include "fclr/solver.hpp"

namespace fclr {

struct SimConfig {
    int n = 50;
    int p = 40;
    int q = 4;
    double rho_x = 0.2;
    double rho_t = 0.2;
    double sigma_x2 = 9.0;
    double snr = 2.0;
    int grid_size = 20;
    int k_truth = 5;
    int test_size = 1000;

    void validate() const
    {
        if (n < 2 || p < 2 || q < 1 || p % q != 0) {
            throw Error(ErrorKind::invalid_config, "need n >= 2 and p divisible by q");
        }
        if (!(snr > 0.0) || !(sigma_x2 > 0.0)) {
            throw Error(ErrorKind::invalid_config, "snr and sigma_x2 must be positive");
        }
        if (grid_size < 2 || test_size < 1) {
            throw Error(ErrorKind::invalid_config, "grid needs >= 2 points and the test set >= 1 unit");
        }
        const int pj = p / q;
        if (!(rho_x < 1.0) || !(rho_x > -1.0 / (pj - 1)) || !(std::abs(rho_t) < 1.0)) {
            throw Error(ErrorKind::invalid_correlation, "correlations give a non positive-definite covariance");
        }
    }

    [[nodiscard]] std::vector<double> grid() const
    {
        std::vector<double> g(static_cast<std::size_t>(grid_size));
        for (int v = 0; v < grid_size; ++v) {
            g[static_cast<std::size_t>(v)] = static_cast<double>(v) / (grid_size - 1);
        }
        return g;
    }
};

/// Data-generating coefficient curves: rows of B are B-spline coefficients
/// of beta_j on the clamped cubic basis with k_truth functions on [0, 1].
struct TruthCoefficients {
    Eigen::MatrixXd B; // p x k_truth
    std::vector<int> active;
    BasisSpec spec;

    /// vec(B^T): the stacked layout used by fits.
    [[nodiscard]] Eigen::VectorXd stacked() const
    {
        Eigen::VectorXd b(B.size());
        for (Eigen::Index j = 0; j < B.rows(); ++j) {
            b.segment(j * B.cols(), B.cols()) = B.row(j).transpose();
        }
        return b;
    }
};

/// The twelve nonzero coefficient rows, three per group; each triple sums to
/// zero column-wise.
inline const std::array<std::array<double, 5>, 12>& truth_rows()
{
    static const std::array<std::array<double, 5>, 12> rows{{
        {1, -1, 0, 0, 0},
        {0, 0, -0.5, 1, 0},
        {-1, 1, 0.5, -1, 0},
        {0.5, 0, 0, -0.5, 1},
        {0, 1, -1, 0, -1},
        {-0.5, -1, 1, 0.5, 0},
        {0.5, -1, -1, 1, 0},
        {0, 1, 1, 0, 0},
        {-0.5, 0, 0, -1, 0},
        {1, 0, 0.5, 0, -1},
        {0, 0, -0.5, 0, 0},
        {-1, 0, 0, 0, 1},
    }};
    return rows;
}

/// Places triple m at rows m*(p/4) .. m*(p/4)+2. For q = 4 those are the
/// first three parts of each composition; for q = 1 and p = 40 the rows are
/// {0,1,2, 10,11,12, 20,21,22, 30,31,32}.
inline TruthCoefficients truth_coefficients(int p, int q)
{
    if (q < 1 || p % q != 0) {
        throw Error(ErrorKind::invalid_config, "p must be divisible by q");
    }
    if (p / q < 5) {
        throw Error(ErrorKind::insufficient_block, "each composition needs at least 5 parts");
    }
    if (4 % q != 0 || p % 4 != 0) {
        throw Error(ErrorKind::invalid_config, "the truth layout needs q in {1, 2, 4} and p divisible by 4");
    }
    TruthCoefficients t;
    t.spec = make_basis(4, 5, {0.0, 1.0});
    t.B = Eigen::MatrixXd::Zero(p, 5);
    const int stride = p / 4;
    const auto& rows = truth_rows();
    for (int m = 0; m < 4; ++m) {
        for (int r = 0; r < 3; ++r) {
            const int j = m * stride + r;
            for (int c = 0; c < 5; ++c) {
                t.B(j, c) = rows[static_cast<std::size_t>(3 * m + r)][static_cast<std::size_t>(c)];
            }
            t.active.push_back(j);
        }
    }
    return t;
}

/// Draws one latent V x p_j matrix with covariance sigma_x2 (Sigma_T (x) Sigma_X):
/// AR(1) across time, compound symmetry across parts.
template <class Rng>
Eigen::MatrixXd gen_latent(int parts, int times, double rho_x, double rho_t, double sigma_x2, Rng& rng)
{
    if (!(rho_x < 1.0) || !(rho_x > -1.0 / std::max(1, parts - 1)) || !(std::abs(rho_t) < 1.0)) {
        throw Error(ErrorKind::invalid_correlation, "correlations give a non positive-definite covariance");
    }
    Eigen::MatrixXd sx = Eigen::MatrixXd::Constant(parts, parts, rho_x);
    sx.diagonal().setOnes();
    Eigen::MatrixXd st(times, times);
    for (int a = 0; a < times; ++a) {
        for (int b = 0; b < times; ++b) {
            st(a, b) = std::pow(rho_t, std::abs(a - b));
        }
    }
    const Eigen::MatrixXd lx = sx.llt().matrixL();
    const Eigen::MatrixXd lt = st.llt().matrixL();
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd g(times, parts);
    for (int v = 0; v < times; ++v) {
        for (int l = 0; l < parts; ++l) {
            g(v, l) = normal(rng);
        }
    }
    return std::sqrt(sigma_x2) * lt * g * lx.transpose();
}

/// Latent Gaussian draws pushed through the softmax at each time point.
template <class Rng>
FunctionalPanel gen_compositions(const SimConfig& cfg, int n, Rng& rng)
{
    cfg.validate();
    const int pj = cfg.p / cfg.q;
    FunctionalPanel panel;
    panel.grid = cfg.grid();
    const auto V = static_cast<std::size_t>(cfg.grid_size);
    panel.response = Eigen::MatrixXd::Zero(n, cfg.grid_size);
    for (int i = 0; i < n; ++i) {
        panel.units.push_back("u" + std::to_string(i + 1));
    }
    for (int j = 0; j < cfg.q; ++j) {
        CompositionBlock blk;
        blk.name = "c" + std::to_string(j + 1);
        for (int l = 0; l < pj; ++l) {
            blk.parts.push_back("x" + std::to_string(j * pj + l + 1));
        }
        blk.shares.assign(V, Eigen::MatrixXd(n, pj));
        panel.blocks.push_back(std::move(blk));
    }
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < cfg.q; ++j) {
            const Eigen::MatrixXd w = gen_latent(pj, cfg.grid_size, cfg.rho_x, cfg.rho_t, cfg.sigma_x2, rng);
            for (std::size_t v = 0; v < V; ++v) {
                const auto row = w.row(static_cast<Eigen::Index>(v));
                const Eigen::RowVectorXd e = (row.array() - row.maxCoeff()).exp().matrix();
                panel.blocks[static_cast<std::size_t>(j)].shares[v].row(i) = e / e.sum();
            }
        }
    }
    return panel;
}

/// Noise-free response Z(t) beta(t) with the truth curves.
inline Eigen::MatrixXd true_signal(const TimeSlices& z, std::span<const double> grid, const TruthCoefficients& truth)
{
    const Eigen::VectorXd b = truth.stacked();
    Eigen::MatrixXd s(z.empty() ? 0 : z[0].rows(), static_cast<Eigen::Index>(grid.size()));
    for (std::size_t v = 0; v < grid.size(); ++v) {
        s.col(static_cast<Eigen::Index>(v)) = z[v] * eval_curves(truth.spec, b, grid[v]);
    }
    return s;
}

/// sigma^2 = Var(signal entries) / snr, variance pooled over units and times.
inline double calibrate_noise(const Eigen::MatrixXd& signal, double snr)
{
    if (!(snr > 0.0)) {
        throw Error(ErrorKind::invalid_config, "snr must be positive");
    }
    const double mean = signal.mean();
    const double var = (signal.array() - mean).square().mean();
    if (!(var > 0.0)) {
        throw Error(ErrorKind::degenerate_signal, "signal has zero variance");
    }
    return var / snr;
}

/// Signal plus iid N(0, sigma2) noise, drawn unit by unit, time by time.
template <class Rng>
Eigen::MatrixXd gen_response(const TimeSlices& z, std::span<const double> grid, const TruthCoefficients& truth,
                             double sigma2, Rng& rng)
{
    Eigen::MatrixXd y = true_signal(z, grid, truth);
    if (sigma2 > 0.0) {
        std::normal_distribution<double> normal(0.0, std::sqrt(sigma2));
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            for (Eigen::Index v = 0; v < y.cols(); ++v) {
                y(i, v) += normal(rng);
            }
        }
    }
    return y;
}

/// Mean over units and grid points of the squared prediction residual
/// (unweighted), including the fitted intercept curve.
inline double prediction_error(const FitResult& fit, const BasisSpec& spec, const TimeSlices& z, const TimeSlices& zc,
                               const Eigen::MatrixXd& y, std::span<const double> grid)
{
    const Eigen::MatrixXd yhat = predict(fit, z, zc, spec, grid);
    return (y - yhat).array().square().mean();
}

/// Average over curves of the L2 distance between fitted and true curves,
/// by trapezoid on `points` equispaced points of the truth domain.
inline double estimation_error(const FitResult& fit, const BasisSpec& spec, const TruthCoefficients& truth,
                               int points = 501)
{
    const int p = fit.p();
    if (p != truth.B.rows()) {
        throw Error(ErrorKind::dimension_mismatch, "fit and truth have different numbers of curves");
    }
    const Domain dom = truth.spec.domain;
    std::vector<double> fine(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i) {
        fine[static_cast<std::size_t>(i)] = i + 1 == points ? dom.hi : dom.lo + dom.length() * i / (points - 1);
    }
    const Eigen::VectorXd w = trapezoid_weights(fine);
    const Eigen::VectorXd bt = truth.stacked();
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(p);
    for (int i = 0; i < points; ++i) {
        const double t = fine[static_cast<std::size_t>(i)];
        const Eigen::VectorXd diff = eval_curves(spec, fit.b_hat, t) - eval_curves(truth.spec, bt, t);
        sq += w[i] * diff.array().square().matrix();
    }
    return sq.array().sqrt().sum() / p;
}

struct SelectionRates {
    double fpr = 0.0;
    double fnr = 0.0;
};

/// False positive rate over the null curves and false negative rate over the
/// non-null curves, as fractions.
inline SelectionRates fpr_fnr(std::span<const int> selected, std::span<const int> truth_active, int p)
{
    const std::set<int> s_hat(selected.begin(), selected.end());
    const std::set<int> s(truth_active.begin(), truth_active.end());
    for (int j : s_hat) {
        if (j < 0 || j >= p) {
            throw Error(ErrorKind::invalid_config, "selected index out of range");
        }
    }
    if (s.empty()) {
        throw Error(ErrorKind::undefined_rate, "FNR is undefined without true positives");
    }
    if (static_cast<int>(s.size()) >= p) {
        throw Error(ErrorKind::undefined_rate, "FPR is undefined without true nulls");
    }
    int fp = 0, fn = 0;
    for (int j : s_hat) {
        fp += s.count(j) ? 0 : 1;
    }
    for (int j : s) {
        fn += s_hat.count(j) ? 0 : 1;
    }
    return {static_cast<double>(fp) / static_cast<double>(p - static_cast<int>(s.size())),
            static_cast<double>(fn) / static_cast<double>(s.size())};
}

// ---------------------------------------------------------------------------
// Replicated study

struct Scenario {
    std::string name;
    SimConfig config;
};

/// The 24 configurations of the reference study: rows 1-12 at SNR 2
/// ("table3-rowN", also "table4-rowN") and at SNR 4 ("table5-rowN",
/// "table6-rowN"). Rows cycle (n, p, q) fastest, then rho_T, then rho_X.
inline std::vector<Scenario> reference_scenarios()
{
    std::vector<Scenario> out;
    const std::array<std::array<int, 3>, 3> shapes{{{50, 40, 1}, {50, 40, 4}, {50, 100, 4}}};
    for (double snr : {2.0, 4.0}) {
        int row = 1;
        for (double rx : {0.2, 0.6}) {
            for (double rt : {0.2, 0.6}) {
                for (const auto& s : shapes) {
                    SimConfig c;
                    c.n = s[0];
                    c.p = s[1];
                    c.q = s[2];
                    c.rho_x = rx;
                    c.rho_t = rt;
                    c.snr = snr;
                    out.push_back({std::string(snr == 2.0 ? "table3" : "table5") + "-row" + std::to_string(row), c});
                    ++row;
                }
            }
        }
    }
    return out;
}

/// Looks up a reference scenario by name; the tables sharing a configuration
/// (3/4 and 5/6) are aliases.
inline std::optional<Scenario> find_scenario(std::string name)
{
    auto alias = [&](const std::string& from, const std::string& to) {
        if (name.rfind(from, 0) == 0) {
            name = to + name.substr(from.size());
        }
    };
    alias("table4-", "table3-");
    alias("table6-", "table5-");
    for (auto& s : reference_scenarios()) {
        if (s.name == name) {
            return s;
        }
    }
    return std::nullopt;
}

struct ReplicateMetrics {
    double fpr = 0.0;
    double fnr = 0.0;
    double prediction = 0.0;
    double estimation = 0.0;
    bool converged = true;
    CVPoint chosen;
};

struct StudyRow {
    Scenario scenario;
    Method method = Method::cgl;
    std::string metric;
    double mean = 0.0;
    std::optional<double> se;
    int replicates = 0;
    int non_converged = 0;
};

struct StudyOptions {
    int replicates = 100;
    std::uint64_t seed = 1;
    std::vector<Method> methods{Method::cgl, Method::bgl};
    TuningSpec tuning;
    SolverConfig solver;
    int threads = 1;
};

/// Random stream tags of a scenario. The SNR is deliberately left out so
/// scenarios differing only in SNR see the same compositions and noise
/// shape (common random numbers).
inline std::vector<std::uint64_t> scenario_tags(const SimConfig& c)
{
    auto milli = [](double x) { return static_cast<std::uint64_t>(std::llround(x * 1000.0) + 1000000); };
    return {static_cast<std::uint64_t>(c.n), static_cast<std::uint64_t>(c.p), static_cast<std::uint64_t>(c.q),
            milli(c.rho_x), milli(c.rho_t), milli(c.sigma_x2), static_cast<std::uint64_t>(c.grid_size),
            static_cast<std::uint64_t>(c.test_size)};
}

/// One replicate: training and test panels, noise calibrated on the training
/// signal, then every requested method tuned by CV and scored.
inline std::vector<ReplicateMetrics> run_replicate(const SimConfig& cfg, const StudyOptions& opt, std::size_t rep)
{
    const auto tags = scenario_tags(cfg);
    auto rng = replicate_stream(opt.seed, tags, rep);
    const TruthCoefficients truth = truth_coefficients(cfg.p, cfg.q);

    const FunctionalPanel train_panel = gen_compositions(cfg, cfg.n, rng);
    const FunctionalPanel test_panel = gen_compositions(cfg, cfg.test_size, rng);
    RegressionData train = regression_data(train_panel, Domain{0.0, 1.0});
    RegressionData test = regression_data(test_panel, Domain{0.0, 1.0});
    const double sigma2 = calibrate_noise(true_signal(train.z, train.grid, truth), cfg.snr);
    train.y = gen_response(train.z, train.grid, truth, sigma2, rng);
    test.y = gen_response(test.z, test.grid, truth, sigma2, rng);

    const Folds folds = folds_for(opt.tuning, cfg.n, rng);
    const std::vector<int> refs = choose_references(train.block_sizes, rng);

    std::vector<ReplicateMetrics> out;
    for (Method m : opt.methods) {
        MethodSpec ms{m, m == Method::bgl ? refs : std::vector<int>{}};
        const TunedFit tuned = tune_and_fit(train, opt.tuning, folds, opt.solver, ms);
        const auto sel = active_set(tuned.fit, tuned.spec, train.grid);
        const auto rates = fpr_fnr(sel.active_set, truth.active, cfg.p);
        ReplicateMetrics rm;
        rm.fpr = rates.fpr;
        rm.fnr = rates.fnr;
        rm.prediction = prediction_error(tuned.fit, tuned.spec, test.z, test.zc, test.y, test.grid);
        rm.estimation = estimation_error(tuned.fit, tuned.spec, truth);
        rm.converged = tuned.fit.converged;
        rm.chosen = tuned.cv.chosen_pair();
        out.push_back(rm);
    }
    return out;
}

struct ScenarioResult {
    Scenario scenario;
    std::vector<Method> methods;
    std::vector<std::vector<ReplicateMetrics>> replicates; // replicate x method
};

inline ScenarioResult run_scenario(const Scenario& scenario, const StudyOptions& opt)
{
    scenario.config.validate();
    ScenarioResult res{scenario, opt.methods, {}};
    res.replicates.resize(static_cast<std::size_t>(opt.replicates));
    parallel_for(res.replicates.size(), opt.threads,
                 [&](std::size_t r) { res.replicates[r] = run_replicate(scenario.config, opt, r); });
    return res;
}

/// Mean and standard error (absent for a single replicate) of every metric
/// per method. Rates are in percent and estimation errors are scaled by 100.
inline std::vector<StudyRow> summarize(const ScenarioResult& res)
{
    std::vector<StudyRow> rows;
    const auto R = res.replicates.size();
    for (std::size_t mi = 0; mi < res.methods.size(); ++mi) {
        int bad = 0;
        for (const auto& rep : res.replicates) {
            bad += rep[mi].converged ? 0 : 1;
        }
        auto add = [&](const std::string& metric, auto get) {
            Eigen::VectorXd v(static_cast<Eigen::Index>(R));
            for (std::size_t r = 0; r < R; ++r) {
                v[static_cast<Eigen::Index>(r)] = get(res.replicates[r][mi]);
            }
            StudyRow row{res.scenario, res.methods[mi], metric, v.mean(), std::nullopt, static_cast<int>(R), bad};
            if (R > 1) {
                const double var = (v.array() - v.mean()).square().sum() / static_cast<double>(R - 1);
                row.se = std::sqrt(var / static_cast<double>(R));
            }
            rows.push_back(row);
        };
        add("fpr_pct", [](const ReplicateMetrics& m) { return 100.0 * m.fpr; });
        add("fnr_pct", [](const ReplicateMetrics& m) { return 100.0 * m.fnr; });
        add("prediction_error", [](const ReplicateMetrics& m) { return m.prediction; });
        add("estimation_error_x100", [](const ReplicateMetrics& m) { return 100.0 * m.estimation; });
    }
    return rows;
}

inline std::vector<StudyRow> run_study(std::span<const Scenario> scenarios, const StudyOptions& opt)
{
    std::vector<StudyRow> rows;
    for (const auto& s : scenarios) {
        auto part = summarize(run_scenario(s, opt));
        rows.insert(rows.end(), part.begin(), part.end());
    }
    return rows;
}

} // namespace fclr
