#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fclr/basis.hpp"
#include "fclr/design.hpp"
#include "fclr/error.hpp"
#include "fclr/parallel.hpp"
#include "fclr/quadrature.hpp"
#include "fclr/solver.hpp"

namespace fclr {

/// Regression inputs derived from a panel: log compositions, control design
/// with intercept, response, grid and block structure.
struct RegressionData {
    TimeSlices z;
    TimeSlices zc;
    Eigen::MatrixXd y;
    std::vector<double> grid;
    std::vector<int> block_sizes;
    Domain domain;

    [[nodiscard]] Eigen::Index n() const { return y.rows(); }
    [[nodiscard]] int p() const { return std::accumulate(block_sizes.begin(), block_sizes.end(), 0); }

    /// Rows of the data (repeats allowed).
    [[nodiscard]] RegressionData select_units(std::span<const int> rows) const
    {
        RegressionData out;
        out.grid = grid;
        out.block_sizes = block_sizes;
        out.domain = domain;
        const std::vector<int> idx(rows.begin(), rows.end());
        out.y = y(idx, Eigen::all);
        for (const auto& s : z) {
            out.z.push_back(s(idx, Eigen::all));
        }
        for (const auto& s : zc) {
            out.zc.push_back(s(idx, Eigen::all));
        }
        return out;
    }
};

/// Regression data from a validated panel; the basis domain defaults to the
/// span of the observation grid.
inline RegressionData regression_data(const FunctionalPanel& panel, std::optional<Domain> domain = std::nullopt)
{
    panel.validate();
    RegressionData d;
    d.z = log_transform(panel);
    d.zc = build_controls(panel);
    d.y = panel.response;
    d.grid = panel.grid;
    d.block_sizes = panel.block_sizes();
    d.domain = domain ? *domain : Domain{panel.grid.front(), panel.grid.back()};
    return d;
}

enum class Method { cgl, bgl };

inline const char* to_string(Method m) { return m == Method::cgl ? "CGL" : "BGL"; }

/// Which estimator to run; the baseline also needs its reference parts.
struct MethodSpec {
    Method method = Method::cgl;
    std::vector<int> references;
};

/// A model family at fixed basis size: Gram systems for arbitrary unit
/// subsets plus the constraint set and the map back to all p parts.
class ModelSetup {
public:
    ModelSetup(const RegressionData& data, const MethodSpec& method, int order, int k)
        : data_(&data), method_(method), spec_(make_basis(order, k, data.domain))
    {
        if (method.method == Method::bgl) {
            reduced_z_ = reference_design(data.z, data.block_sizes, method.references);
            constraints_ = ConstraintSet::none(data.p() - static_cast<int>(data.block_sizes.size()), k);
        } else {
            constraints_ = build_constraints(data.block_sizes, k);
        }
    }

    [[nodiscard]] const BasisSpec& spec() const { return spec_; }
    [[nodiscard]] const ConstraintSet& constraints() const { return constraints_; }

    [[nodiscard]] GramSystem gram(std::span<const int> units = {}) const
    {
        const TimeSlices& z = method_.method == Method::bgl ? reduced_z_ : data_->z;
        return build_gram(z, data_->zc, data_->y, spec_, data_->grid, units);
    }

    /// Reports a fit on all p parts.
    [[nodiscard]] FitResult finish(FitResult fit) const
    {
        if (method_.method == Method::bgl) {
            fit.b_hat = expand_reference_coefficients(fit.b_hat, data_->block_sizes, method_.references, spec_.count);
            fit.reference_parts = method_.references;
        }
        return fit;
    }

private:
    const RegressionData* data_;
    MethodSpec method_;
    BasisSpec spec_;
    TimeSlices reduced_z_;
    ConstraintSet constraints_;
};

struct LambdaSpec {
    std::vector<double> values; // explicit grid; overrides count/ratio
    int count = 50;
    double ratio = 1e-3;
};

struct TuningSpec {
    std::vector<int> k_grid{4, 5, 6, 7, 8};
    int order = 4;
    LambdaSpec lambdas;
    int folds = 10; // 0 means leave-one-out
};

/// Held-out unit indices per fold.
using Folds = std::vector<std::vector<int>>;

inline Folds loo_folds(int n)
{
    Folds f(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        f[static_cast<std::size_t>(i)] = {i};
    }
    return f;
}

/// Random balanced partition of n units into `n_folds` folds.
template <class Rng>
Folds make_folds(int n, int n_folds, Rng& rng)
{
    if (n_folds < 2 || n_folds > n) {
        throw Error(ErrorKind::invalid_folds, "need 2 <= folds <= n, got " + std::to_string(n_folds));
    }
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    // Fisher-Yates with an explicit draw so the permutation only depends on
    // the engine's output sequence.
    for (int i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<int> pick(0, i);
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    }
    Folds f(static_cast<std::size_t>(n_folds));
    for (int i = 0; i < n; ++i) {
        f[static_cast<std::size_t>(i % n_folds)].push_back(perm[static_cast<std::size_t>(i)]);
    }
    for (auto& fold : f) {
        std::sort(fold.begin(), fold.end());
    }
    return f;
}

template <class Rng>
Folds folds_for(const TuningSpec& tuning, int n, Rng& rng)
{
    return tuning.folds == 0 ? loo_folds(n) : make_folds(n, tuning.folds, rng);
}

inline void check_folds(const Folds& folds, int n)
{
    if (folds.size() < 2) {
        throw Error(ErrorKind::invalid_folds, "cross-validation needs at least 2 folds");
    }
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (const auto& fold : folds) {
        if (fold.empty()) {
            throw Error(ErrorKind::invalid_folds, "empty fold");
        }
        if (static_cast<int>(fold.size()) >= n) {
            throw Error(ErrorKind::invalid_folds, "fold leaves no training units");
        }
        for (int i : fold) {
            if (i < 0 || i >= n || seen[static_cast<std::size_t>(i)]++ > 0) {
                throw Error(ErrorKind::invalid_folds, "folds must partition the units");
            }
        }
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
        throw Error(ErrorKind::invalid_folds, "folds must cover every unit");
    }
}

struct CVPoint {
    double lambda = 0.0;
    int k = 0;
};

struct CVResult {
    std::vector<CVPoint> grid;
    std::vector<double> mean_error;
    std::vector<double> se_error;
    Eigen::MatrixXd fold_errors; // folds x grid
    std::size_t chosen = 0;
    int non_converged = 0;

    [[nodiscard]] CVPoint chosen_pair() const { return grid.at(chosen); }

    /// Lambda values belonging to basis size k, in grid order.
    [[nodiscard]] std::vector<double> lambdas_for(int k) const
    {
        std::vector<double> out;
        for (const auto& g : grid) {
            if (g.k == k) {
                out.push_back(g.lambda);
            }
        }
        return out;
    }
};

/// Index of the most parsimonious pair within one standard error of the
/// minimum: largest lambda, then smallest k.
inline std::size_t one_se_rule(std::span<const CVPoint> grid, std::span<const double> mean,
                               std::span<const double> se)
{
    if (grid.empty() || mean.size() != grid.size() || se.size() != grid.size()) {
        throw Error(ErrorKind::invalid_config, "one-SE rule needs a nonempty, consistent grid");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < mean.size(); ++i) {
        if (mean[i] < mean[best]) {
            best = i;
        }
    }
    const double threshold = mean[best] + se[best];
    std::size_t chosen = best;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        if (!(mean[i] <= threshold)) {
            continue;
        }
        const auto& c = grid[chosen];
        const auto& g = grid[i];
        if (g.lambda > c.lambda || (g.lambda == c.lambda && g.k < c.k)) {
            chosen = i;
        }
    }
    return chosen;
}

inline std::size_t one_se_rule(const CVResult& cv)
{
    return one_se_rule(cv.grid, cv.mean_error, cv.se_error);
}

/// Lambda sequence for a setup: explicit values, or a geometric path from
/// the full-data lambda_max.
inline std::vector<double> lambda_sequence(const ModelSetup& setup, const LambdaSpec& spec)
{
    if (!spec.values.empty()) {
        std::vector<double> v = spec.values;
        std::sort(v.begin(), v.end(), std::greater<>());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    }
    return lambda_grid(lambda_max(setup.gram()), spec.count, spec.ratio);
}

namespace detail {

// Trapezoid-weighted mean squared residual per held-out unit, averaged.
inline double held_out_error(const Eigen::MatrixXd& y, const Eigen::MatrixXd& yhat, const Eigen::VectorXd& w)
{
    const Eigen::MatrixXd r2 = (y - yhat).array().square().matrix();
    return (r2 * w).sum() / (static_cast<double>(y.rows()) * w.sum());
}

} // namespace detail

/// K-fold (or leave-one-out) cross-validation over (lambda, k). Folds are
/// whole units; every (fold, k) pair is an independent task.
inline CVResult cross_validate(const RegressionData& data, const TuningSpec& tuning, const Folds& folds,
                               const SolverConfig& config, const MethodSpec& method = {}, int threads = 1)
{
    const int n = static_cast<int>(data.n());
    check_folds(folds, n);
    if (tuning.k_grid.empty()) {
        throw Error(ErrorKind::invalid_config, "empty k grid");
    }
    for (int k : tuning.k_grid) {
        if (k < tuning.order) {
            throw Error(ErrorKind::invalid_basis, "k values must be >= the basis order");
        }
    }

    std::vector<ModelSetup> setups;
    std::vector<std::vector<double>> lambdas;
    CVResult cv;
    std::vector<std::size_t> offset;
    for (int k : tuning.k_grid) {
        setups.emplace_back(data, method, tuning.order, k);
        lambdas.push_back(lambda_sequence(setups.back(), tuning.lambdas));
        offset.push_back(cv.grid.size());
        for (double lam : lambdas.back()) {
            cv.grid.push_back({lam, k});
        }
    }
    const auto F = folds.size();
    const auto nk = tuning.k_grid.size();
    cv.fold_errors = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(cv.grid.size()));
    const Eigen::VectorXd w = trapezoid_weights(data.grid);

    std::vector<int> bad(F * nk, 0);
    parallel_for(F * nk, threads, [&](std::size_t task) {
        const std::size_t f = task / nk;
        const std::size_t ki = task % nk;
        const auto& test = folds[f];
        std::vector<int> train;
        train.reserve(static_cast<std::size_t>(n) - test.size());
        for (int i = 0, t = 0; i < n; ++i) {
            if (t < static_cast<int>(test.size()) && test[static_cast<std::size_t>(t)] == i) {
                ++t;
            } else {
                train.push_back(i);
            }
        }
        const ModelSetup& setup = setups[ki];
        const GramSystem sys = setup.gram(train);
        AugmentedQuadratic op(sys.K_tilde, setup.constraints());
        const RegressionData held = data.select_units(test);
        const auto path = solve_path(sys, op, lambdas[ki], config);
        for (std::size_t li = 0; li < path.size(); ++li) {
            const FitResult fit = setup.finish(path[li]);
            bad[task] += fit.converged ? 0 : 1;
            const Eigen::MatrixXd yhat = predict(fit, held.z, held.zc, setup.spec(), held.grid);
            cv.fold_errors(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(offset[ki] + li)) =
                detail::held_out_error(held.y, yhat, w);
        }
    });
    cv.non_converged = std::accumulate(bad.begin(), bad.end(), 0);

    const auto G = cv.grid.size();
    cv.mean_error.resize(G);
    cv.se_error.resize(G);
    for (std::size_t g = 0; g < G; ++g) {
        const Eigen::VectorXd col = cv.fold_errors.col(static_cast<Eigen::Index>(g));
        const double mean = col.mean();
        const double var = (col.array() - mean).square().sum() / static_cast<double>(F - 1);
        cv.mean_error[g] = mean;
        cv.se_error[g] = std::sqrt(var / static_cast<double>(F));
    }
    cv.chosen = one_se_rule(cv);
    return cv;
}

/// Full-data fit at (lambda, k), reached along the lambda path from its
/// start so the fit matches what cross-validation evaluated.
inline FitResult fit_at(const RegressionData& data, const TuningSpec& tuning, const SolverConfig& config,
                        const MethodSpec& method, int k, double lambda)
{
    const ModelSetup setup(data, method, tuning.order, k);
    const GramSystem sys = setup.gram();
    std::vector<double> path;
    for (double lam : lambda_sequence(setup, tuning.lambdas)) {
        if (lam > lambda) {
            path.push_back(lam);
        }
    }
    path.push_back(lambda);
    AugmentedQuadratic op(sys.K_tilde, setup.constraints());
    auto fits = solve_path(sys, op, path, config);
    return setup.finish(std::move(fits.back()));
}

struct TunedFit {
    CVResult cv;
    FitResult fit;
    BasisSpec spec;
};

inline TunedFit tune_and_fit(const RegressionData& data, const TuningSpec& tuning, const Folds& folds,
                             const SolverConfig& config, const MethodSpec& method = {}, int threads = 1)
{
    TunedFit out;
    out.cv = cross_validate(data, tuning, folds, config, method, threads);
    const CVPoint best = out.cv.chosen_pair();
    out.fit = fit_at(data, tuning, config, method, best.k, best.lambda);
    out.spec = make_basis(tuning.order, best.k, data.domain);
    return out;
}

struct SelectionReport {
    std::vector<int> active_set; // 0-based curve indices
    Eigen::VectorXd norms;
    Eigen::VectorXd shares;
};

/// Integrated L2 norms of the fitted curves (trapezoid on `grid`) and the
/// index set whose normalized norm reaches 1/p.
inline SelectionReport active_set(const FitResult& fit, const BasisSpec& spec, std::span<const double> grid)
{
    const int p = fit.p();
    SelectionReport rep;
    Eigen::MatrixXd sq(p, static_cast<Eigen::Index>(grid.size()));
    for (std::size_t v = 0; v < grid.size(); ++v) {
        sq.col(static_cast<Eigen::Index>(v)) = eval_curves(spec, fit.b_hat, grid[v]).array().square().matrix();
    }
    const Eigen::VectorXd w = trapezoid_weights(grid);
    rep.norms = (sq * w).array().sqrt().matrix();
    const double total = rep.norms.sum();
    if (!(total > 0.0)) {
        rep.shares = Eigen::VectorXd::Zero(p);
        return rep;
    }
    rep.shares = rep.norms / total;
    for (int j = 0; j < p; ++j) {
        // share_j >= 1/p, with slack for the rounding of the normalizing sum
        if (rep.norms[j] * p >= total * (1.0 - 1e-12)) {
            rep.active_set.push_back(j);
        }
    }
    return rep;
}

/// Share of squared coefficient mass per composition inside each window
/// [start, start + width]; rows are windows, columns compositions.
inline Eigen::MatrixXd relative_magnitude(const FitResult& fit, const BasisSpec& spec,
                                          std::span<const int> block_sizes, std::span<const double> window_starts,
                                          double width = 1.0, int points = 101)
{
    const auto q = static_cast<Eigen::Index>(block_sizes.size());
    Eigen::MatrixXd shares(static_cast<Eigen::Index>(window_starts.size()), q);
    for (std::size_t wi = 0; wi < window_starts.size(); ++wi) {
        const double a = window_starts[wi];
        const double b = a + width;
        if (!(width > 0.0) || a < spec.domain.lo || b > spec.domain.hi) {
            throw Error(ErrorKind::out_of_domain, "window [" + std::to_string(a) + ", " + std::to_string(b) +
                                                      "] is outside the basis domain");
        }
        std::vector<double> fine(static_cast<std::size_t>(points));
        for (int i = 0; i < points; ++i) {
            fine[static_cast<std::size_t>(i)] = i + 1 == points ? b : a + width * i / (points - 1);
        }
        const Eigen::VectorXd w = trapezoid_weights(fine);
        Eigen::VectorXd mass = Eigen::VectorXd::Zero(q);
        for (int i = 0; i < points; ++i) {
            const Eigen::VectorXd beta = eval_curves(spec, fit.b_hat, fine[static_cast<std::size_t>(i)]);
            Eigen::Index j = 0;
            for (Eigen::Index blk = 0; blk < q; ++blk) {
                for (int l = 0; l < block_sizes[static_cast<std::size_t>(blk)]; ++l, ++j) {
                    mass[blk] += w[i] * beta[j] * beta[j];
                }
            }
        }
        const double total = mass.sum();
        if (!(total > 0.0)) {
            throw Error(ErrorKind::undefined_share, "all coefficients vanish in window starting at " + std::to_string(a));
        }
        shares.row(static_cast<Eigen::Index>(wi)) = (mass / total).transpose();
    }
    return shares;
}

/// Independent engine for replicate `index` of a run seeded with `seed`.
inline std::mt19937_64 replicate_stream(std::uint64_t seed, std::span<const std::uint64_t> tags, std::uint64_t index)
{
    std::vector<std::uint32_t> words;
    auto push = [&](std::uint64_t x) {
        words.push_back(static_cast<std::uint32_t>(x & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(x >> 32));
    };
    push(seed);
    for (auto t : tags) {
        push(t);
    }
    push(index);
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}

struct BootstrapResult {
    Eigen::VectorXd proportions;
    int replicates = 0;
    int non_converged = 0;
    std::vector<CVPoint> chosen;
};

/// Resamples units with replacement, retunes and refits each replicate, and
/// reports how often every curve enters the active set.
inline BootstrapResult bootstrap_stability(const RegressionData& data, int replicates, const TuningSpec& tuning,
                                           const SolverConfig& config, std::uint64_t seed, int threads = 1)
{
    if (replicates < 1) {
        throw Error(ErrorKind::invalid_config, "bootstrap needs at least one replicate");
    }
    const int n = static_cast<int>(data.n());
    const int p = data.p();
    const auto R = static_cast<std::size_t>(replicates);
    std::vector<std::vector<int>> selected(R);
    std::vector<int> bad(R, 0);
    std::vector<CVPoint> chosen(R);
    const std::uint64_t tag = 0x626f6f74; // "boot"
    parallel_for(R, threads, [&](std::size_t r) {
        auto rng = replicate_stream(seed, std::span<const std::uint64_t>(&tag, 1), r);
        std::vector<int> rows(static_cast<std::size_t>(n));
        std::uniform_int_distribution<int> pick(0, n - 1);
        for (auto& i : rows) {
            i = pick(rng);
        }
        const RegressionData sample = data.select_units(rows);
        const Folds folds = folds_for(tuning, n, rng);
        const TunedFit tuned = tune_and_fit(sample, tuning, folds, config);
        bad[r] = tuned.cv.non_converged + (tuned.fit.converged ? 0 : 1);
        chosen[r] = tuned.cv.chosen_pair();
        selected[r] = active_set(tuned.fit, tuned.spec, sample.grid).active_set;
    });
    BootstrapResult out;
    out.replicates = replicates;
    out.proportions = Eigen::VectorXd::Zero(p);
    for (std::size_t r = 0; r < R; ++r) {
        for (int j : selected[r]) {
            out.proportions[j] += 1.0;
        }
        out.non_converged += bad[r];
    }
    out.proportions /= static_cast<double>(replicates);
    out.chosen = std::move(chosen);
    return out;
}

} // namespace fclr
