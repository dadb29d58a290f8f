#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <list>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fclr/basis.hpp"
#include "fclr/design.hpp"
#include "fclr/error.hpp"
#include "fclr/quadrature.hpp"

namespace fclr {

struct SolverConfig {
    double lambda = 0.0;
    double rho0 = 1.0;
    double epsilon = 1e-6;
    int k_max = 50;
    double admm_tol_abs = 1e-8;
    double admm_tol_rel = 1e-6;
    int admm_iter_max = 10000;
    double admm_step = 1.0;
    /// Residual balancing of the ADMM step; the step is rescaled by powers
    /// of two so factorizations are reused across a path.
    bool admm_adaptive = true;
    /// Newton refinement on the settled support of the ADMM iterate.
    bool admm_polish = true;
    /// Along a path, start each fit from the previous fit's final rho.
    bool path_carry_rho = true;

    void validate() const
    {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
            throw Error(ErrorKind::invalid_config, "lambda must be finite and >= 0");
        }
        if (!(rho0 > 0.0) || !(epsilon > 0.0) || !(admm_tol_abs > 0.0) || !(admm_tol_rel > 0.0) ||
            !(admm_step > 0.0)) {
            throw Error(ErrorKind::invalid_config, "solver tolerances and steps must be > 0");
        }
        if (k_max < 1 || admm_iter_max < 1) {
            throw Error(ErrorKind::invalid_config, "iteration caps must be >= 1");
        }
    }
};

struct FitResult {
    Eigen::VectorXd b_hat;   // pk, stacked per curve
    Eigen::VectorXd b_c_hat; // (p_c+1)k
    Eigen::VectorXd u_hat;   // qk multiplier estimate
    double lambda = 0.0;
    int k = 0;
    int outer_iters = 0;
    int inner_iters_total = 0;
    double rho_final = 0.0;
    double constraint_residual = 0.0;
    double objective = 0.0;
    bool converged = false;
    /// Reference part per composition, set only by the baseline fit.
    std::vector<int> reference_parts;

    [[nodiscard]] int p() const { return k > 0 ? static_cast<int>(b_hat.size() / k) : 0; }

    [[nodiscard]] std::vector<int> nonzero_groups() const
    {
        std::vector<int> out;
        for (int j = 0; j < p(); ++j) {
            if (b_hat.segment(static_cast<Eigen::Index>(j) * k, k).squaredNorm() > 0.0) {
                out.push_back(j);
            }
        }
        return out;
    }
};

/// (1 - kappa/||v||)_+ v
inline Eigen::VectorXd group_soft_threshold(const Eigen::VectorXd& v, double kappa)
{
    const double norm = v.norm();
    if (norm <= kappa) {
        return Eigen::VectorXd::Zero(v.size());
    }
    return (1.0 - kappa / norm) * v;
}

/// Sum of group Euclidean norms.
inline double group_norm_sum(const Eigen::VectorXd& b, int k)
{
    double total = 0.0;
    for (Eigen::Index j = 0; j < b.size() / k; ++j) {
        total += b.segment(j * k, k).norm();
    }
    return total;
}

/// Group-Lasso optimality residual of b for the quadratic with gradient g:
/// active groups use ||g_j + lambda b_j/||b_j||||, inactive (||g_j|| - lambda)_+.
inline double group_lasso_stationarity(const Eigen::VectorXd& g, const Eigen::VectorXd& b, double lambda, int k)
{
    double worst = 0.0;
    for (Eigen::Index j = 0; j < b.size() / k; ++j) {
        const auto bj = b.segment(j * k, k);
        const auto gj = g.segment(j * k, k);
        const double nb = bj.norm();
        double r = 0.0;
        if (nb > 0.0) {
            r = (gj + (lambda / nb) * bj).norm();
        } else {
            r = std::max(gj.norm() - lambda, 0.0);
        }
        worst = std::max(worst, r);
    }
    return worst;
}

/// Factorized Newton matrices of recent support refinements keyed by
/// (rho, support), reused as preconditioners along a path.
struct PolishCache {
    struct Entry {
        double rho;
        std::vector<int> support;
        Eigen::LLT<Eigen::MatrixXd> llt;
    };
    std::list<Entry> entries;
    std::size_t capacity = 6;
    int factorizations = 0;

    Entry* find(double rho, const std::vector<int>& support)
    {
        for (auto it = entries.begin(); it != entries.end(); ++it) {
            if (it->rho == rho && it->support == support) {
                entries.splice(entries.begin(), entries, it);
                return &entries.front();
            }
        }
        return nullptr;
    }

    Entry& insert(double rho, const std::vector<int>& support)
    {
        entries.push_front({rho, support, {}});
        if (entries.size() > capacity) {
            entries.pop_back();
        }
        return entries.front();
    }
};

/// The quadratic K_tilde + rho * L_tilde'L_tilde seen by the inner solver,
/// with cached Cholesky factors of (K_tilde + rho L'L + tau I) keyed by
/// (rho, tau).
class AugmentedQuadratic {
public:
    AugmentedQuadratic(const Eigen::MatrixXd& base, const ConstraintSet& constraints, std::size_t cache_size = 8)
        : base_(&base), constraints_(&constraints), cache_size_(cache_size)
    {
        // L_tilde'L_tilde = (L'L) (x) I_k
        const int k = constraints.k;
        lt_l_ = Eigen::MatrixXd::Zero(base.rows(), base.cols());
        if (constraints.q() > 0) {
            const Eigen::MatrixXd ll = constraints.L.transpose() * constraints.L;
            for (Eigen::Index j = 0; j < ll.rows(); ++j) {
                for (Eigen::Index l = 0; l < ll.cols(); ++l) {
                    if (ll(j, l) != 0.0) {
                        lt_l_.block(j * k, l * k, k, k).diagonal().setConstant(ll(j, l));
                    }
                }
            }
        }
    }

    [[nodiscard]] Eigen::Index dim() const { return base_->rows(); }
    [[nodiscard]] const ConstraintSet& constraints() const { return *constraints_; }

    [[nodiscard]] Eigen::VectorXd apply(double rho, const Eigen::VectorXd& x) const
    {
        Eigen::VectorXd out = (*base_) * x;
        if (constraints_->q() > 0 && rho != 0.0) {
            out += rho * constraints_->apply_transpose(constraints_->apply(x));
        }
        return out;
    }

    /// Dense K_tilde + rho L'L; the last one is kept.
    const Eigen::MatrixXd& matrix(double rho)
    {
        if (dense_rho_ != rho || dense_.size() == 0) {
            dense_ = *base_;
            if (rho != 0.0) {
                dense_ += rho * lt_l_;
            }
            dense_rho_ = rho;
        }
        return dense_;
    }

    const Eigen::LLT<Eigen::MatrixXd>& factor(double rho, double tau)
    {
        for (auto it = cache_.begin(); it != cache_.end(); ++it) {
            if (it->rho == rho && it->tau == tau) {
                cache_.splice(cache_.begin(), cache_, it);
                return cache_.front().llt;
            }
        }
        Eigen::MatrixXd a = matrix(rho);
        a.diagonal().array() += tau;
        cache_.push_front({rho, tau, Eigen::LLT<Eigen::MatrixXd>(a)});
        ++factorizations_;
        if (cache_.size() > cache_size_) {
            cache_.pop_back();
        }
        return cache_.front().llt;
    }

    [[nodiscard]] int factorizations() const { return factorizations_; }

    PolishCache& polish_cache() { return polish_; }

private:
    struct Entry {
        double rho;
        double tau;
        Eigen::LLT<Eigen::MatrixXd> llt;
    };
    const Eigen::MatrixXd* base_;
    const ConstraintSet* constraints_;
    Eigen::MatrixXd lt_l_;
    std::size_t cache_size_;
    std::list<Entry> cache_;
    int factorizations_ = 0;
    Eigen::MatrixXd dense_;
    double dense_rho_ = -1.0;
    PolishCache polish_;
};

struct InnerResult {
    Eigen::VectorXd b;
    int iterations = 0;
    bool converged = false;
    double kkt = 0.0;
    double tau = 1.0;
};

namespace detail {

inline std::vector<int> group_support(const Eigen::VectorXd& b, int k)
{
    std::vector<int> out;
    for (Eigen::Index j = 0; j < b.size() / k; ++j) {
        if (b.segment(j * k, k).squaredNorm() > 0.0) {
            out.push_back(static_cast<int>(j));
        }
    }
    return out;
}

struct PolishOutcome {
    Eigen::VectorXd x; // full-length iterate, zero off the support
    bool ok = false;
    int collapsed = -1; // group being driven to zero, when !ok
    int steps = 0;
};

/// Damped Newton on the groups in `support`, where the penalty is smooth.
/// Groups outside the support stay at zero. Newton systems are solved by
/// conjugate gradients preconditioned with a cached factorization, which is
/// refreshed when it stops being effective. Fails, naming the culprit, when
/// a group is driven toward zero.
inline PolishOutcome polish_support(const Eigen::MatrixXd& a, double rho, const Eigen::VectorXd& c, double lambda,
                                    int k, const std::vector<int>& support, const Eigen::VectorXd& start, double tol,
                                    PolishCache& cache)
{
    PolishOutcome res;
    res.x = Eigen::VectorXd::Zero(c.size());
    if (support.empty()) {
        res.ok = true;
        return res;
    }
    std::vector<Eigen::Index> idx;
    idx.reserve(support.size() * static_cast<std::size_t>(k));
    for (int j : support) {
        for (int i = 0; i < k; ++i) {
            idx.push_back(static_cast<Eigen::Index>(j) * k + i);
        }
    }
    const Eigen::MatrixXd h = a(idx, idx);
    const Eigen::VectorXd cs = c(idx);
    const auto groups = static_cast<Eigen::Index>(support.size());
    const auto m = static_cast<Eigen::Index>(idx.size());
    Eigen::VectorXd x = start(idx);

    Eigen::VectorXd grad(m), step(m), y(m), hx(m), r(m), zr(m), d(m), hd(m);
    std::vector<Eigen::VectorXd> dirs(static_cast<std::size_t>(groups));
    std::vector<double> curv(static_cast<std::size_t>(groups), 0.0);
    const double floor = 1e-12 * (1.0 + x.norm());
    PolishCache::Entry* slot = cache.find(rho, support);

    // h + sum_g (lambda/|x_g|)(I - u_g u_g'), applied without forming it.
    auto apply_hess = [&](const Eigen::VectorXd& v, Eigen::VectorXd& hv) {
        hv.noalias() = h.selfadjointView<Eigen::Lower>() * v;
        if (lambda > 0.0) {
            for (Eigen::Index g = 0; g < groups; ++g) {
                const auto& u = dirs[static_cast<std::size_t>(g)];
                const auto vg = v.segment(g * k, k);
                hv.segment(g * k, k) += curv[static_cast<std::size_t>(g)] * (vg - u.dot(vg) * u);
            }
        }
    };
    auto refactor = [&] {
        Eigen::MatrixXd hess = h;
        if (lambda > 0.0) {
            for (Eigen::Index g = 0; g < groups; ++g) {
                const auto& u = dirs[static_cast<std::size_t>(g)];
                const double cg = curv[static_cast<std::size_t>(g)];
                hess.block(g * k, g * k, k, k) -= cg * u * u.transpose();
                hess.block(g * k, g * k, k, k).diagonal().array() += cg;
            }
        }
        if (slot == nullptr) {
            slot = &cache.insert(rho, support);
        }
        slot->llt.compute(hess);
        ++cache.factorizations;
        if (slot->llt.info() != Eigen::Success) {
            slot->rho = std::numeric_limits<double>::quiet_NaN();
            slot = nullptr;
            return false;
        }
        return true;
    };
    auto pcg = [&](double rel) {
        step.setZero();
        r = -grad;
        zr = slot->llt.solve(r);
        d = zr;
        double rz = r.dot(zr);
        const double target = rel * grad.norm();
        for (int i = 0; i < 12; ++i) {
            apply_hess(d, hd);
            const double dhd = d.dot(hd);
            if (!(dhd > 0.0)) {
                return false;
            }
            const double alpha = rz / dhd;
            step += alpha * d;
            r -= alpha * hd;
            if (r.norm() <= target) {
                return true;
            }
            zr = slot->llt.solve(r);
            const double rz_new = r.dot(zr);
            d = zr + (rz_new / rz) * d;
            rz = rz_new;
        }
        return false;
    };
    auto finish = [&](bool ok, int culprit) {
        res.x(idx) = x;
        res.ok = ok;
        res.collapsed = culprit < 0 ? -1 : support[static_cast<std::size_t>(culprit)];
        return res;
    };

    for (int it = 0; it < 100; ++it) {
        hx.noalias() = h.selfadjointView<Eigen::Lower>() * x;
        grad = hx - cs;
        double worst = 0.0;
        int smallest = -1;
        for (Eigen::Index g = 0; g < groups; ++g) {
            const auto xg = x.segment(g * k, k);
            const double nb = xg.norm();
            if (lambda > 0.0) {
                if (nb <= floor) {
                    smallest = static_cast<int>(g);
                    break;
                }
                dirs[static_cast<std::size_t>(g)] = xg / nb;
                curv[static_cast<std::size_t>(g)] = lambda / nb;
                grad.segment(g * k, k) += lambda * dirs[static_cast<std::size_t>(g)];
            }
            worst = std::max(worst, grad.segment(g * k, k).norm());
        }
        if (smallest >= 0) {
            return finish(false, smallest);
        }
        if (worst <= 0.1 * tol) {
            return finish(true, -1);
        }
        ++res.steps;
        if (slot == nullptr || !pcg(1e-2)) {
            if (!refactor()) {
                return finish(false, -1);
            }
            step = slot->llt.solve(-grad);
        }
        const double slope = grad.dot(step);
        if (!(slope < 0.0)) {
            break;
        }
        // Objective change along the step, formed from differences so that
        // it stays accurate near the optimum.
        hd.noalias() = h.selfadjointView<Eigen::Lower>() * step;
        const double lin = step.dot(hx) - step.dot(cs);
        const double quad = 0.5 * step.dot(hd);
        double t = 1.0;
        bool moved = false;
        while (t > 1e-3) {
            y = x + t * step;
            double delta = t * lin + t * t * quad;
            for (Eigen::Index g = 0; g < groups; ++g) {
                delta += lambda * (y.segment(g * k, k).norm() - x.segment(g * k, k).norm());
            }
            if (delta <= 1e-4 * t * slope) {
                x = y;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if (!moved) {
            // Blocked by a kink: blame the group that reaches zero first.
            int culprit = -1;
            double reach = std::numeric_limits<double>::infinity();
            for (Eigen::Index g = 0; g < groups; ++g) {
                const double sg = step.segment(g * k, k).norm();
                if (sg > 0.0) {
                    const double ratio = x.segment(g * k, k).norm() / sg;
                    if (ratio < reach) {
                        reach = ratio;
                        culprit = static_cast<int>(g);
                    }
                }
            }
            return finish(false, lambda > 0.0 ? culprit : -1);
        }
    }
    return finish(false, -1);
}

/// Active-set refinement: Newton on the current support, dropping groups
/// that collapse and adding groups whose gradient exceeds lambda, until the
/// full stationarity residual is within `tol`.
inline std::optional<Eigen::VectorXd> active_set_newton(const Eigen::MatrixXd& a, double rho,
                                                        const Eigen::VectorXd& c, double lambda, int k,
                                                        const Eigen::VectorXd& start, double tol, PolishCache& cache,
                                                        int& steps)
{
    const Eigen::Index groups = c.size() / k;
    std::vector<int> support;
    if (lambda == 0.0) {
        for (Eigen::Index j = 0; j < groups; ++j) {
            support.push_back(static_cast<int>(j));
        }
    } else {
        support = group_support(start, k);
    }
    Eigen::VectorXd x = start;
    for (int round = 0; round < 25; ++round) {
        PolishOutcome out = polish_support(a, rho, c, lambda, k, support, x, tol, cache);
        steps += out.steps;
        x = std::move(out.x);
        if (!out.ok) {
            if (out.collapsed < 0) {
                return std::nullopt;
            }
            x.segment(static_cast<Eigen::Index>(out.collapsed) * k, k).setZero();
            support.erase(std::find(support.begin(), support.end(), out.collapsed));
            continue;
        }
        const Eigen::VectorXd g = a * x - c;
        std::vector<int> added;
        for (Eigen::Index j = 0; j < groups; ++j) {
            const double gn = g.segment(j * k, k).norm();
            if (x.segment(j * k, k).squaredNorm() == 0.0 && gn - lambda > 0.5 * tol) {
                added.push_back(static_cast<int>(j));
                // One proximal-gradient step on the block as a nonzero start.
                const double scale = std::max(a.block(j * k, j * k, k, k).diagonal().maxCoeff(), 1e-12);
                x.segment(j * k, k) = -((gn - lambda) / (gn * scale)) * g.segment(j * k, k);
            }
        }
        if (added.empty()) {
            if (group_lasso_stationarity(g, x, lambda, k) <= tol) {
                return x;
            }
            return std::nullopt;
        }
        support.insert(support.end(), added.begin(), added.end());
        std::sort(support.begin(), support.end());
    }
    return std::nullopt;
}

/// Scaled-form ADMM for min 1/2 x'Ax - c'x + lambda sum ||z_j|| s.t. x = z,
/// where A = K_tilde + rho L'L. Returns the group-sparse iterate z. The dual
/// is initialized consistently with the warm start so an optimal start is a
/// fixed point. With polishing enabled, an active-set Newton refinement is
/// tried first and again whenever the ADMM support settles; iterations count
/// ADMM sweeps plus Newton steps.
inline InnerResult admm_group_lasso(AugmentedQuadratic& op, double rho, const Eigen::VectorXd& c, double lambda,
                                    int k, const SolverConfig& cfg, const Eigen::VectorXd& start, double tau)
{
    const Eigen::Index n = op.dim();
    const double tol = std::max(cfg.admm_tol_abs, cfg.admm_tol_rel * c.norm());
    const double sqrt_n = std::sqrt(static_cast<double>(n));

    InnerResult res;
    res.tau = tau;
    int newton_steps = 0;
    const Eigen::MatrixXd& dense = op.matrix(rho);
    if (cfg.admm_polish) {
        if (auto sol = active_set_newton(dense, rho, c, lambda, k, start, tol, op.polish_cache(), newton_steps)) {
            res.kkt = group_lasso_stationarity(dense * (*sol) - c, *sol, lambda, k);
            res.b = std::move(*sol);
            res.converged = true;
            res.iterations = newton_steps;
            return res;
        }
    }

    Eigen::VectorXd z = start;
    Eigen::VectorXd w = (c - dense * z) / tau;
    Eigen::VectorXd x(n), z_old(n), v(n);
    std::vector<int> support = group_support(z, k);
    int stable = 0;
    int next_polish = 0;
    int backoff = 20;

    const Eigen::LLT<Eigen::MatrixXd>* llt = &op.factor(rho, tau);
    int it = 0;
    for (; it < cfg.admm_iter_max; ++it) {
        v = c + tau * (z - w);
        x = llt->solve(v);
        z_old = z;
        v = x + w;
        const double kappa = lambda / tau;
        for (Eigen::Index j = 0; j < n / k; ++j) {
            const auto vj = v.segment(j * k, k);
            const double nv = vj.norm();
            if (nv <= kappa) {
                z.segment(j * k, k).setZero();
            } else {
                z.segment(j * k, k) = (1.0 - kappa / nv) * vj;
            }
        }
        w += x - z;

        if (cfg.admm_polish) {
            std::vector<int> now = group_support(z, k);
            stable = now == support ? stable + 1 : 0;
            support = std::move(now);
            if (stable >= 5 && it >= next_polish) {
                if (auto sol = active_set_newton(dense, rho, c, lambda, k, z, tol, op.polish_cache(), newton_steps)) {
                    z = std::move(*sol);
                    res.kkt = group_lasso_stationarity(dense * z - c, z, lambda, k);
                    res.converged = true;
                    ++it;
                    break;
                }
                next_polish = it + backoff;
                backoff *= 2;
            }
        }

        const double r = (x - z).norm();
        const double s = tau * (z - z_old).norm();
        const double eps_pri = sqrt_n * cfg.admm_tol_abs + cfg.admm_tol_rel * std::max(x.norm(), z.norm());
        const double eps_dual = sqrt_n * cfg.admm_tol_abs + cfg.admm_tol_rel * tau * w.norm();
        if (r <= eps_pri && s <= eps_dual) {
            res.kkt = group_lasso_stationarity(dense * z - c, z, lambda, k);
            if (res.kkt <= tol) {
                res.converged = true;
                ++it;
                break;
            }
        }
        if (cfg.admm_adaptive && it % 5 == 4) {
            constexpr double mu = 10.0;
            if (r > mu * s) {
                tau *= 2.0;
                w *= 0.5;
                llt = &op.factor(rho, tau);
            } else if (s > mu * r) {
                tau *= 0.5;
                w *= 2.0;
                llt = &op.factor(rho, tau);
            }
        }
    }
    if (!res.converged) {
        res.kkt = group_lasso_stationarity(dense * z - c, z, lambda, k);
        res.converged = res.kkt <= tol;
    }
    res.b = std::move(z);
    res.iterations = it + newton_steps;
    res.tau = tau;
    return res;
}

} // namespace detail

/// Approximate minimizer of 1/2 b'K_aug b - b'J_aug + lambda sum_j ||b_j||
/// over groups of `group_size` consecutive coordinates.
inline InnerResult inner_group_lasso(const Eigen::MatrixXd& k_aug, const Eigen::VectorXd& j_aug, double lambda,
                                     int group_size, const SolverConfig& config,
                                     std::optional<Eigen::VectorXd> warm = std::nullopt)
{
    config.validate();
    if (group_size < 1 || k_aug.rows() % group_size != 0 || k_aug.rows() != j_aug.size()) {
        throw Error(ErrorKind::dimension_mismatch, "groups must partition the coefficient vector");
    }
    const auto none = ConstraintSet::none(static_cast<int>(k_aug.rows() / group_size), group_size);
    AugmentedQuadratic op(k_aug, none);
    const Eigen::VectorXd start = warm ? *warm : Eigen::VectorXd::Zero(j_aug.size());
    return detail::admm_group_lasso(op, 0.0, j_aug, lambda, group_size, config, start, config.admm_step);
}

/// Largest group norm of J_tilde: the smallest lambda at which b = 0 solves
/// the profiled problem without the constraint multiplier.
inline double lambda_max(const GramSystem& sys)
{
    double best = 0.0;
    for (int j = 0; j < sys.p; ++j) {
        best = std::max(best, sys.J_tilde.segment(static_cast<Eigen::Index>(j) * sys.k, sys.k).norm());
    }
    return best;
}

/// Geometric grid of `count` values from lmax down to ratio * lmax.
inline std::vector<double> lambda_grid(double lmax, int count = 50, double ratio = 1e-3)
{
    if (count < 1 || !(ratio > 0.0) || ratio > 1.0) {
        throw Error(ErrorKind::invalid_config, "lambda grid needs count >= 1 and ratio in (0, 1]");
    }
    std::vector<double> out(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const double frac = count == 1 ? 0.0 : static_cast<double>(i) / (count - 1);
        out[static_cast<std::size_t>(i)] = lmax * std::pow(ratio, frac);
    }
    return out;
}

struct WarmStart {
    Eigen::VectorXd b;
    Eigen::VectorXd u;
};

/// Augmented Lagrangian outer loop with the group-Lasso subproblem solved by
/// ADMM. The penalty grows tenfold whenever the constraint violation fails
/// to shrink below a quarter of its previous value; otherwise the multiplier
/// takes a dual ascent step.
inline FitResult augmented_lagrangian(const GramSystem& sys, AugmentedQuadratic& op, const SolverConfig& config,
                                      const std::optional<WarmStart>& warm = std::nullopt)
{
    config.validate();
    const ConstraintSet& cons = op.constraints();
    const int k = sys.k;
    const Eigen::Index pk = static_cast<Eigen::Index>(sys.p) * k;
    const Eigen::Index qk = static_cast<Eigen::Index>(cons.q()) * k;
    if (op.dim() != pk || cons.p() != sys.p || cons.k != k) {
        throw Error(ErrorKind::dimension_mismatch, "constraints do not match the Gram system");
    }

    Eigen::VectorXd b = warm ? warm->b : Eigen::VectorXd::Zero(pk);
    Eigen::VectorXd u = warm && warm->u.size() == qk ? warm->u : Eigen::VectorXd::Zero(qk);
    if (b.size() != pk) {
        throw Error(ErrorKind::dimension_mismatch, "warm start has the wrong length");
    }
    double rho = config.rho0;
    double tau = config.admm_step;

    FitResult fit;
    fit.lambda = config.lambda;
    fit.k = k;

    const double err0 = cons.residual(b);
    // A start that already satisfies the tolerance (b = 0, or a converged
    // warm start) gives no contraction baseline.
    double err_prev = err0 > config.epsilon ? err0 : std::numeric_limits<double>::infinity();
    double err = err0;
    bool inner_ok = true;
    Eigen::VectorXd multiplier = u;
    int iter = 0;
    do {
        ++iter;
        const Eigen::VectorXd c = cons.q() > 0 ? Eigen::VectorXd(sys.J_tilde - cons.apply_transpose(u)) : sys.J_tilde;
        InnerResult inner = detail::admm_group_lasso(op, rho, c, config.lambda, k, config, b, tau);
        fit.inner_iters_total += inner.iterations;
        inner_ok = inner.converged;
        tau = inner.tau;
        b = std::move(inner.b);
        err = cons.residual(b);
        if (cons.q() > 0) {
            multiplier = u + rho * cons.apply(b);
        }
        if (err > 0.25 * err_prev) {
            rho *= 10.0;
        } else {
            u = multiplier;
        }
        err_prev = err;
    } while (err > config.epsilon && iter < config.k_max);

    fit.b_hat = std::move(b);
    fit.u_hat = std::move(multiplier);
    fit.outer_iters = iter;
    fit.rho_final = rho;
    fit.constraint_residual = err;
    fit.converged = err <= config.epsilon && inner_ok;
    fit.b_c_hat = recover_control(sys, fit.b_hat);
    fit.objective = sys.profiled_loss(fit.b_hat) + config.lambda * group_norm_sum(fit.b_hat, k);
    return fit;
}

inline FitResult augmented_lagrangian(const GramSystem& sys, const ConstraintSet& constraints,
                                      const SolverConfig& config,
                                      const std::optional<WarmStart>& warm = std::nullopt)
{
    AugmentedQuadratic op(sys.K_tilde, constraints);
    return augmented_lagrangian(sys, op, config, warm);
}

/// Fits a decreasing lambda sequence, each fit warm-started from the
/// previous (b, u) pair.
inline std::vector<FitResult> solve_path(const GramSystem& sys, AugmentedQuadratic& op, std::span<const double> lambdas,
                                         const SolverConfig& config)
{
    for (std::size_t i = 1; i < lambdas.size(); ++i) {
        if (!(lambdas[i] < lambdas[i - 1])) {
            throw Error(ErrorKind::invalid_config, "lambda path must be strictly decreasing");
        }
    }
    std::vector<FitResult> out;
    out.reserve(lambdas.size());
    std::optional<WarmStart> warm;
    double rho_carry = config.rho0;
    for (double lam : lambdas) {
        SolverConfig cfg = config;
        cfg.lambda = lam;
        if (config.path_carry_rho) {
            cfg.rho0 = rho_carry;
        }
        out.push_back(augmented_lagrangian(sys, op, cfg, warm));
        rho_carry = out.back().rho_final;
        warm = WarmStart{out.back().b_hat, out.back().u_hat};
    }
    return out;
}

inline std::vector<FitResult> solve_path(const GramSystem& sys, const ConstraintSet& constraints,
                                         std::span<const double> lambdas, const SolverConfig& config)
{
    AugmentedQuadratic op(sys.K_tilde, constraints);
    return solve_path(sys, op, lambdas, config);
}

/// Optimality certificate: group-Lasso stationarity of the Lagrangian
/// gradient K_tilde b - J_tilde + L'u, combined (max) with ||L b||_inf.
inline double kkt_residual(const GramSystem& sys, const ConstraintSet& constraints, const FitResult& fit,
                           double lambda)
{
    Eigen::VectorXd g = sys.K_tilde * fit.b_hat - sys.J_tilde;
    if (constraints.q() > 0) {
        g += constraints.apply_transpose(fit.u_hat);
    }
    const double stat = group_lasso_stationarity(g, fit.b_hat, lambda, sys.k);
    return std::max(stat, constraints.residual(fit.b_hat));
}

// ---------------------------------------------------------------------------
// Baseline: plain group Lasso on additive log-ratios against one reference
// part per composition.

/// One uniformly drawn reference part (local index) per composition.
template <class Rng>
std::vector<int> choose_references(std::span<const int> block_sizes, Rng& rng)
{
    std::vector<int> refs;
    refs.reserve(block_sizes.size());
    for (int pj : block_sizes) {
        std::uniform_int_distribution<int> pick(0, pj - 1);
        refs.push_back(pick(rng));
    }
    return refs;
}

/// Log-ratio design log(x_l / x_r) with the reference columns removed.
inline TimeSlices reference_design(const TimeSlices& z, std::span<const int> block_sizes, std::span<const int> refs)
{
    if (refs.size() != block_sizes.size()) {
        throw Error(ErrorKind::dimension_mismatch, "one reference per composition is required");
    }
    TimeSlices out;
    out.reserve(z.size());
    const auto q = static_cast<Eigen::Index>(block_sizes.size());
    for (const auto& slice : z) {
        Eigen::MatrixXd reduced(slice.rows(), slice.cols() - q);
        Eigen::Index src = 0, dst = 0;
        for (std::size_t blk = 0; blk < block_sizes.size(); ++blk) {
            const auto ref_col = src + refs[blk];
            for (int l = 0; l < block_sizes[blk]; ++l, ++src) {
                if (l == refs[blk]) {
                    continue;
                }
                reduced.col(dst++) = slice.col(src) - slice.col(ref_col);
            }
        }
        out.push_back(std::move(reduced));
    }
    return out;
}

/// Maps reduced (p - q)-curve coefficients back to all p parts, with each
/// reference coefficient set to minus its block sum.
inline Eigen::VectorXd expand_reference_coefficients(const Eigen::VectorXd& reduced, std::span<const int> block_sizes,
                                                     std::span<const int> refs, int k)
{
    int p = 0;
    for (int pj : block_sizes) {
        p += pj;
    }
    Eigen::VectorXd full = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p) * k);
    Eigen::Index src = 0, dst = 0;
    for (std::size_t blk = 0; blk < block_sizes.size(); ++blk) {
        const Eigen::Index ref_pos = dst + refs[blk];
        for (int l = 0; l < block_sizes[blk]; ++l, ++dst) {
            if (l == refs[blk]) {
                continue;
            }
            full.segment(dst * k, k) = reduced.segment(src * k, k);
            full.segment(ref_pos * k, k) -= reduced.segment(src * k, k);
            ++src;
        }
    }
    return full;
}

/// Baseline fit on a Gram system built from reference_design(); the result
/// is reported on all p parts.
inline FitResult fit_bgl(const GramSystem& reduced_sys, std::span<const int> block_sizes, std::span<const int> refs,
                         const SolverConfig& config, const std::optional<WarmStart>& warm = std::nullopt)
{
    const auto none = ConstraintSet::none(reduced_sys.p, reduced_sys.k);
    FitResult fit = augmented_lagrangian(reduced_sys, none, config, warm);
    fit.b_hat = expand_reference_coefficients(fit.b_hat, block_sizes, refs, reduced_sys.k);
    fit.reference_parts.assign(refs.begin(), refs.end());
    return fit;
}

/// Fitted response curves on `grid`: Zc(t) beta_c(t) + Z(t) beta(t).
inline Eigen::MatrixXd predict(const FitResult& fit, const TimeSlices& z, const TimeSlices& zc, const BasisSpec& spec,
                               std::span<const double> grid)
{
    if (z.size() != grid.size() || zc.size() != grid.size()) {
        throw Error(ErrorKind::dimension_mismatch, "design slices must match the grid length");
    }
    const auto n = grid.empty() ? Eigen::Index{0} : z[0].rows();
    Eigen::MatrixXd out(n, static_cast<Eigen::Index>(grid.size()));
    for (std::size_t v = 0; v < grid.size(); ++v) {
        const Eigen::VectorXd beta = eval_curves(spec, fit.b_hat, grid[v]);
        const Eigen::VectorXd beta_c = eval_curves(spec, fit.b_c_hat, grid[v]);
        if (z[v].cols() != beta.size() || zc[v].cols() != beta_c.size()) {
            throw Error(ErrorKind::dimension_mismatch, "design width does not match the fit");
        }
        out.col(static_cast<Eigen::Index>(v)) = zc[v] * beta_c + z[v] * beta;
    }
    return out;
}

} // namespace fclr
