#pragma once

// Reference solutions the solver is checked against.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "fclr/solver.hpp"
#include "test_support.hpp"

namespace fclr::testing {

struct Instance {
    fclr::FunctionalPanel panel;
    fclr::BasisSpec spec;
    fclr::GramSystem sys;
    fclr::ConstraintSet cs;
};

inline Instance random_instance(std::mt19937_64& rng, int n, const std::vector<int>& sizes, int k, int controls = 0,
                         int times = 8)
{
    Instance in;
    in.panel = fclr::testing::random_panel(n, sizes, times, controls, rng);
    in.sys = fclr::testing::panel_gram(in.panel, k, &in.spec);
    in.cs = fclr::build_constraints(sizes, k);
    return in;
}

// Equality-constrained least squares through the saddle system
// [[K, L'], [L, 0]] [b; nu] = [J; 0].
inline Eigen::VectorXd saddle_solution(const fclr::GramSystem& sys, const fclr::ConstraintSet& cs)
{
    const auto pk = sys.K_tilde.rows();
    const auto m = cs.L_tilde.rows();
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(pk + m, pk + m);
    kkt.topLeftCorner(pk, pk) = sys.K_tilde;
    kkt.topRightCorner(pk, m) = cs.L_tilde.transpose();
    kkt.bottomLeftCorner(m, pk) = cs.L_tilde;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(pk + m);
    rhs.head(pk) = sys.J_tilde;
    return kkt.fullPivLu().solve(rhs).head(pk);
}

inline double penalized(const Eigen::MatrixXd& k_mat, const Eigen::VectorXd& j_vec, double lambda, int k,
                 const Eigen::VectorXd& b)
{
    return 0.5 * b.dot(k_mat * b) - b.dot(j_vec) + lambda * fclr::group_norm_sum(b, k);
}

// Minimizer of the penalized problem restricted to the groups in `support`
// and the null space of the constraints: damped Newton in null-space
// coordinates on the smoothed norms sqrt(||b_g||^2 + mu^2), with mu driven
// to zero. Returns nothing when a group of the support ends at zero (the
// restricted optimum then lives on a smaller support).
inline std::optional<Eigen::VectorXd> restricted_minimizer(const Eigen::MatrixXd& k_mat, const Eigen::VectorXd& j_vec,
                                                    const Eigen::MatrixXd& l_mat, double lambda, int k,
                                                    const std::vector<int>& support)
{
    const auto pk = k_mat.rows();
    std::vector<int> idx;
    for (int g : support) {
        for (int a = 0; a < k; ++a) {
            idx.push_back(g * k + a);
        }
    }
    const auto m = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(pk, m);
    for (Eigen::Index i = 0; i < m; ++i) {
        sel(idx[static_cast<std::size_t>(i)], i) = 1.0;
    }
    Eigen::MatrixXd basis = sel;
    if (l_mat.rows() > 0) {
        const Eigen::MatrixXd ls = l_mat * sel;
        Eigen::FullPivLU<Eigen::MatrixXd> lu(ls);
        if (lu.rank() == m) {
            return std::nullopt;
        }
        basis = sel * lu.kernel();
    }
    const Eigen::MatrixXd h0 = basis.transpose() * k_mat * basis;
    const Eigen::VectorXd g0 = basis.transpose() * j_vec;

    Eigen::VectorXd th = h0.ldlt().solve(g0);
    for (double mu = 1e-1; mu >= 1e-13; mu *= 0.1) {
        auto objective = [&](const Eigen::VectorXd& t) {
            const Eigen::VectorXd b = basis * t;
            double f = 0.5 * b.dot(k_mat * b) - b.dot(j_vec);
            for (int g : support) {
                f += lambda * std::sqrt(b.segment(g * k, k).squaredNorm() + mu * mu);
            }
            return f;
        };
        for (int it = 0; it < 100; ++it) {
            const Eigen::VectorXd b = basis * th;
            Eigen::VectorXd grad_b = k_mat * b - j_vec;
            Eigen::MatrixXd hess_b = k_mat;
            for (int g : support) {
                const Eigen::VectorXd bg = b.segment(g * k, k);
                const double f = std::sqrt(bg.squaredNorm() + mu * mu);
                grad_b.segment(g * k, k) += lambda * bg / f;
                hess_b.block(g * k, g * k, k, k) +=
                    lambda * (Eigen::MatrixXd::Identity(k, k) / f - bg * bg.transpose() / (f * f * f));
            }
            const Eigen::VectorXd grad = basis.transpose() * grad_b;
            if (grad.norm() < 1e-14 * std::max(1.0, g0.norm())) {
                break;
            }
            const Eigen::VectorXd step = (basis.transpose() * hess_b * basis).ldlt().solve(grad);
            const double f0 = objective(th);
            double t = 1.0;
            while (t > 1e-14 && objective(th - t * step) > f0 - 1e-4 * t * grad.dot(step)) {
                t *= 0.5;
            }
            if (t <= 1e-14) {
                break;
            }
            th -= t * step;
        }
    }
    const Eigen::VectorXd b = basis * th;
    for (int g : support) {
        if (b.segment(g * k, k).norm() < 1e-7) {
            return std::nullopt;
        }
    }
    return b;
}

// Global minimizer by enumerating every support.
inline Eigen::VectorXd enumerate_supports(const Eigen::MatrixXd& k_mat, const Eigen::VectorXd& j_vec,
                                   const Eigen::MatrixXd& l_mat, double lambda, int k)
{
    const int p = static_cast<int>(k_mat.rows() / k);
    Eigen::VectorXd best = Eigen::VectorXd::Zero(k_mat.rows());
    double best_val = 0.0;
    for (int mask = 1; mask < (1 << p); ++mask) {
        std::vector<int> support;
        for (int g = 0; g < p; ++g) {
            if (mask & (1 << g)) {
                support.push_back(g);
            }
        }
        if (auto b = restricted_minimizer(k_mat, j_vec, l_mat, lambda, k, support)) {
            const double val = penalized(k_mat, j_vec, lambda, k, *b);
            if (val < best_val) {
                best_val = val;
                best = *b;
            }
        }
    }
    return best;
}

// Tight solver settings for the invariance properties, which hold for the
// exact estimator.
inline fclr::SolverConfig tight(double lambda)
{
    fclr::SolverConfig cfg;
    cfg.lambda = lambda;
    cfg.epsilon = 1e-12;
    cfg.admm_tol_abs = 1e-12;
    cfg.admm_tol_rel = 1e-12;
    return cfg;
}

// Joint quadratic in (b, bc) assembled from the full Kronecker maps.
struct JointSystem {
    Eigen::MatrixXd H;
    Eigen::VectorXd g;
};

inline JointSystem joint_normal_equations(const fclr::TimeSlices& z, const fclr::TimeSlices& zc, const Eigen::MatrixXd& y,
                                   const fclr::BasisSpec& spec, const std::vector<double>& grid)
{
    const auto p = z[0].cols(), pc = zc[0].cols();
    const int k = spec.count;
    const Eigen::Index dim = (p + pc) * k;
    JointSystem js{Eigen::MatrixXd::Zero(dim, dim), Eigen::VectorXd::Zero(dim)};
    const auto w = fclr::trapezoid_weights(grid);
    for (std::size_t v = 0; v < grid.size(); ++v) {
        const Eigen::MatrixXd ez = fclr::expand_basis(spec, grid[v], static_cast<int>(p));
        const Eigen::MatrixXd ec = fclr::expand_basis(spec, grid[v], static_cast<int>(pc));
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            Eigen::RowVectorXd x(dim);
            x << z[v].row(i) * ez, zc[v].row(i) * ec;
            js.H += w[static_cast<Eigen::Index>(v)] * x.transpose() * x;
            js.g += w[static_cast<Eigen::Index>(v)] * y(i, static_cast<Eigen::Index>(v)) * x.transpose();
        }
    }
    return js;
}

} // namespace fclr::testing
