#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fclr/basis.hpp"
#include "fclr/design.hpp"
#include "fclr/error.hpp"

namespace fclr {

/// Composite trapezoid weights for a strictly increasing, possibly uneven grid.
inline Eigen::VectorXd trapezoid_weights(std::span<const double> grid)
{
    const auto V = static_cast<Eigen::Index>(grid.size());
    if (V < 2) {
        throw Error(ErrorKind::insufficient_grid, "trapezoid rule needs at least 2 points");
    }
    for (Eigen::Index v = 1; v < V; ++v) {
        if (!(grid[v] > grid[v - 1])) {
            throw Error(ErrorKind::invalid_grid, "grid must be strictly increasing");
        }
    }
    Eigen::VectorXd w(V);
    w[0] = 0.5 * (grid[1] - grid[0]);
    w[V - 1] = 0.5 * (grid[V - 1] - grid[V - 2]);
    for (Eigen::Index v = 1; v + 1 < V; ++v) {
        w[v] = 0.5 * (grid[v + 1] - grid[v - 1]);
    }
    return w;
}

/// Quadrature-assembled inner-product matrices of the joint quadratic
///
///   1/2 b'Kb - b'J + 1/2 bc'M bc - bc'P + bc'Q b
///
/// together with the profiled pair (K_tilde, J_tilde) obtained by minimizing
/// out the unpenalized control coefficients bc. `yy` holds the integral of
/// y'y so objectives can be reported as 1/2 * integrated squared residual.
struct GramSystem {
    int p = 0;
    int pc1 = 1;
    int k = 0;
    Eigen::MatrixXd K;
    Eigen::VectorXd J;
    Eigen::MatrixXd M;
    Eigen::VectorXd P;
    Eigen::MatrixXd Q;
    Eigen::MatrixXd K_tilde;
    Eigen::VectorXd J_tilde;
    double yy = 0.0;
    double ridge = 0.0;
    Eigen::LLT<Eigen::MatrixXd> m_factor;

    /// 1/2 * integrated squared residual after profiling out bc:
    /// 1/2 b'K_tilde b - b'J_tilde + 1/2 (yy - P'M^{-1}P).
    [[nodiscard]] double profiled_loss(const Eigen::VectorXd& b) const
    {
        const Eigen::VectorXd mp = m_factor.solve(P);
        return 0.5 * b.dot(K_tilde * b) - b.dot(J_tilde) + 0.5 * (yy - P.dot(mp));
    }

    /// The unprofiled joint quadratic including the constant 1/2 yy.
    [[nodiscard]] double joint_loss(const Eigen::VectorXd& b, const Eigen::VectorXd& bc) const
    {
        return 0.5 * b.dot(K * b) - b.dot(J) + 0.5 * bc.dot(M * bc) - bc.dot(P) + bc.dot(Q * b) + 0.5 * yy;
    }
};

namespace detail {

inline void check_design(const TimeSlices& z, const TimeSlices& zc, const Eigen::MatrixXd& y,
                         std::span<const double> grid)
{
    const auto V = grid.size();
    if (z.size() != V || zc.size() != V || static_cast<std::size_t>(y.cols()) != V) {
        throw Error(ErrorKind::dimension_mismatch, "design slices must match the grid length");
    }
    for (std::size_t v = 0; v < V; ++v) {
        if (z[v].rows() != y.rows() || zc[v].rows() != y.rows()) {
            throw Error(ErrorKind::dimension_mismatch, "design rows must match the response rows");
        }
        if (z[v].cols() != z[0].cols() || zc[v].cols() != zc[0].cols()) {
            throw Error(ErrorKind::dimension_mismatch, "design width must be constant over time");
        }
    }
}

// Adds weight * kron(A, phi phi') into out, using only the local support of phi.
inline void add_kron(Eigen::MatrixXd& out, Eigen::Index row_off, Eigen::Index col_off, const Eigen::MatrixXd& a,
                     const LocalBasis& phi, int k)
{
    const auto d = phi.values.size();
    const Eigen::MatrixXd outer = phi.values * phi.values.transpose();
    for (Eigen::Index j = 0; j < a.rows(); ++j) {
        for (Eigen::Index l = 0; l < a.cols(); ++l) {
            out.block(row_off + j * k + phi.first, col_off + l * k + phi.first, d, d) += a(j, l) * outer;
        }
    }
}

} // namespace detail

/// Builds the Gram system from the rows `units` of the design (all rows when
/// empty). Accumulation order is fixed: time, then unit.
inline GramSystem build_gram(const TimeSlices& z, const TimeSlices& zc, const Eigen::MatrixXd& y,
                             const BasisSpec& spec, std::span<const double> grid, std::span<const int> units = {})
{
    detail::check_design(z, zc, y, grid);
    for (double t : grid) {
        if (!spec.domain.contains(t)) {
            throw Error(ErrorKind::out_of_domain, "grid point " + std::to_string(t) + " outside the basis domain");
        }
    }
    const Eigen::VectorXd w = trapezoid_weights(grid);

    std::vector<int> rows(units.begin(), units.end());
    if (rows.empty()) {
        rows.resize(static_cast<std::size_t>(y.rows()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            rows[i] = static_cast<int>(i);
        }
    }

    GramSystem sys;
    sys.p = static_cast<int>(z[0].cols());
    sys.pc1 = static_cast<int>(zc[0].cols());
    sys.k = spec.count;
    const Eigen::Index pk = static_cast<Eigen::Index>(sys.p) * sys.k;
    const Eigen::Index ck = static_cast<Eigen::Index>(sys.pc1) * sys.k;
    sys.K = Eigen::MatrixXd::Zero(pk, pk);
    sys.J = Eigen::VectorXd::Zero(pk);
    sys.M = Eigen::MatrixXd::Zero(ck, ck);
    sys.P = Eigen::VectorXd::Zero(ck);
    sys.Q = Eigen::MatrixXd::Zero(ck, pk);

    Eigen::MatrixXd zs, zcs;
    Eigen::VectorXd ys;
    for (std::size_t v = 0; v < grid.size(); ++v) {
        zs = z[v](rows, Eigen::all);
        zcs = zc[v](rows, Eigen::all);
        ys = y.col(static_cast<Eigen::Index>(v))(rows);
        const double wv = w[static_cast<Eigen::Index>(v)];
        const LocalBasis phi = eval_basis_local(spec, grid[v]);
        const auto d = phi.values.size();

        const Eigen::MatrixXd zz = wv * (zs.transpose() * zs);
        const Eigen::MatrixXd cc = wv * (zcs.transpose() * zcs);
        const Eigen::MatrixXd cz = wv * (zcs.transpose() * zs);
        const Eigen::VectorXd zy = wv * (zs.transpose() * ys);
        const Eigen::VectorXd cy = wv * (zcs.transpose() * ys);

        detail::add_kron(sys.K, 0, 0, zz, phi, sys.k);
        detail::add_kron(sys.M, 0, 0, cc, phi, sys.k);
        detail::add_kron(sys.Q, 0, 0, cz, phi, sys.k);
        for (int j = 0; j < sys.p; ++j) {
            sys.J.segment(static_cast<Eigen::Index>(j) * sys.k + phi.first, d) += zy[j] * phi.values;
        }
        for (int j = 0; j < sys.pc1; ++j) {
            sys.P.segment(static_cast<Eigen::Index>(j) * sys.k + phi.first, d) += cy[j] * phi.values;
        }
        sys.yy += wv * ys.squaredNorm();
    }
    sys.K = 0.5 * (sys.K + sys.K.transpose()).eval();
    sys.M = 0.5 * (sys.M + sys.M.transpose()).eval();

    // The ridge is only added when M itself is numerically singular.
    sys.m_factor.compute(sys.M);
    if (sys.m_factor.info() != Eigen::Success || !(sys.m_factor.rcond() > 1e-12)) {
        sys.ridge = 1e-10 * sys.M.trace() / static_cast<double>(ck);
        Eigen::MatrixXd m_reg = sys.M;
        m_reg.diagonal().array() += sys.ridge;
        sys.m_factor.compute(m_reg);
        if (sys.m_factor.info() != Eigen::Success || !(sys.ridge > 0.0) || !m_reg.allFinite()) {
            throw Error(ErrorKind::singular_controls, "control Gram matrix is singular beyond the ridge tolerance");
        }
    }

    const Eigen::MatrixXd mq = sys.m_factor.solve(sys.Q);
    const Eigen::VectorXd mp = sys.m_factor.solve(sys.P);
    sys.K_tilde = sys.K - sys.Q.transpose() * mq;
    sys.K_tilde = 0.5 * (sys.K_tilde + sys.K_tilde.transpose()).eval();
    sys.J_tilde = sys.J - sys.Q.transpose() * mp;
    return sys;
}

/// Minimizer of the joint quadratic in bc for fixed b: M^{-1}(P - Q b).
inline Eigen::VectorXd recover_control(const GramSystem& sys, const Eigen::VectorXd& b_hat)
{
    if (b_hat.size() != sys.Q.cols()) {
        throw Error(ErrorKind::dimension_mismatch, "coefficient length does not match the Gram system");
    }
    return sys.m_factor.solve(sys.P - sys.Q * b_hat);
}

/// Trapezoid integral of sampled values on the grid.
inline double integrate(std::span<const double> grid, const Eigen::VectorXd& values)
{
    return trapezoid_weights(grid).dot(values);
}

} // namespace fclr
