#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fclr/error.hpp"

namespace fclr {

/// Closed time interval on which coefficient curves live.
struct Domain {
    double lo = 0.0;
    double hi = 1.0;

    [[nodiscard]] double length() const noexcept { return hi - lo; }
    [[nodiscard]] bool contains(double t) const noexcept { return t >= lo && t <= hi; }
};

/// Clamped B-spline basis of a given order (degree order-1) with `count`
/// functions and equispaced interior knots.
struct BasisSpec {
    int order = 4;
    int count = 5;
    Domain domain;
    std::vector<double> knots;
};

/// Builds a clamped spec: endpoints repeated `order` times and
/// `count - order` equispaced interior knots.
inline BasisSpec make_basis(int order, int count, Domain domain)
{
    if (order < 1 || count < order) {
        throw Error(ErrorKind::invalid_basis,
                    "need count >= order >= 1, got order " + std::to_string(order) +
                        " and count " + std::to_string(count));
    }
    if (!(domain.hi > domain.lo) || !std::isfinite(domain.lo) || !std::isfinite(domain.hi)) {
        throw Error(ErrorKind::invalid_domain, "basis domain must be a nondegenerate interval");
    }
    BasisSpec spec{order, count, domain, {}};
    const int interior = count - order;
    spec.knots.reserve(static_cast<std::size_t>(count + order));
    for (int i = 0; i < order; ++i) {
        spec.knots.push_back(domain.lo);
    }
    for (int i = 1; i <= interior; ++i) {
        spec.knots.push_back(domain.lo + domain.length() * i / (interior + 1));
    }
    for (int i = 0; i < order; ++i) {
        spec.knots.push_back(domain.hi);
    }
    return spec;
}

namespace detail {

// Index s of the knot span [knots[s], knots[s+1]) holding t; the last span is
// closed on the right so t == hi is accepted.
inline int find_span(const BasisSpec& spec, double t)
{
    const int last = spec.count - 1;
    if (t >= spec.knots[static_cast<std::size_t>(last + 1)]) {
        return last;
    }
    const auto first = spec.knots.begin() + (spec.order - 1);
    const auto end = spec.knots.begin() + (last + 2);
    auto it = std::upper_bound(first, end, t);
    return static_cast<int>(std::distance(spec.knots.begin(), it)) - 1;
}

} // namespace detail

/// The `order` possibly-nonzero basis values at t, starting at index `first`.
struct LocalBasis {
    int first = 0;
    Eigen::VectorXd values;
};

/// Cox-de Boor evaluation of the nonzero basis functions at t.
inline LocalBasis eval_basis_local(const BasisSpec& spec, double t)
{
    if (!spec.domain.contains(t)) {
        throw Error(ErrorKind::out_of_domain,
                    "t = " + std::to_string(t) + " outside [" + std::to_string(spec.domain.lo) +
                        ", " + std::to_string(spec.domain.hi) + "]");
    }
    const int d = spec.order;
    const int span = detail::find_span(spec, t);
    const auto& u = spec.knots;

    Eigen::VectorXd n = Eigen::VectorXd::Zero(d);
    std::vector<double> left(static_cast<std::size_t>(d)), right(static_cast<std::size_t>(d));
    n[0] = 1.0;
    for (int j = 1; j < d; ++j) {
        left[j] = t - u[static_cast<std::size_t>(span + 1 - j)];
        right[j] = u[static_cast<std::size_t>(span + j)] - t;
        double saved = 0.0;
        for (int r = 0; r < j; ++r) {
            const double denom = right[r + 1] + left[j - r];
            const double temp = denom > 0.0 ? n[r] / denom : 0.0;
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    return {span - d + 1, std::move(n)};
}

/// Phi(t): all `count` basis values at t.
inline Eigen::VectorXd eval_basis(const BasisSpec& spec, double t)
{
    auto local = eval_basis_local(spec, t);
    Eigen::VectorXd phi = Eigen::VectorXd::Zero(spec.count);
    phi.segment(local.first, spec.order) = local.values;
    return phi;
}

/// Basis values at every grid point, one row per time (V x k).
inline Eigen::MatrixXd basis_matrix(const BasisSpec& spec, std::span<const double> grid)
{
    Eigen::MatrixXd out(static_cast<Eigen::Index>(grid.size()), spec.count);
    for (std::size_t v = 0; v < grid.size(); ++v) {
        out.row(static_cast<Eigen::Index>(v)) = eval_basis(spec, grid[v]).transpose();
    }
    return out;
}

/// I_p (x) Phi(t)^T, the p x pk map from stacked coefficients to curve values.
inline Eigen::MatrixXd expand_basis(const BasisSpec& spec, double t, int p)
{
    if (p < 1) {
        throw Error(ErrorKind::dimension_mismatch, "expand_basis needs p >= 1");
    }
    const Eigen::VectorXd phi = eval_basis(spec, t);
    const int k = spec.count;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(p, static_cast<Eigen::Index>(p) * k);
    for (int j = 0; j < p; ++j) {
        out.block(j, static_cast<Eigen::Index>(j) * k, 1, k) = phi.transpose();
    }
    return out;
}

/// Curve values beta(t) for stacked coefficients b = vec(B^T), without
/// forming the Kronecker product.
inline Eigen::VectorXd eval_curves(const BasisSpec& spec, const Eigen::VectorXd& b, double t)
{
    const int k = spec.count;
    const auto p = b.size() / k;
    const auto local = eval_basis_local(spec, t);
    Eigen::VectorXd beta(p);
    for (Eigen::Index j = 0; j < p; ++j) {
        beta[j] = b.segment(j * k + local.first, spec.order).dot(local.values);
    }
    return beta;
}

} // namespace fclr
