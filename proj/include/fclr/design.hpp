#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fclr/error.hpp"

namespace fclr {

/// One matrix per time point; row i is unit i. The natural layout for a
/// concurrent model, where every time point is its own cross-section.
using TimeSlices = std::vector<Eigen::MatrixXd>;

struct CompositionBlock {
    std::string name;
    std::vector<std::string> parts;
    TimeSlices shares; // V slices of n x parts.size()
};

/// Observed dataset: response curves, compositional blocks and controls on a
/// shared (possibly uneven) time grid.
struct FunctionalPanel {
    std::vector<std::string> units;
    std::vector<double> grid;
    Eigen::MatrixXd response; // n x V
    std::vector<CompositionBlock> blocks;
    TimeSlices controls; // V slices of n x p_c, p_c may be 0
    std::vector<std::string> control_names;

    [[nodiscard]] Eigen::Index n() const { return response.rows(); }
    [[nodiscard]] std::size_t n_times() const { return grid.size(); }
    [[nodiscard]] int n_controls() const { return static_cast<int>(control_names.size()); }

    [[nodiscard]] std::vector<int> block_sizes() const
    {
        std::vector<int> sizes;
        sizes.reserve(blocks.size());
        for (const auto& b : blocks) {
            sizes.push_back(static_cast<int>(b.parts.size()));
        }
        return sizes;
    }

    [[nodiscard]] int total_parts() const
    {
        int p = 0;
        for (const auto& b : blocks) {
            p += static_cast<int>(b.parts.size());
        }
        return p;
    }

    /// Names of all parts in concatenation order, as "block:part".
    [[nodiscard]] std::vector<std::string> series_names() const
    {
        std::vector<std::string> out;
        for (const auto& b : blocks) {
            for (const auto& part : b.parts) {
                out.push_back(b.name + ":" + part);
            }
        }
        return out;
    }

    /// Sub-panel on the given unit rows (repeats allowed, for resampling).
    [[nodiscard]] FunctionalPanel select_units(std::span<const int> rows) const
    {
        FunctionalPanel out;
        out.grid = grid;
        out.control_names = control_names;
        const auto m = static_cast<Eigen::Index>(rows.size());
        out.response.resize(m, response.cols());
        for (Eigen::Index r = 0; r < m; ++r) {
            const int src = rows[static_cast<std::size_t>(r)];
            out.units.push_back(units.empty() ? std::to_string(src) : units[static_cast<std::size_t>(src)]);
            out.response.row(r) = response.row(src);
        }
        auto pick = [&](const TimeSlices& slices) {
            TimeSlices picked;
            picked.reserve(slices.size());
            for (const auto& s : slices) {
                Eigen::MatrixXd sub(m, s.cols());
                for (Eigen::Index r = 0; r < m; ++r) {
                    sub.row(r) = s.row(rows[static_cast<std::size_t>(r)]);
                }
                picked.push_back(std::move(sub));
            }
            return picked;
        };
        for (const auto& b : blocks) {
            out.blocks.push_back({b.name, b.parts, pick(b.shares)});
        }
        out.controls = pick(controls);
        return out;
    }

    /// Throws unless the panel satisfies its structural invariants.
    void validate(double closure_tol = 1e-6) const
    {
        const auto V = grid.size();
        if (V < 2) {
            throw Error(ErrorKind::insufficient_grid, "panel needs at least 2 time points");
        }
        for (std::size_t v = 1; v < V; ++v) {
            if (!(grid[v] > grid[v - 1])) {
                throw Error(ErrorKind::invalid_grid, "time grid must be strictly increasing");
            }
        }
        if (static_cast<std::size_t>(response.cols()) != V) {
            throw Error(ErrorKind::dimension_mismatch, "response columns must match the grid");
        }
        if (!units.empty() && static_cast<Eigen::Index>(units.size()) != n()) {
            throw Error(ErrorKind::dimension_mismatch, "unit labels must match response rows");
        }
        for (const auto& b : blocks) {
            if (b.shares.size() != V) {
                throw Error(ErrorKind::dimension_mismatch, "block '" + b.name + "' has wrong slice count");
            }
            for (std::size_t v = 0; v < V; ++v) {
                const auto& s = b.shares[v];
                if (s.rows() != n() || s.cols() != static_cast<Eigen::Index>(b.parts.size())) {
                    throw Error(ErrorKind::dimension_mismatch, "block '" + b.name + "' slice has wrong shape");
                }
                for (Eigen::Index i = 0; i < s.rows(); ++i) {
                    if ((s.row(i).array() <= 0.0).any() || !s.row(i).allFinite()) {
                        throw Error(ErrorKind::invalid_composition,
                                    "block '" + b.name + "' unit " + std::to_string(i) + " time " +
                                        std::to_string(grid[v]) + " has a nonpositive share");
                    }
                    if (std::abs(s.row(i).sum() - 1.0) > closure_tol) {
                        throw Error(ErrorKind::invalid_composition,
                                    "block '" + b.name + "' unit " + std::to_string(i) + " time " +
                                        std::to_string(grid[v]) + " does not sum to 1");
                    }
                }
            }
        }
        if (!controls.empty() || !control_names.empty()) {
            if (controls.size() != V) {
                throw Error(ErrorKind::dimension_mismatch, "controls have wrong slice count");
            }
            for (const auto& c : controls) {
                if (c.rows() != n() || c.cols() != n_controls()) {
                    throw Error(ErrorKind::dimension_mismatch, "control slice has wrong shape");
                }
            }
        }
    }
};

/// Block indicator matrix L and its basis expansion L (x) I_k.
struct ConstraintSet {
    Eigen::MatrixXd L;       // q x p
    Eigen::MatrixXd L_tilde; // qk x pk
    std::vector<int> block_sizes;
    int k = 1;

    /// An empty constraint set over p curves (plain group Lasso).
    static ConstraintSet none(int p, int k)
    {
        ConstraintSet cs;
        cs.L = Eigen::MatrixXd::Zero(0, p);
        cs.L_tilde = Eigen::MatrixXd::Zero(0, static_cast<Eigen::Index>(p) * k);
        cs.k = k;
        return cs;
    }

    [[nodiscard]] int q() const { return static_cast<int>(block_sizes.size()); }
    [[nodiscard]] int p() const { return static_cast<int>(L.cols()); }

    /// L_tilde * b computed blockwise: per block, the sum over parts of the
    /// k-vectors b_j.
    [[nodiscard]] Eigen::VectorXd apply(const Eigen::VectorXd& b) const
    {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q()) * k);
        Eigen::Index j = 0;
        for (int blk = 0; blk < q(); ++blk) {
            for (int l = 0; l < block_sizes[static_cast<std::size_t>(blk)]; ++l, ++j) {
                out.segment(blk * k, k) += b.segment(j * k, k);
            }
        }
        return out;
    }

    /// L_tilde^T * u: every part in block j receives u_j.
    [[nodiscard]] Eigen::VectorXd apply_transpose(const Eigen::VectorXd& u) const
    {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p()) * k);
        Eigen::Index j = 0;
        for (int blk = 0; blk < q(); ++blk) {
            for (int l = 0; l < block_sizes[static_cast<std::size_t>(blk)]; ++l, ++j) {
                out.segment(j * k, k) = u.segment(blk * k, k);
            }
        }
        return out;
    }

    /// max |L_tilde b|, zero when there are no constraints.
    [[nodiscard]] double residual(const Eigen::VectorXd& b) const
    {
        if (q() == 0) {
            return 0.0;
        }
        return apply(b).cwiseAbs().maxCoeff();
    }
};

/// Replaces zero counts by `epsilon` row by row; rows are compositions.
inline Eigen::MatrixXd zero_replace(const Eigen::MatrixXd& counts, double epsilon = 0.5)
{
    if (!(epsilon > 0.0)) {
        throw Error(ErrorKind::invalid_config, "zero replacement value must be positive");
    }
    Eigen::MatrixXd out = counts;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        if ((out.row(i).array() < 0.0).any()) {
            throw Error(ErrorKind::invalid_composition, "row " + std::to_string(i) + " has a negative count");
        }
        if (!(out.row(i).array() > 0.0).any()) {
            throw Error(ErrorKind::degenerate_row, "row " + std::to_string(i) + " has no positive count");
        }
        for (Eigen::Index j = 0; j < out.cols(); ++j) {
            if (out(i, j) == 0.0) {
                out(i, j) = epsilon;
            }
        }
    }
    return out;
}

/// Closure: divides each strictly positive row by its sum.
inline Eigen::MatrixXd close(const Eigen::MatrixXd& values)
{
    Eigen::MatrixXd out = values;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        if ((out.row(i).array() <= 0.0).any() || !out.row(i).allFinite()) {
            throw Error(ErrorKind::invalid_composition, "row " + std::to_string(i) + " has a nonpositive entry");
        }
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

/// Elementwise log of the concatenated compositions, one n x p slice per time.
inline TimeSlices log_transform(const FunctionalPanel& panel)
{
    const int p = panel.total_parts();
    TimeSlices z;
    z.reserve(panel.n_times());
    for (std::size_t v = 0; v < panel.n_times(); ++v) {
        Eigen::MatrixXd slice(panel.n(), p);
        Eigen::Index col = 0;
        for (const auto& b : panel.blocks) {
            const auto& s = b.shares[v];
            if ((s.array() <= 0.0).any()) {
                throw Error(ErrorKind::invalid_composition,
                            "block '" + b.name + "' has a nonpositive share at time " + std::to_string(panel.grid[v]));
            }
            slice.middleCols(col, s.cols()) = s.array().log().matrix();
            col += s.cols();
        }
        z.push_back(std::move(slice));
    }
    return z;
}

/// Control design with the intercept column of ones prepended.
inline TimeSlices build_controls(const FunctionalPanel& panel)
{
    const int pc = panel.n_controls();
    TimeSlices zc;
    zc.reserve(panel.n_times());
    for (std::size_t v = 0; v < panel.n_times(); ++v) {
        Eigen::MatrixXd slice(panel.n(), pc + 1);
        slice.col(0).setOnes();
        if (pc > 0) {
            slice.rightCols(pc) = panel.controls[v];
        }
        zc.push_back(std::move(slice));
    }
    return zc;
}

inline ConstraintSet build_constraints(std::span<const int> block_sizes, int k)
{
    if (k < 1) {
        throw Error(ErrorKind::invalid_basis, "constraint expansion needs k >= 1");
    }
    for (int pj : block_sizes) {
        if (pj < 2) {
            throw Error(ErrorKind::degenerate_block, "every composition needs at least 2 parts");
        }
    }
    ConstraintSet cs;
    cs.block_sizes.assign(block_sizes.begin(), block_sizes.end());
    cs.k = k;
    const int q = static_cast<int>(block_sizes.size());
    const int p = std::accumulate(block_sizes.begin(), block_sizes.end(), 0);
    cs.L = Eigen::MatrixXd::Zero(q, p);
    int col = 0;
    for (int j = 0; j < q; ++j) {
        for (int l = 0; l < block_sizes[static_cast<std::size_t>(j)]; ++l) {
            cs.L(j, col++) = 1.0;
        }
    }
    cs.L_tilde = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(q) * k, static_cast<Eigen::Index>(p) * k);
    for (int j = 0; j < q; ++j) {
        for (int l = 0; l < p; ++l) {
            if (cs.L(j, l) != 0.0) {
                cs.L_tilde.block(j * k, l * k, k, k).setIdentity();
            }
        }
    }
    return cs;
}

} // namespace fclr
