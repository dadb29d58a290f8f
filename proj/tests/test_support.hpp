#pragma once

#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fclr/basis.hpp"
#include "fclr/design.hpp"
#include "fclr/quadrature.hpp"
#include "fclr/selection.hpp"
#include "fclr/simulation.hpp"

namespace fclr::testing {

inline Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0)
{
    std::normal_distribution<double> normal(0.0, sd);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) {
            m(i, j) = normal(rng);
        }
    }
    return m;
}

/// Random panel on an equispaced grid of [0, 1]: softmax compositions, a
/// response that depends on the first part of every block, and optional
/// controls.
inline FunctionalPanel random_panel(int n, const std::vector<int>& sizes, int times, int controls,
                                    std::mt19937_64& rng)
{
    FunctionalPanel panel;
    for (int v = 0; v < times; ++v) {
        panel.grid.push_back(static_cast<double>(v) / (times - 1));
    }
    for (int i = 0; i < n; ++i) {
        panel.units.push_back("u" + std::to_string(i));
    }
    for (std::size_t b = 0; b < sizes.size(); ++b) {
        CompositionBlock blk;
        blk.name = "b" + std::to_string(b);
        for (int l = 0; l < sizes[b]; ++l) {
            blk.parts.push_back("p" + std::to_string(l));
        }
        for (int v = 0; v < times; ++v) {
            const Eigen::MatrixXd e = normal_matrix(n, sizes[b], rng).array().exp().matrix();
            blk.shares.push_back(close(e));
        }
        panel.blocks.push_back(std::move(blk));
    }
    for (int c = 0; c < controls; ++c) {
        panel.control_names.push_back("c" + std::to_string(c));
    }
    if (controls > 0) {
        for (int v = 0; v < times; ++v) {
            panel.controls.push_back(normal_matrix(n, controls, rng));
        }
    }
    panel.response = normal_matrix(n, times, rng);
    for (int v = 0; v < times; ++v) {
        const double t = panel.grid[static_cast<std::size_t>(v)];
        for (const auto& blk : panel.blocks) {
            const auto& s = blk.shares[static_cast<std::size_t>(v)];
            panel.response.col(v) +=
                (1.0 + t) * (s.col(0).array().log() - s.col(1).array().log()).matrix();
        }
    }
    return panel;
}

/// Gram system of a panel at basis size k (cubic when k >= 4).
inline GramSystem panel_gram(const FunctionalPanel& panel, int k, BasisSpec* spec_out = nullptr)
{
    const auto spec = make_basis(std::min(4, k), k, {panel.grid.front(), panel.grid.back()});
    if (spec_out) {
        *spec_out = spec;
    }
    return build_gram(log_transform(panel), build_controls(panel), panel.response, spec, panel.grid);
}

/// A training set drawn from the simulation design with noise at `snr`.
struct SimInstance {
    RegressionData data;
    TruthCoefficients truth;
    double sigma2 = 0.0;
};

inline SimInstance sim_instance(const SimConfig& cfg, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    SimInstance out;
    out.truth = truth_coefficients(cfg.p, cfg.q);
    out.data = regression_data(gen_compositions(cfg, cfg.n, rng), Domain{0.0, 1.0});
    out.sigma2 = calibrate_noise(true_signal(out.data.z, out.data.grid, out.truth), cfg.snr);
    out.data.y = gen_response(out.data.z, out.data.grid, out.truth, out.sigma2, rng);
    return out;
}

} // namespace fclr::testing
