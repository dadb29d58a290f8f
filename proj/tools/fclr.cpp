// fclr: fit, tune, bootstrap and simulate sparse functional log-contrast
// regressions from the command line.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fclr/fclr.hpp"
#include "ingest.hpp"

namespace {

namespace fs = std::filesystem;
using fclr::io::format_double;

constexpr int exit_ok = 0;
constexpr int exit_input = 1;
constexpr int exit_nonconverged = 2;

constexpr std::uint64_t cv_tag = 0x6376; // "cv"

struct RunConfig {
    std::string data;
    std::string blocks;
    std::string grid_policy = "error";
    std::string out_dir = ".";
    std::uint64_t seed = 1;
    int threads = 1;

    std::vector<int> k{4, 5, 6, 7, 8};
    int order = 4;
    int lambda_count = 50;
    double lambda_ratio = 1e-3;
    std::string folds = "10";
    std::optional<double> lambda;
    std::vector<double> domain;

    double epsilon = 1e-6;
    double rho0 = 1.0;
    int max_outer = 50;
    int admm_max_iter = 10000;

    int bootstrap_replicates = 500;

    std::vector<std::string> scenarios;
    int replicates = 100;
    std::vector<std::string> methods{"cgl", "bgl"};
    std::string sim_output = "simulation.csv";

    std::vector<double> window_starts;
    double window_width = 1.0;

    std::string export_dir;
};

fclr::TuningSpec tuning_of(const RunConfig& c)
{
    fclr::TuningSpec t;
    t.k_grid = c.k;
    t.order = c.order;
    t.lambdas.count = c.lambda_count;
    t.lambdas.ratio = c.lambda_ratio;
    if (c.folds == "loo") {
        t.folds = 0;
    } else {
        const auto f = fclr::io::parse_double(c.folds);
        if (!f || *f != std::floor(*f) || *f < 2) {
            throw fclr::io::input_error("--folds must be 'loo' or an integer >= 2, got '" + c.folds + "'");
        }
        t.folds = static_cast<int>(*f);
    }
    if (c.k.empty() || c.lambda_count < 1 || !(c.lambda_ratio > 0.0 && c.lambda_ratio < 1.0)) {
        throw fclr::io::input_error("need a non-empty --k list, --lambda-count >= 1 and 0 < --lambda-ratio < 1");
    }
    return t;
}

fclr::SolverConfig solver_of(const RunConfig& c)
{
    fclr::SolverConfig s;
    s.epsilon = c.epsilon;
    s.rho0 = c.rho0;
    s.k_max = c.max_outer;
    s.admm_iter_max = c.admm_max_iter;
    s.validate();
    return s;
}

fclr::FunctionalPanel load_panel(const RunConfig& c)
{
    if (c.data.empty() || c.blocks.empty()) {
        throw fclr::io::input_error("--data and --blocks are required");
    }
    const auto policy = c.grid_policy == "intersect" ? fclr::io::GridPolicy::intersect : fclr::io::GridPolicy::error;
    return fclr::io::ingest_dataset(c.data, fclr::io::load_blocks_spec(c.blocks), policy);
}

fclr::RegressionData load_data(const RunConfig& c, fclr::FunctionalPanel* keep = nullptr)
{
    auto panel = load_panel(c);
    std::optional<fclr::Domain> dom;
    if (!c.domain.empty()) {
        if (c.domain.size() != 2) {
            throw fclr::io::input_error("--domain takes two values");
        }
        dom = fclr::Domain{c.domain[0], c.domain[1]};
    }
    auto data = fclr::regression_data(panel, dom);
    if (keep) {
        *keep = std::move(panel);
    }
    return data;
}

fclr::Folds folds_of(const RunConfig& c, const fclr::TuningSpec& t, int n)
{
    auto rng = fclr::replicate_stream(c.seed, std::span<const std::uint64_t>(&cv_tag, 1), 0);
    return fclr::folds_for(t, n, rng);
}

std::ofstream open_output(const RunConfig& c, const std::string& name)
{
    fs::create_directories(c.out_dir);
    const fs::path path = fs::path(c.out_dir) / name;
    std::ofstream out(path);
    if (!out) {
        throw fclr::io::input_error("cannot write '" + path.string() + "'");
    }
    return out;
}

std::vector<std::string> curve_names(const fclr::FunctionalPanel& panel)
{
    std::vector<std::string> out;
    for (const auto& b : panel.blocks) {
        out.insert(out.end(), b.parts.begin(), b.parts.end());
    }
    return out;
}

struct FinalFit {
    fclr::FitResult fit;
    fclr::BasisSpec spec;
    double kkt = 0.0;
    bool cv_used = false;
};

// CV-tuned fit, or a direct fit when lambda is given.
FinalFit final_fit(const RunConfig& c, const fclr::RegressionData& data)
{
    const auto tuning = tuning_of(c);
    const auto solver = solver_of(c);
    FinalFit out;
    if (c.lambda) {
        if (c.k.size() != 1) {
            throw fclr::io::input_error("--lambda needs exactly one value of --k");
        }
        if (!(*c.lambda >= 0.0)) {
            throw fclr::io::input_error("--lambda must be >= 0");
        }
        out.fit = fclr::fit_at(data, tuning, solver, {}, c.k[0], *c.lambda);
        out.spec = fclr::make_basis(c.order, c.k[0], data.domain);
    } else {
        const auto folds = folds_of(c, tuning, static_cast<int>(data.n()));
        auto tuned = fclr::tune_and_fit(data, tuning, folds, solver, {}, c.threads);
        out.fit = std::move(tuned.fit);
        out.spec = tuned.spec;
        out.cv_used = true;
    }
    const fclr::ModelSetup setup(data, {}, c.order, out.fit.k);
    out.kkt = fclr::kkt_residual(setup.gram(), setup.constraints(), out.fit, out.fit.lambda);
    return out;
}

int cmd_fit(const RunConfig& c)
{
    fclr::FunctionalPanel panel;
    const auto data = load_data(c, &panel);
    const auto ff = final_fit(c, data);
    const auto& fit = ff.fit;
    const int k = fit.k;

    std::vector<std::string> names = curve_names(panel);
    names.push_back("(intercept)");
    names.insert(names.end(), panel.control_names.begin(), panel.control_names.end());
    Eigen::VectorXd all(fit.b_hat.size() + fit.b_c_hat.size());
    all << fit.b_hat, fit.b_c_hat;

    auto coef = open_output(c, "coefficients.csv");
    coef << "series,basis_index,value\n";
    for (std::size_t j = 0; j < names.size(); ++j) {
        for (int a = 0; a < k; ++a) {
            coef << fclr::io::csv_field(names[j]) << "," << a << ","
                 << format_double(all[static_cast<Eigen::Index>(j) * k + a]) << "\n";
        }
    }

    auto curves = open_output(c, "curves.csv");
    curves << "series,time,value\n";
    const auto& dom = ff.spec.domain;
    constexpr int points = 201;
    std::vector<Eigen::VectorXd> at(points);
    std::vector<double> times(points);
    for (int i = 0; i < points; ++i) {
        times[static_cast<std::size_t>(i)] = i + 1 == points ? dom.hi : dom.lo + dom.length() * i / (points - 1);
        at[static_cast<std::size_t>(i)] = fclr::eval_curves(ff.spec, all, times[static_cast<std::size_t>(i)]);
    }
    for (std::size_t j = 0; j < names.size(); ++j) {
        for (int i = 0; i < points; ++i) {
            curves << fclr::io::csv_field(names[j]) << "," << format_double(times[static_cast<std::size_t>(i)]) << ","
                   << format_double(at[static_cast<std::size_t>(i)][static_cast<Eigen::Index>(j)]) << "\n";
        }
    }

    auto diag = open_output(c, "diagnostics.csv");
    diag << "lambda,k,constraint_residual,kkt_residual,outer_iterations,inner_iterations,converged,cv\n";
    diag << format_double(fit.lambda) << "," << k << "," << format_double(fit.constraint_residual) << ","
         << format_double(ff.kkt) << "," << fit.outer_iters << "," << fit.inner_iters_total << ","
         << (fit.converged ? 1 : 0) << "," << (ff.cv_used ? 1 : 0) << "\n";

    std::cerr << "fit: lambda " << format_double(fit.lambda) << ", k " << k << ", "
              << fit.nonzero_groups().size() << " nonzero curves\n";
    if (!fit.converged) {
        std::cerr << "fit: solver did not converge; outputs are flagged in diagnostics.csv\n";
        return exit_nonconverged;
    }
    return exit_ok;
}

int cmd_cv(const RunConfig& c)
{
    const auto data = load_data(c);
    const auto tuning = tuning_of(c);
    const auto folds = folds_of(c, tuning, static_cast<int>(data.n()));
    const auto cv = fclr::cross_validate(data, tuning, folds, solver_of(c), {}, c.threads);
    auto out = open_output(c, "cv.csv");
    out << "lambda,k,mean_error,se_error,chosen\n";
    for (std::size_t g = 0; g < cv.grid.size(); ++g) {
        out << format_double(cv.grid[g].lambda) << "," << cv.grid[g].k << "," << format_double(cv.mean_error[g])
            << "," << format_double(cv.se_error[g]) << "," << (g == cv.chosen ? 1 : 0) << "\n";
    }
    std::cerr << "cv: " << folds.size() << " folds, chosen lambda " << format_double(cv.chosen_pair().lambda)
              << ", k " << cv.chosen_pair().k << "\n";
    if (cv.non_converged > 0) {
        std::cerr << "cv: " << cv.non_converged << " path fits did not converge\n";
    }
    return exit_ok;
}

int cmd_bootstrap(const RunConfig& c)
{
    fclr::FunctionalPanel panel;
    const auto data = load_data(c, &panel);
    if (c.bootstrap_replicates < 1) {
        throw fclr::io::input_error("--replicates must be >= 1");
    }
    const auto res = fclr::bootstrap_stability(data, c.bootstrap_replicates, tuning_of(c), solver_of(c), c.seed,
                                               c.threads);
    const auto names = curve_names(panel);
    auto out = open_output(c, "stability.csv");
    out << "series,selection_proportion\n";
    for (std::size_t j = 0; j < names.size(); ++j) {
        out << fclr::io::csv_field(names[j]) << "," << format_double(res.proportions[static_cast<Eigen::Index>(j)])
            << "\n";
    }
    if (res.non_converged > 0) {
        std::cerr << "bootstrap: " << res.non_converged << " fits did not converge\n";
    }
    return exit_ok;
}

int cmd_simulate(const RunConfig& c)
{
    if (c.scenarios.empty()) {
        throw fclr::io::input_error("--scenario is required");
    }
    std::vector<fclr::Scenario> scenarios;
    for (const auto& name : c.scenarios) {
        if (name == "all") {
            const auto all = fclr::reference_scenarios();
            scenarios.insert(scenarios.end(), all.begin(), all.end());
            continue;
        }
        auto s = fclr::find_scenario(name);
        if (!s) {
            throw fclr::io::input_error("unknown scenario '" + name + "'");
        }
        s->name = name;
        scenarios.push_back(*s);
    }
    if (c.replicates < 1) {
        throw fclr::io::input_error("--replicates must be >= 1");
    }
    fclr::StudyOptions opt;
    opt.replicates = c.replicates;
    opt.seed = c.seed;
    opt.threads = c.threads;
    opt.tuning = tuning_of(c);
    opt.solver = solver_of(c);
    opt.methods.clear();
    for (const auto& m : c.methods) {
        if (m == "cgl") {
            opt.methods.push_back(fclr::Method::cgl);
        } else if (m == "bgl") {
            opt.methods.push_back(fclr::Method::bgl);
        } else {
            throw fclr::io::input_error("unknown method '" + m + "'");
        }
    }
    const auto rows = fclr::run_study(scenarios, opt);
    auto out = open_output(c, c.sim_output);
    out << "scenario,n,p,q,rho_x,rho_t,snr,method,metric,mean,se,replicates,non_converged\n";
    for (const auto& r : rows) {
        const auto& s = r.scenario.config;
        out << r.scenario.name << "," << s.n << "," << s.p << "," << s.q << "," << format_double(s.rho_x) << ","
            << format_double(s.rho_t) << "," << format_double(s.snr) << "," << fclr::to_string(r.method) << ","
            << r.metric << "," << format_double(r.mean) << "," << (r.se ? format_double(*r.se) : std::string()) << ","
            << r.replicates << "," << r.non_converged << "\n";
    }
    return exit_ok;
}

int cmd_importance(const RunConfig& c)
{
    fclr::FunctionalPanel panel;
    const auto data = load_data(c, &panel);
    if (c.window_starts.empty()) {
        throw fclr::io::input_error("--window-starts is required");
    }
    const auto& dom = data.domain;
    for (double a : c.window_starts) {
        if (!(c.window_width > 0.0) || a < dom.lo || a + c.window_width > dom.hi) {
            throw fclr::io::input_error("window [" + format_double(a) + ", " + format_double(a + c.window_width) +
                                        "] lies outside the domain [" + format_double(dom.lo) + ", " +
                                        format_double(dom.hi) + "]");
        }
    }
    const auto ff = final_fit(c, data);
    const auto sizes = panel.block_sizes();
    const Eigen::MatrixXd shares = fclr::relative_magnitude(ff.fit, ff.spec, sizes, c.window_starts, c.window_width);
    auto out = open_output(c, "importance.csv");
    out << "block,window_start,share\n";
    for (std::size_t w = 0; w < c.window_starts.size(); ++w) {
        for (std::size_t j = 0; j < panel.blocks.size(); ++j) {
            out << fclr::io::csv_field(panel.blocks[j].name) << "," << format_double(c.window_starts[w]) << ","
                << format_double(shares(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(j))) << "\n";
        }
    }
    return ff.fit.converged ? exit_ok : exit_nonconverged;
}

int cmd_ingest_check(const RunConfig& c)
{
    const auto spec = fclr::io::load_blocks_spec(c.blocks);
    const auto panel = load_panel(c);
    std::cout << "units " << panel.n() << "\ntimes " << panel.n_times() << "\ncompositions " << panel.blocks.size()
              << "\nparts " << panel.total_parts() << "\ncontrols " << panel.n_controls() << "\ngrid "
              << format_double(panel.grid.front()) << " .. " << format_double(panel.grid.back()) << "\n";
    if (!c.export_dir.empty()) {
        fs::create_directories(c.export_dir);
        std::ofstream data(fs::path(c.export_dir) / "panel.csv");
        std::ofstream blocks(fs::path(c.export_dir) / "blocks.json");
        if (!data || !blocks) {
            throw fclr::io::input_error("cannot write to '" + c.export_dir + "'");
        }
        fclr::io::export_panel(panel, spec.response, data);
        blocks << fclr::io::to_json(fclr::io::export_spec(panel, spec.response)).dump(2) << "\n";
    }
    return exit_ok;
}

void add_common(CLI::App* sub, RunConfig& c)
{
    sub->add_option("--out", c.out_dir, "Output directory")->envname("FCLR_OUTPUT_DIR")->capture_default_str();
    sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
    sub->add_option("--threads", c.threads, "Maximum worker threads")->check(CLI::PositiveNumber)->capture_default_str();
}

void add_data(CLI::App* sub, RunConfig& c)
{
    sub->add_option("--data", c.data, "Long-format CSV (unit,time,series,value)")->required();
    sub->add_option("--blocks", c.blocks, "Blocks spec (JSON)")->required();
    sub->add_option("--grid-policy", c.grid_policy, "Missing cells: intersect or error")
        ->check(CLI::IsMember({"intersect", "error"}))
        ->capture_default_str();
    sub->add_option("--domain", c.domain, "Basis domain lo hi (default: span of the grid)")->expected(2);
}

void add_tuning(CLI::App* sub, RunConfig& c)
{
    sub->add_option("--k", c.k, "Candidate numbers of basis functions")->capture_default_str();
    sub->add_option("--order", c.order, "B-spline order")->capture_default_str();
    sub->add_option("--lambda-count", c.lambda_count, "Lambda grid size")->capture_default_str();
    sub->add_option("--lambda-ratio", c.lambda_ratio, "Smallest lambda over lambda_max")->capture_default_str();
    sub->add_option("--folds", c.folds, "Cross-validation folds: loo or an integer")->capture_default_str();
    sub->add_option("--epsilon", c.epsilon, "Constraint tolerance")->capture_default_str();
    sub->add_option("--rho0", c.rho0, "Initial penalty parameter")->capture_default_str();
    sub->add_option("--max-outer", c.max_outer, "Outer iteration cap")->capture_default_str();
    sub->add_option("--admm-max-iter", c.admm_max_iter, "Inner iteration cap")->capture_default_str();
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Sparse functional concurrent log-contrast regression"};
    app.set_config("--config", "", "TOML/INI file of option values; command-line flags take precedence");
    app.require_subcommand(1);
    RunConfig c;

    auto* fit = app.add_subcommand("fit", "Fit the model (cross-validated unless --lambda is given)");
    add_data(fit, c);
    add_tuning(fit, c);
    add_common(fit, c);
    fit->add_option("--lambda", c.lambda, "Fixed lambda; skips cross-validation (needs one --k)");

    auto* cv = app.add_subcommand("cv", "Cross-validation table over (lambda, k)");
    add_data(cv, c);
    add_tuning(cv, c);
    add_common(cv, c);

    auto* boot = app.add_subcommand("bootstrap", "Selection proportions over bootstrap resamples");
    add_data(boot, c);
    add_tuning(boot, c);
    add_common(boot, c);
    boot->add_option("--replicates,-B", c.bootstrap_replicates, "Bootstrap resamples")->capture_default_str();

    auto* sim = app.add_subcommand("simulate", "Monte Carlo study on the reference scenarios");
    add_tuning(sim, c);
    add_common(sim, c);
    sim->add_option("--scenario", c.scenarios, "Scenario name (tableN-rowM) or 'all'; repeatable")->required();
    sim->add_option("--replicates", c.replicates, "Replicates per scenario")->capture_default_str();
    sim->add_option("--methods", c.methods, "Methods: cgl, bgl")->delimiter(',')->capture_default_str();
    sim->add_option("--output", c.sim_output, "Result file name inside --out")->capture_default_str();

    auto* imp = app.add_subcommand("importance", "Relative magnitude of each composition per time window");
    add_data(imp, c);
    add_tuning(imp, c);
    add_common(imp, c);
    imp->add_option("--lambda", c.lambda, "Fixed lambda; skips cross-validation (needs one --k)");
    imp->add_option("--window-starts", c.window_starts, "Window start times")->delimiter(',')->required();
    imp->add_option("--window-width", c.window_width, "Window width")->capture_default_str();

    auto* check = app.add_subcommand("ingest-check", "Validate a dataset and optionally export it");
    add_data(check, c);
    check->add_option("--export", c.export_dir, "Directory for panel.csv and blocks.json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_input;
    }

    try {
        if (*fit) {
            return cmd_fit(c);
        }
        if (*cv) {
            return cmd_cv(c);
        }
        if (*boot) {
            return cmd_bootstrap(c);
        }
        if (*sim) {
            return cmd_simulate(c);
        }
        if (*imp) {
            return cmd_importance(c);
        }
        return cmd_ingest_check(c);
    } catch (const fclr::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_input;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_input;
    }
}
