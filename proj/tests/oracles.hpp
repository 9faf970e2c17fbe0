#pragma once

// Independent reference implementations used only by tests. They share no
// solver code with the library: power flow is checked against Gauss-Seidel,
// derivatives against central finite differences.

#include <functional>
#include <random>

#include <Eigen/Dense>

#include "ccm/net.hpp"
#include "ccm/opf.hpp"
#include "ccm/pf.hpp"

namespace oracles {

struct GsResult {
    bool converged = false;
    Eigen::VectorXd v_pu;
    Eigen::VectorXd delta_rad;
};

// Gauss-Seidel power flow on the complex nodal equations:
//   V_i <- (1/Y_ii) * (conj(S_i / V_i) - sum_{j != i} Y_ij V_j)
// Slow but entirely independent of the Newton implementation.
GsResult gauss_seidel_pf(const ccm::net::Network& net,
                         const ccm::pf::InjectionSpec& inj,
                         double slack_voltage_pu = 1.0, double tol = 1e-12,
                         int max_iter = 200000);

// Random connected radial network: bus 0 is the slack, every later bus hangs
// off an earlier one. Optionally the first branch is a transformer with a
// random off-neutral tap.
ccm::net::Network random_radial_network(std::mt19937& rng, int n_buses,
                                        bool with_transformer);

ccm::pf::InjectionSpec random_injections(std::mt19937& rng,
                                         const ccm::net::Network& net,
                                         double max_abs_kw);

// Central-difference gradient of a scalar function.
Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x, double h = 1e-6);

struct GridSearchResult {
    bool found = false;         // at least one feasible grid point
    double objective = 0.0;
    Eigen::VectorXd setpoints;  // kW / kvar per movable axis, P axes first
    bool interior = false;      // optimum away from the searched window edge
};

// Exhaustive reference for the dispatch optimizer: enumerate the movable
// P/Q axes on a uniform mesh, run a full power flow per candidate, keep the
// cheapest candidate whose state honors the voltage band and flow caps.
// Exponential in the number of axes, so tests keep fixtures to <= 3 axes.
GridSearchResult grid_search_opf(const ccm::opf::OPFProblem& problem,
                                 double mesh_kw,
                                 const Eigen::VectorXd& center_kw,
                                 double half_span_kw, double flow_tol_kva = 1e-6);

// Two-stage wrapper: coarse sweep of the whole window at 1 kW, then a fine
// 0.1 kW sweep around the winner. Asserts via `interior` that the refinement
// window did not clip the optimum.
GridSearchResult grid_search_opf_refined(const ccm::opf::OPFProblem& problem);

} // namespace oracles
