#pragma once

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ccm/assets.hpp"
#include "ccm/net.hpp"
#include "ccm/nlp.hpp"

namespace ccm::opf {

// Apparent-power cap on one branch, enforced at both terminals.
struct BranchLimit {
    int branch = -1; // index into net.branches
    double s_max_kva = 0.0;
};

struct VoltageBand {
    double v_min_pu = 0.9;
    double v_max_pu = 1.1;
};

// Box on the non-slack angles. Generous on purpose: it only keeps the solver
// from wandering off to a mirrored low-voltage solution branch.
std::pair<double, double> angle_bounds();

// Redispatch problem around a known operating point. Bus loads that are not
// flexible enter through base_p_kw/base_q_kvar (consumer counting, one entry
// per bus, slack entries ignored); every controllable asset contributes a
// Flexibility window on top of that base.
struct OPFProblem {
    net::Network net;
    double slack_voltage_pu = 1.0;
    Eigen::VectorXd base_p_kw;
    Eigen::VectorXd base_q_kvar;
    assets::FlexibilitySet flex;
    std::vector<BranchLimit> flow_limits;
    VoltageBand band;
    // Optional warm start for the network state (full-length vectors).
    Eigen::VectorXd v0_pu;
    Eigen::VectorXd delta0_rad;

    void validate() const;
};

// Split an estimated operating state into base load plus flexibility: the
// injections implied by (v_est, delta_est) are attributed to the assets'
// current operating points first, and the remainder becomes fixed base load.
OPFProblem assemble(const net::Network& net, const Eigen::VectorXd& v_est_pu,
                    const Eigen::VectorXd& delta_est_rad,
                    const assets::FlexibilitySet& flex,
                    const std::vector<BranchLimit>& flow_limits,
                    const VoltageBand& band, double slack_voltage_pu = 1.0);

enum class OPFStatus { solved, infeasible, iteration_limit };

struct FlexSetpoint {
    std::string asset_id;
    int bus = -1;
    double p_kw = 0.0;
    double q_kvar = 0.0;
};

struct OPFOptions {
    double tol_eq_pu = 1e-6;  // power balance residual
    double tol_ineq = 1e-4;   // operating limits, in their own units
    int max_iterations = 100;
};

struct OPFSolution {
    OPFStatus status = OPFStatus::iteration_limit;
    std::vector<FlexSetpoint> setpoints; // one per flexibility, input order
    Eigen::VectorXd v_pu;
    Eigen::VectorXd delta_rad;
    double objective = 0.0; // sum of cost_p*(P-target)^2 + cost_q*Q^2, kW^2
    int iterations = 0;
    double kkt_error = 0.0;
    double max_eq_violation_pu = 0.0;
    double max_voltage_violation_pu = 0.0;
    double max_flow_violation_kva = 0.0;
    double max_box_violation_kw = 0.0;
};

// Minimize the deviation cost subject to the AC power balance, the voltage
// band, branch flow caps and the per-asset windows. On infeasible problems
// the least-violation compromise is clamped into the asset windows and its
// power flow replayed, so the setpoints are always executable and the
// violation fields say how far out the grid still is.
OPFSolution solve(const OPFProblem& problem, const OPFOptions& opts = {});

// JSON snapshots for offline inspection of a dispatch decision.
std::string dump_problem_json(const OPFProblem& problem);
std::string dump_solution_json(const OPFSolution& solution);

} // namespace ccm::opf
