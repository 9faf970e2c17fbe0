#pragma once

#include <vector>

#include <Eigen/Dense>

#include "ccm/net.hpp"

namespace ccm::pf {

// Bus power withdrawals in physical units, consumer counting: consumption is
// positive, generation/feed-in negative. The slack entry is ignored by the
// solvers.
struct InjectionSpec {
    Eigen::VectorXd p_kw;
    Eigen::VectorXd q_kvar;

    InjectionSpec() = default;
    explicit InjectionSpec(int n_buses)
        : p_kw(Eigen::VectorXd::Zero(n_buses)), q_kvar(Eigen::VectorXd::Zero(n_buses)) {}

    void add(int bus, double p, double q) {
        p_kw(bus) += p;
        q_kvar(bus) += q;
    }
};

struct PFOptions {
    double tolerance_pu = 1e-8; // max power mismatch, p.u.
    int max_iterations = 30;
    double slack_voltage_pu = 1.0;
    bool flat_start = true;
    Eigen::VectorXd v0_pu;      // used when flat_start is false
    Eigen::VectorXd delta0_rad;
};

// Complex power entering a branch at each terminal, in kVA on the system
// base. from_kva is the power flowing out of the from bus into the branch.
struct BranchFlow {
    Complex from_kva;
    Complex to_kva;
};

struct PFSolution {
    bool converged = false;
    int iterations = 0;
    double max_mismatch_pu = 0.0;
    Eigen::VectorXd v_pu;
    Eigen::VectorXd delta_rad;
    std::vector<BranchFlow> flows;
};

PFSolution solve_pf(const net::Network& net, const InjectionSpec& inj,
                    const PFOptions& opts = {});

// Variant reusing a prebuilt admittance matrix (must match the network).
PFSolution solve_pf(const net::Network& net, const Eigen::MatrixXcd& y_bus,
                    const InjectionSpec& inj, const PFOptions& opts = {});

std::vector<BranchFlow> branch_flows(const net::Network& net,
                                     const Eigen::VectorXd& v_pu,
                                     const Eigen::VectorXd& delta_rad);

// --- shared primitives -----------------------------------------------------
// Net complex power injected into the network at each bus (generator
// counting), per unit: S_i = V_i * conj(sum_j Y_ij V_j).

void calc_injections(const Eigen::MatrixXcd& y_bus, const Eigen::VectorXd& v_pu,
                     const Eigen::VectorXd& delta_rad, Eigen::VectorXd& p_out,
                     Eigen::VectorXd& q_out);

// Partial derivatives of the injections above with respect to all angles and
// magnitudes; each block is n x n.
struct InjectionJacobian {
    Eigen::MatrixXd dp_ddelta;
    Eigen::MatrixXd dp_dv;
    Eigen::MatrixXd dq_ddelta;
    Eigen::MatrixXd dq_dv;
};

InjectionJacobian injection_jacobian(const Eigen::MatrixXcd& y_bus,
                                     const Eigen::VectorXd& v_pu,
                                     const Eigen::VectorXd& delta_rad);

// Two-port admittance of one branch, including tap ratio and charging.
struct BranchAdmittance {
    int from = 0;
    int to = 0;
    Complex yff, yft, ytf, ytt;
};

BranchAdmittance branch_admittance(const net::Network& net, int branch_index);

enum class BranchSide { from, to };

// Active/reactive power entering the branch at one terminal, per unit, plus
// derivatives with respect to (delta_from, delta_to, v_from, v_to).
struct FlowValue {
    double p = 0.0;
    double q = 0.0;
    double dp_ddf = 0.0, dp_ddt = 0.0, dp_dvf = 0.0, dp_dvt = 0.0;
    double dq_ddf = 0.0, dq_ddt = 0.0, dq_dvf = 0.0, dq_dvt = 0.0;
};

FlowValue branch_flow_value(const BranchAdmittance& adm, double v_from,
                            double v_to, double delta_from, double delta_to,
                            BranchSide side);

} // namespace ccm::pf
