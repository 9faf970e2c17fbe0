#pragma once

#include <functional>

#include <Eigen/Dense>

namespace ccm::opf {

// Smooth problem
//   min f(x)   s.t.  c_E(x) = 0,  c_I(x) <= 0
// with a constant diagonal Hessian model of the objective (exact for the
// quadratic dispatch objective). Constraint curvature is recovered inside
// the solver by differencing the constraint Jacobians.
struct NlpProblem {
    int num_vars = 0;
    int num_eq = 0;
    int num_ineq = 0;
    std::function<double(const Eigen::VectorXd&)> objective;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
    Eigen::VectorXd hessian_diag;
    // Fill value and Jacobian at x. Sizes: c (num_eq), jac (num_eq x num_vars).
    std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&, Eigen::MatrixXd&)> equality;
    std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&, Eigen::MatrixXd&)> inequality;
};

struct IpOptions {
    double tol_kkt = 1e-6;   // scaled dual feasibility + complementarity
    double tol_eq = 1e-6;    // equality violation
    double tol_ineq = 1e-4;  // inequality violation
    int max_iterations = 100;
    double mu0 = 0.1;
    double mu_shrink = 0.2;  // monotone barrier reduction factor
    double tau = 0.995;      // fraction-to-boundary
};

enum class IpStatus { optimal, infeasible, iteration_limit };

struct IpResult {
    IpStatus status = IpStatus::iteration_limit;
    Eigen::VectorXd x;
    Eigen::VectorXd eq_multipliers;
    Eigen::VectorXd ineq_multipliers;
    int iterations = 0;
    double objective = 0.0;
    double kkt_error = 0.0;
    double max_eq_violation = 0.0;
    double max_ineq_violation = 0.0;
};

// Primal-dual interior point with slacks on the inequalities. The barrier
// subproblem steps come from the reduced KKT system after eliminating the
// slack and bound-multiplier blocks; a Levenberg-Marquardt restoration phase
// handles points where the merit line search cannot make progress, and
// persistent infeasibility is reported with the least-violation iterate.
IpResult solve_nlp(const NlpProblem& problem, const Eigen::VectorXd& x0,
                   const IpOptions& opts = {});

} // namespace ccm::opf
