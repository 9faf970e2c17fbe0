#pragma once

#include <random>
#include <vector>

#include <Eigen/Dense>

#include "ccm/net.hpp"
#include "ccm/pf.hpp"

namespace ccm::se {

// Measured quantities are per unit. Injections use the network convention
// (power fed into the grid is positive); branch flows are the power entering
// the branch at the given terminal.
enum class MeasurementKind { voltage, p_injection, q_injection, p_flow, q_flow };

struct Measurement {
    MeasurementKind kind = MeasurementKind::voltage;
    int bus = -1;    // voltage and injection kinds
    int branch = -1; // flow kinds
    pf::BranchSide side = pf::BranchSide::from;
    double value = 0.0;
    double variance = 1e-6; // weight = 1 / variance
};

struct SEOptions {
    double tolerance = 1e-8; // infinity norm of the state update
    int max_iterations = 25;
};

enum class SEStatus { ok, diverged, unobservable };

struct SEResult {
    SEStatus status = SEStatus::diverged;
    int iterations = 0;
    Eigen::VectorXd v_pu;
    Eigen::VectorXd delta_rad;
    double objective = 0.0;          // weighted residual sum of squares
    double max_abs_residual = 0.0;   // largest raw residual, p.u.
    double gain_condition = 0.0;     // spectral condition of H^T W H
};

// Weighted least squares over the state [angles at non-slack buses;
// magnitudes at all buses] via Gauss-Newton on the normal equations.
// Requires at least 2n-1 measurements including one voltage magnitude;
// rank-deficient measurement sets report SEStatus::unobservable.
SEResult estimate(const net::Network& net,
                  const std::vector<Measurement>& measurements,
                  const SEOptions& opts = {});

// Evaluate the measurement model at a known state (used to fabricate
// measurements from a power flow solution).
double evaluate_measurement(const net::Network& net, const Eigen::MatrixXcd& y_bus,
                            const Measurement& m, const Eigen::VectorXd& v_pu,
                            const Eigen::VectorXd& delta_rad);

struct Placement {
    MeasurementKind kind = MeasurementKind::voltage;
    int bus = -1;
    int branch = -1;
    pf::BranchSide side = pf::BranchSide::from;
    double variance = 1e-6;
};

// True values from (v, delta) plus Gaussian noise with standard deviation
// noise_scale * sqrt(variance) drawn in placement order.
std::vector<Measurement> synthesize_measurements(
    const net::Network& net, const Eigen::VectorXd& v_pu,
    const Eigen::VectorXd& delta_rad, const std::vector<Placement>& placements,
    double noise_scale, std::mt19937& rng);

} // namespace ccm::se
