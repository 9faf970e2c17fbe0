#include "ccm/se.hpp"

#include <cmath>
#include <limits>

namespace ccm::se {

namespace {

void check_measurements(const net::Network& net,
                        const std::vector<Measurement>& measurements) {
    const int n = static_cast<int>(net.buses.size());
    const int nb = static_cast<int>(net.branches.size());
    for (const Measurement& m : measurements) {
        if (!std::isfinite(m.value)) throw ConfigError("non-finite measurement value");
        if (!(m.variance > 0.0)) throw ConfigError("measurement variance must be positive");
        switch (m.kind) {
        case MeasurementKind::voltage:
        case MeasurementKind::p_injection:
        case MeasurementKind::q_injection:
            if (m.bus < 0 || m.bus >= n) throw ConfigError("measurement bus out of range");
            break;
        case MeasurementKind::p_flow:
        case MeasurementKind::q_flow:
            if (m.branch < 0 || m.branch >= nb) {
                throw ConfigError("measurement branch out of range");
            }
            break;
        }
    }
}

} // namespace

double evaluate_measurement(const net::Network& net, const Eigen::MatrixXcd& y_bus,
                            const Measurement& m, const Eigen::VectorXd& v_pu,
                            const Eigen::VectorXd& delta_rad) {
    switch (m.kind) {
    case MeasurementKind::voltage:
        return v_pu(m.bus);
    case MeasurementKind::p_injection:
    case MeasurementKind::q_injection: {
        Eigen::VectorXd p, q;
        pf::calc_injections(y_bus, v_pu, delta_rad, p, q);
        return m.kind == MeasurementKind::p_injection ? p(m.bus) : q(m.bus);
    }
    case MeasurementKind::p_flow:
    case MeasurementKind::q_flow: {
        const pf::BranchAdmittance adm = pf::branch_admittance(net, m.branch);
        const pf::FlowValue fv =
            pf::branch_flow_value(adm, v_pu(adm.from), v_pu(adm.to),
                                  delta_rad(adm.from), delta_rad(adm.to), m.side);
        return m.kind == MeasurementKind::p_flow ? fv.p : fv.q;
    }
    }
    throw Error("unreachable measurement kind");
}

SEResult estimate(const net::Network& net,
                  const std::vector<Measurement>& measurements,
                  const SEOptions& opts) {
    net.validate();
    check_measurements(net, measurements);

    const int n = static_cast<int>(net.buses.size());
    const int slack = net.slack_index();
    const int nx = 2 * n - 1;
    const int m = static_cast<int>(measurements.size());

    SEResult res;
    res.v_pu = Eigen::VectorXd::Ones(n);
    res.delta_rad = Eigen::VectorXd::Zero(n);

    bool has_voltage = false;
    for (const Measurement& meas : measurements) {
        if (meas.kind == MeasurementKind::voltage) has_voltage = true;
    }
    if (m < nx || !has_voltage) {
        res.status = SEStatus::unobservable;
        return res;
    }

    // State layout: angles of all buses except the slack, then all magnitudes.
    auto angle_col = [&](int bus) { return bus < slack ? bus : bus - 1; };
    const Eigen::MatrixXcd y_bus = net::build_admittance(net);

    Eigen::VectorXd weights(m);
    for (int k = 0; k < m; ++k) weights(k) = 1.0 / measurements[static_cast<size_t>(k)].variance;

    Eigen::MatrixXd h_jac(m, nx);
    Eigen::VectorXd residual(m);

    auto fill_model = [&]() {
        h_jac.setZero();
        const pf::InjectionJacobian inj_jac =
            pf::injection_jacobian(y_bus, res.v_pu, res.delta_rad);
        for (int k = 0; k < m; ++k) {
            const Measurement& meas = measurements[static_cast<size_t>(k)];
            residual(k) = meas.value -
                          evaluate_measurement(net, y_bus, meas, res.v_pu, res.delta_rad);
            switch (meas.kind) {
            case MeasurementKind::voltage:
                h_jac(k, n - 1 + meas.bus) = 1.0;
                break;
            case MeasurementKind::p_injection:
            case MeasurementKind::q_injection: {
                const bool is_p = meas.kind == MeasurementKind::p_injection;
                const Eigen::MatrixXd& dd =
                    is_p ? inj_jac.dp_ddelta : inj_jac.dq_ddelta;
                const Eigen::MatrixXd& dv = is_p ? inj_jac.dp_dv : inj_jac.dq_dv;
                for (int j = 0; j < n; ++j) {
                    if (j != slack) h_jac(k, angle_col(j)) = dd(meas.bus, j);
                    h_jac(k, n - 1 + j) = dv(meas.bus, j);
                }
                break;
            }
            case MeasurementKind::p_flow:
            case MeasurementKind::q_flow: {
                const pf::BranchAdmittance adm = pf::branch_admittance(net, meas.branch);
                const pf::FlowValue fv = pf::branch_flow_value(
                    adm, res.v_pu(adm.from), res.v_pu(adm.to),
                    res.delta_rad(adm.from), res.delta_rad(adm.to), meas.side);
                const bool is_p = meas.kind == MeasurementKind::p_flow;
                if (adm.from != slack) {
                    h_jac(k, angle_col(adm.from)) = is_p ? fv.dp_ddf : fv.dq_ddf;
                }
                if (adm.to != slack) {
                    h_jac(k, angle_col(adm.to)) = is_p ? fv.dp_ddt : fv.dq_ddt;
                }
                h_jac(k, n - 1 + adm.from) = is_p ? fv.dp_dvf : fv.dq_dvf;
                h_jac(k, n - 1 + adm.to) = is_p ? fv.dp_dvt : fv.dq_dvt;
                break;
            }
            }
        }
    };

    res.status = SEStatus::diverged;
    for (int iter = 1; iter <= opts.max_iterations; ++iter) {
        fill_model();
        const Eigen::MatrixXd gain =
            h_jac.transpose() * weights.asDiagonal() * h_jac;
        const Eigen::VectorXd rhs =
            h_jac.transpose() * (weights.asDiagonal() * residual);

        Eigen::FullPivLU<Eigen::MatrixXd> lu(gain);
        // The gain matrix of an observable system is positive definite; treat
        // rank deficiency as unobservable regardless of measurement count.
        if (!lu.isInvertible()) {
            res.status = SEStatus::unobservable;
            res.iterations = iter;
            return res;
        }
        const Eigen::VectorXd du = lu.solve(rhs);
        if (!du.allFinite()) break;

        for (int j = 0; j < n; ++j) {
            if (j != slack) res.delta_rad(j) += du(angle_col(j));
            res.v_pu(j) += du(n - 1 + j);
        }
        res.iterations = iter;
        if (du.cwiseAbs().maxCoeff() < opts.tolerance) {
            res.status = SEStatus::ok;
            break;
        }
    }

    fill_model();
    res.objective = residual.dot(weights.asDiagonal() * residual);
    res.max_abs_residual = m > 0 ? residual.cwiseAbs().maxCoeff() : 0.0;
    const Eigen::MatrixXd gain = h_jac.transpose() * weights.asDiagonal() * h_jac;
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(gain);
    const double smin = svd.singularValues().minCoeff();
    const double smax = svd.singularValues().maxCoeff();
    res.gain_condition = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
    return res;
}

std::vector<Measurement> synthesize_measurements(
    const net::Network& net, const Eigen::VectorXd& v_pu,
    const Eigen::VectorXd& delta_rad, const std::vector<Placement>& placements,
    double noise_scale, std::mt19937& rng) {
    const Eigen::MatrixXcd y_bus = net::build_admittance(net);
    std::normal_distribution<double> unit_normal(0.0, 1.0);

    std::vector<Measurement> out;
    out.reserve(placements.size());
    for (const Placement& p : placements) {
        Measurement m;
        m.kind = p.kind;
        m.bus = p.bus;
        m.branch = p.branch;
        m.side = p.side;
        m.variance = p.variance;
        m.value = evaluate_measurement(net, y_bus, m, v_pu, delta_rad);
        if (noise_scale != 0.0) {
            m.value += noise_scale * std::sqrt(p.variance) * unit_normal(rng);
        }
        out.push_back(m);
    }
    return out;
}

} // namespace ccm::se
