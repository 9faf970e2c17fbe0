#include "ccm/pf.hpp"

#include <cmath>

namespace ccm::pf {

void calc_injections(const Eigen::MatrixXcd& y_bus, const Eigen::VectorXd& v_pu,
                     const Eigen::VectorXd& delta_rad, Eigen::VectorXd& p_out,
                     Eigen::VectorXd& q_out) {
    const int n = static_cast<int>(y_bus.rows());
    p_out.resize(n);
    q_out.resize(n);
    for (int i = 0; i < n; ++i) {
        Complex sum(0.0, 0.0);
        const Complex vi = std::polar(v_pu(i), delta_rad(i));
        for (int j = 0; j < n; ++j) {
            sum += y_bus(i, j) * std::polar(v_pu(j), delta_rad(j));
        }
        const Complex s = vi * std::conj(sum);
        p_out(i) = s.real();
        q_out(i) = s.imag();
    }
}

InjectionJacobian injection_jacobian(const Eigen::MatrixXcd& y_bus,
                                     const Eigen::VectorXd& v_pu,
                                     const Eigen::VectorXd& delta_rad) {
    const int n = static_cast<int>(y_bus.rows());
    Eigen::VectorXd p, q;
    calc_injections(y_bus, v_pu, delta_rad, p, q);

    InjectionJacobian jac;
    jac.dp_ddelta = Eigen::MatrixXd::Zero(n, n);
    jac.dp_dv = Eigen::MatrixXd::Zero(n, n);
    jac.dq_ddelta = Eigen::MatrixXd::Zero(n, n);
    jac.dq_dv = Eigen::MatrixXd::Zero(n, n);

    for (int i = 0; i < n; ++i) {
        const double vi = v_pu(i);
        for (int j = 0; j < n; ++j) {
            const double g = y_bus(i, j).real();
            const double b = y_bus(i, j).imag();
            if (i == j) {
                jac.dp_ddelta(i, i) = -q(i) - b * vi * vi;
                jac.dp_dv(i, i) = p(i) / vi + g * vi;
                jac.dq_ddelta(i, i) = p(i) - g * vi * vi;
                jac.dq_dv(i, i) = q(i) / vi - b * vi;
            } else {
                const double vj = v_pu(j);
                const double dij = delta_rad(i) - delta_rad(j);
                const double c = std::cos(dij);
                const double s = std::sin(dij);
                jac.dp_ddelta(i, j) = vi * vj * (g * s - b * c);
                jac.dp_dv(i, j) = vi * (g * c + b * s);
                jac.dq_ddelta(i, j) = -vi * vj * (g * c + b * s);
                jac.dq_dv(i, j) = vi * (g * s - b * c);
            }
        }
    }
    return jac;
}

BranchAdmittance branch_admittance(const net::Network& net, int branch_index) {
    const net::Branch& br = net.branches.at(static_cast<size_t>(branch_index));
    BranchAdmittance adm;
    adm.from = net.index_of(br.from);
    adm.to = net.index_of(br.to);
    const double z_base = net.z_base_ohm(adm.to);
    const Complex z_pu(br.r_ohm / z_base, br.x_ohm / z_base);
    const Complex y = 1.0 / z_pu;
    const Complex y_sh(0.0, 0.5 * br.shunt_b_siemens * z_base);
    double a = 1.0;
    if (br.tap) a = 1.0 + (br.tap->position - br.tap->neutral) * br.tap->step_pu;
    adm.yff = (y + y_sh) * a * a;
    adm.yft = -y * a;
    adm.ytf = -y * a;
    adm.ytt = y + y_sh;
    return adm;
}

FlowValue branch_flow_value(const BranchAdmittance& adm, double v_from,
                            double v_to, double delta_from, double delta_to,
                            BranchSide side) {
    // Measure at terminal a looking into the branch toward terminal b:
    //   p = va^2 g_aa + va vb (g_ab cos d + b_ab sin d),   d = delta_a - delta_b
    //   q = -va^2 b_aa + va vb (g_ab sin d - b_ab cos d)
    const bool at_from = (side == BranchSide::from);
    const double va = at_from ? v_from : v_to;
    const double vb = at_from ? v_to : v_from;
    const double d = at_from ? (delta_from - delta_to) : (delta_to - delta_from);
    const Complex yaa = at_from ? adm.yff : adm.ytt;
    const Complex yab = at_from ? adm.yft : adm.ytf;
    const double gaa = yaa.real(), baa = yaa.imag();
    const double gab = yab.real(), bab = yab.imag();
    const double c = std::cos(d), s = std::sin(d);

    FlowValue out;
    out.p = va * va * gaa + va * vb * (gab * c + bab * s);
    out.q = -va * va * baa + va * vb * (gab * s - bab * c);

    const double dp_dda = va * vb * (-gab * s + bab * c);
    const double dq_dda = va * vb * (gab * c + bab * s);
    const double dp_dva = 2.0 * va * gaa + vb * (gab * c + bab * s);
    const double dp_dvb = va * (gab * c + bab * s);
    const double dq_dva = -2.0 * va * baa + vb * (gab * s - bab * c);
    const double dq_dvb = va * (gab * s - bab * c);

    if (at_from) {
        out.dp_ddf = dp_dda;
        out.dp_ddt = -dp_dda;
        out.dp_dvf = dp_dva;
        out.dp_dvt = dp_dvb;
        out.dq_ddf = dq_dda;
        out.dq_ddt = -dq_dda;
        out.dq_dvf = dq_dva;
        out.dq_dvt = dq_dvb;
    } else {
        out.dp_ddt = dp_dda;
        out.dp_ddf = -dp_dda;
        out.dp_dvt = dp_dva;
        out.dp_dvf = dp_dvb;
        out.dq_ddt = dq_dda;
        out.dq_ddf = -dq_dda;
        out.dq_dvt = dq_dva;
        out.dq_dvf = dq_dvb;
    }
    return out;
}

std::vector<BranchFlow> branch_flows(const net::Network& net,
                                     const Eigen::VectorXd& v_pu,
                                     const Eigen::VectorXd& delta_rad) {
    std::vector<BranchFlow> flows;
    flows.reserve(net.branches.size());
    for (int k = 0; k < static_cast<int>(net.branches.size()); ++k) {
        const BranchAdmittance adm = branch_admittance(net, k);
        const Complex vf = std::polar(v_pu(adm.from), delta_rad(adm.from));
        const Complex vt = std::polar(v_pu(adm.to), delta_rad(adm.to));
        BranchFlow flow;
        flow.from_kva = vf * std::conj(adm.yff * vf + adm.yft * vt) * net.s_base_kva;
        flow.to_kva = vt * std::conj(adm.ytf * vf + adm.ytt * vt) * net.s_base_kva;
        flows.push_back(flow);
    }
    return flows;
}

PFSolution solve_pf(const net::Network& net, const InjectionSpec& inj,
                    const PFOptions& opts) {
    return solve_pf(net, net::build_admittance(net), inj, opts);
}

PFSolution solve_pf(const net::Network& net, const Eigen::MatrixXcd& y_bus,
                    const InjectionSpec& inj, const PFOptions& opts) {
    const int n = static_cast<int>(net.buses.size());
    if (inj.p_kw.size() != n || inj.q_kvar.size() != n) {
        throw ConfigError("injection vectors must have one entry per bus");
    }
    if (!inj.p_kw.allFinite() || !inj.q_kvar.allFinite()) {
        throw ConfigError("injections must be finite");
    }
    const int slack = net.slack_index();

    // Specified net injections, per unit, generator counting.
    Eigen::VectorXd p_spec = -inj.p_kw / net.s_base_kva;
    Eigen::VectorXd q_spec = -inj.q_kvar / net.s_base_kva;

    PFSolution sol;
    sol.v_pu = Eigen::VectorXd::Ones(n);
    sol.delta_rad = Eigen::VectorXd::Zero(n);
    if (!opts.flat_start) {
        if (opts.v0_pu.size() != n || opts.delta0_rad.size() != n) {
            throw ConfigError("warm start vectors must have one entry per bus");
        }
        sol.v_pu = opts.v0_pu;
        sol.delta_rad = opts.delta0_rad;
    }
    sol.v_pu(slack) = opts.slack_voltage_pu;
    sol.delta_rad(slack) = 0.0;

    std::vector<int> free_buses;
    for (int i = 0; i < n; ++i) {
        if (i != slack) free_buses.push_back(i);
    }
    const int m = static_cast<int>(free_buses.size());

    Eigen::VectorXd p_calc, q_calc;
    for (int iter = 0; iter <= opts.max_iterations; ++iter) {
        calc_injections(y_bus, sol.v_pu, sol.delta_rad, p_calc, q_calc);

        Eigen::VectorXd mismatch(2 * m);
        for (int k = 0; k < m; ++k) {
            const int i = free_buses[static_cast<size_t>(k)];
            mismatch(k) = p_spec(i) - p_calc(i);
            mismatch(m + k) = q_spec(i) - q_calc(i);
        }
        sol.max_mismatch_pu = m > 0 ? mismatch.cwiseAbs().maxCoeff() : 0.0;
        sol.iterations = iter;
        if (!std::isfinite(sol.max_mismatch_pu)) break;
        if (sol.max_mismatch_pu < opts.tolerance_pu) {
            sol.converged = true;
            break;
        }
        if (iter == opts.max_iterations) break;

        const InjectionJacobian jac = injection_jacobian(y_bus, sol.v_pu, sol.delta_rad);
        Eigen::MatrixXd j_mat(2 * m, 2 * m);
        for (int r = 0; r < m; ++r) {
            const int i = free_buses[static_cast<size_t>(r)];
            for (int c = 0; c < m; ++c) {
                const int jj = free_buses[static_cast<size_t>(c)];
                j_mat(r, c) = jac.dp_ddelta(i, jj);
                j_mat(r, m + c) = jac.dp_dv(i, jj);
                j_mat(m + r, c) = jac.dq_ddelta(i, jj);
                j_mat(m + r, m + c) = jac.dq_dv(i, jj);
            }
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(j_mat);
        if (!lu.isInvertible()) break;
        const Eigen::VectorXd dx = lu.solve(mismatch);
        for (int k = 0; k < m; ++k) {
            const int i = free_buses[static_cast<size_t>(k)];
            sol.delta_rad(i) += dx(k);
            sol.v_pu(i) += dx(m + k);
        }
    }

    sol.flows = branch_flows(net, sol.v_pu, sol.delta_rad);
    return sol;
}

} // namespace ccm::pf
