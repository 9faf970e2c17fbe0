#include "ccm/opf.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include <json.hpp>

#include "ccm/common.hpp"
#include "ccm/pf.hpp"

namespace ccm::opf {

namespace {

// One controllable axis (P or Q of one flexibility) that actually has room
// to move. Zero-width windows are folded into the base load instead, since
// the barrier needs strictly feasible slack on every box.
struct Axis {
    int flex = -1;
    bool is_p = true;
    double lo_pu = 0.0;
    double hi_pu = 0.0;
    double now_pu = 0.0;
};

constexpr double kFixedWidth = 1e-12;

double clamp_interior(double v, double lo, double hi) {
    const double margin = 1e-3 * (hi - lo);
    return std::clamp(v, lo + margin, hi - margin);
}

} // namespace

std::pair<double, double> angle_bounds() { return {-2.0 * kPi, 2.0 * kPi}; }

void OPFProblem::validate() const {
    net.validate();
    const int n = static_cast<int>(net.buses.size());
    if (n < 2) throw ConfigError("dispatch needs at least two buses");
    if (base_p_kw.size() != n || base_q_kvar.size() != n) {
        throw ConfigError("base load vectors must have one entry per bus");
    }
    if (!base_p_kw.allFinite() || !base_q_kvar.allFinite()) {
        throw ConfigError("base load must be finite");
    }
    if (!(slack_voltage_pu > 0.0)) throw ConfigError("slack voltage must be positive");
    if (!(band.v_min_pu > 0.0) || !(band.v_min_pu < band.v_max_pu)) {
        throw ConfigError("voltage band must satisfy 0 < v_min < v_max");
    }
    const int slack = net.slack_index();
    for (const auto& f : flex) {
        if (f.bus < 0 || f.bus >= n) {
            throw ConfigError("flexibility '" + f.asset_id + "' references unknown bus");
        }
        if (f.bus == slack) {
            throw ConfigError("flexibility '" + f.asset_id + "' sits on the slack bus");
        }
        if (f.cost_p < 0.0 || f.cost_q < 0.0) {
            throw ConfigError("flexibility '" + f.asset_id + "' has negative cost");
        }
        if (f.p_min_kw > f.p_max_kw || f.q_min_kvar > f.q_max_kvar) {
            throw ConfigError("flexibility '" + f.asset_id + "' has an empty window");
        }
        if (f.p_target_kw < f.p_min_kw - 1e-9 || f.p_target_kw > f.p_max_kw + 1e-9) {
            throw ConfigError("flexibility '" + f.asset_id + "' target outside its window");
        }
    }
    for (const auto& lim : flow_limits) {
        if (lim.branch < 0 || lim.branch >= static_cast<int>(net.branches.size())) {
            throw ConfigError("flow limit references unknown branch");
        }
        if (!(lim.s_max_kva > 0.0)) throw ConfigError("flow limit must be positive");
    }
    if (v0_pu.size() != 0 && v0_pu.size() != n) {
        throw ConfigError("voltage warm start has wrong length");
    }
    if (delta0_rad.size() != 0 && delta0_rad.size() != n) {
        throw ConfigError("angle warm start has wrong length");
    }
}

OPFProblem assemble(const net::Network& net, const Eigen::VectorXd& v_est_pu,
                    const Eigen::VectorXd& delta_est_rad,
                    const assets::FlexibilitySet& flex,
                    const std::vector<BranchLimit>& flow_limits,
                    const VoltageBand& band, double slack_voltage_pu) {
    const int n = static_cast<int>(net.buses.size());
    if (v_est_pu.size() != n || delta_est_rad.size() != n) {
        throw ConfigError("state estimate has wrong length");
    }

    const Eigen::MatrixXcd y = net::build_admittance(net);
    Eigen::VectorXd p_inj, q_inj;
    pf::calc_injections(y, v_est_pu, delta_est_rad, p_inj, q_inj);

    OPFProblem prob;
    prob.net = net;
    prob.slack_voltage_pu = slack_voltage_pu;
    prob.flex = flex;
    prob.flow_limits = flow_limits;
    prob.band = band;
    prob.v0_pu = v_est_pu;
    prob.delta0_rad = delta_est_rad;

    // Total consumption seen at each bus, minus what the flexible assets are
    // currently contributing, leaves the inflexible remainder.
    prob.base_p_kw = -p_inj * net.s_base_kva;
    prob.base_q_kvar = -q_inj * net.s_base_kva;
    for (const auto& f : flex) {
        prob.base_p_kw(f.bus) -= f.p_now_kw;
        prob.base_q_kvar(f.bus) -= f.q_now_kvar;
    }
    const int slack = net.slack_index();
    prob.base_p_kw(slack) = 0.0;
    prob.base_q_kvar(slack) = 0.0;
    return prob;
}

OPFSolution solve(const OPFProblem& problem, const OPFOptions& opts) {
    problem.validate();

    const net::Network& net = problem.net;
    const int n = static_cast<int>(net.buses.size());
    const int slack = net.slack_index();
    const double s_base = net.s_base_kva;

    // Non-slack bus ordering shared by the state variables and the balance
    // equations.
    std::vector<int> ns;
    ns.reserve(static_cast<size_t>(n) - 1);
    for (int i = 0; i < n; ++i) {
        if (i != slack) ns.push_back(i);
    }
    const int m = static_cast<int>(ns.size());
    std::vector<int> delta_col(static_cast<size_t>(n), -1);
    std::vector<int> v_col(static_cast<size_t>(n), -1);
    for (int k = 0; k < m; ++k) {
        delta_col[static_cast<size_t>(ns[static_cast<size_t>(k)])] = k;
        v_col[static_cast<size_t>(ns[static_cast<size_t>(k)])] = m + k;
    }

    // Split the flexibility windows into movable axes and pinned values.
    std::vector<Axis> axes;
    Eigen::VectorXd fixed_p = Eigen::VectorXd::Zero(problem.flex.size());
    Eigen::VectorXd fixed_q = Eigen::VectorXd::Zero(problem.flex.size());
    std::vector<int> p_axis_of(problem.flex.size(), -1);
    std::vector<int> q_axis_of(problem.flex.size(), -1);
    Eigen::VectorXd base_p = problem.base_p_kw / s_base;
    Eigen::VectorXd base_q = problem.base_q_kvar / s_base;
    for (size_t fi = 0; fi < problem.flex.size(); ++fi) {
        const auto& f = problem.flex[fi];
        if (f.p_max_kw - f.p_min_kw > kFixedWidth) {
            p_axis_of[fi] = static_cast<int>(axes.size());
            axes.push_back({static_cast<int>(fi), true, f.p_min_kw / s_base,
                            f.p_max_kw / s_base, f.p_now_kw / s_base});
        } else {
            fixed_p(static_cast<Eigen::Index>(fi)) = 0.5 * (f.p_min_kw + f.p_max_kw);
            base_p(f.bus) += fixed_p(static_cast<Eigen::Index>(fi)) / s_base;
        }
        if (f.q_max_kvar - f.q_min_kvar > kFixedWidth) {
            q_axis_of[fi] = static_cast<int>(axes.size());
            axes.push_back({static_cast<int>(fi), false, f.q_min_kvar / s_base,
                            f.q_max_kvar / s_base, f.q_now_kvar / s_base});
        } else {
            fixed_q(static_cast<Eigen::Index>(fi)) = 0.5 * (f.q_min_kvar + f.q_max_kvar);
            base_q(f.bus) += fixed_q(static_cast<Eigen::Index>(fi)) / s_base;
        }
    }
    const int na = static_cast<int>(axes.size());
    const int nx = 2 * m + na;
    const int ne = 2 * m;

    const auto [ang_lo, ang_hi] = angle_bounds();
    const int n_lim = static_cast<int>(problem.flow_limits.size());
    const int ni = 4 * m + 2 * na + 2 * n_lim;

    const Eigen::MatrixXcd y_bus = net::build_admittance(net);
    std::vector<pf::BranchAdmittance> lim_adm;
    Eigen::VectorXd lim_cap2(n_lim); // squared cap, per unit
    lim_adm.reserve(static_cast<size_t>(n_lim));
    for (int l = 0; l < n_lim; ++l) {
        const auto& lim = problem.flow_limits[static_cast<size_t>(l)];
        lim_adm.push_back(pf::branch_admittance(net, lim.branch));
        const double cap = lim.s_max_kva / s_base;
        lim_cap2(l) = cap * cap;
    }

    const auto unpack = [&](const Eigen::VectorXd& x, Eigen::VectorXd& v,
                            Eigen::VectorXd& delta) {
        v.resize(n);
        delta.resize(n);
        v(slack) = problem.slack_voltage_pu;
        delta(slack) = 0.0;
        for (int k = 0; k < m; ++k) {
            delta(ns[static_cast<size_t>(k)]) = x(k);
            v(ns[static_cast<size_t>(k)]) = x(m + k);
        }
    };

    // The solver sees the objective normalized by the largest cost weight and
    // the power base. That keeps its curvature on the same footing as the
    // power flow Jacobian, which is what decides the conditioning of the
    // whole KKT system; results are reported in kW^2 regardless.
    double cost_ceil = 1.0;
    for (const auto& f : problem.flex) {
        cost_ceil = std::max({cost_ceil, f.cost_p, f.cost_q});
    }
    const double obj_scale = 1.0 / (cost_ceil * s_base * s_base);

    NlpProblem nlp;
    nlp.num_vars = nx;
    nlp.num_eq = ne;
    nlp.num_ineq = ni;

    nlp.objective = [&, obj_scale](const Eigen::VectorXd& x) {
        double f = 0.0;
        for (int a = 0; a < na; ++a) {
            const Axis& ax = axes[static_cast<size_t>(a)];
            const auto& fl = problem.flex[static_cast<size_t>(ax.flex)];
            const double val = x(2 * m + a) * s_base;
            if (ax.is_p) {
                const double d = val - fl.p_target_kw;
                f += fl.cost_p * d * d;
            } else {
                f += fl.cost_q * val * val;
            }
        }
        return f * obj_scale;
    };
    nlp.gradient = [&, obj_scale](const Eigen::VectorXd& x) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(nx);
        for (int a = 0; a < na; ++a) {
            const Axis& ax = axes[static_cast<size_t>(a)];
            const auto& fl = problem.flex[static_cast<size_t>(ax.flex)];
            const double val = x(2 * m + a) * s_base;
            if (ax.is_p) {
                g(2 * m + a) =
                    2.0 * obj_scale * fl.cost_p * (val - fl.p_target_kw) * s_base;
            } else {
                g(2 * m + a) = 2.0 * obj_scale * fl.cost_q * val * s_base;
            }
        }
        return g;
    };
    nlp.hessian_diag = Eigen::VectorXd::Zero(nx);
    for (int a = 0; a < na; ++a) {
        const Axis& ax = axes[static_cast<size_t>(a)];
        const auto& fl = problem.flex[static_cast<size_t>(ax.flex)];
        nlp.hessian_diag(2 * m + a) =
            2.0 * obj_scale * (ax.is_p ? fl.cost_p : fl.cost_q) * s_base * s_base;
    }

    // Power balance at every non-slack bus: network injection plus local
    // consumption (base + movable axes) must cancel. P rows first, Q rows
    // second, both in non-slack order.
    nlp.equality = [&](const Eigen::VectorXd& x, Eigen::VectorXd& c,
                       Eigen::MatrixXd& jac) {
        Eigen::VectorXd v, delta;
        unpack(x, v, delta);
        Eigen::VectorXd p_inj, q_inj;
        pf::calc_injections(y_bus, v, delta, p_inj, q_inj);
        const pf::InjectionJacobian jj = pf::injection_jacobian(y_bus, v, delta);

        c.resize(ne);
        jac = Eigen::MatrixXd::Zero(ne, nx);
        for (int k = 0; k < m; ++k) {
            const int i = ns[static_cast<size_t>(k)];
            c(k) = p_inj(i) + base_p(i);
            c(m + k) = q_inj(i) + base_q(i);
            for (int kk = 0; kk < m; ++kk) {
                const int j = ns[static_cast<size_t>(kk)];
                jac(k, kk) = jj.dp_ddelta(i, j);
                jac(k, m + kk) = jj.dp_dv(i, j);
                jac(m + k, kk) = jj.dq_ddelta(i, j);
                jac(m + k, m + kk) = jj.dq_dv(i, j);
            }
        }
        for (int a = 0; a < na; ++a) {
            const Axis& ax = axes[static_cast<size_t>(a)];
            const int bus = problem.flex[static_cast<size_t>(ax.flex)].bus;
            const int row = delta_col[static_cast<size_t>(bus)]; // k of that bus
            if (ax.is_p) {
                c(row) += x(2 * m + a);
                jac(row, 2 * m + a) = 1.0;
            } else {
                c(m + row) += x(2 * m + a);
                jac(m + row, 2 * m + a) = 1.0;
            }
        }
    };

    // Operating limits, c <= 0. Row order: voltage band (upper then lower),
    // angle box, axis boxes (upper/lower pairs), then squared apparent-power
    // caps at both ends of each limited branch.
    nlp.inequality = [&](const Eigen::VectorXd& x, Eigen::VectorXd& c,
                         Eigen::MatrixXd& jac) {
        Eigen::VectorXd v, delta;
        unpack(x, v, delta);
        c.resize(ni);
        jac = Eigen::MatrixXd::Zero(ni, nx);
        int r = 0;
        for (int k = 0; k < m; ++k, ++r) {
            c(r) = x(m + k) - problem.band.v_max_pu;
            jac(r, m + k) = 1.0;
        }
        for (int k = 0; k < m; ++k, ++r) {
            c(r) = problem.band.v_min_pu - x(m + k);
            jac(r, m + k) = -1.0;
        }
        for (int k = 0; k < m; ++k, ++r) {
            c(r) = x(k) - ang_hi;
            jac(r, k) = 1.0;
        }
        for (int k = 0; k < m; ++k, ++r) {
            c(r) = ang_lo - x(k);
            jac(r, k) = -1.0;
        }
        for (int a = 0; a < na; ++a) {
            const Axis& ax = axes[static_cast<size_t>(a)];
            c(r) = x(2 * m + a) - ax.hi_pu;
            jac(r, 2 * m + a) = 1.0;
            ++r;
            c(r) = ax.lo_pu - x(2 * m + a);
            jac(r, 2 * m + a) = -1.0;
            ++r;
        }
        for (int l = 0; l < n_lim; ++l) {
            const pf::BranchAdmittance& adm = lim_adm[static_cast<size_t>(l)];
            for (const auto side : {pf::BranchSide::from, pf::BranchSide::to}) {
                const pf::FlowValue fv =
                    pf::branch_flow_value(adm, v(adm.from), v(adm.to),
                                          delta(adm.from), delta(adm.to), side);
                c(r) = fv.p * fv.p + fv.q * fv.q - lim_cap2(l);
                const int cdf = delta_col[static_cast<size_t>(adm.from)];
                const int cdt = delta_col[static_cast<size_t>(adm.to)];
                const int cvf = v_col[static_cast<size_t>(adm.from)];
                const int cvt = v_col[static_cast<size_t>(adm.to)];
                if (cdf >= 0) jac(r, cdf) = 2.0 * (fv.p * fv.dp_ddf + fv.q * fv.dq_ddf);
                if (cdt >= 0) jac(r, cdt) = 2.0 * (fv.p * fv.dp_ddt + fv.q * fv.dq_ddt);
                if (cvf >= 0) jac(r, cvf) = 2.0 * (fv.p * fv.dp_dvf + fv.q * fv.dq_dvf);
                if (cvt >= 0) jac(r, cvt) = 2.0 * (fv.p * fv.dp_dvt + fv.q * fv.dq_dvt);
                ++r;
            }
        }
    };

    Eigen::VectorXd x0(nx);
    const bool warm = problem.v0_pu.size() == n && problem.delta0_rad.size() == n;
    for (int k = 0; k < m; ++k) {
        const int i = ns[static_cast<size_t>(k)];
        x0(k) = warm ? problem.delta0_rad(i) : 0.0;
        x0(m + k) = warm ? problem.v0_pu(i) : 1.0;
    }
    for (int a = 0; a < na; ++a) {
        const Axis& ax = axes[static_cast<size_t>(a)];
        x0(2 * m + a) = clamp_interior(ax.now_pu, ax.lo_pu, ax.hi_pu);
    }

    IpOptions ip;
    ip.tol_eq = opts.tol_eq_pu;
    ip.tol_ineq = opts.tol_ineq;
    ip.max_iterations = opts.max_iterations;
    const IpResult res = solve_nlp(nlp, x0, ip);

    OPFSolution sol;
    switch (res.status) {
        case IpStatus::optimal: sol.status = OPFStatus::solved; break;
        case IpStatus::infeasible: sol.status = OPFStatus::infeasible; break;
        case IpStatus::iteration_limit: sol.status = OPFStatus::iteration_limit; break;
    }
    sol.iterations = res.iterations;
    sol.kkt_error = res.kkt_error;
    sol.max_eq_violation_pu = res.max_eq_violation;

    unpack(res.x, sol.v_pu, sol.delta_rad);
    sol.setpoints.reserve(problem.flex.size());
    for (size_t fi = 0; fi < problem.flex.size(); ++fi) {
        const auto& f = problem.flex[fi];
        FlexSetpoint sp;
        sp.asset_id = f.asset_id;
        sp.bus = f.bus;
        sp.p_kw = p_axis_of[fi] >= 0 ? res.x(2 * m + p_axis_of[fi]) * s_base
                                     : fixed_p(static_cast<Eigen::Index>(fi));
        sp.q_kvar = q_axis_of[fi] >= 0 ? res.x(2 * m + q_axis_of[fi]) * s_base
                                       : fixed_q(static_cast<Eigen::Index>(fi));
        sol.setpoints.push_back(std::move(sp));
    }

    if (sol.status == OPFStatus::infeasible) {
        // The windows are physical capabilities, so the reported compromise
        // must stay inside them; the network limits take the violation
        // instead. Clamp the axes and replay a power flow so the reported
        // state is one the assets could actually produce.
        for (size_t fi = 0; fi < problem.flex.size(); ++fi) {
            const auto& f = problem.flex[fi];
            auto& sp = sol.setpoints[fi];
            sp.p_kw = std::clamp(sp.p_kw, f.p_min_kw, f.p_max_kw);
            sp.q_kvar = std::clamp(sp.q_kvar, f.q_min_kvar, f.q_max_kvar);
        }
        pf::InjectionSpec inj(n);
        for (int i = 0; i < n; ++i) {
            inj.add(i, problem.base_p_kw(i), problem.base_q_kvar(i));
        }
        for (const auto& sp : sol.setpoints) inj.add(sp.bus, sp.p_kw, sp.q_kvar);
        pf::PFOptions pf_opts;
        pf_opts.tolerance_pu = 1e-10;
        pf_opts.max_iterations = 60;
        pf_opts.slack_voltage_pu = problem.slack_voltage_pu;
        const pf::PFSolution replay = pf::solve_pf(net, y_bus, inj, pf_opts);
        if (replay.converged) {
            sol.v_pu = replay.v_pu;
            sol.delta_rad = replay.delta_rad;
            sol.max_eq_violation_pu = replay.max_mismatch_pu;
        }
    }

    double obj = 0.0;
    double box_viol = 0.0;
    for (size_t fi = 0; fi < problem.flex.size(); ++fi) {
        const auto& f = problem.flex[fi];
        const auto& sp = sol.setpoints[fi];
        const double dp = sp.p_kw - f.p_target_kw;
        obj += f.cost_p * dp * dp + f.cost_q * sp.q_kvar * sp.q_kvar;
        box_viol = std::max({box_viol, sp.p_kw - f.p_max_kw, f.p_min_kw - sp.p_kw,
                             sp.q_kvar - f.q_max_kvar, f.q_min_kvar - sp.q_kvar});
    }
    sol.objective = obj;
    sol.max_box_violation_kw = std::max(0.0, box_viol);

    double v_viol = 0.0;
    for (int k = 0; k < m; ++k) {
        const double v = sol.v_pu(ns[static_cast<size_t>(k)]);
        v_viol = std::max({v_viol, v - problem.band.v_max_pu, problem.band.v_min_pu - v});
    }
    sol.max_voltage_violation_pu = std::max(0.0, v_viol);

    double f_viol = 0.0;
    for (int l = 0; l < n_lim; ++l) {
        const pf::BranchAdmittance& adm = lim_adm[static_cast<size_t>(l)];
        for (const auto side : {pf::BranchSide::from, pf::BranchSide::to}) {
            const pf::FlowValue fv = pf::branch_flow_value(
                adm, sol.v_pu(adm.from), sol.v_pu(adm.to), sol.delta_rad(adm.from),
                sol.delta_rad(adm.to), side);
            const double s_kva = std::hypot(fv.p, fv.q) * s_base;
            f_viol = std::max(f_viol,
                              s_kva - problem.flow_limits[static_cast<size_t>(l)].s_max_kva);
        }
    }
    sol.max_flow_violation_kva = std::max(0.0, f_viol);
    return sol;
}

std::string dump_problem_json(const OPFProblem& problem) {
    nlohmann::json j;
    j["network"] = problem.net.name;
    j["slack_voltage_pu"] = problem.slack_voltage_pu;
    j["band"] = {{"v_min_pu", problem.band.v_min_pu}, {"v_max_pu", problem.band.v_max_pu}};
    auto& base = j["base"] = nlohmann::json::array();
    for (Eigen::Index i = 0; i < problem.base_p_kw.size(); ++i) {
        base.push_back({{"bus", problem.net.buses[static_cast<size_t>(i)].id},
                        {"p_kw", problem.base_p_kw(i)},
                        {"q_kvar", problem.base_q_kvar(i)}});
    }
    auto& flex = j["flex"] = nlohmann::json::array();
    for (const auto& f : problem.flex) {
        flex.push_back({{"asset", f.asset_id},
                        {"bus", problem.net.buses[static_cast<size_t>(f.bus)].id},
                        {"cost_p", f.cost_p},
                        {"cost_q", f.cost_q},
                        {"p_target_kw", f.p_target_kw},
                        {"p_window_kw", {f.p_min_kw, f.p_max_kw}},
                        {"q_window_kvar", {f.q_min_kvar, f.q_max_kvar}}});
    }
    auto& limits = j["flow_limits"] = nlohmann::json::array();
    for (const auto& lim : problem.flow_limits) {
        const auto& br = problem.net.branches[static_cast<size_t>(lim.branch)];
        limits.push_back(
            {{"from", br.from}, {"to", br.to}, {"s_max_kva", lim.s_max_kva}});
    }
    return j.dump(2);
}

std::string dump_solution_json(const OPFSolution& solution) {
    static const char* const names[] = {"solved", "infeasible", "iteration_limit"};
    nlohmann::json j;
    j["status"] = names[static_cast<int>(solution.status)];
    j["objective_kw2"] = solution.objective;
    j["iterations"] = solution.iterations;
    j["kkt_error"] = solution.kkt_error;
    j["violations"] = {{"power_balance_pu", solution.max_eq_violation_pu},
                       {"voltage_pu", solution.max_voltage_violation_pu},
                       {"flow_kva", solution.max_flow_violation_kva},
                       {"box_kw", solution.max_box_violation_kw}};
    auto& sp = j["setpoints"] = nlohmann::json::array();
    for (const auto& s : solution.setpoints) {
        sp.push_back({{"asset", s.asset_id},
                      {"bus", s.bus},
                      {"p_kw", s.p_kw},
                      {"q_kvar", s.q_kvar}});
    }
    auto& state = j["state"] = nlohmann::json::array();
    for (Eigen::Index i = 0; i < solution.v_pu.size(); ++i) {
        state.push_back({{"v_pu", solution.v_pu(i)}, {"delta_rad", solution.delta_rad(i)}});
    }
    return j.dump(2);
}

} // namespace ccm::opf
