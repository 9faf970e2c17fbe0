#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

namespace oracles {

using ccm::Complex;

GsResult gauss_seidel_pf(const ccm::net::Network& net,
                         const ccm::pf::InjectionSpec& inj,
                         double slack_voltage_pu, double tol, int max_iter) {
    const Eigen::MatrixXcd y = ccm::net::build_admittance(net);
    const int n = static_cast<int>(net.buses.size());
    const int slack = net.slack_index();

    Eigen::VectorXcd v = Eigen::VectorXcd::Ones(n);
    v(slack) = Complex(slack_voltage_pu, 0.0);

    GsResult res;
    for (int iter = 0; iter < max_iter; ++iter) {
        double max_dv = 0.0;
        for (int i = 0; i < n; ++i) {
            if (i == slack) continue;
            const Complex s_inj(-inj.p_kw(i) / net.s_base_kva,
                                -inj.q_kvar(i) / net.s_base_kva);
            Complex sum(0.0, 0.0);
            for (int j = 0; j < n; ++j) {
                if (j != i) sum += y(i, j) * v(j);
            }
            const Complex v_new = (std::conj(s_inj / v(i)) - sum) / y(i, i);
            max_dv = std::max(max_dv, std::abs(v_new - v(i)));
            v(i) = v_new;
        }
        if (max_dv < tol) {
            res.converged = true;
            break;
        }
    }
    res.v_pu.resize(n);
    res.delta_rad.resize(n);
    for (int i = 0; i < n; ++i) {
        res.v_pu(i) = std::abs(v(i));
        res.delta_rad(i) = std::arg(v(i));
    }
    return res;
}

ccm::net::Network random_radial_network(std::mt19937& rng, int n_buses,
                                        bool with_transformer) {
    std::uniform_real_distribution<double> z_dist(0.005, 0.05);
    std::uniform_int_distribution<int> parent_pick(0, 1000);
    std::uniform_int_distribution<int> tap_pick(-2, 2);

    ccm::net::Network net;
    net.name = "random";
    net.s_base_kva = 100.0;
    for (int i = 0; i < n_buses; ++i) {
        ccm::net::Bus bus;
        bus.id = "b" + std::to_string(i);
        bus.base_kv = 0.4;
        bus.kind = (i == 0) ? ccm::net::BusKind::slack : ccm::net::BusKind::load;
        net.buses.push_back(bus);
    }
    const double z_base = 0.4 * 0.4 * 1000.0 / net.s_base_kva;
    for (int i = 1; i < n_buses; ++i) {
        ccm::net::Branch br;
        br.from = "b" + std::to_string(parent_pick(rng) % i);
        br.to = "b" + std::to_string(i);
        br.r_ohm = z_dist(rng) * z_base;
        br.x_ohm = z_dist(rng) * z_base;
        br.rating_kva = 100.0;
        if (with_transformer && i == 1) {
            br.kind = ccm::net::BranchKind::transformer;
            ccm::net::TapChanger tap;
            tap.neutral = 0;
            tap.min_position = -4;
            tap.max_position = 4;
            tap.step_pu = 0.025;
            tap.position = tap_pick(rng);
            br.tap = tap;
        }
        net.branches.push_back(br);
    }
    return net;
}

ccm::pf::InjectionSpec random_injections(std::mt19937& rng,
                                         const ccm::net::Network& net,
                                         double max_abs_kw) {
    std::uniform_real_distribution<double> dist(-max_abs_kw, max_abs_kw);
    const int slack = net.slack_index();
    ccm::pf::InjectionSpec inj(static_cast<int>(net.buses.size()));
    for (int i = 0; i < inj.p_kw.size(); ++i) {
        if (i == slack) continue;
        inj.p_kw(i) = dist(rng);
        inj.q_kvar(i) = dist(rng);
    }
    return inj;
}

Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x, double h) {
    Eigen::VectorXd g(x.size());
    for (int i = 0; i < x.size(); ++i) {
        Eigen::VectorXd hi = x, lo = x;
        hi(i) += h;
        lo(i) -= h;
        g(i) = (f(hi) - f(lo)) / (2.0 * h);
    }
    return g;
}

namespace {

struct OracleAxis {
    size_t flex = 0;
    bool is_p = true;
    double lo_kw = 0.0;
    double hi_kw = 0.0;
};

// Movable axes: all P windows in flexibility order, then all Q windows.
std::vector<OracleAxis> movable_axes(const ccm::assets::FlexibilitySet& flex) {
    std::vector<OracleAxis> axes;
    for (size_t fi = 0; fi < flex.size(); ++fi) {
        if (flex[fi].p_max_kw - flex[fi].p_min_kw > 1e-12) {
            axes.push_back({fi, true, flex[fi].p_min_kw, flex[fi].p_max_kw});
        }
    }
    for (size_t fi = 0; fi < flex.size(); ++fi) {
        if (flex[fi].q_max_kvar - flex[fi].q_min_kvar > 1e-12) {
            axes.push_back({fi, false, flex[fi].q_min_kvar, flex[fi].q_max_kvar});
        }
    }
    return axes;
}

} // namespace

GridSearchResult grid_search_opf(const ccm::opf::OPFProblem& problem,
                                 double mesh_kw, const Eigen::VectorXd& center_kw,
                                 double half_span_kw, double flow_tol_kva) {
    const auto& net = problem.net;
    const int n = static_cast<int>(net.buses.size());
    const int slack = net.slack_index();
    const std::vector<OracleAxis> axes = movable_axes(problem.flex);
    const size_t na = axes.size();
    if (center_kw.size() != static_cast<Eigen::Index>(na)) {
        throw std::runtime_error("grid search: center has wrong length");
    }

    // Per-axis candidate values: a uniform mesh around the center, clipped to
    // the window so the exact bound itself is always a candidate.
    std::vector<std::vector<double>> values(na);
    const int reach = static_cast<int>(std::floor(half_span_kw / mesh_kw + 1e-9));
    double total = 1.0;
    for (size_t a = 0; a < na; ++a) {
        std::vector<double>& vals = values[a];
        for (int k = -reach; k <= reach; ++k) {
            double v = center_kw(static_cast<Eigen::Index>(a)) + k * mesh_kw;
            v = std::clamp(v, axes[a].lo_kw, axes[a].hi_kw);
            if (vals.empty() || v > vals.back() + 1e-12) vals.push_back(v);
        }
        total *= static_cast<double>(vals.size());
    }
    if (total > 2e6) throw std::runtime_error("grid search: mesh too large");

    ccm::pf::PFOptions pf_opts;
    pf_opts.tolerance_pu = 1e-10;
    pf_opts.max_iterations = 60;
    pf_opts.slack_voltage_pu = problem.slack_voltage_pu;

    GridSearchResult best;
    std::vector<size_t> idx(na, 0);
    std::vector<size_t> best_idx(na, 0);
    std::vector<double> p_of(problem.flex.size()), q_of(problem.flex.size());
    while (true) {
        for (size_t fi = 0; fi < problem.flex.size(); ++fi) {
            p_of[fi] = 0.5 * (problem.flex[fi].p_min_kw + problem.flex[fi].p_max_kw);
            q_of[fi] = 0.5 * (problem.flex[fi].q_min_kvar + problem.flex[fi].q_max_kvar);
        }
        for (size_t a = 0; a < na; ++a) {
            (axes[a].is_p ? p_of : q_of)[axes[a].flex] = values[a][idx[a]];
        }

        ccm::pf::InjectionSpec inj(n);
        for (int i = 0; i < n; ++i) {
            inj.add(i, problem.base_p_kw(i), problem.base_q_kvar(i));
        }
        for (size_t fi = 0; fi < problem.flex.size(); ++fi) {
            inj.add(problem.flex[fi].bus, p_of[fi], q_of[fi]);
        }

        const ccm::pf::PFSolution pf = ccm::pf::solve_pf(net, inj, pf_opts);
        bool feasible = pf.converged;
        if (feasible) {
            for (int i = 0; i < n && feasible; ++i) {
                if (i == slack) continue;
                feasible = pf.v_pu(i) >= problem.band.v_min_pu - 1e-9 &&
                           pf.v_pu(i) <= problem.band.v_max_pu + 1e-9;
            }
        }
        if (feasible) {
            const auto flows = ccm::pf::branch_flows(net, pf.v_pu, pf.delta_rad);
            for (const auto& lim : problem.flow_limits) {
                const auto& fl = flows[static_cast<size_t>(lim.branch)];
                if (std::abs(fl.from_kva) > lim.s_max_kva + flow_tol_kva ||
                    std::abs(fl.to_kva) > lim.s_max_kva + flow_tol_kva) {
                    feasible = false;
                    break;
                }
            }
        }
        if (feasible) {
            double obj = 0.0;
            for (size_t fi = 0; fi < problem.flex.size(); ++fi) {
                const auto& f = problem.flex[fi];
                const double dp = p_of[fi] - f.p_target_kw;
                obj += f.cost_p * dp * dp + f.cost_q * q_of[fi] * q_of[fi];
            }
            if (!best.found || obj < best.objective) {
                best.found = true;
                best.objective = obj;
                best_idx = idx;
            }
        }

        size_t a = 0;
        for (; a < na; ++a) {
            if (++idx[a] < values[a].size()) break;
            idx[a] = 0;
        }
        if (a == na) break; // odometer wrapped: all combinations visited
    }

    if (best.found) {
        best.setpoints.resize(static_cast<Eigen::Index>(na));
        best.interior = true;
        for (size_t a = 0; a < na; ++a) {
            const double v = values[a][best_idx[a]];
            best.setpoints(static_cast<Eigen::Index>(a)) = v;
            // Sitting on the edge of the searched window is only fine when
            // that edge is the window's own bound.
            const bool on_edge =
                (best_idx[a] == 0 || best_idx[a] + 1 == values[a].size()) &&
                values[a].size() > 1;
            const bool at_bound = std::abs(v - axes[a].lo_kw) < 1e-12 ||
                                  std::abs(v - axes[a].hi_kw) < 1e-12;
            if (on_edge && !at_bound) best.interior = false;
        }
    }
    return best;
}

GridSearchResult grid_search_opf_refined(const ccm::opf::OPFProblem& problem) {
    const std::vector<OracleAxis> axes = movable_axes(problem.flex);
    Eigen::VectorXd center(static_cast<Eigen::Index>(axes.size()));
    double widest = 0.0;
    double fine_points = 1.0;
    for (size_t a = 0; a < axes.size(); ++a) {
        center(static_cast<Eigen::Index>(a)) = 0.5 * (axes[a].lo_kw + axes[a].hi_kw);
        widest = std::max(widest, axes[a].hi_kw - axes[a].lo_kw);
        fine_points *= std::floor((axes[a].hi_kw - axes[a].lo_kw) / 0.1) + 1.0;
    }
    const double full_span = 0.5 * widest + 1.0;
    // Sweep the whole box at the fine mesh when that is affordable. Zooming in
    // around the coarse winner is cheaper but can miss the optimum when a
    // binding constraint couples the axes: near the boundary a large move on
    // one axis only becomes feasible together with a large move on another,
    // and no point of that basin stands out on a 1 kW grid.
    GridSearchResult best;
    if (fine_points <= 2e5) {
        best = grid_search_opf(problem, 0.1, center, full_span);
    } else {
        const GridSearchResult coarse = grid_search_opf(problem, 1.0, center, full_span);
        if (!coarse.found) return coarse;
        best = grid_search_opf(problem, 0.1, coarse.setpoints, 1.2);
    }
    if (!best.found) return best;
    // 0.01 kW polish: re-sweep a small window around the winner and keep
    // re-centering while that improves. Walking matters: a binding constraint
    // drags the optimum along the feasible boundary, and when the boundary is
    // much shallower in one axis the profitable moves are diagonal steps that
    // only enter the window once it has crept closer. The current winner is
    // always a candidate of its own window, so the objective never regresses
    // and the last round leaves the window centered on the final answer.
    if (std::pow(31.0, static_cast<double>(axes.size())) <= 1e5) {
        for (int round = 0; round < 25; ++round) {
            const GridSearchResult next =
                grid_search_opf(problem, 0.01, best.setpoints, 0.15);
            if (!next.found) break;
            const bool improved = next.objective < best.objective - 1e-12;
            best = next;
            if (!improved) break;
        }
    }
    return best;
}

} // namespace oracles
