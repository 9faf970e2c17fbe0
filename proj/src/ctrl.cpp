#include "ccm/ctrl.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "ccm/common.hpp"
#include "ccm/pf.hpp"

namespace ccm::ctrl {

namespace {

const char* action_name(ActionKind kind) {
    switch (kind) {
        case ActionKind::none: return "none";
        case ActionKind::tap_step: return "tap_step";
        case ActionKind::run_opf: return "run_opf";
    }
    return "?";
}

const char* se_status_name(se::SEStatus status) {
    switch (status) {
        case se::SEStatus::ok: return "ok";
        case se::SEStatus::diverged: return "diverged";
        case se::SEStatus::unobservable: return "unobservable";
    }
    return "?";
}

const char* opf_status_name(opf::OPFStatus status) {
    switch (status) {
        case opf::OPFStatus::solved: return "solved";
        case opf::OPFStatus::infeasible: return "infeasible";
        case opf::OPFStatus::iteration_limit: return "iteration_limit";
    }
    return "?";
}

// Convert one optimizer setpoint into the command the asset actually takes:
// charging stations get the largest integer current not exceeding the
// allocation, everything else gets the P/Q pair as-is.
DispatchCommand to_command(const opf::FlexSetpoint& sp,
                           const std::vector<EvDispatch>& evs,
                           const Eigen::VectorXd& v_est_pu) {
    for (const auto& ev : evs) {
        if (ev.asset_id != sp.asset_id) continue;
        if (ev.bus < 0 || ev.bus >= v_est_pu.size()) {
            throw ConfigError("charging station '" + ev.asset_id +
                              "' references unknown bus " + std::to_string(ev.bus));
        }
        const double v_pu = v_est_pu(ev.bus);
        DispatchCommand cmd;
        cmd.kind = DispatchCommand::Kind::charging_current;
        cmd.asset_id = sp.asset_id;
        cmd.i_set_a = assets::ev_quantize_current(ev.spec, sp.p_kw, v_pu);
        cmd.p_kw = assets::ev_power_kw(ev.spec, v_pu, cmd.i_set_a);
        cmd.q_kvar = 0.0;
        return cmd;
    }
    DispatchCommand cmd;
    cmd.kind = DispatchCommand::Kind::setpoint;
    cmd.asset_id = sp.asset_id;
    cmd.p_kw = sp.p_kw;
    cmd.q_kvar = sp.q_kvar;
    return cmd;
}

} // namespace

bool ViolationReport::over_voltage() const {
    return std::any_of(voltage.begin(), voltage.end(),
                       [](const VoltageViolation& v) { return v.over; });
}

bool ViolationReport::under_voltage() const {
    return std::any_of(voltage.begin(), voltage.end(),
                       [](const VoltageViolation& v) { return !v.over; });
}

ViolationReport detect(const net::Network& net, const Eigen::VectorXd& v_pu,
                       const Eigen::VectorXd& delta_rad, const opf::VoltageBand& band,
                       const std::vector<opf::BranchLimit>& limits, double t_s,
                       const GuardBands& guard) {
    const int n = static_cast<int>(net.buses.size());
    if (v_pu.size() != n || delta_rad.size() != n) {
        throw ConfigError("violation scan: state length does not match the network");
    }
    ViolationReport rep;
    rep.t_s = t_s;

    const int slack = net.slack_index();
    for (int i = 0; i < n; ++i) {
        if (i == slack) continue;
        const double v = v_pu(i);
        if (v > band.v_max_pu + guard.v_deadband_pu) {
            rep.voltage.push_back({i, v - band.v_max_pu, true});
        } else if (v < band.v_min_pu - guard.v_deadband_pu) {
            rep.voltage.push_back({i, band.v_min_pu - v, false});
        }
    }

    if (!limits.empty()) {
        const auto flows = pf::branch_flows(net, v_pu, delta_rad);
        for (const auto& lim : limits) {
            if (lim.branch < 0 || lim.branch >= static_cast<int>(net.branches.size())) {
                throw ConfigError("violation scan: flow limit references branch " +
                                  std::to_string(lim.branch));
            }
            const auto& fl = flows[static_cast<size_t>(lim.branch)];
            const double s = std::max(std::abs(fl.from_kva), std::abs(fl.to_kva));
            if (s > lim.s_max_kva + guard.s_deadband_kva) {
                rep.flow.push_back({lim.branch, s - lim.s_max_kva, lim.s_max_kva});
            }
        }
    }
    return rep;
}

Decision decide(const ViolationReport& report, const TapState& tap) {
    Decision d;
    if (report.clean()) {
        d.kind = ActionKind::none;
        d.reason = "no violations";
        return d;
    }
    if (!report.flow.empty()) {
        d.kind = ActionKind::run_opf;
        d.reason = "flow limit exceeded";
        return d;
    }
    const bool over = report.over_voltage();
    const bool under = report.under_voltage();
    if (over && under) {
        d.kind = ActionKind::run_opf;
        d.reason = "simultaneous over- and under-voltage";
        return d;
    }
    const int delta = over ? -1 : +1;
    if (!tap.available) {
        d.kind = ActionKind::run_opf;
        d.reason = "voltage excursion, no tap changer available";
        return d;
    }
    if (tap.stepped_last_cycle) {
        d.kind = ActionKind::run_opf;
        d.reason = "voltage excursion, tap stepped last cycle";
        return d;
    }
    const int target = tap.position + delta;
    if (target < tap.min_position || target > tap.max_position) {
        d.kind = ActionKind::run_opf;
        d.reason = "voltage excursion, tap range exhausted";
        return d;
    }
    d.kind = ActionKind::tap_step;
    d.tap_delta = delta;
    d.reason = over ? "over-voltage, stepping tap down" : "under-voltage, stepping tap up";
    return d;
}

CycleLog run_cycle(const net::Network& net, const CycleInput& in,
                   const CycleConfig& cfg) {
    CycleLog log;
    log.t_s = in.t_s;

    const se::SEResult est = se::estimate(net, in.measurements, cfg.se);
    log.se_status = est.status;
    if (est.status != se::SEStatus::ok) {
        log.degraded = true;
        log.report.t_s = in.t_s;
        log.decision.kind = ActionKind::none;
        log.decision.reason = "state estimate unavailable, holding setpoints";
        return log;
    }
    log.v_est_pu = est.v_pu;
    log.delta_est_rad = est.delta_rad;

    log.report = detect(net, est.v_pu, est.delta_rad, cfg.band, in.limits, in.t_s,
                        cfg.guard);
    log.decision = decide(log.report, in.tap);

    switch (log.decision.kind) {
        case ActionKind::none: {
            if (!cfg.dispatch_targets_when_clean) break;
            for (const auto& f : in.flex) {
                opf::FlexSetpoint sp;
                sp.asset_id = f.asset_id;
                sp.bus = f.bus;
                sp.p_kw = std::clamp(f.p_target_kw, f.p_min_kw, f.p_max_kw);
                sp.q_kvar = std::clamp(0.0, f.q_min_kvar, f.q_max_kvar);
                log.commands.push_back(to_command(sp, in.ev, est.v_pu));
            }
            break;
        }
        case ActionKind::tap_step: {
            DispatchCommand cmd;
            cmd.kind = DispatchCommand::Kind::tap;
            cmd.asset_id = in.tap.asset_id;
            cmd.tap_position = in.tap.position + log.decision.tap_delta;
            log.commands.push_back(cmd);
            break;
        }
        case ActionKind::run_opf: {
            // Aim strictly inside the limits so the cured state is not
            // re-flagged next cycle over measurement dust.
            opf::VoltageBand band = cfg.band;
            if (band.v_max_pu - band.v_min_pu > 4.0 * cfg.guard.v_margin_pu) {
                band.v_min_pu += cfg.guard.v_margin_pu;
                band.v_max_pu -= cfg.guard.v_margin_pu;
            }
            std::vector<opf::BranchLimit> limits = in.limits;
            for (auto& lim : limits) {
                lim.s_max_kva =
                    std::max(lim.s_max_kva - cfg.guard.s_margin_kva, 0.5 * lim.s_max_kva);
            }
            opf::OPFProblem problem =
                opf::assemble(net, est.v_pu, est.delta_rad, in.flex, limits, band,
                              est.v_pu(net.slack_index()));
            const opf::OPFSolution sol = opf::solve(problem, cfg.opf);
            log.opf_ran = true;
            log.opf_status = sol.status;
            log.opf_objective_kw2 = sol.objective;
            for (const auto& sp : sol.setpoints) {
                log.commands.push_back(to_command(sp, in.ev, est.v_pu));
            }
            break;
        }
    }
    return log;
}

std::string dump_cycle_log_json(const CycleLog& log) {
    nlohmann::json j;
    j["t_s"] = log.t_s;
    j["se"] = se_status_name(log.se_status);
    j["degraded"] = log.degraded;
    auto& state = j["state"] = nlohmann::json::array();
    for (Eigen::Index i = 0; i < log.v_est_pu.size(); ++i) {
        state.push_back(
            {{"v_pu", log.v_est_pu(i)}, {"delta_rad", log.delta_est_rad(i)}});
    }
    auto& volts = j["violations"]["voltage"] = nlohmann::json::array();
    for (const auto& v : log.report.voltage) {
        volts.push_back(
            {{"bus", v.bus}, {"beyond_pu", v.beyond_pu}, {"over", v.over}});
    }
    auto& flows = j["violations"]["flow"] = nlohmann::json::array();
    for (const auto& f : log.report.flow) {
        flows.push_back({{"branch", f.branch},
                         {"beyond_kva", f.beyond_kva},
                         {"s_max_kva", f.s_max_kva}});
    }
    j["decision"] = {{"action", action_name(log.decision.kind)},
                     {"tap_delta", log.decision.tap_delta},
                     {"reason", log.decision.reason}};
    if (log.opf_ran) {
        j["opf"] = {{"status", opf_status_name(log.opf_status)},
                    {"objective_kw2", log.opf_objective_kw2}};
    }
    auto& cmds = j["commands"] = nlohmann::json::array();
    for (const auto& c : log.commands) {
        nlohmann::json jc;
        jc["asset"] = c.asset_id;
        switch (c.kind) {
            case DispatchCommand::Kind::setpoint:
                jc["p_kw"] = c.p_kw;
                jc["q_kvar"] = c.q_kvar;
                break;
            case DispatchCommand::Kind::charging_current:
                jc["i_set_a"] = c.i_set_a;
                jc["p_kw"] = c.p_kw;
                break;
            case DispatchCommand::Kind::tap:
                jc["tap_position"] = c.tap_position;
                break;
        }
        cmds.push_back(jc);
    }
    return j.dump();
}

} // namespace ccm::ctrl
