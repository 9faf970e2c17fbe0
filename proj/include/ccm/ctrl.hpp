#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ccm/assets.hpp"
#include "ccm/net.hpp"
#include "ccm/opf.hpp"
#include "ccm/se.hpp"

namespace ccm::ctrl {

// Chatter guards. A quantity is flagged only once it leaves its band by more
// than the deadband, and the optimizer is asked for a state strictly inside
// the band by the margin, so a cure is not immediately re-flagged when the
// operating point drifts a little.
struct GuardBands {
    double v_deadband_pu = 5e-4;
    double s_deadband_kva = 0.05;
    double v_margin_pu = 2e-3;
    double s_margin_kva = 0.2;
};

struct VoltageViolation {
    int bus = -1;
    double beyond_pu = 0.0; // distance outside the band, always positive
    bool over = true;       // above v_max when true, below v_min otherwise
};

struct FlowViolation {
    int branch = -1;
    double beyond_kva = 0.0; // worst terminal's distance above the cap
    double s_max_kva = 0.0;
};

struct ViolationReport {
    double t_s = 0.0;
    std::vector<VoltageViolation> voltage;
    std::vector<FlowViolation> flow;

    bool over_voltage() const;
    bool under_voltage() const;
    bool clean() const { return voltage.empty() && flow.empty(); }
};

// Scan an estimated state against the voltage band and the flow caps active
// right now. Branch flows are evaluated at both terminals; the slack bus is
// exempt from the band (its magnitude is whatever the feeder imposes).
ViolationReport detect(const net::Network& net, const Eigen::VectorXd& v_pu,
                       const Eigen::VectorXd& delta_rad, const opf::VoltageBand& band,
                       const std::vector<opf::BranchLimit>& limits, double t_s,
                       const GuardBands& guard = {});

// Transformer tap changer as the controller sees it this cycle.
struct TapState {
    std::string asset_id; // dispatch target for tap commands
    bool available = false;
    int position = 0;
    int min_position = 0;
    int max_position = 0;
    bool stepped_last_cycle = false;
};

enum class ActionKind { none, tap_step, run_opf };

struct Decision {
    ActionKind kind = ActionKind::none;
    int tap_delta = 0; // -1 lowers downstream voltage, +1 raises it
    std::string reason;
};

// Cascade rule: trouble that is only a voltage excursion of one sign goes to
// the transformer first, provided it has headroom and did not step in the
// previous cycle; flow trouble, mixed over+under voltage, and an exhausted
// or resting tap all go to the optimizer. Pure function of its inputs.
Decision decide(const ViolationReport& report, const TapState& tap);

struct DispatchCommand {
    enum class Kind { setpoint, charging_current, tap };
    Kind kind = Kind::setpoint;
    std::string asset_id;
    double p_kw = 0.0;    // setpoint: consumer counting
    double q_kvar = 0.0;  // setpoint
    int i_set_a = 0;      // charging_current
    int tap_position = 0; // tap
};

// Charging stations take an integer current instead of a P/Q pair; the
// controller converts their setpoints on the way out.
struct EvDispatch {
    std::string asset_id;
    assets::EvSpec spec;
    int bus = -1; // estimated voltage at this bus scales the conversion
};

struct CycleConfig {
    opf::VoltageBand band;
    GuardBands guard;
    se::SEOptions se;
    opf::OPFOptions opf;
    // On a clean report the controller re-dispatches every asset's current
    // target, which keeps slow regulation (storage drifting back to half
    // charge) active. Disable to leave assets alone instead.
    bool dispatch_targets_when_clean = true;
};

struct CycleInput {
    double t_s = 0.0;
    std::vector<se::Measurement> measurements;
    assets::FlexibilitySet flex;          // current windows, targets, costs
    std::vector<opf::BranchLimit> limits; // caps active at t_s
    TapState tap;
    std::vector<EvDispatch> ev;
};

struct CycleLog {
    double t_s = 0.0;
    se::SEStatus se_status = se::SEStatus::diverged;
    Eigen::VectorXd v_est_pu;
    Eigen::VectorXd delta_est_rad;
    ViolationReport report;
    Decision decision;
    bool opf_ran = false;
    opf::OPFStatus opf_status = opf::OPFStatus::solved;
    double opf_objective_kw2 = 0.0;
    bool degraded = false; // estimator failed; commands re-issue held values
    std::vector<DispatchCommand> commands;
};

// One 15-second control period: estimate the state from the measurements,
// detect violations, pick tap step / optimizer / nothing, and emit the
// commands. Estimator failure degrades to an empty command list, which holds
// the previous setpoints since assets keep their last command; an infeasible
// redispatch still ships the least-bad executable setpoints.
CycleLog run_cycle(const net::Network& net, const CycleInput& in,
                   const CycleConfig& cfg);

// Single compact JSON object per cycle, one line, for append-only logs.
std::string dump_cycle_log_json(const CycleLog& log);

} // namespace ccm::ctrl
