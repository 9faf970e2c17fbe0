#pragma once

#include <array>
#include <string>
#include <vector>

#include "ccm/common.hpp"

namespace ccm::assets {

// One controllable asset's offer to the optimizer: a quadratic preference
// around p_target plus box bounds, in physical units, consumer counting
// (consumption positive, feed-in negative).
struct Flexibility {
    std::string asset_id;
    int bus = -1;
    double cost_p = 0.0; // weight on (P - P_target)^2
    double cost_q = 0.0; // weight on Q^2
    double p_target_kw = 0.0;
    double p_min_kw = 0.0;
    double p_max_kw = 0.0;
    double q_min_kvar = 0.0;
    double q_max_kvar = 0.0;
    double p_now_kw = 0.0; // current operating point, used to split the
    double q_now_kvar = 0.0; // bus injection into base load + flexibility
};

using FlexibilitySet = std::vector<Flexibility>;

// --- battery storage --------------------------------------------------------

struct BatterySpec {
    double e_max_kwh = 0.0;
    double e_min_kwh = 0.0;
    double s_max_kva = 0.0;
    double sin_phi_max = 0.44;
    // Target magnitude: false scores the distance to half capacity,
    // true the distance to full capacity (both drive toward half full).
    bool target_literal = false;
};

struct BatteryState {
    double e_kwh = 0.0;
};

// Signed charging target over the horizon dt_hours: positive (charge) below
// half capacity, negative (discharge) above, zero at the midpoint. Capped to
// the feasible power bounds.
double battery_target_kw(const BatterySpec& spec, double e_kwh, double dt_hours);

// Power window compatible with both the inverter rating and keeping the
// energy inside [e_min, e_max] over dt_hours.
void battery_power_bounds(const BatterySpec& spec, double e_kwh, double dt_hours,
                          double& p_min_kw, double& p_max_kw);

Flexibility battery_flexibility(const std::string& asset_id, int bus,
                                const BatterySpec& spec, const BatteryState& state,
                                double dt_hours, double cost_p, double cost_q,
                                double p_now_kw, double q_now_kvar);

// Integrates p_kw over dt_hours, clamping at the energy limits. Returns the
// average power actually absorbed (differs from p_kw when a limit cuts the
// interval short).
double battery_step(const BatterySpec& spec, BatteryState& state, double p_kw,
                    double dt_hours);

// --- photovoltaic plant ------------------------------------------------------

struct PvSpec {
    double p_ref_kw = 0.0;      // DC rating at reference irradiance
    double e_ref_wm2 = 1000.0;
    double alpha_per_k = 0.00273;
    double t_ref_c = 25.0;
    double eta_inverter = 1.0;
    double s_max_kva = 0.0;
    double sin_phi_max = 0.44;
    double overload_headroom = 1.1; // cap on cold-weather gain above rating
};

// Weighted inverter efficiency over the standard load points
// (5, 10, 20, 30, 50, 100)% with weights (0.03, 0.06, 0.13, 0.10, 0.48, 0.20).
double european_efficiency(const std::array<double, 6>& eta_at_load_points);

// AC power available right now:
//   P = p_ref * (E / e_ref) * (1 + alpha (T - t_ref)) * eta_inverter
// clamped to [0, p_ref * eta_inverter * overload_headroom].
double pv_available_kw(const PvSpec& spec, double irradiance_wm2,
                       double temperature_c);

// Feed-in is negative: P in [-available, 0], target is full feed-in.
Flexibility pv_flexibility(const std::string& asset_id, int bus, const PvSpec& spec,
                           double available_kw, double cost_p, double cost_q,
                           double p_now_kw, double q_now_kvar);

// --- EV charging station -----------------------------------------------------

struct EvSpec {
    int i_min_a = 6;
    int i_max_a = 16;
    double v_nom_volts = 230.0; // per-phase voltage at 1 p.u.
};

struct EvState {
    bool connected = false;
    int current_a = 0;
};

// Three-phase charging power at an integer current setting, kW.
double ev_power_kw(const EvSpec& spec, double v_pu, int current_a);

// Largest integer current whose power does not exceed the request, clamped
// into [i_min, i_max]: floor(P / (3 V)).
int ev_quantize_current(const EvSpec& spec, double p_set_kw, double v_pu);

// While a vehicle is connected charging cannot pause, so the power window is
// [3 V i_min, 3 V i_max] and the preferred point is full-rate charging.
// Reactive power is not controllable. Disconnected stations offer nothing.
Flexibility ev_flexibility(const std::string& asset_id, int bus, const EvSpec& spec,
                           const EvState& state, double v_est_pu, double cost_p,
                           double cost_q, double p_now_kw);

} // namespace ccm::assets
