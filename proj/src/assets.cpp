#include "ccm/assets.hpp"

#include <algorithm>
#include <cmath>

namespace ccm::assets {

double battery_target_kw(const BatterySpec& spec, double e_kwh, double dt_hours) {
    if (dt_hours <= 0.0) throw ConfigError("battery target horizon must be positive");
    const double anchor = spec.target_literal ? spec.e_max_kwh : 0.5 * spec.e_max_kwh;
    const double magnitude = std::abs(e_kwh - anchor) / dt_hours;
    double target = 0.0;
    if (e_kwh < 0.5 * spec.e_max_kwh) {
        target = magnitude;
    } else if (e_kwh > 0.5 * spec.e_max_kwh) {
        target = -magnitude;
    }
    double p_min = 0.0, p_max = 0.0;
    battery_power_bounds(spec, e_kwh, dt_hours, p_min, p_max);
    return std::clamp(target, p_min, p_max);
}

void battery_power_bounds(const BatterySpec& spec, double e_kwh, double dt_hours,
                          double& p_min_kw, double& p_max_kw) {
    if (dt_hours <= 0.0) throw ConfigError("battery bounds horizon must be positive");
    const double headroom = std::max(0.0, spec.e_max_kwh - e_kwh);
    const double stored = std::max(0.0, e_kwh - spec.e_min_kwh);
    p_max_kw = std::min(spec.s_max_kva, headroom / dt_hours);
    p_min_kw = -std::min(spec.s_max_kva, stored / dt_hours);
}

Flexibility battery_flexibility(const std::string& asset_id, int bus,
                                const BatterySpec& spec, const BatteryState& state,
                                double dt_hours, double cost_p, double cost_q,
                                double p_now_kw, double q_now_kvar) {
    Flexibility flex;
    flex.asset_id = asset_id;
    flex.bus = bus;
    flex.cost_p = cost_p;
    flex.cost_q = cost_q;
    battery_power_bounds(spec, state.e_kwh, dt_hours, flex.p_min_kw, flex.p_max_kw);
    flex.p_target_kw = battery_target_kw(spec, state.e_kwh, dt_hours);
    const double q_cap = spec.s_max_kva * spec.sin_phi_max;
    flex.q_min_kvar = -q_cap;
    flex.q_max_kvar = q_cap;
    flex.p_now_kw = p_now_kw;
    flex.q_now_kvar = q_now_kvar;
    return flex;
}

double battery_step(const BatterySpec& spec, BatteryState& state, double p_kw,
                    double dt_hours) {
    const double e_new =
        std::clamp(state.e_kwh + p_kw * dt_hours, spec.e_min_kwh, spec.e_max_kwh);
    const double realized = (e_new - state.e_kwh) / dt_hours;
    state.e_kwh = e_new;
    return realized;
}

double european_efficiency(const std::array<double, 6>& eta_at_load_points) {
    constexpr std::array<double, 6> weights = {0.03, 0.06, 0.13, 0.10, 0.48, 0.20};
    double eta = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
        eta += weights[i] * eta_at_load_points[i];
    }
    return eta;
}

double pv_available_kw(const PvSpec& spec, double irradiance_wm2,
                       double temperature_c) {
    const double thermal = 1.0 + spec.alpha_per_k * (temperature_c - spec.t_ref_c);
    const double raw =
        spec.p_ref_kw * (irradiance_wm2 / spec.e_ref_wm2) * thermal * spec.eta_inverter;
    const double cap = spec.p_ref_kw * spec.eta_inverter * spec.overload_headroom;
    return std::clamp(raw, 0.0, cap);
}

Flexibility pv_flexibility(const std::string& asset_id, int bus, const PvSpec& spec,
                           double available_kw, double cost_p, double cost_q,
                           double p_now_kw, double q_now_kvar) {
    Flexibility flex;
    flex.asset_id = asset_id;
    flex.bus = bus;
    flex.cost_p = cost_p;
    flex.cost_q = cost_q;
    flex.p_min_kw = -std::max(0.0, available_kw);
    flex.p_max_kw = 0.0;
    flex.p_target_kw = flex.p_min_kw;
    const double q_cap = spec.s_max_kva * spec.sin_phi_max;
    flex.q_min_kvar = -q_cap;
    flex.q_max_kvar = q_cap;
    flex.p_now_kw = p_now_kw;
    flex.q_now_kvar = q_now_kvar;
    return flex;
}

double ev_power_kw(const EvSpec& spec, double v_pu, int current_a) {
    return 3.0 * spec.v_nom_volts * v_pu * current_a / 1000.0;
}

int ev_quantize_current(const EvSpec& spec, double p_set_kw, double v_pu) {
    const double volts = spec.v_nom_volts * v_pu;
    if (volts <= 0.0) throw ConfigError("EV quantization requires a positive voltage");
    const int raw = static_cast<int>(std::floor(p_set_kw * 1000.0 / (3.0 * volts)));
    return std::clamp(raw, spec.i_min_a, spec.i_max_a);
}

Flexibility ev_flexibility(const std::string& asset_id, int bus, const EvSpec& spec,
                           const EvState& state, double v_est_pu, double cost_p,
                           double cost_q, double p_now_kw) {
    Flexibility flex;
    flex.asset_id = asset_id;
    flex.bus = bus;
    flex.cost_p = cost_p;
    flex.cost_q = cost_q;
    if (state.connected) {
        flex.p_min_kw = ev_power_kw(spec, v_est_pu, spec.i_min_a);
        flex.p_max_kw = ev_power_kw(spec, v_est_pu, spec.i_max_a);
        flex.p_target_kw = flex.p_max_kw;
    }
    flex.p_now_kw = p_now_kw;
    return flex;
}

} // namespace ccm::assets
