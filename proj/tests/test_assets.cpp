#include <doctest.h>

#include <random>

#include "ccm/assets.hpp"

using namespace ccm::assets;

namespace {

BatterySpec lab_battery() {
    BatterySpec spec;
    spec.e_max_kwh = 100.0;
    spec.e_min_kwh = 0.0;
    spec.s_max_kva = 30.0;
    spec.sin_phi_max = 0.44;
    return spec;
}

const std::array<double, 6> kInverterCurve = {0.7715, 0.8357, 0.8679,
                                              0.8893, 0.9547, 0.9643};

} // namespace

TEST_CASE("european efficiency is the fixed weighted sum of the curve points") {
    const double eta = european_efficiency(kInverterCurve);
    const double by_hand = 0.03 * 0.7715 + 0.06 * 0.8357 + 0.13 * 0.8679 +
                           0.10 * 0.8893 + 0.48 * 0.9547 + 0.20 * 0.9643;
    CHECK(eta == doctest::Approx(by_hand).epsilon(1e-14));
    CHECK(eta == doctest::Approx(0.9262).epsilon(6e-4));

    SUBCASE("an ideal inverter scores 1") {
        CHECK(european_efficiency({1, 1, 1, 1, 1, 1}) == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("pv available power follows irradiance with thermal correction") {
    PvSpec pv;
    pv.p_ref_kw = 60.0;
    pv.s_max_kva = 60.0;
    pv.eta_inverter = european_efficiency(kInverterCurve);

    SUBCASE("reference conditions") {
        const double p = pv_available_kw(pv, 1000.0, 25.0);
        CHECK(p == doctest::Approx(60.0 * pv.eta_inverter).epsilon(1e-12));
    }
    SUBCASE("warm cell derates output") {
        const double p = pv_available_kw(pv, 1000.0, 45.0);
        const double expect = 60.0 * (1.0 + 0.00273 * 20.0) * pv.eta_inverter;
        CHECK(p == doctest::Approx(expect).epsilon(1e-12));
        // The 20 K hot point still fits under the overload headroom.
        CHECK(p < pv.p_ref_kw * pv.eta_inverter * pv.overload_headroom);
    }
    SUBCASE("half irradiance halves the linear term") {
        CHECK(pv_available_kw(pv, 500.0, 25.0) ==
              doctest::Approx(30.0 * pv.eta_inverter).epsilon(1e-12));
    }
    SUBCASE("night yields zero, and output is never negative") {
        CHECK(pv_available_kw(pv, 0.0, 10.0) == 0.0);
        CHECK(pv_available_kw(pv, -5.0, 10.0) == 0.0);
    }
    SUBCASE("extreme cold is capped by the headroom") {
        const double p = pv_available_kw(pv, 1400.0, -30.0);
        CHECK(p == doctest::Approx(pv.p_ref_kw * pv.eta_inverter * 1.1).epsilon(1e-12));
    }
}

TEST_CASE("pv flexibility offers curtailment between full feed-in and zero") {
    PvSpec pv;
    pv.p_ref_kw = 60.0;
    pv.s_max_kva = 60.0;
    pv.eta_inverter = 0.93;

    const Flexibility flex = pv_flexibility("pv", 4, pv, 41.5, 1000.0, 10.0, -41.5, 0.0);
    CHECK(flex.p_min_kw == doctest::Approx(-41.5));
    CHECK(flex.p_max_kw == 0.0);
    CHECK(flex.p_target_kw == doctest::Approx(-41.5));
    CHECK(flex.q_min_kvar == doctest::Approx(-60.0 * 0.44));
    CHECK(flex.q_max_kvar == doctest::Approx(60.0 * 0.44));
    CHECK(flex.cost_p == 1000.0);
    CHECK(flex.cost_q == 10.0);
}

TEST_CASE("battery reactive capability is the rated apparent power times sin phi") {
    const BatterySpec spec = lab_battery();
    const Flexibility flex =
        battery_flexibility("bss", 3, spec, {50.0}, 0.25, 100.0, 1.0, 0.0, 0.0);
    CHECK(flex.q_min_kvar == doctest::Approx(-13.2).epsilon(1e-12));
    CHECK(flex.q_max_kvar == doctest::Approx(13.2).epsilon(1e-12));
}

TEST_CASE("battery power bounds respect rating and energy window") {
    const BatterySpec spec = lab_battery();
    double lo = 0.0, hi = 0.0;

    SUBCASE("mid state of charge is rating-limited") {
        battery_power_bounds(spec, 50.0, 0.25, lo, hi);
        CHECK(lo == doctest::Approx(-30.0));
        CHECK(hi == doctest::Approx(30.0));
    }
    SUBCASE("full battery cannot charge") {
        battery_power_bounds(spec, 100.0, 0.25, lo, hi);
        CHECK(hi == 0.0);
        CHECK(lo == doctest::Approx(-30.0));
    }
    SUBCASE("empty battery cannot discharge") {
        battery_power_bounds(spec, 0.0, 0.25, lo, hi);
        CHECK(lo == 0.0);
        CHECK(hi == doctest::Approx(30.0));
    }
    SUBCASE("close to full, the energy window binds before the rating") {
        battery_power_bounds(spec, 99.0, 0.25, lo, hi);
        CHECK(hi == doctest::Approx(4.0)); // 1 kWh / 0.25 h
    }
}

TEST_CASE("battery target drives toward half capacity") {
    BatterySpec spec = lab_battery();

    SUBCASE("below half charges") {
        CHECK(battery_target_kw(spec, 40.0, 1.0) == doctest::Approx(10.0));
    }
    SUBCASE("above half discharges") {
        CHECK(battery_target_kw(spec, 60.0, 1.0) == doctest::Approx(-10.0));
    }
    SUBCASE("at half the target is zero") {
        CHECK(battery_target_kw(spec, 50.0, 1.0) == 0.0);
    }
    SUBCASE("magnitude is capped by the rating") {
        CHECK(battery_target_kw(spec, 5.0, 0.25) == doctest::Approx(30.0));
    }
    SUBCASE("literal distance mode scores against full capacity") {
        spec.target_literal = true;
        CHECK(battery_target_kw(spec, 40.0, 1.0) == doctest::Approx(30.0)); // 60 capped
        CHECK(battery_target_kw(spec, 60.0, 1.0) == doctest::Approx(-30.0)); // 40 capped
        CHECK(battery_target_kw(spec, 80.0, 4.0) == doctest::Approx(-5.0));
    }
    SUBCASE("invalid horizon is rejected") {
        CHECK_THROWS_AS(battery_target_kw(spec, 50.0, 0.0), ccm::ConfigError);
    }
}

TEST_CASE("battery integration clamps at the energy limits") {
    const BatterySpec spec = lab_battery();
    BatteryState state{50.0};

    SUBCASE("plain charging") {
        const double realized = battery_step(spec, state, 10.0, 0.25);
        CHECK(realized == doctest::Approx(10.0));
        CHECK(state.e_kwh == doctest::Approx(52.5));
    }
    SUBCASE("hitting the top reduces the realized power") {
        state.e_kwh = 99.9;
        const double realized = battery_step(spec, state, 10.0, 0.25);
        CHECK(state.e_kwh == doctest::Approx(100.0));
        CHECK(realized == doctest::Approx(0.4));
    }
    SUBCASE("hitting the bottom reduces the realized discharge") {
        state.e_kwh = 0.5;
        const double realized = battery_step(spec, state, -10.0, 0.25);
        CHECK(state.e_kwh == doctest::Approx(0.0));
        CHECK(realized == doctest::Approx(-2.0));
    }
}

TEST_CASE("ev charging window and quantization") {
    const EvSpec ev;
    const EvState connected{true, 16};

    SUBCASE("window at nominal voltage") {
        const Flexibility flex = ev_flexibility("cs", 5, ev, connected, 1.0, 10000.0, 0.0, 11.04);
        CHECK(std::abs(flex.p_min_kw - 4.14) < 1e-9);
        CHECK(std::abs(flex.p_max_kw - 11.04) < 1e-9);
        CHECK(std::abs(flex.p_target_kw - 11.04) < 1e-9);
        CHECK(flex.q_min_kvar == 0.0);
        CHECK(flex.q_max_kvar == 0.0);
    }
    SUBCASE("window scales with the estimated voltage") {
        const Flexibility flex = ev_flexibility("cs", 5, ev, connected, 1.05, 10000.0, 0.0, 0.0);
        CHECK(flex.p_max_kw == doctest::Approx(3.0 * 230.0 * 1.05 * 16.0 / 1000.0));
    }
    SUBCASE("disconnected station offers nothing") {
        const Flexibility flex = ev_flexibility("cs", 5, ev, {false, 0}, 1.0, 10000.0, 0.0, 0.0);
        CHECK(flex.p_min_kw == 0.0);
        CHECK(flex.p_max_kw == 0.0);
        CHECK(flex.p_target_kw == 0.0);
    }
    SUBCASE("setpoints quantize to the next integer current below") {
        CHECK(ev_quantize_current(ev, 7.5, 1.0) == 10); // floor(7500/690)
        CHECK(ev_quantize_current(ev, 11.04, 1.0) == 16);
        CHECK(ev_quantize_current(ev, 4.14, 1.0) == 6);
        CHECK(ev_quantize_current(ev, 0.0, 1.0) == 6);    // clamped up
        CHECK(ev_quantize_current(ev, 500.0, 1.0) == 16); // clamped down
    }
    SUBCASE("power at a given current") {
        CHECK(ev_power_kw(ev, 1.0, 10) == doctest::Approx(6.9));
    }
    SUBCASE("quantization requires a positive voltage") {
        CHECK_THROWS_AS(ev_quantize_current(ev, 7.5, 0.0), ccm::ConfigError);
    }
}

TEST_CASE("flexibility targets always lie within their bounds") {
    std::mt19937 rng(99);
    std::uniform_real_distribution<double> soc(0.0, 100.0);
    std::uniform_real_distribution<double> dt(0.05, 4.0);
    BatterySpec spec = lab_battery();
    for (int i = 0; i < 200; ++i) {
        spec.target_literal = (i % 2 == 0);
        const double e = soc(rng);
        const double h = dt(rng);
        const Flexibility flex =
            battery_flexibility("bss", 0, spec, {e}, h, 100.0, 1.0, 0.0, 0.0);
        CHECK(flex.p_target_kw >= flex.p_min_kw - 1e-12);
        CHECK(flex.p_target_kw <= flex.p_max_kw + 1e-12);
    }
}
