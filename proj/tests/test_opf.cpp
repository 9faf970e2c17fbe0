#include <doctest.h>

#include <cmath>
#include <numbers>

#include <json.hpp>

#include "ccm/opf.hpp"
#include "ccm/pf.hpp"
#include "oracles.hpp"

using namespace ccm;

namespace {

net::Network feeder_net(double cable_r_ohm_per_km, double cable_x_ohm_per_km,
                        double length_km) {
    net::Network n;
    n.name = "feeder";
    n.s_base_kva = 100.0;
    n.buses.push_back({"grid", 0.4, net::BusKind::slack});
    n.buses.push_back({"site", 0.4, net::BusKind::load});
    net::Branch b;
    b.from = "grid";
    b.to = "site";
    b.kind = net::BranchKind::cable;
    b.r_ohm = cable_r_ohm_per_km * length_km;
    b.x_ohm = cable_x_ohm_per_km * length_km;
    b.rating_kva = 170.0;
    n.branches.push_back(b);
    return n;
}

// grid -- hub -- roof, battery on the hub, generator on the roof.
net::Network cascade_net() {
    net::Network n;
    n.name = "cascade";
    n.s_base_kva = 100.0;
    n.buses.push_back({"grid", 0.4, net::BusKind::slack});
    n.buses.push_back({"hub", 0.4, net::BusKind::load});
    n.buses.push_back({"roof", 0.4, net::BusKind::load});
    net::Branch b0;
    b0.from = "grid";
    b0.to = "hub";
    b0.kind = net::BranchKind::cable;
    b0.r_ohm = 0.208 * 0.3;
    b0.x_ohm = 0.080 * 0.3;
    b0.rating_kva = 170.0;
    net::Branch b1 = b0;
    b1.from = "hub";
    b1.to = "roof";
    b1.r_ohm = 0.208 * 0.2;
    b1.x_ohm = 0.080 * 0.2;
    b1.rating_kva = 70.0;
    n.branches.push_back(b0);
    n.branches.push_back(b1);
    return n;
}

assets::Flexibility make_flex(const std::string& id, int bus, double cost_p,
                              double cost_q, double target, double p_min,
                              double p_max, double q_min, double q_max) {
    assets::Flexibility f;
    f.asset_id = id;
    f.bus = bus;
    f.cost_p = cost_p;
    f.cost_q = cost_q;
    f.p_target_kw = target;
    f.p_min_kw = p_min;
    f.p_max_kw = p_max;
    f.q_min_kvar = q_min;
    f.q_max_kvar = q_max;
    return f;
}

opf::OPFProblem base_problem(const net::Network& n) {
    opf::OPFProblem p;
    p.net = n;
    p.base_p_kw = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n.buses.size()));
    p.base_q_kvar = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n.buses.size()));
    return p;
}

} // namespace

TEST_CASE("unconstrained dispatch lands every asset exactly on its target") {
    opf::OPFProblem p = base_problem(feeder_net(0.208, 0.080, 0.5));
    p.base_p_kw(1) = 10.0;
    p.base_q_kvar(1) = 2.0;
    p.flex.push_back(make_flex("gen", 1, 1000.0, 10.0, -25.0, -40.0, 0.0, -5.0, 5.0));
    p.flex.push_back(make_flex("store", 1, 100.0, 1.0, 5.0, -10.0, 10.0, -5.0, 5.0));

    const opf::OPFSolution sol = opf::solve(p);
    REQUIRE(sol.status == opf::OPFStatus::solved);
    CHECK(sol.setpoints.size() == 2);
    CHECK(std::abs(sol.setpoints[0].p_kw + 25.0) < 1e-6);
    CHECK(std::abs(sol.setpoints[1].p_kw - 5.0) < 1e-6);
    CHECK(std::abs(sol.setpoints[0].q_kvar) < 1e-6);
    CHECK(std::abs(sol.setpoints[1].q_kvar) < 1e-6);
    CHECK(sol.objective < 1e-6);
    CHECK(sol.max_eq_violation_pu < 1e-6);
    CHECK(sol.max_voltage_violation_pu == 0.0);
    CHECK(sol.max_box_violation_kw == 0.0);

    // The oracle sweeps the same problem and should agree that zero cost is
    // attainable.
    const oracles::GridSearchResult gs = oracles::grid_search_opf_refined(p);
    REQUIRE(gs.found);
    CHECK(gs.interior);
    CHECK(sol.objective <= gs.objective + 1e-3);
}

TEST_CASE("branch flow cap pins the feed-in at the limit") {
    opf::OPFProblem p = base_problem(feeder_net(0.208, 0.080, 0.5));
    p.flex.push_back(make_flex("gen", 1, 1000.0, 10.0, -40.0, -40.0, 0.0, -13.2, 13.2));
    p.flow_limits.push_back({0, 20.0});

    const opf::OPFSolution sol = opf::solve(p);
    REQUIRE(sol.status == opf::OPFStatus::solved);
    // The site-side terminal carries exactly the injection, so the optimum
    // parks the generator at the cap with no reactive detour.
    CHECK(std::abs(sol.setpoints[0].p_kw + 20.0) < 1e-4);
    CHECK(std::abs(sol.setpoints[0].q_kvar) < 1e-4);
    CHECK(sol.max_flow_violation_kva <= 0.05);

    const pf::BranchAdmittance adm = pf::branch_admittance(p.net, 0);
    const pf::FlowValue fv =
        pf::branch_flow_value(adm, sol.v_pu(0), sol.v_pu(1), sol.delta_rad(0),
                              sol.delta_rad(1), pf::BranchSide::to);
    CHECK(std::hypot(fv.p, fv.q) * 100.0 == doctest::Approx(20.0).epsilon(1e-5));

    const oracles::GridSearchResult gs = oracles::grid_search_opf_refined(p);
    REQUIRE(gs.found);
    CHECK(gs.interior);
    CHECK(sol.objective <= gs.objective + 1e-3);
    CHECK(sol.objective >= gs.objective - 10.0);
}

TEST_CASE("voltage cap binds and cheap reactive absorption is used first") {
    opf::OPFProblem p = base_problem(feeder_net(1.200, 0.082, 1.0));
    p.band = {0.95, 1.05};
    p.flex.push_back(make_flex("gen", 1, 1000.0, 10.0, -10.0, -10.0, 0.0, -5.0, 5.0));

    const opf::OPFSolution sol = opf::solve(p);
    REQUIRE(sol.status == opf::OPFStatus::solved);
    CHECK(sol.v_pu(1) == doctest::Approx(1.05).epsilon(1e-5));
    CHECK(sol.max_voltage_violation_pu <= 1e-4);
    // Consuming reactive power drags the voltage down for a tenth of the
    // price of curtailment, so the window pins at its consumption edge.
    CHECK(sol.setpoints[0].q_kvar == doctest::Approx(5.0).epsilon(1e-3));
    CHECK(sol.setpoints[0].p_kw > -10.0 + 0.5); // some curtailment remains

    const oracles::GridSearchResult gs = oracles::grid_search_opf_refined(p);
    REQUIRE(gs.found);
    CHECK(gs.interior);
    CHECK(sol.objective <= gs.objective + 1e-3);
    CHECK(sol.objective >= gs.objective - 10.0);
}

TEST_CASE("cheap storage absorbs before expensive curtailment kicks in") {
    opf::OPFProblem p = base_problem(cascade_net());
    p.base_p_kw(1) = 21.0;
    p.flex.push_back(make_flex("gen", 2, 1000.0, 10.0, -40.0, -40.0, 0.0, 0.0, 0.0));
    p.flex.push_back(make_flex("store", 1, 100.0, 1.0, 0.0, -30.0, 30.0, -13.2, 13.2));
    p.flow_limits.push_back({0, 15.0});

    const opf::OPFSolution sol = opf::solve(p);
    REQUIRE(sol.status == opf::OPFStatus::solved);
    const double charge = sol.setpoints[1].p_kw;
    const double curtail = sol.setpoints[0].p_kw + 40.0;
    CHECK(charge > 3.0);
    CHECK(charge < 5.5);
    CHECK(curtail > 0.2);
    CHECK(curtail < 0.8);
    // Equal marginal cost at the optimum: 2*100*charge == 2*1000*curtail,
    // bent slightly by the extra cable losses the roof feed-in causes.
    CHECK(charge / curtail == doctest::Approx(10.0).epsilon(0.08));
    CHECK(sol.setpoints[0].q_kvar == 0.0); // pinned window passes through
    CHECK(sol.max_flow_violation_kva <= 1e-2);

    const oracles::GridSearchResult gs = oracles::grid_search_opf_refined(p);
    REQUIRE(gs.found);
    CHECK(gs.interior);
    CHECK(sol.objective <= gs.objective + 1e-3);
    // The mesh quantizes two cost-100 axes at 0.1 kW, so the oracle may sit
    // tens of kW^2 above the true optimum.
    CHECK(sol.objective >= gs.objective - 60.0);
}

TEST_CASE("impossible flow cap reports infeasible with the best compromise") {
    opf::OPFProblem p = base_problem(feeder_net(0.208, 0.080, 0.5));
    p.base_p_kw(1) = 50.0;
    p.flex.push_back(make_flex("trim", 1, 100.0, 1.0, 0.0, -1.0, 1.0, -1.0, 1.0));
    p.flow_limits.push_back({0, 10.0});

    const opf::OPFSolution sol = opf::solve(p);
    CHECK(sol.status == opf::OPFStatus::infeasible);
    CHECK(sol.max_flow_violation_kva > 30.0);
    CHECK(sol.max_flow_violation_kva < 45.0);
    CHECK(sol.max_box_violation_kw <= 1e-6);
    CHECK(sol.v_pu.allFinite());

    const oracles::GridSearchResult gs = oracles::grid_search_opf_refined(p);
    CHECK(!gs.found);
}

TEST_CASE("zero-width windows are passed through as fixed setpoints") {
    opf::OPFProblem p = base_problem(feeder_net(0.208, 0.080, 0.5));
    // Charger pulling full rate; its reactive power is not controllable.
    p.flex.push_back(make_flex("charger", 1, 10000.0, 0.0, 11.04, 4.14, 11.04, 0.0, 0.0));
    // A disconnected unit degenerates to an all-zero window.
    p.flex.push_back(make_flex("idle", 1, 10000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0));

    const opf::OPFSolution sol = opf::solve(p);
    REQUIRE(sol.status == opf::OPFStatus::solved);
    CHECK(std::abs(sol.setpoints[0].p_kw - 11.04) < 1e-6);
    CHECK(sol.setpoints[0].q_kvar == 0.0);
    CHECK(sol.setpoints[1].p_kw == 0.0);
    CHECK(sol.setpoints[1].q_kvar == 0.0);
    CHECK(sol.objective < 1e-6);
}

TEST_CASE("assemble splits an operating state into base load and flexibility") {
    const net::Network n = feeder_net(0.208, 0.080, 0.5);
    pf::InjectionSpec inj(2);
    inj.add(1, 12.0, 3.0);  // fixed consumer
    inj.add(1, -8.0, 1.0);  // current output of the flexible asset
    const pf::PFSolution pfs = pf::solve_pf(n, inj);
    REQUIRE(pfs.converged);

    assets::Flexibility f =
        make_flex("gen", 1, 1000.0, 10.0, -20.0, -25.0, 0.0, -13.2, 13.2);
    f.p_now_kw = -8.0;
    f.q_now_kvar = 1.0;

    const opf::OPFProblem p =
        opf::assemble(n, pfs.v_pu, pfs.delta_rad, {f}, {}, {0.9, 1.1});
    CHECK(std::abs(p.base_p_kw(1) - 12.0) < 1e-6);
    CHECK(std::abs(p.base_q_kvar(1) - 3.0) < 1e-6);
    CHECK(p.base_p_kw(0) == 0.0);
    CHECK(p.v0_pu.size() == 2);

    // Round trip: dispatching the recovered problem and replaying the
    // setpoints through a fresh power flow must agree with the optimizer's
    // own network state.
    const opf::OPFSolution sol = opf::solve(p);
    REQUIRE(sol.status == opf::OPFStatus::solved);
    CHECK(std::abs(sol.setpoints[0].p_kw + 20.0) < 1e-6);

    pf::InjectionSpec replay(2);
    replay.add(1, p.base_p_kw(1), p.base_q_kvar(1));
    replay.add(1, sol.setpoints[0].p_kw, sol.setpoints[0].q_kvar);
    const pf::PFSolution check = pf::solve_pf(n, replay);
    REQUIRE(check.converged);
    CHECK(std::abs(check.v_pu(1) - sol.v_pu(1)) < 1e-6);
    CHECK(std::abs(check.delta_rad(1) - sol.delta_rad(1)) < 1e-6);
}

TEST_CASE("dispatch problem validation rejects malformed input") {
    const net::Network n = feeder_net(0.208, 0.080, 0.5);

    SUBCASE("flexibility on the slack bus") {
        opf::OPFProblem p = base_problem(n);
        p.flex.push_back(make_flex("f", 0, 1.0, 1.0, 0.0, -1.0, 1.0, 0.0, 0.0));
        CHECK_THROWS_AS(opf::solve(p), ConfigError);
    }
    SUBCASE("target outside the window") {
        opf::OPFProblem p = base_problem(n);
        p.flex.push_back(make_flex("f", 1, 1.0, 1.0, 5.0, -1.0, 1.0, 0.0, 0.0));
        CHECK_THROWS_AS(opf::solve(p), ConfigError);
    }
    SUBCASE("empty window") {
        opf::OPFProblem p = base_problem(n);
        p.flex.push_back(make_flex("f", 1, 1.0, 1.0, 0.0, 1.0, -1.0, 0.0, 0.0));
        CHECK_THROWS_AS(opf::solve(p), ConfigError);
    }
    SUBCASE("unknown branch in a flow limit") {
        opf::OPFProblem p = base_problem(n);
        p.flow_limits.push_back({7, 10.0});
        CHECK_THROWS_AS(opf::solve(p), ConfigError);
    }
    SUBCASE("base vector length mismatch") {
        opf::OPFProblem p = base_problem(n);
        p.base_p_kw.resize(1);
        CHECK_THROWS_AS(opf::solve(p), ConfigError);
    }
    SUBCASE("inverted voltage band") {
        opf::OPFProblem p = base_problem(n);
        p.band = {1.1, 0.9};
        CHECK_THROWS_AS(opf::solve(p), ConfigError);
    }
    SUBCASE("state estimate length mismatch in assemble") {
        CHECK_THROWS_AS(opf::assemble(n, Eigen::VectorXd::Ones(3),
                                      Eigen::VectorXd::Zero(3), {}, {}, {}),
                        ConfigError);
    }
}

TEST_CASE("raising an asset's deviation price shifts the burden to others") {
    // 41 kW of demand (30 base + 11 charging target) against a 20 kVA cap:
    // about 21 kW have to go, split between charger curtailment and storage
    // discharge by marginal cost.
    double prev_depth = 1e9;
    for (const double price : {10.0, 100.0, 1000.0, 10000.0}) {
        opf::OPFProblem p = base_problem(feeder_net(0.208, 0.080, 0.5));
        p.base_p_kw(1) = 30.0;
        p.flex.push_back(make_flex("car", 1, price, 1.0, 11.0, 0.0, 11.0, 0.0, 0.0));
        p.flex.push_back(make_flex("store", 1, 100.0, 1.0, 0.0, -30.0, 30.0, -5.0, 5.0));
        p.flow_limits.push_back({0, 20.0});

        const opf::OPFSolution sol = opf::solve(p);
        REQUIRE(sol.status == opf::OPFStatus::solved);
        const double depth = 11.0 - sol.setpoints[0].p_kw;
        CHECK(depth >= -1e-9);
        CHECK(depth <= prev_depth + 1e-6);
        prev_depth = depth;
    }
    // At 100x the storage price the equal-marginal split leaves the charger
    // with 1/101 of the roughly 21 kW burden.
    CHECK(prev_depth < 0.3);
}

TEST_CASE("scaling every cost factor leaves the setpoints unchanged") {
    auto solve_scaled = [](double k) {
        opf::OPFProblem p = base_problem(feeder_net(1.200, 0.082, 1.0));
        p.band = {0.95, 1.05};
        p.flex.push_back(
            make_flex("gen", 1, k * 1000.0, k * 10.0, -10.0, -10.0, 0.0, -5.0, 5.0));
        return opf::solve(p);
    };
    const opf::OPFSolution a = solve_scaled(1.0);
    const opf::OPFSolution b = solve_scaled(137.0);
    REQUIRE(a.status == opf::OPFStatus::solved);
    REQUIRE(b.status == opf::OPFStatus::solved);
    CHECK(std::abs(a.setpoints[0].p_kw - b.setpoints[0].p_kw) < 1e-8);
    CHECK(std::abs(a.setpoints[0].q_kvar - b.setpoints[0].q_kvar) < 1e-8);
    CHECK(b.objective == doctest::Approx(137.0 * a.objective).epsilon(1e-9));
}

TEST_CASE("angle box is a fixed wide interval that never binds") {
    const auto [lo, hi] = opf::angle_bounds();
    CHECK(lo == doctest::Approx(-2.0 * std::numbers::pi));
    CHECK(hi == doctest::Approx(2.0 * std::numbers::pi));

    opf::OPFProblem p = base_problem(feeder_net(0.208, 0.080, 0.5));
    p.base_p_kw(1) = 30.0;
    p.flex.push_back(make_flex("store", 1, 100.0, 1.0, 0.0, -30.0, 30.0, -5.0, 5.0));
    const opf::OPFSolution sol = opf::solve(p);
    REQUIRE(sol.status == opf::OPFStatus::solved);
    CHECK(sol.delta_rad(0) == 0.0);
    for (Eigen::Index i = 0; i < sol.delta_rad.size(); ++i) {
        CHECK(sol.delta_rad(i) > lo);
        CHECK(sol.delta_rad(i) < hi);
    }
}

TEST_CASE("dispatch problem and solution serialize to json") {
    opf::OPFProblem p = base_problem(feeder_net(0.208, 0.080, 0.5));
    p.flex.push_back(make_flex("gen", 1, 1000.0, 10.0, -40.0, -40.0, 0.0, -13.2, 13.2));
    p.flow_limits.push_back({0, 20.0});
    const opf::OPFSolution sol = opf::solve(p);
    REQUIRE(sol.status == opf::OPFStatus::solved);

    const nlohmann::json jp = nlohmann::json::parse(opf::dump_problem_json(p));
    CHECK(jp["network"] == "feeder");
    CHECK(jp["flex"].size() == 1);
    CHECK(jp["flex"][0]["asset"] == "gen");
    CHECK(jp["flex"][0]["p_window_kw"][0] == doctest::Approx(-40.0));
    CHECK(jp["flow_limits"][0]["s_max_kva"] == doctest::Approx(20.0));
    CHECK(jp["band"]["v_max_pu"] == doctest::Approx(1.1));

    const nlohmann::json js = nlohmann::json::parse(opf::dump_solution_json(sol));
    CHECK(js["status"] == "solved");
    CHECK(js["setpoints"].size() == 1);
    CHECK(js["setpoints"][0]["p_kw"] ==
          doctest::Approx(sol.setpoints[0].p_kw).epsilon(1e-12));
    CHECK(js["state"].size() == 2);
    CHECK(js["violations"]["flow_kva"].get<double>() <= 0.05);
}
