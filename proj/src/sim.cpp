#include "ccm/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ccm/common.hpp"

namespace ccm::sim {

namespace {

using nlohmann::json;

constexpr double kTimeTol = 1e-9;

std::string fmt_time(double t_s) {
    std::ostringstream os;
    os << t_s;
    return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Series

Series::Series(std::vector<double> t_s, std::vector<double> values)
    : t_(std::move(t_s)), v_(std::move(values)) {
    if (t_.empty()) throw ConfigError("series needs at least one sample");
    if (t_.size() != v_.size())
        throw ConfigError("series has " + std::to_string(t_.size()) + " times but " +
                          std::to_string(v_.size()) + " values");
    for (std::size_t i = 1; i < t_.size(); ++i) {
        if (t_[i] <= t_[i - 1])
            throw ConfigError("series times must be strictly increasing (sample " +
                              std::to_string(i) + ")");
    }
}

Series Series::constant(double value) {
    Series s;
    s.t_ = {0.0};
    s.v_ = {value};
    return s;
}

double Series::at(double t_s) const {
    if (t_.empty()) throw ConfigError("series is empty");
    auto it = std::upper_bound(t_.begin(), t_.end(), t_s);
    if (it == t_.begin()) return v_.front();
    const auto idx = static_cast<std::size_t>(std::distance(t_.begin(), it)) - 1;
    return v_[idx];
}

bool Series::covers(double t0_s, double t1_s) const {
    if (t_.empty()) return false;
    // A single sample is a constant: it covers everything.
    if (t_.size() == 1) return true;
    return t_.front() <= t0_s + kTimeTol && t_.back() >= t1_s - kTimeTol;
}

double Series::front_t_s() const {
    if (t_.empty()) throw ConfigError("series is empty");
    return t_.front();
}

double Series::back_t_s() const {
    if (t_.empty()) throw ConfigError("series is empty");
    return t_.back();
}

Series load_series_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open series file: " + path);

    std::vector<double> t, v;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": expected 'time_s,value'");
        const std::string a = line.substr(0, comma);
        const std::string b = line.substr(comma + 1);
        std::size_t used = 0;
        double ta = 0.0, vb = 0.0;
        try {
            ta = std::stod(a, &used);
            if (used != a.size()) throw std::invalid_argument(a);
            vb = std::stod(b, &used);
            if (used != b.size()) throw std::invalid_argument(b);
        } catch (const std::exception&) {
            if (lineno == 1) continue;  // header row
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": non-numeric sample '" + line + "'");
        }
        t.push_back(ta);
        v.push_back(vb);
    }
    if (t.empty()) throw ConfigError(path + ": no samples");
    try {
        return Series(std::move(t), std::move(v));
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// LimitSchedule

void LimitSchedule::add(BranchSchedule entry) { entries_.push_back(std::move(entry)); }

void LimitSchedule::validate(const net::Network& net, double t0_s,
                             double t_end_s) const {
    std::vector<int> seen;
    for (const BranchSchedule& e : entries_) {
        if (e.branch < 0 || e.branch >= static_cast<int>(net.branches.size()))
            throw ConfigError("limit schedule references branch index " +
                              std::to_string(e.branch));
        const auto& br = net.branches[static_cast<std::size_t>(e.branch)];
        const std::string ctx = "limit schedule for " + br.from + "-" + br.to;
        if (std::find(seen.begin(), seen.end(), e.branch) != seen.end())
            throw ConfigError(ctx + ": duplicate entry");
        seen.push_back(e.branch);
        if (e.intervals.empty()) throw ConfigError(ctx + ": no intervals");
        for (const LimitInterval& iv : e.intervals) {
            if (iv.s_max_kva <= 0.0)
                throw ConfigError(ctx + ": s_max_kva must be positive at t=" +
                                  fmt_time(iv.t_begin_s));
            if (iv.t_end_s <= iv.t_begin_s)
                throw ConfigError(ctx + ": empty interval at t=" +
                                  fmt_time(iv.t_begin_s));
        }
        if (e.intervals.front().t_begin_s > t0_s + kTimeTol)
            throw ConfigError(ctx + ": first interval starts after the scenario (t=" +
                              fmt_time(e.intervals.front().t_begin_s) + ")");
        for (std::size_t i = 1; i < e.intervals.size(); ++i) {
            const double prev_end = e.intervals[i - 1].t_end_s;
            const double next_begin = e.intervals[i].t_begin_s;
            if (next_begin > prev_end + kTimeTol)
                throw ConfigError(ctx + ": gap between t=" + fmt_time(prev_end) +
                                  " and t=" + fmt_time(next_begin));
            if (next_begin < prev_end - kTimeTol)
                throw ConfigError(ctx + ": overlap at t=" + fmt_time(next_begin));
        }
        if (e.intervals.back().t_end_s < t_end_s - kTimeTol)
            throw ConfigError(ctx + ": coverage ends at t=" +
                              fmt_time(e.intervals.back().t_end_s) +
                              " before the scenario end");
    }
}

namespace {

const LimitInterval* interval_at(const BranchSchedule& e, double t_s) {
    for (const LimitInterval& iv : e.intervals) {
        if (t_s >= iv.t_begin_s - kTimeTol && t_s < iv.t_end_s - kTimeTol) return &iv;
    }
    // The end of the last interval belongs to it, so the final sample of a
    // run does not fall off the schedule.
    const LimitInterval& last = e.intervals.back();
    if (std::abs(t_s - last.t_end_s) <= kTimeTol) return &last;
    return nullptr;
}

}  // namespace

std::vector<opf::BranchLimit> LimitSchedule::limits_at(double t_s) const {
    std::vector<opf::BranchLimit> out;
    for (const BranchSchedule& e : entries_) {
        const LimitInterval* iv = interval_at(e, t_s);
        if (!iv)
            throw ConfigError("no limit interval covers t=" + fmt_time(t_s) +
                              " for scheduled branch " + std::to_string(e.branch));
        out.push_back({e.branch, iv->s_max_kva});
    }
    return out;
}

double LimitSchedule::limit_for(int branch, double t_s) const {
    for (const BranchSchedule& e : entries_) {
        if (e.branch != branch) continue;
        const LimitInterval* iv = interval_at(e, t_s);
        if (!iv)
            throw ConfigError("no limit interval covers t=" + fmt_time(t_s) +
                              " for scheduled branch " + std::to_string(e.branch));
        return iv->s_max_kva;
    }
    return std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// Scenario

int Scenario::steps() const {
    return static_cast<int>(std::llround((t_end_s - t0_s) / cycle_s)) + 1;
}

void Scenario::validate() const {
    network.validate();
    const int n = static_cast<int>(network.buses.size());
    const int slack = network.slack_index();

    if (cycle_s <= 0.0) throw ConfigError("scenario: cycle_s must be positive");
    if (t_end_s <= t0_s) throw ConfigError("scenario: t_end_s must exceed t0_s");
    const double k = (t_end_s - t0_s) / cycle_s;
    if (std::abs(k - std::llround(k)) > 1e-6)
        throw ConfigError("scenario: horizon is not a whole number of cycles");

    if (!irradiance_wm2.covers(t0_s, t_end_s))
        throw ConfigError("scenario: irradiance series does not cover the horizon");
    if (!temperature_c.covers(t0_s, t_end_s))
        throw ConfigError("scenario: temperature series does not cover the horizon");
    for (const LoadPoint& lp : loads) {
        if (lp.bus < 0 || lp.bus >= n || lp.bus == slack)
            throw ConfigError("scenario: load at invalid bus index " +
                              std::to_string(lp.bus));
        if (!lp.p_kw.covers(t0_s, t_end_s) || !lp.q_kvar.covers(t0_s, t_end_s))
            throw ConfigError("scenario: load series at bus " +
                              network.buses[static_cast<std::size_t>(lp.bus)].id +
                              " does not cover the horizon");
    }

    schedule.validate(network, t0_s, t_end_s);

    if (oltc.branch < 0 || oltc.branch >= static_cast<int>(network.branches.size()))
        throw ConfigError("scenario: oltc branch index out of range");
    if (!network.branches[static_cast<std::size_t>(oltc.branch)].tap)
        throw ConfigError("scenario: oltc branch has no tap changer");

    auto check_bus = [&](int bus, const std::string& what) {
        if (bus < 0 || bus >= n || bus == slack)
            throw ConfigError("scenario: " + what + " bus index invalid");
    };
    check_bus(pv.bus, "pv");
    check_bus(bss.bus, "bss");
    check_bus(ev.bus, "charging station");

    if (pv.spec.p_ref_kw <= 0.0) throw ConfigError("scenario: pv p_ref_kw must be positive");
    if (pv.spec.s_max_kva <= 0.0) throw ConfigError("scenario: pv s_max_kva must be positive");
    if (bss.spec.e_min_kwh > bss.e0_kwh || bss.e0_kwh > bss.spec.e_max_kwh)
        throw ConfigError("scenario: bss e0_kwh outside the energy band");
    if (bss.spec.s_max_kva <= 0.0) throw ConfigError("scenario: bss s_max_kva must be positive");
    if (bss.target_dt_h <= 0.0) throw ConfigError("scenario: bss target_dt_h must be positive");
    if (ev.spec.i_min_a > ev.spec.i_max_a)
        throw ConfigError("scenario: charging station current window is empty");
    if (ev.spec.v_nom_volts <= 0.0)
        throw ConfigError("scenario: charging station nominal voltage must be positive");

    for (std::size_t i = 1; i < events.size(); ++i) {
        if (events[i].t_s < events[i - 1].t_s)
            throw ConfigError("scenario: events are not sorted by time");
    }

    if (static_cast<int>(measurements.size()) < 2 * n - 1)
        throw ConfigError("scenario: " + std::to_string(measurements.size()) +
                          " measurements cannot observe " + std::to_string(n) +
                          " buses (need at least " + std::to_string(2 * n - 1) + ")");
    bool has_voltage = false;
    for (const MeasurementPlan& mp : measurements) {
        const se::Measurement& m = mp.proto;
        if (m.variance <= 0.0)
            throw ConfigError("scenario: measurement variance must be positive");
        switch (m.kind) {
            case se::MeasurementKind::voltage:
                has_voltage = true;
                [[fallthrough]];
            case se::MeasurementKind::p_injection:
            case se::MeasurementKind::q_injection:
                if (m.bus < 0 || m.bus >= n)
                    throw ConfigError("scenario: measurement bus index invalid");
                break;
            case se::MeasurementKind::p_flow:
            case se::MeasurementKind::q_flow:
                if (m.branch < 0 ||
                    m.branch >= static_cast<int>(network.branches.size()))
                    throw ConfigError("scenario: measurement branch index invalid");
                break;
        }
        if (!mp.source.pseudo && (mp.source.unit <= 0 || mp.source.reg.empty()))
            throw ConfigError("scenario: measurement without register source");
    }
    if (!has_voltage)
        throw ConfigError("scenario: measurement plan has no voltage measurement");

    for (const MeterBinding& mb : meters) {
        if (mb.branch < 0 || mb.branch >= static_cast<int>(network.branches.size()))
            throw ConfigError("scenario: meter branch index invalid");
        if (mb.bus < 0 || mb.bus >= n)
            throw ConfigError("scenario: meter bus index invalid");
    }
}

namespace {

const json& require_field(const json& j, const char* key, const std::string& ctx) {
    if (!j.contains(key))
        throw ConfigError(ctx + ": missing field '" + key + "'");
    return j.at(key);
}

double require_num(const json& j, const char* key, const std::string& ctx) {
    const json& f = require_field(j, key, ctx);
    if (!f.is_number())
        throw ConfigError(ctx + ": field '" + key + "' must be a number");
    return f.get<double>();
}

std::string require_str(const json& j, const char* key, const std::string& ctx) {
    const json& f = require_field(j, key, ctx);
    if (!f.is_string())
        throw ConfigError(ctx + ": field '" + key + "' must be a string");
    return f.get<std::string>();
}

int resolve_bus(const net::Network& net, const json& j, const char* key,
                const std::string& ctx) {
    const std::string id = require_str(j, key, ctx);
    try {
        return net.index_of(id);
    } catch (const Error& e) {
        throw ConfigError(ctx + ": " + e.what());
    }
}

int resolve_branch(const net::Network& net, const json& j, const std::string& ctx) {
    const std::string from = require_str(j, "from", ctx);
    const std::string to = require_str(j, "to", ctx);
    try {
        return net.find_branch(from, to);
    } catch (const Error& e) {
        throw ConfigError(ctx + ": " + e.what());
    }
}

std::string resolve_path(const std::string& base_dir, const std::string& rel) {
    std::filesystem::path p(rel);
    if (p.is_absolute() || base_dir.empty()) return rel;
    return (std::filesystem::path(base_dir) / p).string();
}

// A series field is either a CSV path (string) or a constant (number).
Series parse_series(const json& parent, const char* key, const std::string& base_dir,
                    const std::string& ctx, std::optional<double> fallback = {}) {
    if (!parent.contains(key)) {
        if (fallback) return Series::constant(*fallback);
        throw ConfigError(ctx + ": missing series '" + key + "'");
    }
    const json& f = parent.at(key);
    if (f.is_number()) return Series::constant(f.get<double>());
    if (f.is_string())
        return load_series_csv(resolve_path(base_dir, f.get<std::string>()));
    throw ConfigError(ctx + ": series '" + key + "' must be a number or a CSV path");
}

int unit_id_by_name(const std::string& name, const std::string& ctx) {
    static const std::map<std::string, int> ids = {
        {"oltc", bus::kUnitOltc},         {"pv", bus::kUnitPv},
        {"cs", bus::kUnitCs},             {"bss", bus::kUnitBss},
        {"meter_007", bus::kUnitMeter007}, {"meter_008", bus::kUnitMeter008},
        {"env", bus::kUnitEnv},
    };
    const auto it = ids.find(name);
    if (it == ids.end()) throw ConfigError(ctx + ": unknown unit '" + name + "'");
    return it->second;
}

// Register names are checked against the served register maps at parse time
// so a typo fails the config step, not a live run.
void check_register(int unit, const std::string& reg, const std::string& ctx) {
    static const auto units = bus::make_lab_units();
    for (const auto& [id, block] : units) {
        if (id != unit) continue;
        try {
            (void)block->spec(reg);
            return;
        } catch (const Error& e) {
            throw ConfigError(ctx + ": " + e.what());
        }
    }
    throw ConfigError(ctx + ": unit id " + std::to_string(unit) + " is not served");
}

se::MeasurementKind parse_kind(const std::string& s, const std::string& ctx) {
    if (s == "voltage") return se::MeasurementKind::voltage;
    if (s == "p_injection") return se::MeasurementKind::p_injection;
    if (s == "q_injection") return se::MeasurementKind::q_injection;
    if (s == "p_flow") return se::MeasurementKind::p_flow;
    if (s == "q_flow") return se::MeasurementKind::q_flow;
    throw ConfigError(ctx + ": unknown measurement kind '" + s + "'");
}

pf::BranchSide parse_side(const json& j, const std::string& ctx) {
    const std::string s = j.value("side", "to");
    if (s == "from") return pf::BranchSide::from;
    if (s == "to") return pf::BranchSide::to;
    throw ConfigError(ctx + ": side must be 'from' or 'to'");
}

}  // namespace

Scenario parse_scenario_json(const std::string& text, const std::string& base_dir) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("scenario JSON parse error: ") + e.what());
    }

    Scenario sc;
    sc.name = j.value("name", "scenario");
    const std::string ctx = "scenario '" + sc.name + "'";

    sc.network = net::load_network_json(
        resolve_path(base_dir, require_str(j, "network", ctx)));

    sc.t0_s = j.value("t0_s", 0.0);
    sc.t_end_s = require_num(j, "t_end_s", ctx);
    sc.cycle_s = j.value("cycle_s", 15.0);
    sc.seed = static_cast<std::uint32_t>(j.value("seed", 1.0));
    sc.noise_scale = j.value("noise_scale", 0.0);

    if (j.contains("voltage_band")) {
        const json& b = j.at("voltage_band");
        sc.band.v_min_pu = require_num(b, "v_min_pu", ctx + " voltage_band");
        sc.band.v_max_pu = require_num(b, "v_max_pu", ctx + " voltage_band");
    }

    const json& series = require_field(j, "series", ctx);
    sc.irradiance_wm2 = parse_series(series, "irradiance_wm2", base_dir, ctx);
    sc.temperature_c = parse_series(series, "temperature_c", base_dir, ctx);

    for (const json& jl : j.value("loads", json::array())) {
        LoadPoint lp;
        lp.bus = resolve_bus(sc.network, jl, "bus", ctx + " load");
        lp.p_kw = parse_series(jl, "p_kw", base_dir, ctx + " load");
        lp.q_kvar = parse_series(jl, "q_kvar", base_dir, ctx + " load", 0.0);
        sc.loads.push_back(std::move(lp));
    }

    for (const json& je : j.value("events", json::array())) {
        Event ev;
        ev.t_s = require_num(je, "t_s", ctx + " event");
        const std::string kind = require_str(je, "kind", ctx + " event");
        if (kind == "ev_plug_in") ev.kind = Event::Kind::ev_plug_in;
        else if (kind == "ev_unplug") ev.kind = Event::Kind::ev_unplug;
        else throw ConfigError(ctx + ": unknown event kind '" + kind + "'");
        sc.events.push_back(ev);
    }
    std::stable_sort(sc.events.begin(), sc.events.end(),
                     [](const Event& a, const Event& b) { return a.t_s < b.t_s; });

    for (const json& jf : j.value("flow_limits", json::array())) {
        BranchSchedule bs;
        bs.branch = resolve_branch(sc.network, jf, ctx + " flow_limit");
        for (const json& ji : require_field(jf, "intervals", ctx + " flow_limit")) {
            LimitInterval iv;
            iv.t_begin_s = require_num(ji, "t_begin_s", ctx + " flow_limit interval");
            iv.t_end_s = require_num(ji, "t_end_s", ctx + " flow_limit interval");
            iv.s_max_kva = require_num(ji, "s_max_kva", ctx + " flow_limit interval");
            bs.intervals.push_back(iv);
        }
        sc.schedule.add(std::move(bs));
    }

    {
        const json& jo = require_field(j, "oltc", ctx);
        sc.oltc.id = jo.value("id", "oltc");
        sc.oltc.branch = resolve_branch(sc.network, jo, ctx + " oltc");
    }
    {
        const json& jp = require_field(j, "pv", ctx);
        sc.pv.id = jp.value("id", "pv");
        sc.pv.bus = resolve_bus(sc.network, jp, "bus", ctx + " pv");
        sc.pv.spec.p_ref_kw = require_num(jp, "p_ref_kw", ctx + " pv");
        sc.pv.spec.s_max_kva = require_num(jp, "s_max_kva", ctx + " pv");
        sc.pv.spec.e_ref_wm2 = jp.value("e_ref_wm2", sc.pv.spec.e_ref_wm2);
        sc.pv.spec.alpha_per_k = jp.value("alpha_per_k", sc.pv.spec.alpha_per_k);
        sc.pv.spec.t_ref_c = jp.value("t_ref_c", sc.pv.spec.t_ref_c);
        sc.pv.spec.eta_inverter = jp.value("eta_inverter", sc.pv.spec.eta_inverter);
        sc.pv.spec.sin_phi_max = jp.value("sin_phi_max", sc.pv.spec.sin_phi_max);
        sc.pv.spec.overload_headroom =
            jp.value("overload_headroom", sc.pv.spec.overload_headroom);
        sc.pv.cost_p = jp.value("cost_p", sc.pv.cost_p);
        sc.pv.cost_q = jp.value("cost_q", sc.pv.cost_q);
    }
    {
        const json& jb = require_field(j, "bss", ctx);
        sc.bss.id = jb.value("id", "bss");
        sc.bss.bus = resolve_bus(sc.network, jb, "bus", ctx + " bss");
        sc.bss.spec.e_max_kwh = require_num(jb, "e_max_kwh", ctx + " bss");
        sc.bss.spec.e_min_kwh = jb.value("e_min_kwh", 0.0);
        sc.bss.spec.s_max_kva = require_num(jb, "s_max_kva", ctx + " bss");
        sc.bss.spec.sin_phi_max = jb.value("sin_phi_max", sc.bss.spec.sin_phi_max);
        sc.bss.spec.target_literal =
            jb.value("target_literal", sc.bss.spec.target_literal);
        sc.bss.e0_kwh = require_num(jb, "e0_kwh", ctx + " bss");
        sc.bss.target_dt_h = jb.value("target_dt_h", sc.bss.target_dt_h);
        sc.bss.cost_p = jb.value("cost_p", sc.bss.cost_p);
        sc.bss.cost_q = jb.value("cost_q", sc.bss.cost_q);
    }
    {
        const json& jc = require_field(j, "cs", ctx);
        sc.ev.id = jc.value("id", "cs");
        sc.ev.bus = resolve_bus(sc.network, jc, "bus", ctx + " cs");
        sc.ev.spec.i_min_a = static_cast<int>(jc.value("i_min_a", 6.0));
        sc.ev.spec.i_max_a = static_cast<int>(jc.value("i_max_a", 16.0));
        sc.ev.spec.v_nom_volts = jc.value("v_nom_volts", sc.ev.spec.v_nom_volts);
        sc.ev.cost_p = jc.value("cost_p", sc.ev.cost_p);
        sc.ev.cost_q = jc.value("cost_q", sc.ev.cost_q);
        if (jc.contains("voltage_unit")) {
            sc.ev.v_unit = unit_id_by_name(require_str(jc, "voltage_unit", ctx + " cs"),
                                           ctx + " cs");
            sc.ev.v_reg = jc.value("voltage_register", "voltage_pu");
            check_register(sc.ev.v_unit, sc.ev.v_reg, ctx + " cs");
        }
    }

    for (const json& jm : j.value("meters", json::array())) {
        MeterBinding mb;
        mb.unit = unit_id_by_name(require_str(jm, "unit", ctx + " meter"), ctx + " meter");
        mb.branch = resolve_branch(sc.network, jm, ctx + " meter");
        mb.side = parse_side(jm, ctx + " meter");
        mb.bus = resolve_bus(sc.network, jm, "bus", ctx + " meter");
        sc.meters.push_back(mb);
    }

    for (const json& jm : j.value("measurements", json::array())) {
        MeasurementPlan mp;
        const std::string mctx = ctx + " measurement";
        mp.proto.kind = parse_kind(require_str(jm, "kind", mctx), mctx);
        switch (mp.proto.kind) {
            case se::MeasurementKind::voltage:
            case se::MeasurementKind::p_injection:
            case se::MeasurementKind::q_injection:
                mp.proto.bus = resolve_bus(sc.network, jm, "bus", mctx);
                mp.proto.variance = jm.value(
                    "variance",
                    mp.proto.kind == se::MeasurementKind::voltage ? 1e-6 : 1e-5);
                break;
            case se::MeasurementKind::p_flow:
            case se::MeasurementKind::q_flow:
                mp.proto.branch = resolve_branch(sc.network, jm, mctx);
                mp.proto.side = parse_side(jm, mctx);
                mp.proto.variance = jm.value("variance", 1e-5);
                break;
        }
        if (jm.contains("pseudo")) {
            mp.source.pseudo = true;
            const json& f = jm.at("pseudo");
            if (!f.is_number())
                throw ConfigError(mctx + ": 'pseudo' must be the fixed value");
            mp.source.value = f.get<double>();
        } else {
            mp.source.unit =
                unit_id_by_name(require_str(jm, "unit", mctx), mctx);
            mp.source.reg = require_str(jm, "register", mctx);
            check_register(mp.source.unit, mp.source.reg, mctx);
        }
        sc.measurements.push_back(std::move(mp));
    }

    if (j.contains("bus_endpoint")) {
        const json& je = j.at("bus_endpoint");
        sc.bus_host = je.value("host", sc.bus_host);
        sc.bus_port = static_cast<std::uint16_t>(je.value("port", 0.0));
    }

    sc.validate();
    return sc;
}

Scenario load_scenario_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_scenario_json(buf.str(),
                               std::filesystem::path(path).parent_path().string());
}

// ---------------------------------------------------------------------------
// Plant

Plant::Plant(const Scenario& sc, RunMode mode, pf::PFOptions pf_options)
    : sc_(sc), mode_(mode), pf_opts_(pf_options), net_(sc.network) {
    const auto& tap = net_.branches[static_cast<std::size_t>(sc_.oltc.branch)].tap;
    if (!tap) throw ConfigError("plant: oltc branch has no tap changer");
    tap_position_ = tap->position;
    bss_state_.e_kwh = sc_.bss.e0_kwh;
    units_ = bus::make_lab_units();

    auto oltc = unit(bus::kUnitOltc);
    oltc->set_word("tap_position", tap_position_);
    oltc->set_word("tap_min", tap->min_position);
    oltc->set_word("tap_max", tap->max_position);
    oltc->set_analog("tap_step_pu", tap->step_pu);

    auto pv = unit(bus::kUnitPv);
    // Released until the first dispatch: an uncommanded inverter tracks
    // whatever is available.
    pv->set_analog("p_set_kw", -sc_.pv.spec.s_max_kva);
    pv->set_analog("q_set_kvar", 0.0);

    auto cs = unit(bus::kUnitCs);
    cs->set_word("i_set_a", 0);
    cs->set_word("i_min_a", sc_.ev.spec.i_min_a);
    cs->set_word("i_max_a", sc_.ev.spec.i_max_a);
    cs->set_word("vehicle_state", 0);

    auto bss = unit(bus::kUnitBss);
    bss->set_analog("soc_kwh", bss_state_.e_kwh);
    bss->set_analog("e_min_kwh", sc_.bss.spec.e_min_kwh);
    bss->set_analog("e_max_kwh", sc_.bss.spec.e_max_kwh);
    bss->set_analog("s_max_kva", sc_.bss.spec.s_max_kva);
    bss->set_analog("p_set_kw", 0.0);
    bss->set_analog("q_set_kvar", 0.0);

    unit(bus::kUnitEnv)->set_word("sync", 0);
}

std::shared_ptr<bus::RegisterBlock> Plant::unit(int unit_id) const {
    for (const auto& [id, block] : units_) {
        if (id == unit_id) return block;
    }
    throw ConfigError("plant: no unit with id " + std::to_string(unit_id));
}

void Plant::apply_events(double t_s) {
    auto cs = unit(bus::kUnitCs);
    while (next_event_ < sc_.events.size() &&
           sc_.events[next_event_].t_s <= t_s + kTimeTol) {
        const Event& ev = sc_.events[next_event_++];
        if (ev.kind == Event::Kind::ev_plug_in) {
            ev_connected_ = true;
            // Station default: a freshly plugged car draws the full current
            // until the coordinator says otherwise.
            cs->set_word("i_set_a", sc_.ev.spec.i_max_a);
        } else {
            ev_connected_ = false;
            cs->set_word("i_set_a", 0);
        }
    }
}

void Plant::step(double t_s) {
    apply_events(t_s);

    auto oltc = unit(bus::kUnitOltc);
    auto pv = unit(bus::kUnitPv);
    auto cs = unit(bus::kUnitCs);
    auto bss = unit(bus::kUnitBss);
    auto env = unit(bus::kUnitEnv);

    const double irradiance = sc_.irradiance_wm2.at(t_s);
    const double temperature = sc_.temperature_c.at(t_s);
    const double avail_kw = assets::pv_available_kw(sc_.pv.spec, irradiance, temperature);

    const auto& tap_spec =
        *net_.branches[static_cast<std::size_t>(sc_.oltc.branch)].tap;
    if (mode_ == RunMode::controlled) {
        // End stops: commanded positions beyond the range move to the stop.
        const int wanted = std::clamp(oltc->word("tap_position"),
                                      tap_spec.min_position, tap_spec.max_position);
        if (wanted != tap_position_) {
            net_ = net::apply_tap(net_, sc_.oltc.branch, wanted);
            tap_position_ = wanted;
        }
    }

    double pv_set_p = -avail_kw;
    double pv_set_q = 0.0;
    if (mode_ == RunMode::controlled) {
        pv_set_p = pv->analog("p_set_kw");
        pv_set_q = pv->analog("q_set_kvar");
    }
    const double pv_q_cap = sc_.pv.spec.s_max_kva * sc_.pv.spec.sin_phi_max;
    const double pv_p = std::clamp(pv_set_p, -avail_kw, 0.0);
    const double pv_q = std::clamp(pv_set_q, -pv_q_cap, pv_q_cap);

    double bss_set_p = 0.0;
    double bss_set_q = 0.0;
    if (mode_ == RunMode::controlled) {
        bss_set_p = bss->analog("p_set_kw");
        bss_set_q = bss->analog("q_set_kvar");
    }
    const double bss_q_cap = sc_.bss.spec.s_max_kva * sc_.bss.spec.sin_phi_max;
    const double bss_bounded =
        std::clamp(bss_set_p, -sc_.bss.spec.s_max_kva, sc_.bss.spec.s_max_kva);
    const double e_before = bss_state_.e_kwh;
    const double dt_h = sc_.cycle_s / 3600.0;
    const double bss_p = assets::battery_step(sc_.bss.spec, bss_state_, bss_bounded, dt_h);
    const double bss_q = std::clamp(bss_set_q, -bss_q_cap, bss_q_cap);

    int i_set = cs->word("i_set_a");
    if (mode_ == RunMode::reference) i_set = sc_.ev.spec.i_max_a;
    const int ev_i = ev_connected_
                         ? std::clamp(i_set, sc_.ev.spec.i_min_a, sc_.ev.spec.i_max_a)
                         : 0;
    const double ev_v =
        have_prev_ ? v_prev_(sc_.ev.bus) : 1.0;  // last solved voltage
    const double ev_p = assets::ev_power_kw(sc_.ev.spec, ev_v, ev_i);

    pf::InjectionSpec inj(static_cast<int>(net_.buses.size()));
    double load_p = 0.0, load_q = 0.0;
    for (const LoadPoint& lp : sc_.loads) {
        const double p = lp.p_kw.at(t_s);
        const double q = lp.q_kvar.at(t_s);
        inj.add(lp.bus, p, q);
        load_p += p;
        load_q += q;
    }
    inj.add(sc_.pv.bus, pv_p, pv_q);
    inj.add(sc_.bss.bus, bss_p, bss_q);
    inj.add(sc_.ev.bus, ev_p, 0.0);

    pf::PFOptions opts = pf_opts_;
    if (have_prev_) {
        opts.flat_start = false;
        opts.v0_pu = v_prev_;
        opts.delta0_rad = delta_prev_;
    }
    const pf::PFSolution sol = pf::solve_pf(net_, inj, opts);
    if (!sol.converged)
        throw Error("plant power flow did not converge at t=" + fmt_time(t_s) + "s");

    v_prev_ = sol.v_pu;
    delta_prev_ = sol.delta_rad;
    have_prev_ = true;

    // Publish the read-only registers; setpoint registers stay untouched.
    env->set_analog("irradiance_wm2", irradiance);
    env->set_analog("temperature_c", temperature);
    env->set_word("sync", 1);

    const int oltc_bus = net_.index_of(
        net_.branches[static_cast<std::size_t>(sc_.oltc.branch)].to);
    oltc->set_word("tap_position", tap_position_);
    oltc->set_analog("voltage_pu", sol.v_pu(oltc_bus));

    pv->set_analog("voltage_pu", sol.v_pu(sc_.pv.bus));
    pv->set_analog("p_kw", pv_p);
    pv->set_analog("q_kvar", pv_q);
    pv->set_analog("p_max_kw", avail_kw);

    cs->set_word("vehicle_state", ev_connected_ ? (ev_i > 0 ? 2 : 1) : 0);
    cs->set_analog("p_kw", ev_p);

    const double bss_s = std::hypot(bss_p, bss_q);
    const double bss_v = sol.v_pu(sc_.bss.bus);
    const double bss_kv = net_.buses[static_cast<std::size_t>(sc_.bss.bus)].base_kv;
    bss->set_analog("soc_kwh", e_before);
    bss->set_analog("voltage_pu", bss_v);
    bss->set_analog("current_a",
                    bss_v > 1e-6 ? bss_s / (kSqrt3 * bss_kv * bss_v) : 0.0);
    bss->set_analog("p_kw", bss_p);
    bss->set_analog("q_kvar", bss_q);
    bss->set_analog("s_kva", bss_s);

    for (const MeterBinding& mb : sc_.meters) {
        auto meter = unit(mb.unit);
        const pf::BranchFlow& fl = sol.flows[static_cast<std::size_t>(mb.branch)];
        const Complex s = mb.side == pf::BranchSide::from ? fl.from_kva : fl.to_kva;
        const double mag = std::abs(s);
        const double v = sol.v_pu(mb.bus);
        const double kv = net_.buses[static_cast<std::size_t>(mb.bus)].base_kv;
        meter->set_analog("voltage_pu", v);
        meter->set_analog("p_kw", s.real());
        meter->set_analog("q_kvar", s.imag());
        meter->set_analog("s_kva", mag);
        meter->set_analog("cos_phi", mag > 1e-9 ? s.real() / mag : 1.0);
        meter->set_analog("current_a", v > 1e-6 ? mag / (kSqrt3 * kv * v) : 0.0);
    }

    last_ = TraceStep{};
    last_.t_s = t_s;
    last_.v_pu = sol.v_pu;
    last_.delta_rad = sol.delta_rad;
    last_.flows = sol.flows;
    last_.load_p_kw = load_p;
    last_.load_q_kvar = load_q;
    last_.irradiance_wm2 = irradiance;
    last_.temperature_c = temperature;
    last_.pv_avail_kw = avail_kw;
    last_.pv_p_kw = pv_p;
    last_.pv_q_kvar = pv_q;
    last_.pv_set_p_kw = pv_set_p;
    last_.pv_set_q_kvar = pv_set_q;
    last_.bss_p_kw = bss_p;
    last_.bss_q_kvar = bss_q;
    last_.bss_e_kwh = e_before;
    last_.bss_set_p_kw = bss_set_p;
    last_.bss_set_q_kvar = bss_set_q;
    last_.ev_connected = ev_connected_;
    last_.ev_i_set_a = i_set;
    last_.ev_i_a = ev_i;
    last_.ev_p_kw = ev_p;
    last_.tap_position = tap_position_;
}

// ---------------------------------------------------------------------------
// Controller-side register access, identical through both transports

namespace {

class RegisterIo {
public:
    virtual ~RegisterIo() = default;
    virtual double analog(int unit, const std::string& reg) = 0;
    virtual int word(int unit, const std::string& reg) = 0;
    virtual void write_analog(int unit, const std::string& reg, double value) = 0;
    virtual void write_word(int unit, const std::string& reg, int value) = 0;
};

// Direct block access. Writes go through the protocol-side span path so the
// access mode is enforced exactly as on the wire.
class BlockIo final : public RegisterIo {
public:
    explicit BlockIo(const Plant& plant) : plant_(plant) {}

    double analog(int unit, const std::string& reg) override {
        return plant_.unit(unit)->analog(reg);
    }
    int word(int unit, const std::string& reg) override {
        return plant_.unit(unit)->word(reg);
    }
    void write_analog(int unit, const std::string& reg, double value) override {
        auto block = plant_.unit(unit);
        const bus::RegisterSpec& spec = block->spec(reg);
        const auto words = bus::analog_words(value);
        raise(block->write_span(spec.address, {words[0], words[1]}), unit, reg);
    }
    void write_word(int unit, const std::string& reg, int value) override {
        auto block = plant_.unit(unit);
        const bus::RegisterSpec& spec = block->spec(reg);
        const auto word = static_cast<std::uint16_t>(static_cast<std::int16_t>(value));
        raise(block->write_span(spec.address, {word}), unit, reg);
    }

private:
    static void raise(bus::BusError err, int unit, const std::string& reg) {
        if (err == bus::BusError::none) return;
        const std::string what = "unit " + std::to_string(unit) + " register " + reg +
                                 ": " + bus::bus_error_name(err);
        if (err == bus::BusError::access_denied) throw bus::AccessDenied(what);
        throw ProtocolError(what);
    }

    const Plant& plant_;
};

class TcpIo final : public RegisterIo {
public:
    TcpIo(const Plant& plant, const std::string& host, std::uint16_t port)
        : plant_(plant), client_(host, port) {}

    double analog(int unit, const std::string& reg) override {
        return client_.read_analog(static_cast<std::uint8_t>(unit), address(unit, reg));
    }
    int word(int unit, const std::string& reg) override {
        return client_.read_word(static_cast<std::uint8_t>(unit), address(unit, reg));
    }
    void write_analog(int unit, const std::string& reg, double value) override {
        client_.write_analog(static_cast<std::uint8_t>(unit), address(unit, reg), value);
    }
    void write_word(int unit, const std::string& reg, int value) override {
        client_.write_word(static_cast<std::uint8_t>(unit), address(unit, reg), value);
    }

private:
    std::uint16_t address(int unit, const std::string& reg) {
        return plant_.unit(unit)->spec(reg).address;
    }

    const Plant& plant_;
    bus::BusClient client_;
};

std::vector<se::Measurement> collect_measurements(const Scenario& sc, RegisterIo& io,
                                                  std::mt19937& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<se::Measurement> out;
    out.reserve(sc.measurements.size());
    const double s_base = sc.network.s_base_kva;
    for (const MeasurementPlan& mp : sc.measurements) {
        se::Measurement m = mp.proto;
        if (mp.source.pseudo) {
            m.value = mp.source.value;
        } else {
            const double raw = io.analog(mp.source.unit, mp.source.reg);
            switch (m.kind) {
                case se::MeasurementKind::voltage:
                    m.value = raw;
                    break;
                case se::MeasurementKind::p_injection:
                case se::MeasurementKind::q_injection:
                    // Registers count consumption positive, the estimator
                    // counts injection into the grid positive.
                    m.value = -raw / s_base;
                    break;
                case se::MeasurementKind::p_flow:
                case se::MeasurementKind::q_flow:
                    m.value = raw / s_base;
                    break;
            }
            if (sc.noise_scale > 0.0)
                m.value += gauss(rng) * sc.noise_scale * std::sqrt(m.variance);
        }
        out.push_back(m);
    }
    return out;
}

ctrl::CycleInput build_cycle_input(const Scenario& sc, RegisterIo& io, double t_s,
                                   bool tapped_last, std::mt19937& rng) {
    ctrl::CycleInput in;
    in.t_s = t_s;
    in.measurements = collect_measurements(sc, io, rng);
    in.limits = sc.schedule.limits_at(t_s);

    const double irradiance = io.analog(bus::kUnitEnv, "irradiance_wm2");
    const double temperature = io.analog(bus::kUnitEnv, "temperature_c");
    const double avail_kw =
        assets::pv_available_kw(sc.pv.spec, irradiance, temperature);
    in.flex.push_back(assets::pv_flexibility(
        sc.pv.id, sc.pv.bus, sc.pv.spec, avail_kw, sc.pv.cost_p, sc.pv.cost_q,
        io.analog(bus::kUnitPv, "p_kw"), io.analog(bus::kUnitPv, "q_kvar")));

    assets::BatteryState bst;
    bst.e_kwh = io.analog(bus::kUnitBss, "soc_kwh");
    in.flex.push_back(assets::battery_flexibility(
        sc.bss.id, sc.bss.bus, sc.bss.spec, bst, sc.bss.target_dt_h, sc.bss.cost_p,
        sc.bss.cost_q, io.analog(bus::kUnitBss, "p_kw"),
        io.analog(bus::kUnitBss, "q_kvar")));

    assets::EvState est;
    est.connected = io.word(bus::kUnitCs, "vehicle_state") != 0;
    est.current_a = io.word(bus::kUnitCs, "i_set_a");
    const double ev_v = sc.ev.v_unit > 0 ? io.analog(sc.ev.v_unit, sc.ev.v_reg) : 1.0;
    in.flex.push_back(assets::ev_flexibility(sc.ev.id, sc.ev.bus, sc.ev.spec, est,
                                             ev_v, sc.ev.cost_p, sc.ev.cost_q,
                                             io.analog(bus::kUnitCs, "p_kw")));

    in.tap.asset_id = sc.oltc.id;
    in.tap.available = true;
    in.tap.position = io.word(bus::kUnitOltc, "tap_position");
    in.tap.min_position = io.word(bus::kUnitOltc, "tap_min");
    in.tap.max_position = io.word(bus::kUnitOltc, "tap_max");
    in.tap.stepped_last_cycle = tapped_last;

    in.ev.push_back(ctrl::EvDispatch{sc.ev.id, sc.ev.spec, sc.ev.bus});
    return in;
}

void apply_commands(const std::vector<ctrl::DispatchCommand>& commands,
                    const Scenario& sc, RegisterIo& io) {
    for (const ctrl::DispatchCommand& cmd : commands) {
        switch (cmd.kind) {
            case ctrl::DispatchCommand::Kind::setpoint: {
                int unit = 0;
                if (cmd.asset_id == sc.pv.id) unit = bus::kUnitPv;
                else if (cmd.asset_id == sc.bss.id) unit = bus::kUnitBss;
                else
                    throw ConfigError("setpoint command for unknown asset '" +
                                      cmd.asset_id + "'");
                io.write_analog(unit, "p_set_kw", cmd.p_kw);
                io.write_analog(unit, "q_set_kvar", cmd.q_kvar);
                break;
            }
            case ctrl::DispatchCommand::Kind::charging_current:
                if (cmd.asset_id != sc.ev.id)
                    throw ConfigError("charging command for unknown asset '" +
                                      cmd.asset_id + "'");
                io.write_word(bus::kUnitCs, "i_set_a", cmd.i_set_a);
                break;
            case ctrl::DispatchCommand::Kind::tap:
                if (cmd.asset_id != sc.oltc.id)
                    throw ConfigError("tap command for unknown asset '" +
                                      cmd.asset_id + "'");
                io.write_word(bus::kUnitOltc, "tap_position", cmd.tap_position);
                break;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Run loop

RunTrace run(const Scenario& sc, const RunOptions& opts) {
    sc.validate();

    Plant plant(sc, opts.mode, opts.pf);
    RunTrace trace;
    trace.mode = opts.mode;

    std::optional<bus::BusServer> server;
    std::unique_ptr<RegisterIo> io;
    if (opts.mode == RunMode::controlled) {
        if (opts.transport == Transport::bus) {
            server.emplace();
            for (const auto& [id, block] : plant.units()) server->add_unit(id, block);
            server->start(sc.bus_host, sc.bus_port);
            io = std::make_unique<TcpIo>(plant, sc.bus_host, server->port());
        } else {
            io = std::make_unique<BlockIo>(plant);
        }
    }

    ctrl::CycleConfig ccfg = opts.ctrl;
    ccfg.band = sc.band;

    std::mt19937 rng(sc.seed);
    bool tapped_last = false;
    const int n_steps = sc.steps();
    for (int k = 0; k < n_steps; ++k) {
        const double t = sc.time_at(k);
        plant.step(t);
        trace.steps.push_back(plant.last());
        if (opts.mode == RunMode::controlled && k + 1 < n_steps) {
            ctrl::CycleInput in = build_cycle_input(sc, *io, t, tapped_last, rng);
            ctrl::CycleLog log = ctrl::run_cycle(plant.network(), in, ccfg);
            apply_commands(log.commands, sc, *io);
            tapped_last = log.decision.kind == ctrl::ActionKind::tap_step;
            trace.cycles.push_back(std::move(log));
        }
    }

    io.reset();
    if (server) server->stop();
    return trace;
}

// ---------------------------------------------------------------------------
// Violations and metrics

namespace {

double flow_magnitude(const pf::BranchFlow& fl) {
    return std::max(std::abs(fl.from_kva), std::abs(fl.to_kva));
}

}  // namespace

ViolationSeries violation_series(const RunTrace& trace, const Scenario& sc) {
    const net::Network& net = sc.network;
    const int n = static_cast<int>(net.buses.size());
    const int slack = net.slack_index();
    const std::size_t steps = trace.steps.size();

    ViolationSeries out;
    out.t_s.reserve(steps);
    for (const TraceStep& st : trace.steps) out.t_s.push_back(st.t_s);

    for (int i = 0; i < n; ++i) {
        if (i == slack) continue;
        ElementSeries es;
        es.element = net.buses[static_cast<std::size_t>(i)].id;
        es.raw.resize(steps, 0);
        es.persistent.resize(steps, 0);
        for (std::size_t k = 0; k < steps; ++k) {
            const TraceStep& st = trace.steps[k];
            if (st.v_pu.size() != n)
                throw ConfigError("trace step has " + std::to_string(st.v_pu.size()) +
                                  " voltages for " + std::to_string(n) + " buses");
            const double v = st.v_pu(i);
            es.raw[k] = (v > sc.band.v_max_pu || v < sc.band.v_min_pu) ? 1 : 0;
        }
        for (std::size_t k = 1; k < steps; ++k)
            es.persistent[k] = (es.raw[k - 1] && es.raw[k]) ? 1 : 0;
        out.voltage.push_back(std::move(es));
    }

    for (const BranchSchedule& e : sc.schedule.entries()) {
        const auto& br = net.branches[static_cast<std::size_t>(e.branch)];
        ElementSeries es;
        es.element = br.from + "->" + br.to;
        es.raw.resize(steps, 0);
        es.persistent.resize(steps, 0);
        for (std::size_t k = 0; k < steps; ++k) {
            const TraceStep& st = trace.steps[k];
            if (st.flows.size() != net.branches.size())
                throw ConfigError("trace step is missing branch flows");
            const double s = flow_magnitude(st.flows[static_cast<std::size_t>(e.branch)]);
            es.raw[k] = s > sc.schedule.limit_for(e.branch, st.t_s) ? 1 : 0;
        }
        for (std::size_t k = 1; k < steps; ++k)
            es.persistent[k] = (es.raw[k - 1] && es.raw[k]) ? 1 : 0;
        out.flow.push_back(std::move(es));
    }
    return out;
}

MetricsReport compute_metrics(const RunTrace& controlled, const RunTrace& reference,
                              const Scenario& sc) {
    if (controlled.steps.empty() || reference.steps.empty())
        throw ConfigError("metrics need non-empty traces");
    if (controlled.steps.size() != reference.steps.size())
        throw ConfigError("metrics: traces have " +
                          std::to_string(controlled.steps.size()) + " and " +
                          std::to_string(reference.steps.size()) + " samples");
    for (std::size_t k = 0; k < controlled.steps.size(); ++k) {
        if (std::abs(controlled.steps[k].t_s - reference.steps[k].t_s) > kTimeTol)
            throw ConfigError("metrics: traces disagree on the time grid at sample " +
                              std::to_string(k));
    }

    const ViolationSeries vc = violation_series(controlled, sc);
    const ViolationSeries vr = violation_series(reference, sc);
    const std::size_t steps = controlled.steps.size();

    MetricsReport rep;
    rep.scenario = sc.name;
    rep.samples = static_cast<int>(steps);
    rep.cycle_s = sc.cycle_s;
    rep.voltage_total.element = "total";
    rep.flow_total.element = "total";

    const net::Network& net = sc.network;
    const int slack = net.slack_index();

    std::size_t vi = 0;
    for (int i = 0; i < static_cast<int>(net.buses.size()); ++i) {
        if (i == slack) continue;
        const ElementSeries& ec = vc.voltage[vi];
        const ElementSeries& er = vr.voltage[vi];
        ++vi;
        MetricEntry entry;
        entry.element = ec.element;
        for (std::size_t k = 0; k < steps; ++k) {
            const double v_ctrl = controlled.steps[k].v_pu(i);
            const double v_ref = reference.steps[k].v_pu(i);
            const double diff = std::abs(v_ctrl - v_ref);
            auto excess = [&](double v) {
                return std::max({v - sc.band.v_max_pu, sc.band.v_min_pu - v, 0.0});
            };
            if (ec.persistent[k]) {
                entry.n.controlled += 1;
                entry.a_excess.controlled += excess(v_ctrl);
                entry.a_literal.controlled += diff;
            }
            if (er.persistent[k]) {
                entry.n.reference += 1;
                entry.a_excess.reference += excess(v_ref);
                entry.a_literal.reference += diff;
            }
        }
        rep.voltage_total.n.reference += entry.n.reference;
        rep.voltage_total.n.controlled += entry.n.controlled;
        rep.voltage_total.a_excess.reference += entry.a_excess.reference;
        rep.voltage_total.a_excess.controlled += entry.a_excess.controlled;
        rep.voltage_total.a_literal.reference += entry.a_literal.reference;
        rep.voltage_total.a_literal.controlled += entry.a_literal.controlled;
        rep.voltage.push_back(std::move(entry));
    }

    std::size_t fi = 0;
    for (const BranchSchedule& e : sc.schedule.entries()) {
        const ElementSeries& ec = vc.flow[fi];
        const ElementSeries& er = vr.flow[fi];
        ++fi;
        MetricEntry entry;
        entry.element = ec.element;
        for (std::size_t k = 0; k < steps; ++k) {
            const double t = controlled.steps[k].t_s;
            const double limit = sc.schedule.limit_for(e.branch, t);
            const double s_ctrl =
                flow_magnitude(controlled.steps[k].flows[static_cast<std::size_t>(e.branch)]);
            const double s_ref =
                flow_magnitude(reference.steps[k].flows[static_cast<std::size_t>(e.branch)]);
            const double diff = std::abs(s_ctrl - s_ref);
            if (ec.persistent[k]) {
                entry.n.controlled += 1;
                entry.a_excess.controlled += std::max(s_ctrl - limit, 0.0);
                entry.a_literal.controlled += diff;
            }
            if (er.persistent[k]) {
                entry.n.reference += 1;
                entry.a_excess.reference += std::max(s_ref - limit, 0.0);
                entry.a_literal.reference += diff;
            }
        }
        rep.flow_total.n.reference += entry.n.reference;
        rep.flow_total.n.controlled += entry.n.controlled;
        rep.flow_total.a_excess.reference += entry.a_excess.reference;
        rep.flow_total.a_excess.controlled += entry.a_excess.controlled;
        rep.flow_total.a_literal.reference += entry.a_literal.reference;
        rep.flow_total.a_literal.controlled += entry.a_literal.controlled;
        rep.flow.push_back(std::move(entry));
    }
    return rep;
}

namespace {

using ordered = nlohmann::ordered_json;

ordered reduction(const MetricPair& p) {
    if (p.reference <= 0.0) return nullptr;
    return (p.reference - p.controlled) / p.reference * 100.0;
}

ordered entry_json(const MetricEntry& e) {
    ordered je;
    je["element"] = e.element;
    je["n"] = {{"reference", static_cast<long long>(std::llround(e.n.reference))},
               {"controlled", static_cast<long long>(std::llround(e.n.controlled))}};
    je["a_excess"] = {{"reference", e.a_excess.reference},
                      {"controlled", e.a_excess.controlled}};
    je["a_literal"] = {{"reference", e.a_literal.reference},
                       {"controlled", e.a_literal.controlled}};
    je["reduction_percent"] = {{"n", reduction(e.n)},
                               {"a_excess", reduction(e.a_excess)},
                               {"a_literal", reduction(e.a_literal)}};
    return je;
}

}  // namespace

std::string dump_metrics_json(const MetricsReport& report) {
    ordered j;
    j["scenario"] = report.scenario;
    j["samples"] = report.samples;
    j["cycle_s"] = report.cycle_s;
    j["voltage"] = ordered::array();
    for (const MetricEntry& e : report.voltage) j["voltage"].push_back(entry_json(e));
    j["flow"] = ordered::array();
    for (const MetricEntry& e : report.flow) j["flow"].push_back(entry_json(e));
    j["totals"] = {{"voltage", entry_json(report.voltage_total)},
                   {"flow", entry_json(report.flow_total)}};
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// File writers and readers

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write file: " + path);
    out << std::setprecision(17);
    return out;
}

const char* kTraceColumns[] = {
    "t_s",          "tap_position", "load_p_kw",    "load_q_kvar",
    "irradiance_wm2", "temperature_c", "pv_avail_kw", "pv_p_kw",
    "pv_q_kvar",    "pv_set_p_kw",  "pv_set_q_kvar", "bss_p_kw",
    "bss_q_kvar",   "bss_e_kwh",    "bss_set_p_kw", "bss_set_q_kvar",
    "ev_connected", "ev_i_set_a",   "ev_i_a",       "ev_p_kw",
};

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

void write_trace_csv(const std::string& path, const RunTrace& trace,
                     const net::Network& net) {
    std::ofstream out = open_out(path);

    for (const char* col : kTraceColumns) out << col << ',';
    bool first = true;
    for (const net::Bus& b : net.buses) {
        out << (first ? "" : ",") << "v:" << b.id << ",delta:" << b.id;
        first = false;
    }
    for (const net::Branch& br : net.branches) {
        const std::string tag = br.from + "->" + br.to;
        out << ",p_from:" << tag << ",q_from:" << tag << ",s_from:" << tag
            << ",s_to:" << tag;
    }
    out << '\n';

    for (const TraceStep& st : trace.steps) {
        out << st.t_s << ',' << st.tap_position << ',' << st.load_p_kw << ','
            << st.load_q_kvar << ',' << st.irradiance_wm2 << ',' << st.temperature_c
            << ',' << st.pv_avail_kw << ',' << st.pv_p_kw << ',' << st.pv_q_kvar << ','
            << st.pv_set_p_kw << ',' << st.pv_set_q_kvar << ',' << st.bss_p_kw << ','
            << st.bss_q_kvar << ',' << st.bss_e_kwh << ',' << st.bss_set_p_kw << ','
            << st.bss_set_q_kvar << ',' << (st.ev_connected ? 1 : 0) << ','
            << st.ev_i_set_a << ',' << st.ev_i_a << ',' << st.ev_p_kw;
        for (Eigen::Index i = 0; i < st.v_pu.size(); ++i)
            out << ',' << st.v_pu(i) << ',' << st.delta_rad(i);
        for (const pf::BranchFlow& fl : st.flows) {
            out << ',' << fl.from_kva.real() << ',' << fl.from_kva.imag() << ','
                << std::abs(fl.from_kva) << ',' << std::abs(fl.to_kva);
        }
        out << '\n';
    }
}

RunTrace load_trace_csv(const std::string& path, const net::Network& net) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open trace file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw ConfigError(path + ": empty trace");
    const std::vector<std::string> header = split_csv(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;

    auto need = [&](const std::string& name) {
        const auto it = col.find(name);
        if (it == col.end())
            throw ConfigError(path + ": missing column '" + name + "'");
        return it->second;
    };

    const int n = static_cast<int>(net.buses.size());
    RunTrace trace;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::vector<std::string> cells = split_csv(line);
        if (cells.size() != header.size())
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(header.size()) + " cells, got " +
                              std::to_string(cells.size()));
        auto num = [&](std::size_t idx) {
            try {
                return std::stod(cells[idx]);
            } catch (const std::exception&) {
                throw ConfigError(path + ":" + std::to_string(lineno) +
                                  ": non-numeric cell '" + cells[idx] + "'");
            }
        };

        TraceStep st;
        st.t_s = num(need("t_s"));
        st.tap_position = static_cast<int>(num(need("tap_position")));
        st.load_p_kw = num(need("load_p_kw"));
        st.load_q_kvar = num(need("load_q_kvar"));
        st.irradiance_wm2 = num(need("irradiance_wm2"));
        st.temperature_c = num(need("temperature_c"));
        st.pv_avail_kw = num(need("pv_avail_kw"));
        st.pv_p_kw = num(need("pv_p_kw"));
        st.pv_q_kvar = num(need("pv_q_kvar"));
        st.pv_set_p_kw = num(need("pv_set_p_kw"));
        st.pv_set_q_kvar = num(need("pv_set_q_kvar"));
        st.bss_p_kw = num(need("bss_p_kw"));
        st.bss_q_kvar = num(need("bss_q_kvar"));
        st.bss_e_kwh = num(need("bss_e_kwh"));
        st.bss_set_p_kw = num(need("bss_set_p_kw"));
        st.bss_set_q_kvar = num(need("bss_set_q_kvar"));
        st.ev_connected = num(need("ev_connected")) != 0.0;
        st.ev_i_set_a = static_cast<int>(num(need("ev_i_set_a")));
        st.ev_i_a = static_cast<int>(num(need("ev_i_a")));
        st.ev_p_kw = num(need("ev_p_kw"));

        st.v_pu.resize(n);
        st.delta_rad.resize(n);
        for (int i = 0; i < n; ++i) {
            const std::string& id = net.buses[static_cast<std::size_t>(i)].id;
            st.v_pu(i) = num(need("v:" + id));
            st.delta_rad(i) = num(need("delta:" + id));
        }
        for (const net::Branch& br : net.branches) {
            const std::string tag = br.from + "->" + br.to;
            pf::BranchFlow fl;
            fl.from_kva = Complex(num(need("p_from:" + tag)), num(need("q_from:" + tag)));
            fl.to_kva = Complex(num(need("s_to:" + tag)), 0.0);
            st.flows.push_back(fl);
        }
        trace.steps.push_back(std::move(st));
    }
    if (trace.steps.empty()) throw ConfigError(path + ": no samples");
    return trace;
}

void write_cycle_log_jsonl(const std::string& path, const RunTrace& trace) {
    std::ofstream out = open_out(path);
    for (const ctrl::CycleLog& log : trace.cycles)
        out << ctrl::dump_cycle_log_json(log) << '\n';
}

void write_comparison_csv(const std::string& path, const RunTrace& controlled,
                          const RunTrace& reference, const Scenario& sc) {
    if (controlled.steps.size() != reference.steps.size())
        throw ConfigError("comparison: traces have different lengths");
    std::ofstream out = open_out(path);

    const net::Network& net = sc.network;
    const int slack = net.slack_index();
    out << "t_s";
    for (int i = 0; i < static_cast<int>(net.buses.size()); ++i) {
        if (i == slack) continue;
        const std::string& id = net.buses[static_cast<std::size_t>(i)].id;
        out << ",v_ref:" << id << ",v_ctrl:" << id;
    }
    for (const BranchSchedule& e : sc.schedule.entries()) {
        const auto& br = net.branches[static_cast<std::size_t>(e.branch)];
        const std::string tag = br.from + "->" + br.to;
        out << ",s_ref:" << tag << ",s_ctrl:" << tag << ",s_limit:" << tag;
    }
    out << '\n';

    for (std::size_t k = 0; k < controlled.steps.size(); ++k) {
        const TraceStep& c = controlled.steps[k];
        const TraceStep& r = reference.steps[k];
        if (std::abs(c.t_s - r.t_s) > kTimeTol)
            throw ConfigError("comparison: traces disagree on the time grid");
        out << c.t_s;
        for (int i = 0; i < static_cast<int>(net.buses.size()); ++i) {
            if (i == slack) continue;
            out << ',' << r.v_pu(i) << ',' << c.v_pu(i);
        }
        for (const BranchSchedule& e : sc.schedule.entries()) {
            const auto bi = static_cast<std::size_t>(e.branch);
            out << ',' << flow_magnitude(r.flows[bi]) << ','
                << flow_magnitude(c.flows[bi]) << ','
                << sc.schedule.limit_for(e.branch, c.t_s);
        }
        out << '\n';
    }
}

void write_metrics_json(const std::string& path, const MetricsReport& report) {
    std::ofstream out = open_out(path);
    out << dump_metrics_json(report) << '\n';
}

}  // namespace ccm::sim
