#pragma once

// Closed-loop scenario engine: a simulated feeder (network, PV, battery,
// charging station, tap changer) publishes its measurements into register
// blocks, the coordination logic reads them back, and dispatch commands take
// effect one cycle later. Runs are deterministic for a given scenario and
// seed, in both transports (direct block access or TCP).

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ccm/assets.hpp"
#include "ccm/bus.hpp"
#include "ccm/ctrl.hpp"
#include "ccm/net.hpp"
#include "ccm/opf.hpp"
#include "ccm/pf.hpp"
#include "ccm/se.hpp"

namespace ccm::sim {

// Sampled time series with sample-and-hold semantics: at(t) returns the value
// of the last sample at or before t, and the first value before that.
class Series {
public:
    Series() = default;
    Series(std::vector<double> t_s, std::vector<double> values);
    static Series constant(double value);

    double at(double t_s) const;
    bool covers(double t0_s, double t1_s) const;
    std::size_t size() const { return t_.size(); }
    double front_t_s() const;
    double back_t_s() const;

private:
    std::vector<double> t_;
    std::vector<double> v_;
};

// CSV with a "time_s,value" header, one sample per line, strictly
// increasing times. Errors name the file and line.
Series load_series_csv(const std::string& path);

// Branch loading limits that change over the run. Intervals are half open,
// [t_begin_s, t_end_s), except that the final interval of a branch also
// serves queries at exactly its end time.
struct LimitInterval {
    double t_begin_s = 0.0;
    double t_end_s = 0.0;
    double s_max_kva = 0.0;
};

struct BranchSchedule {
    int branch = -1;
    std::vector<LimitInterval> intervals;
};

class LimitSchedule {
public:
    void add(BranchSchedule entry);
    const std::vector<BranchSchedule>& entries() const { return entries_; }

    // Per branch: intervals sorted, gap-free, non-overlapping, and covering
    // [t0_s, t_end_s]. Throws ConfigError otherwise.
    void validate(const net::Network& net, double t0_s, double t_end_s) const;

    std::vector<opf::BranchLimit> limits_at(double t_s) const;
    // NaN for branches without a schedule.
    double limit_for(int branch, double t_s) const;

private:
    std::vector<BranchSchedule> entries_;
};

struct Event {
    enum class Kind { ev_plug_in, ev_unplug };
    double t_s = 0.0;
    Kind kind = Kind::ev_plug_in;
};

struct OltcParams {
    std::string id = "oltc";
    int branch = -1;
};

struct PvParams {
    std::string id = "pv";
    int bus = -1;
    assets::PvSpec spec;
    double cost_p = 1000.0;
    double cost_q = 10.0;
};

struct BssParams {
    std::string id = "bss";
    int bus = -1;
    assets::BatterySpec spec;
    double e0_kwh = 0.0;
    // Horizon for the drift-back-to-midband target, decoupled from the cycle
    // period so the idle pull stays gentle.
    double target_dt_h = 0.25;
    double cost_p = 100.0;
    double cost_q = 1.0;
};

struct EvParams {
    std::string id = "cs";
    int bus = -1;
    assets::EvSpec spec;
    double cost_p = 10000.0;
    double cost_q = 0.0;
    // Where the coordinator reads the window voltage for current quantization.
    // Unit 0 means no source; a nominal 1.0 pu is used instead.
    int v_unit = 0;
    std::string v_reg;
};

struct LoadPoint {
    int bus = -1;
    Series p_kw;
    Series q_kvar;
};

// Where a measurement value comes from: a register on one of the served
// units, or a fixed pseudo-measurement (structural knowledge such as a
// zero-injection busbar). Register values are converted to the estimator's
// conventions by measurement kind.
struct MeasurementSource {
    int unit = 0;
    std::string reg;
    bool pseudo = false;
    double value = 0.0;
};

struct MeasurementPlan {
    se::Measurement proto;
    MeasurementSource source;
};

// Which branch terminal a power-quality meter unit reports.
struct MeterBinding {
    int unit = 0;
    int branch = -1;
    pf::BranchSide side = pf::BranchSide::to;
    int bus = -1;
};

struct Scenario {
    std::string name = "scenario";
    net::Network network;

    double t0_s = 0.0;
    double t_end_s = 0.0;
    double cycle_s = 15.0;
    std::uint32_t seed = 1;
    // Standard deviation multiplier for measurement noise at collection
    // time; 0 reads registers exactly.
    double noise_scale = 0.0;

    opf::VoltageBand band;
    Series irradiance_wm2;
    Series temperature_c;
    std::vector<LoadPoint> loads;
    std::vector<Event> events;
    LimitSchedule schedule;

    OltcParams oltc;
    PvParams pv;
    BssParams bss;
    EvParams ev;

    std::vector<MeasurementPlan> measurements;
    std::vector<MeterBinding> meters;

    std::string bus_host = "127.0.0.1";
    std::uint16_t bus_port = 0;

    int steps() const;
    double time_at(int k) const { return t0_s + k * cycle_s; }
    void validate() const;
};

// Series and network paths in the file are resolved relative to base_dir
// (for load_scenario_json, the scenario file's directory).
Scenario parse_scenario_json(const std::string& text, const std::string& base_dir);
Scenario load_scenario_json(const std::string& path);

enum class RunMode { reference, controlled };
enum class Transport { in_process, bus };

struct RunOptions {
    RunMode mode = RunMode::controlled;
    Transport transport = Transport::in_process;
    ctrl::CycleConfig ctrl;  // band is taken from the scenario
    pf::PFOptions pf;
};

struct TraceStep {
    double t_s = 0.0;
    Eigen::VectorXd v_pu;
    Eigen::VectorXd delta_rad;
    std::vector<pf::BranchFlow> flows;

    double load_p_kw = 0.0;
    double load_q_kvar = 0.0;
    double irradiance_wm2 = 0.0;
    double temperature_c = 0.0;

    double pv_avail_kw = 0.0;
    double pv_p_kw = 0.0;
    double pv_q_kvar = 0.0;
    double pv_set_p_kw = 0.0;
    double pv_set_q_kvar = 0.0;

    double bss_p_kw = 0.0;
    double bss_q_kvar = 0.0;
    double bss_e_kwh = 0.0;
    double bss_set_p_kw = 0.0;
    double bss_set_q_kvar = 0.0;

    bool ev_connected = false;
    int ev_i_set_a = 0;
    int ev_i_a = 0;
    double ev_p_kw = 0.0;

    int tap_position = 0;
};

struct RunTrace {
    RunMode mode = RunMode::reference;
    std::vector<TraceStep> steps;
    std::vector<ctrl::CycleLog> cycles;  // empty for reference runs
};

// The simulated feeder. step(t) applies whatever is in the writable
// registers (controlled mode) or the built-in policies (reference mode:
// full PV feed-in, battery idle, EV at maximum current once plugged, tap
// frozen), solves the power flow, and publishes the read-only registers.
class Plant {
public:
    Plant(const Scenario& sc, RunMode mode, pf::PFOptions pf_options = {});

    void step(double t_s);
    const TraceStep& last() const { return last_; }
    const net::Network& network() const { return net_; }

    const std::vector<std::pair<std::uint8_t, std::shared_ptr<bus::RegisterBlock>>>&
    units() const {
        return units_;
    }
    std::shared_ptr<bus::RegisterBlock> unit(int unit_id) const;

private:
    void apply_events(double t_s);

    const Scenario& sc_;
    RunMode mode_;
    pf::PFOptions pf_opts_;
    net::Network net_;
    int tap_position_;
    assets::BatteryState bss_state_;
    bool ev_connected_ = false;
    std::size_t next_event_ = 0;

    Eigen::VectorXd v_prev_;
    Eigen::VectorXd delta_prev_;
    bool have_prev_ = false;

    std::vector<std::pair<std::uint8_t, std::shared_ptr<bus::RegisterBlock>>> units_;
    TraceStep last_;
};

RunTrace run(const Scenario& sc, const RunOptions& opts = {});

// Raw and persistent violation flags per monitored element. A violation
// counts as persistent at step k when it was present at k-1 and k; the
// flow flags are evaluated against the limit active at each step.
struct ElementSeries {
    std::string element;
    std::vector<char> raw;
    std::vector<char> persistent;
};

struct ViolationSeries {
    std::vector<double> t_s;
    std::vector<ElementSeries> voltage;  // one per non-slack bus
    std::vector<ElementSeries> flow;     // one per scheduled branch
};

ViolationSeries violation_series(const RunTrace& trace, const Scenario& sc);

struct MetricPair {
    double reference = 0.0;
    double controlled = 0.0;
};

struct MetricEntry {
    std::string element;
    MetricPair n;          // persistent-violation counts
    MetricPair a_excess;   // sum of own-trace excess beyond the limit where persistent
    MetricPair a_literal;  // sum of |controlled - reference| where persistent
};

struct MetricsReport {
    std::string scenario;
    int samples = 0;
    double cycle_s = 0.0;
    std::vector<MetricEntry> voltage;
    std::vector<MetricEntry> flow;
    MetricEntry voltage_total;
    MetricEntry flow_total;
};

// Both traces must share the scenario's time grid; throws ConfigError on any
// timestamp mismatch. Reductions are derived at dump time, not stored.
MetricsReport compute_metrics(const RunTrace& controlled, const RunTrace& reference,
                              const Scenario& sc);
std::string dump_metrics_json(const MetricsReport& report);

void write_trace_csv(const std::string& path, const RunTrace& trace,
                     const net::Network& net);
// Rebuilds a trace from write_trace_csv output. Branch flows come back as
// magnitudes (enough for limit checks and metrics).
RunTrace load_trace_csv(const std::string& path, const net::Network& net);
void write_cycle_log_jsonl(const std::string& path, const RunTrace& trace);
void write_comparison_csv(const std::string& path, const RunTrace& controlled,
                          const RunTrace& reference, const Scenario& sc);
void write_metrics_json(const std::string& path, const MetricsReport& report);

}  // namespace ccm::sim
