#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ccm/common.hpp"

namespace ccm::net {

enum class BusKind { slack, load };

struct Bus {
    std::string id;
    double base_kv = 0.4; // line-to-line voltage base
    BusKind kind = BusKind::load;
};

// On-load tap changer attached to a transformer branch. The ratio applied to
// the branch is 1 + (position - neutral) * step_pu, boosting the to-side
// (downstream) voltage; stepping down by one lowers downstream voltage by
// step_pu at no load.
struct TapChanger {
    int position = 0;
    int neutral = 0;
    int min_position = 0;
    int max_position = 0;
    double step_pu = 0.0;
};

enum class BranchKind { cable, transformer };

// Series impedance is given in ohms referred to the to-side voltage base.
// shunt_b_siemens is the total charging susceptance, split half per end.
struct Branch {
    std::string from;
    std::string to;
    BranchKind kind = BranchKind::cable;
    double r_ohm = 0.0;
    double x_ohm = 0.0;
    double shunt_b_siemens = 0.0;
    double rating_kva = 0.0; // thermal rating, metadata only; operational
                             // limits come from the scenario schedule
    std::optional<TapChanger> tap;
};

struct Network {
    std::string name;
    double s_base_kva = 100.0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;

    int index_of(const std::string& bus_id) const;
    int slack_index() const;
    int find_branch(const std::string& from, const std::string& to) const;
    double z_base_ohm(int bus) const; // base_kv^2 * 1000 / s_base_kva

    // Structural checks: unique non-empty ids, known endpoints, exactly one
    // slack, positive bases, nonzero series impedance, connected graph.
    // Throws TopologyError / ConfigError on violation.
    void validate() const;
};

// Typical manufacturer data for the cable types used by the shipped network
// (resistance/reactance per km at operating temperature, ampacity for
// direct burial / free air as appropriate).
struct CableType {
    std::string name;
    double r_ohm_per_km = 0.0;
    double x_ohm_per_km = 0.0;
    double ampacity_a = 0.0;
};

const std::vector<CableType>& cable_catalog();
const CableType& cable_by_name(const std::string& name);

// Nodal admittance matrix in per unit on (s_base_kva, per-bus base_kv).
// Transformer taps enter through the standard ideal-transformer-in-series
// stamp: with ratio a on the to side, the branch contributes
//   Y_ff += (y + jb/2) * a^2,  Y_ft = Y_tf -= y * a,  Y_tt += y + jb/2.
Eigen::MatrixXcd build_admittance(const Network& net);

// Returns a copy with the selected transformer moved to tap `position`.
// Throws LimitError when outside [min_position, max_position], ConfigError
// when the branch has no tap changer.
Network apply_tap(const Network& net, int branch_index, int position);

Network load_network_json(const std::string& path);
Network parse_network_json(const std::string& text);

} // namespace ccm::net
