#include "ccm/net.hpp"

#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <json.hpp>

namespace ccm::net {

int Network::index_of(const std::string& bus_id) const {
    for (size_t i = 0; i < buses.size(); ++i) {
        if (buses[i].id == bus_id) return static_cast<int>(i);
    }
    throw TopologyError("unknown bus id: " + bus_id);
}

int Network::slack_index() const {
    for (size_t i = 0; i < buses.size(); ++i) {
        if (buses[i].kind == BusKind::slack) return static_cast<int>(i);
    }
    throw TopologyError("network has no slack bus");
}

int Network::find_branch(const std::string& from, const std::string& to) const {
    for (size_t i = 0; i < branches.size(); ++i) {
        const Branch& b = branches[i];
        if ((b.from == from && b.to == to) || (b.from == to && b.to == from)) {
            return static_cast<int>(i);
        }
    }
    throw TopologyError("no branch between " + from + " and " + to);
}

double Network::z_base_ohm(int bus) const {
    const double kv = buses.at(static_cast<size_t>(bus)).base_kv;
    return kv * kv * 1000.0 / s_base_kva;
}

void Network::validate() const {
    if (s_base_kva <= 0.0) throw ConfigError("s_base_kva must be positive");
    if (buses.empty()) throw TopologyError("network has no buses");

    std::set<std::string> ids;
    int slack_count = 0;
    for (const Bus& bus : buses) {
        if (bus.id.empty()) throw TopologyError("bus with empty id");
        if (!ids.insert(bus.id).second) {
            throw TopologyError("duplicate bus id: " + bus.id);
        }
        if (bus.base_kv <= 0.0) {
            throw ConfigError("bus " + bus.id + ": base_kv must be positive");
        }
        if (bus.kind == BusKind::slack) ++slack_count;
    }
    if (slack_count != 1) {
        throw TopologyError("network must have exactly one slack bus, found " +
                            std::to_string(slack_count));
    }

    for (const Branch& br : branches) {
        const std::string tag = "branch " + br.from + "-" + br.to;
        if (!ids.count(br.from) || !ids.count(br.to)) {
            throw TopologyError(tag + ": unknown endpoint");
        }
        if (br.from == br.to) throw TopologyError(tag + ": self loop");
        if (br.r_ohm < 0.0) throw ConfigError(tag + ": negative resistance");
        if (br.r_ohm == 0.0 && br.x_ohm == 0.0) {
            throw TopologyError(tag + ": zero series impedance");
        }
        if (br.rating_kva < 0.0) throw ConfigError(tag + ": negative rating");
        if (br.tap) {
            const TapChanger& t = *br.tap;
            if (t.step_pu <= 0.0) throw ConfigError(tag + ": tap step must be positive");
            if (t.min_position > t.max_position ||
                t.neutral < t.min_position || t.neutral > t.max_position) {
                throw ConfigError(tag + ": tap neutral outside [min, max]");
            }
            if (t.position < t.min_position || t.position > t.max_position) {
                throw LimitError(tag + ": tap position outside limits");
            }
            if (br.kind != BranchKind::transformer) {
                throw ConfigError(tag + ": tap changer on a non-transformer branch");
            }
        }
    }

    // Connectivity via breadth-first search from bus 0.
    std::vector<std::vector<int>> adj(buses.size());
    for (const Branch& br : branches) {
        const int f = index_of(br.from);
        const int t = index_of(br.to);
        adj[static_cast<size_t>(f)].push_back(t);
        adj[static_cast<size_t>(t)].push_back(f);
    }
    std::vector<bool> seen(buses.size(), false);
    std::queue<int> frontier;
    frontier.push(0);
    seen[0] = true;
    while (!frontier.empty()) {
        const int u = frontier.front();
        frontier.pop();
        for (int v : adj[static_cast<size_t>(u)]) {
            if (!seen[static_cast<size_t>(v)]) {
                seen[static_cast<size_t>(v)] = true;
                frontier.push(v);
            }
        }
    }
    for (size_t i = 0; i < buses.size(); ++i) {
        if (!seen[i]) {
            throw TopologyError("network is disconnected: bus " + buses[i].id +
                                " unreachable from " + buses[0].id);
        }
    }
}

const std::vector<CableType>& cable_catalog() {
    static const std::vector<CableType> catalog = {
        {"NAYY 4x150 SE", 0.208, 0.080, 246.0},
        {"NAYY 4x25", 1.200, 0.082, 102.0},
        {"NYY-J 5x16 RE", 1.150, 0.090, 85.0},
        {"H07RN-F 5G6", 3.300, 0.100, 46.0},
    };
    return catalog;
}

const CableType& cable_by_name(const std::string& name) {
    for (const CableType& c : cable_catalog()) {
        if (c.name == name) return c;
    }
    throw ConfigError("unknown cable type: " + name);
}

Eigen::MatrixXcd build_admittance(const Network& net) {
    net.validate();
    const int n = static_cast<int>(net.buses.size());
    Eigen::MatrixXcd y_bus = Eigen::MatrixXcd::Zero(n, n);

    for (const Branch& br : net.branches) {
        const int f = net.index_of(br.from);
        const int t = net.index_of(br.to);
        const double z_base = net.z_base_ohm(t);
        const Complex z_pu(br.r_ohm / z_base, br.x_ohm / z_base);
        const Complex y = 1.0 / z_pu;
        const Complex y_sh(0.0, 0.5 * br.shunt_b_siemens * z_base);

        double a = 1.0;
        if (br.tap) {
            a = 1.0 + (br.tap->position - br.tap->neutral) * br.tap->step_pu;
        }
        y_bus(f, f) += (y + y_sh) * a * a;
        y_bus(f, t) += -y * a;
        y_bus(t, f) += -y * a;
        y_bus(t, t) += y + y_sh;
    }
    return y_bus;
}

Network apply_tap(const Network& net, int branch_index, int position) {
    Network out = net;
    if (branch_index < 0 || branch_index >= static_cast<int>(out.branches.size())) {
        throw ConfigError("branch index out of range");
    }
    Branch& br = out.branches[static_cast<size_t>(branch_index)];
    if (!br.tap) {
        throw ConfigError("branch " + br.from + "-" + br.to + " has no tap changer");
    }
    if (position < br.tap->min_position || position > br.tap->max_position) {
        throw LimitError("tap position " + std::to_string(position) +
                         " outside [" + std::to_string(br.tap->min_position) + ", " +
                         std::to_string(br.tap->max_position) + "]");
    }
    br.tap->position = position;
    return out;
}

namespace {

using nlohmann::json;

double require_number(const json& j, const std::string& key, const std::string& ctx) {
    if (!j.contains(key) || !j.at(key).is_number()) {
        throw ConfigError(ctx + ": missing or non-numeric field '" + key + "'");
    }
    return j.at(key).get<double>();
}

Branch parse_branch(const json& jb, const Network& net) {
    Branch br;
    if (!jb.contains("from") || !jb.contains("to")) {
        throw ConfigError("branch without from/to");
    }
    br.from = jb.at("from").get<std::string>();
    br.to = jb.at("to").get<std::string>();
    const std::string ctx = "branch " + br.from + "-" + br.to;

    const std::string kind = jb.value("kind", "cable");
    if (kind == "cable") {
        br.kind = BranchKind::cable;
    } else if (kind == "transformer") {
        br.kind = BranchKind::transformer;
    } else {
        throw ConfigError(ctx + ": unknown kind '" + kind + "'");
    }

    const double to_kv = net.buses[static_cast<size_t>(net.index_of(br.to))].base_kv;

    if (jb.contains("cable_type")) {
        const CableType& cable = cable_by_name(jb.at("cable_type").get<std::string>());
        const double km = require_number(jb, "length_km", ctx);
        if (km <= 0.0) throw ConfigError(ctx + ": length_km must be positive");
        br.r_ohm = cable.r_ohm_per_km * km;
        br.x_ohm = cable.x_ohm_per_km * km;
        br.rating_kva = kSqrt3 * to_kv * cable.ampacity_a;
    } else if (jb.contains("uk_percent")) {
        // Short-circuit voltage data; impedance referred to the to side.
        const double uk = require_number(jb, "uk_percent", ctx);
        const double ur = jb.value("ur_percent", 0.0);
        const double s_rated = require_number(jb, "s_rated_kva", ctx);
        if (s_rated <= 0.0) throw ConfigError(ctx + ": s_rated_kva must be positive");
        if (ur < 0.0 || ur > uk) throw ConfigError(ctx + ": need 0 <= ur_percent <= uk_percent");
        const double z_ref = to_kv * to_kv * 1000.0 / s_rated;
        const double z = uk / 100.0 * z_ref;
        const double r = ur / 100.0 * z_ref;
        br.r_ohm = r;
        br.x_ohm = std::sqrt(z * z - r * r);
        br.rating_kva = s_rated;
    } else {
        br.r_ohm = require_number(jb, "r_ohm", ctx);
        br.x_ohm = require_number(jb, "x_ohm", ctx);
        br.rating_kva = jb.value("rating_kva", 0.0);
    }
    if (jb.contains("rating_kva")) br.rating_kva = jb.at("rating_kva").get<double>();
    br.shunt_b_siemens = jb.value("shunt_b_siemens", 0.0);

    if (jb.contains("tap")) {
        const json& jt = jb.at("tap");
        TapChanger tap;
        tap.position = static_cast<int>(require_number(jt, "position", ctx));
        tap.neutral = static_cast<int>(require_number(jt, "neutral", ctx));
        tap.min_position = static_cast<int>(require_number(jt, "min", ctx));
        tap.max_position = static_cast<int>(require_number(jt, "max", ctx));
        tap.step_pu = require_number(jt, "step_pu", ctx);
        br.tap = tap;
    }
    return br;
}

} // namespace

Network parse_network_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("network JSON parse error: ") + e.what());
    }

    Network net;
    net.name = j.value("name", "network");
    net.s_base_kva = j.value("s_base_kva", 100.0);

    if (!j.contains("buses") || !j.at("buses").is_array()) {
        throw ConfigError("network JSON: missing 'buses' array");
    }
    for (const json& jb : j.at("buses")) {
        Bus bus;
        bus.id = jb.at("id").get<std::string>();
        bus.base_kv = require_number(jb, "base_kv", "bus " + bus.id);
        bus.kind = jb.value("slack", false) ? BusKind::slack : BusKind::load;
        net.buses.push_back(bus);
    }

    if (!j.contains("branches") || !j.at("branches").is_array()) {
        throw ConfigError("network JSON: missing 'branches' array");
    }
    for (const json& jb : j.at("branches")) {
        net.branches.push_back(parse_branch(jb, net));
    }

    net.validate();
    return net;
}

Network load_network_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open network file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_network_json(buf.str());
}

} // namespace ccm::net
