#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>

namespace ccm {

using Complex = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSqrt3 = 1.7320508075688772;

// Exceptions for unrecoverable misuse. Solver outcomes (divergence,
// infeasibility) are reported as status values on result structs instead,
// so callers can degrade gracefully.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent input data (JSON/CSV files, CLI arguments).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

// Structurally invalid network (unknown bus, disconnected graph, zero
// impedance, duplicate ids).
class TopologyError : public Error {
public:
    explicit TopologyError(const std::string& what) : Error(what) {}
};

// A commanded value outside its hard device range (e.g. tap position).
class LimitError : public Error {
public:
    explicit LimitError(const std::string& what) : Error(what) {}
};

// Register-bus failures: malformed frames, unknown units or registers,
// access violations, timeouts.
class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& what) : Error(what) {}
};

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

} // namespace ccm
