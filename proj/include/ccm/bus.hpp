#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "ccm/common.hpp"

// Register bus: the hardware-independence layer between the controller and
// the assets. Every asset exposes a small register map over TCP; the
// controller only ever reads and writes registers, so swapping the simulated
// asset for lab hardware (or for a direct in-process call) changes nothing
// above this layer.
//
// Wire format, deliberately simpler than Modbus but role-equivalent:
//
//   uint16 length       bytes following this field (big-endian, like all of it)
//   uint16 transaction  echoed verbatim in the response
//   uint8  unit         which asset on this endpoint
//   uint8  op           0x01 read, 0x02 write; response = op | 0x80; 0xEE error
//   uint16 address      first register word
//   uint16 count        number of words
//   uint16 words[]      write request / read response: count words
//                       error response: one word, the error code
//
// Analog values travel as int32 fixed-point, value * 10^4, split into two
// words high-first. Integer registers are one word, two's complement.

namespace ccm::bus {

inline constexpr std::uint8_t kOpRead = 0x01;
inline constexpr std::uint8_t kOpWrite = 0x02;
inline constexpr std::uint8_t kOpResponseFlag = 0x80;
inline constexpr std::uint8_t kOpError = 0xEE;

// Most words one frame may carry; bounds the length field so a corrupt
// stream cannot make the server wait on a multi-kilobyte phantom body.
inline constexpr std::uint16_t kMaxWords = 125;

inline constexpr std::chrono::milliseconds kDefaultTimeout{500};

enum class BusError : std::uint16_t {
    none = 0,
    bad_op = 1,        // op byte is not a request the server knows
    bad_unit = 2,      // no asset with that unit id behind this endpoint
    bad_register = 3,  // span does not map onto whole, adjacent registers
    access_denied = 4, // write touching a read-only register
    malformed = 5,     // frame structure invalid (length, count, payload)
};

const char* bus_error_name(BusError code);

struct Frame {
    std::uint16_t transaction = 0;
    std::uint8_t unit = 0;
    std::uint8_t op = 0;
    std::uint16_t address = 0;
    std::uint16_t count = 0;
    std::vector<std::uint16_t> words; // payload; see layout comment above

    bool operator==(const Frame&) const = default;
};

// Serialization. encode_frame validates the same structural rules
// decode_frame enforces and throws ProtocolError on violation, so the pair
// is a bijection on the frames it accepts.
std::vector<std::uint8_t> encode_frame(const Frame& frame);
Frame decode_frame(const std::uint8_t* data, std::size_t size);

// Fixed-point analog codec. Values quantize to 1e-4 at the source, so an
// in-process reader and a bus client always see identical numbers.
std::int32_t to_fixed(double value); // throws LimitError beyond int32 range
double from_fixed(std::int32_t raw);
std::array<std::uint16_t, 2> analog_words(double value);
double analog_value(std::uint16_t hi, std::uint16_t lo);

enum class Access : std::uint8_t { read_only, read_write };

struct RegisterSpec {
    std::uint16_t address = 0;
    std::uint16_t words = 1; // 1 = integer register, 2 = fixed-point analog
    Access access = Access::read_only;
    std::string name;
    std::string unit; // display label for the docs table: "pu", "kW", ...
    std::string note;
};

// One asset's registers plus their current values. This is the shared state
// between the simulation (which sets measurements and reads setpoints by
// name) and the TCP server (which moves raw word spans). All access goes
// through one internal mutex, so a reader never observes a torn write.
class RegisterBlock {
public:
    RegisterBlock(std::string label, std::vector<RegisterSpec> registers);

    const std::string& label() const { return label_; }
    const std::vector<RegisterSpec>& registers() const { return registers_; }
    const RegisterSpec& spec(std::string_view name) const;

    // Application side, by register name. These bypass the access mode:
    // the provider owns its read-only registers.
    void set_analog(std::string_view name, double value);
    double analog(std::string_view name) const;
    void set_word(std::string_view name, int value);
    int word(std::string_view name) const;

    // Protocol side, by word span. A span is valid when it starts on a
    // register boundary and covers whole, address-adjacent registers.
    BusError read_span(std::uint16_t address, std::uint16_t count,
                       std::vector<std::uint16_t>& out) const;
    BusError write_span(std::uint16_t address,
                        const std::vector<std::uint16_t>& words);

    // Called after a protocol write commits, once per register written,
    // outside the store lock. Application-side setters do not trigger it.
    void set_write_hook(std::function<void(const RegisterSpec&)> hook);

private:
    // span walk helper; returns register indices or bad_register
    BusError resolve_span(std::uint16_t address, std::uint16_t count,
                          std::vector<std::size_t>& indices) const;

    std::string label_;
    std::vector<RegisterSpec> registers_;
    std::map<std::string, std::size_t, std::less<>> by_name_;
    std::map<std::uint16_t, std::size_t> by_address_;
    std::vector<std::uint16_t> store_;
    std::vector<std::size_t> offsets_;
    std::function<void(const RegisterSpec&)> write_hook_;
    mutable std::mutex mutex_;
};

// Register maps mirroring what each lab asset communicates. Values start
// at zero; the scenario populates them before serving.
std::shared_ptr<RegisterBlock> make_oltc_block();
std::shared_ptr<RegisterBlock> make_pv_block();
std::shared_ptr<RegisterBlock> make_cs_block();
std::shared_ptr<RegisterBlock> make_bss_block();
std::shared_ptr<RegisterBlock> make_meter_block(std::string label);
std::shared_ptr<RegisterBlock> make_env_block();

// Unit ids used for the lab feeder when everything shares one endpoint.
inline constexpr std::uint8_t kUnitOltc = 1;
inline constexpr std::uint8_t kUnitPv = 2;
inline constexpr std::uint8_t kUnitCs = 3;
inline constexpr std::uint8_t kUnitBss = 4;
inline constexpr std::uint8_t kUnitMeter007 = 5;
inline constexpr std::uint8_t kUnitMeter008 = 6;
inline constexpr std::uint8_t kUnitEnv = 7;

std::vector<std::pair<std::uint8_t, std::shared_ptr<RegisterBlock>>>
make_lab_units();

// The full register map as a markdown document (docs/register_map.md is
// this string; a test keeps them in sync).
std::string register_map_markdown();

// Errors a client can see, distinct so callers can react differently to a
// silent asset versus a refused command.
class BusTimeout : public ProtocolError {
public:
    explicit BusTimeout(const std::string& what) : ProtocolError(what) {}
};

class AccessDenied : public ProtocolError {
public:
    explicit AccessDenied(const std::string& what) : ProtocolError(what) {}
};

// TCP server. Register units, then start(); each connection is served on
// its own thread. A malformed but length-framed request gets an error
// response and the connection stays open; only an unframeable stream (bogus
// length field) forces a close.
class BusServer {
public:
    BusServer() = default;
    ~BusServer();
    BusServer(const BusServer&) = delete;
    BusServer& operator=(const BusServer&) = delete;

    // Call before start(); the unit table is immutable while running.
    void add_unit(std::uint8_t unit_id, std::shared_ptr<RegisterBlock> block);

    // Binds host:port and begins accepting. port 0 picks a free port,
    // readable via port() afterwards. Throws ProtocolError on bind failure.
    void start(const std::string& host, std::uint16_t port);
    void stop();

    bool running() const { return running_; }
    std::uint16_t port() const { return port_; }

private:
    void accept_loop();
    void serve_connection(int fd);
    Frame handle_request(const Frame& request) const;

    std::map<std::uint8_t, std::shared_ptr<RegisterBlock>> units_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::thread accept_thread_;
    std::mutex conn_mutex_;
    std::vector<std::thread> conn_threads_;
    std::vector<int> conn_fds_;
    std::atomic<bool> running_{false};
};

// Blocking TCP client, one request in flight at a time (calls from several
// threads serialize on an internal mutex). Every request either returns the
// matching response payload or throws: BusTimeout when the peer stays
// silent past the deadline, AccessDenied for refused writes, ProtocolError
// for everything else the peer rejects or garbles.
class BusClient {
public:
    BusClient(const std::string& host, std::uint16_t port,
              std::chrono::milliseconds timeout = kDefaultTimeout);
    ~BusClient();
    BusClient(const BusClient&) = delete;
    BusClient& operator=(const BusClient&) = delete;

    std::vector<std::uint16_t> read_words(std::uint8_t unit,
                                          std::uint16_t address,
                                          std::uint16_t count);
    void write_words(std::uint8_t unit, std::uint16_t address,
                     const std::vector<std::uint16_t>& words);

    double read_analog(std::uint8_t unit, std::uint16_t address);
    void write_analog(std::uint8_t unit, std::uint16_t address, double value);
    int read_word(std::uint8_t unit, std::uint16_t address);
    void write_word(std::uint8_t unit, std::uint16_t address, int value);

private:
    Frame transact(Frame request);

    int fd_ = -1;
    std::uint16_t next_transaction_ = 1;
    std::chrono::milliseconds timeout_;
    std::mutex mutex_;
};

} // namespace ccm::bus
