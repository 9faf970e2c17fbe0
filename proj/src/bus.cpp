#include "ccm/bus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace ccm::bus {

namespace {

constexpr std::size_t kMaxBody = 8 + 2 * std::size_t{kMaxWords};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}

std::string hex_addr(std::uint16_t address) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "0x%04X", address);
    return buf;
}

// Payload words a frame must carry, given its op and count field.
std::size_t expected_payload(std::uint8_t op, std::uint16_t count) {
    switch (op) {
    case kOpRead:
        return 0;
    case kOpWrite:
        return count;
    case kOpRead | kOpResponseFlag:
        return count;
    case kOpWrite | kOpResponseFlag:
        return 0;
    case kOpError:
        if (count != 1)
            throw ProtocolError("error frame must carry count 1");
        return 1;
    default:
        throw ProtocolError("unknown op byte");
    }
}

void validate_shape(const Frame& f) {
    if (f.count < 1 || f.count > kMaxWords)
        throw ProtocolError("count out of range");
    if (f.words.size() != expected_payload(f.op, f.count))
        throw ProtocolError("payload does not match op and count");
}

bool read_exact(int fd, std::uint8_t* buf, std::size_t n) {
    while (n > 0) {
        const ssize_t got = ::recv(fd, buf, n, 0);
        if (got == 0)
            return false;
        if (got < 0) {
            if (errno == EINTR)
                continue;
            return false;
        }
        buf += got;
        n -= static_cast<std::size_t>(got);
    }
    return true;
}

bool write_all(int fd, const std::uint8_t* buf, std::size_t n) {
    while (n > 0) {
        const ssize_t sent = ::send(fd, buf, n, MSG_NOSIGNAL);
        if (sent < 0) {
            if (errno == EINTR)
                continue;
            return false;
        }
        buf += sent;
        n -= static_cast<std::size_t>(sent);
    }
    return true;
}

Frame error_frame(std::uint16_t transaction, std::uint8_t unit,
                  std::uint16_t address, BusError code) {
    Frame f;
    f.transaction = transaction;
    f.unit = unit;
    f.op = kOpError;
    f.address = address;
    f.count = 1;
    f.words = {static_cast<std::uint16_t>(code)};
    return f;
}

} // namespace

const char* bus_error_name(BusError code) {
    switch (code) {
    case BusError::none:
        return "ok";
    case BusError::bad_op:
        return "bad_op";
    case BusError::bad_unit:
        return "bad_unit";
    case BusError::bad_register:
        return "bad_register";
    case BusError::access_denied:
        return "access_denied";
    case BusError::malformed:
        return "malformed";
    }
    return "unknown";
}

std::vector<std::uint8_t> encode_frame(const Frame& frame) {
    validate_shape(frame);
    const std::uint16_t length =
        static_cast<std::uint16_t>(8 + 2 * frame.words.size());
    std::vector<std::uint8_t> out;
    out.reserve(2u + length);
    put_u16(out, length);
    put_u16(out, frame.transaction);
    out.push_back(frame.unit);
    out.push_back(frame.op);
    put_u16(out, frame.address);
    put_u16(out, frame.count);
    for (const std::uint16_t w : frame.words)
        put_u16(out, w);
    return out;
}

Frame decode_frame(const std::uint8_t* data, std::size_t size) {
    if (size < 2)
        throw ProtocolError("frame shorter than its length prefix");
    const std::uint16_t length = get_u16(data);
    if (size != 2u + length)
        throw ProtocolError("frame length field disagrees with buffer size");
    if (length < 8)
        throw ProtocolError("frame body too short for the header");
    if (length % 2 != 0)
        throw ProtocolError("frame body must be whole words");
    Frame f;
    f.transaction = get_u16(data + 2);
    f.unit = data[4];
    f.op = data[5];
    f.address = get_u16(data + 6);
    f.count = get_u16(data + 8);
    const std::size_t payload = (length - 8u) / 2;
    f.words.resize(payload);
    for (std::size_t i = 0; i < payload; ++i)
        f.words[i] = get_u16(data + 10 + 2 * i);
    validate_shape(f);
    return f;
}

std::int32_t to_fixed(double value) {
    if (!std::isfinite(value))
        throw LimitError("analog value is not finite");
    const long long raw = std::llround(value * 1e4);
    if (raw < INT32_MIN || raw > INT32_MAX)
        throw LimitError("analog value " + std::to_string(value) +
                         " exceeds the +/-214748.3647 fixed-point range");
    return static_cast<std::int32_t>(raw);
}

double from_fixed(std::int32_t raw) { return raw / 1e4; }

std::array<std::uint16_t, 2> analog_words(double value) {
    const auto u = static_cast<std::uint32_t>(to_fixed(value));
    return {static_cast<std::uint16_t>(u >> 16),
            static_cast<std::uint16_t>(u & 0xFFFF)};
}

double analog_value(std::uint16_t hi, std::uint16_t lo) {
    const std::uint32_t u = (static_cast<std::uint32_t>(hi) << 16) | lo;
    return from_fixed(static_cast<std::int32_t>(u));
}

RegisterBlock::RegisterBlock(std::string label,
                             std::vector<RegisterSpec> registers)
    : label_(std::move(label)), registers_(std::move(registers)) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < registers_.size(); ++i) {
        const RegisterSpec& r = registers_[i];
        if (r.name.empty())
            throw ConfigError("register without a name in block " + label_);
        if (r.words != 1 && r.words != 2)
            throw ConfigError("register " + r.name + " must be 1 or 2 words");
        if (!by_name_.emplace(r.name, i).second)
            throw ConfigError("duplicate register name " + r.name);
        if (!by_address_.emplace(r.address, i).second)
            throw ConfigError("duplicate register address " +
                              hex_addr(r.address));
        offsets_.push_back(offset);
        offset += r.words;
    }
    // addresses may have gaps but must not overlap
    std::uint32_t prev_end = 0;
    for (const auto& [address, index] : by_address_) {
        if (address < prev_end)
            throw ConfigError("register " + registers_[index].name +
                              " overlaps its neighbour");
        prev_end = address + registers_[index].words;
    }
    store_.assign(offset, 0);
}

const RegisterSpec& RegisterBlock::spec(std::string_view name) const {
    const auto it = by_name_.find(name);
    if (it == by_name_.end())
        throw ConfigError("no register named " + std::string(name) + " on " +
                          label_);
    return registers_[it->second];
}

void RegisterBlock::set_analog(std::string_view name, double value) {
    const auto it = by_name_.find(name);
    if (it == by_name_.end() || registers_[it->second].words != 2)
        throw ConfigError("no analog register named " + std::string(name) +
                          " on " + label_);
    const auto w = analog_words(value);
    const std::size_t off = offsets_[it->second];
    std::lock_guard lock(mutex_);
    store_[off] = w[0];
    store_[off + 1] = w[1];
}

double RegisterBlock::analog(std::string_view name) const {
    const auto it = by_name_.find(name);
    if (it == by_name_.end() || registers_[it->second].words != 2)
        throw ConfigError("no analog register named " + std::string(name) +
                          " on " + label_);
    const std::size_t off = offsets_[it->second];
    std::lock_guard lock(mutex_);
    return analog_value(store_[off], store_[off + 1]);
}

void RegisterBlock::set_word(std::string_view name, int value) {
    const auto it = by_name_.find(name);
    if (it == by_name_.end() || registers_[it->second].words != 1)
        throw ConfigError("no word register named " + std::string(name) +
                          " on " + label_);
    if (value < INT16_MIN || value > INT16_MAX)
        throw LimitError("value " + std::to_string(value) +
                         " does not fit a 16-bit register");
    const std::size_t off = offsets_[it->second];
    std::lock_guard lock(mutex_);
    store_[off] = static_cast<std::uint16_t>(static_cast<std::int16_t>(value));
}

int RegisterBlock::word(std::string_view name) const {
    const auto it = by_name_.find(name);
    if (it == by_name_.end() || registers_[it->second].words != 1)
        throw ConfigError("no word register named " + std::string(name) +
                          " on " + label_);
    const std::size_t off = offsets_[it->second];
    std::lock_guard lock(mutex_);
    return static_cast<std::int16_t>(store_[off]);
}

BusError RegisterBlock::resolve_span(std::uint16_t address, std::uint16_t count,
                                     std::vector<std::size_t>& indices) const {
    indices.clear();
    if (count < 1)
        return BusError::bad_register;
    auto it = by_address_.find(address);
    std::uint32_t cursor = address;
    std::uint32_t remaining = count;
    while (remaining > 0) {
        if (it == by_address_.end() || it->first != cursor)
            return BusError::bad_register;
        const RegisterSpec& r = registers_[it->second];
        if (r.words > remaining)
            return BusError::bad_register; // span ends inside a register
        indices.push_back(it->second);
        cursor += r.words;
        remaining -= r.words;
        ++it;
    }
    return BusError::none;
}

BusError RegisterBlock::read_span(std::uint16_t address, std::uint16_t count,
                                  std::vector<std::uint16_t>& out) const {
    std::vector<std::size_t> indices;
    const BusError err = resolve_span(address, count, indices);
    if (err != BusError::none)
        return err;
    out.clear();
    out.reserve(count);
    std::lock_guard lock(mutex_);
    for (const std::size_t i : indices)
        for (std::uint16_t w = 0; w < registers_[i].words; ++w)
            out.push_back(store_[offsets_[i] + w]);
    return BusError::none;
}

BusError RegisterBlock::write_span(std::uint16_t address,
                                   const std::vector<std::uint16_t>& words) {
    std::vector<std::size_t> indices;
    if (words.size() > std::size_t{kMaxWords})
        return BusError::bad_register;
    const BusError err = resolve_span(
        address, static_cast<std::uint16_t>(words.size()), indices);
    if (err != BusError::none)
        return err;
    // all-or-nothing: refuse the whole span before touching anything
    for (const std::size_t i : indices)
        if (registers_[i].access != Access::read_write)
            return BusError::access_denied;
    std::function<void(const RegisterSpec&)> hook;
    {
        std::lock_guard lock(mutex_);
        std::size_t src = 0;
        for (const std::size_t i : indices)
            for (std::uint16_t w = 0; w < registers_[i].words; ++w)
                store_[offsets_[i] + w] = words[src++];
        hook = write_hook_;
    }
    if (hook)
        for (const std::size_t i : indices)
            hook(registers_[i]);
    return BusError::none;
}

void RegisterBlock::set_write_hook(
    std::function<void(const RegisterSpec&)> hook) {
    std::lock_guard lock(mutex_);
    write_hook_ = std::move(hook);
}

namespace {

RegisterSpec word_reg(std::uint16_t address, Access access, std::string name,
                      std::string unit, std::string note) {
    return {address, 1, access, std::move(name), std::move(unit),
            std::move(note)};
}

RegisterSpec analog_reg(std::uint16_t address, Access access, std::string name,
                        std::string unit, std::string note) {
    return {address, 2, access, std::move(name), std::move(unit),
            std::move(note)};
}

constexpr Access R = Access::read_only;
constexpr Access RW = Access::read_write;

} // namespace

std::shared_ptr<RegisterBlock> make_oltc_block() {
    return std::make_shared<RegisterBlock>(
        "on-load tap changer",
        std::vector<RegisterSpec>{
            word_reg(0x0000, RW, "tap_position", "step",
                     "commanded position, takes effect next cycle"),
            word_reg(0x0001, R, "tap_min", "step", "lower travel limit"),
            word_reg(0x0002, R, "tap_max", "step", "upper travel limit"),
            analog_reg(0x0010, R, "voltage_pu", "pu",
                       "phase-to-ground voltage, low-voltage side"),
            analog_reg(0x0012, R, "tap_step_pu", "pu",
                       "voltage change per tap step"),
        });
}

std::shared_ptr<RegisterBlock> make_pv_block() {
    return std::make_shared<RegisterBlock>(
        "pv inverter",
        std::vector<RegisterSpec>{
            analog_reg(0x0000, R, "voltage_pu", "pu",
                       "phase-to-ground voltage at the terminals"),
            analog_reg(0x0002, R, "p_kw", "kW",
                       "operating point, feed-in negative"),
            analog_reg(0x0004, R, "q_kvar", "kvar", "operating point"),
            analog_reg(0x0006, RW, "p_set_kw", "kW", "dispatch setpoint"),
            analog_reg(0x0008, RW, "q_set_kvar", "kvar", "dispatch setpoint"),
            analog_reg(0x000A, R, "p_max_kw", "kW",
                       "currently available active power"),
        });
}

std::shared_ptr<RegisterBlock> make_cs_block() {
    return std::make_shared<RegisterBlock>(
        "charging station",
        std::vector<RegisterSpec>{
            word_reg(0x0000, RW, "i_set_a", "A",
                     "charging current, integer amps per phase"),
            word_reg(0x0001, R, "i_min_a", "A", "smallest supported current"),
            word_reg(0x0002, R, "i_max_a", "A", "largest supported current"),
            word_reg(0x0003, R, "vehicle_state", "enum",
                     "0 none, 1 connected, 2 charging"),
            analog_reg(0x0010, R, "p_kw", "kW", "realized charging power"),
        });
}

std::shared_ptr<RegisterBlock> make_bss_block() {
    return std::make_shared<RegisterBlock>(
        "battery storage",
        std::vector<RegisterSpec>{
            analog_reg(0x0000, R, "soc_kwh", "kWh", "stored energy"),
            analog_reg(0x0002, R, "e_min_kwh", "kWh", "lower energy band"),
            analog_reg(0x0004, R, "e_max_kwh", "kWh", "upper energy band"),
            analog_reg(0x0006, R, "voltage_pu", "pu",
                       "phase-to-ground voltage at the terminals"),
            analog_reg(0x0008, R, "current_a", "A", "terminal current"),
            analog_reg(0x000A, R, "p_kw", "kW",
                       "operating point, charging positive"),
            analog_reg(0x000C, R, "q_kvar", "kvar", "operating point"),
            analog_reg(0x000E, R, "s_kva", "kVA", "apparent power"),
            analog_reg(0x0010, RW, "p_set_kw", "kW", "dispatch setpoint"),
            analog_reg(0x0012, RW, "q_set_kvar", "kvar", "dispatch setpoint"),
            analog_reg(0x0014, R, "s_max_kva", "kVA", "apparent power rating"),
        });
}

std::shared_ptr<RegisterBlock> make_meter_block(std::string label) {
    return std::make_shared<RegisterBlock>(
        std::move(label),
        std::vector<RegisterSpec>{
            analog_reg(0x0000, R, "current_a", "A", "line current"),
            analog_reg(0x0002, R, "voltage_pu", "pu",
                       "phase-to-ground voltage"),
            analog_reg(0x0004, R, "p_kw", "kW",
                       "active power through the device"),
            analog_reg(0x0006, R, "q_kvar", "kvar", "reactive power"),
            analog_reg(0x0008, R, "s_kva", "kVA", "apparent power"),
            analog_reg(0x000A, R, "cos_phi", "-", "power factor"),
        });
}

std::shared_ptr<RegisterBlock> make_env_block() {
    return std::make_shared<RegisterBlock>(
        "environment",
        std::vector<RegisterSpec>{
            analog_reg(0x0000, R, "temperature_c", "degC",
                       "module temperature"),
            analog_reg(0x0002, R, "irradiance_wm2", "W/m2",
                       "plane-of-array irradiance"),
            word_reg(0x0004, R, "sync", "bit",
                     "0 until the scenario run is released"),
        });
}

std::vector<std::pair<std::uint8_t, std::shared_ptr<RegisterBlock>>>
make_lab_units() {
    return {
        {kUnitOltc, make_oltc_block()},
        {kUnitPv, make_pv_block()},
        {kUnitCs, make_cs_block()},
        {kUnitBss, make_bss_block()},
        {kUnitMeter007, make_meter_block("meter busbar_007")},
        {kUnitMeter008, make_meter_block("meter busbar_008")},
        {kUnitEnv, make_env_block()},
    };
}

std::string register_map_markdown() {
    std::ostringstream out;
    out << "# Register map\n"
           "\n"
           "Simulated assets serve these registers over TCP; the controller\n"
           "talks to them exactly as it would talk to lab hardware. One\n"
           "endpoint can host several units (assets), addressed by unit id.\n"
           "\n"
           "## Wire format\n"
           "\n"
           "Big-endian throughout, length-prefixed:\n"
           "\n"
           "| Field | Bytes | Meaning |\n"
           "|---|---|---|\n"
           "| length | 2 | bytes following this field |\n"
           "| transaction | 2 | echoed in the response |\n"
           "| unit | 1 | asset id on this endpoint |\n"
           "| op | 1 | 0x01 read, 0x02 write; response = op OR 0x80; 0xEE "
           "error |\n"
           "| address | 2 | first register word |\n"
           "| count | 2 | number of words |\n"
           "| payload | 2n | write request / read response: count words; "
           "error response: one code word |\n"
           "\n"
           "Analog registers hold value x 10^4 as a signed 32-bit integer in\n"
           "two words, high word first (resolution 1e-4, range\n"
           "+/-214748.3647). Integer registers are one word, two's\n"
           "complement. A request may span several registers when it starts\n"
           "on a register boundary and covers whole, address-adjacent\n"
           "registers; a span is served atomically.\n"
           "\n"
           "Error codes: 1 bad_op, 2 bad_unit, 3 bad_register,\n"
           "4 access_denied, 5 malformed. Requests time out after 500 ms by\n"
           "default.\n";
    for (const auto& [unit_id, block] : make_lab_units()) {
        out << "\n## Unit " << static_cast<int>(unit_id) << ": "
            << block->label() << "\n\n";
        out << "| Address | Register | Words | Access | Unit | Note |\n"
               "|---|---|---|---|---|---|\n";
        for (const RegisterSpec& r : block->registers()) {
            out << "| " << hex_addr(r.address) << " | " << r.name << " | "
                << r.words << " | "
                << (r.access == Access::read_write ? "R/W" : "R") << " | "
                << r.unit << " | " << r.note << " |\n";
        }
    }
    return out.str();
}

BusServer::~BusServer() { stop(); }

void BusServer::add_unit(std::uint8_t unit_id,
                         std::shared_ptr<RegisterBlock> block) {
    if (running_)
        throw ProtocolError("cannot add units to a running server");
    if (!block)
        throw ProtocolError("null register block");
    if (!units_.emplace(unit_id, std::move(block)).second)
        throw ProtocolError("unit id " + std::to_string(unit_id) +
                            " already registered");
}

void BusServer::start(const std::string& host, std::uint16_t port) {
    if (running_)
        throw ProtocolError("server already running");
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0)
        throw ProtocolError(std::string("socket: ") + std::strerror(errno));
    const int yes = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw ProtocolError("not a numeric IPv4 address: " + host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) <
        0) {
        const std::string what = std::strerror(errno);
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw ProtocolError("bind " + host + ":" + std::to_string(port) +
                            ": " + what);
    }
    if (::listen(listen_fd_, 16) < 0) {
        const std::string what = std::strerror(errno);
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw ProtocolError("listen: " + what);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    accept_thread_ = std::thread(&BusServer::accept_loop, this);
}

void BusServer::stop() {
    if (!running_)
        return;
    running_ = false;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
    if (accept_thread_.joinable())
        accept_thread_.join();
    // no new connections can appear now
    for (const int fd : conn_fds_)
        ::shutdown(fd, SHUT_RDWR);
    for (std::thread& t : conn_threads_)
        if (t.joinable())
            t.join();
    for (const int fd : conn_fds_)
        ::close(fd);
    conn_threads_.clear();
    conn_fds_.clear();
}

void BusServer::accept_loop() {
    for (;;) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (running_ && errno == EINTR)
                continue;
            return;
        }
        std::lock_guard lock(conn_mutex_);
        conn_fds_.push_back(fd);
        conn_threads_.emplace_back(&BusServer::serve_connection, this, fd);
    }
}

void BusServer::serve_connection(int fd) {
    std::uint8_t head[2];
    std::vector<std::uint8_t> body;
    while (read_exact(fd, head, 2)) {
        const std::uint16_t length = get_u16(head);
        if (length > kMaxBody) {
            // length field cannot be trusted, so neither can the stream
            const auto reply =
                encode_frame(error_frame(0, 0, 0, BusError::malformed));
            write_all(fd, reply.data(), reply.size());
            break;
        }
        body.resize(length);
        if (length > 0 && !read_exact(fd, body.data(), length))
            break;
        const std::uint16_t txn = length >= 2 ? get_u16(body.data()) : 0;
        const std::uint8_t unit = length >= 3 ? body[2] : 0;
        Frame reply;
        if (length < 8 || length % 2 != 0) {
            reply = error_frame(txn, unit, 0, BusError::malformed);
        } else if (body[3] != kOpRead && body[3] != kOpWrite) {
            // responses and garbage op bytes alike: not a request
            reply = error_frame(txn, unit, get_u16(body.data() + 4),
                                BusError::bad_op);
        } else {
            std::vector<std::uint8_t> buf;
            buf.reserve(2u + length);
            buf.push_back(head[0]);
            buf.push_back(head[1]);
            buf.insert(buf.end(), body.begin(), body.end());
            try {
                reply = handle_request(decode_frame(buf.data(), buf.size()));
            } catch (const ProtocolError&) {
                reply = error_frame(txn, unit, get_u16(body.data() + 4),
                                    BusError::malformed);
            }
        }
        const auto bytes = encode_frame(reply);
        if (!write_all(fd, bytes.data(), bytes.size()))
            break;
    }
    ::shutdown(fd, SHUT_RDWR);
}

Frame BusServer::handle_request(const Frame& request) const {
    const auto it = units_.find(request.unit);
    if (it == units_.end())
        return error_frame(request.transaction, request.unit, request.address,
                           BusError::bad_unit);
    Frame reply;
    reply.transaction = request.transaction;
    reply.unit = request.unit;
    reply.address = request.address;
    if (request.op == kOpRead) {
        std::vector<std::uint16_t> words;
        const BusError err =
            it->second->read_span(request.address, request.count, words);
        if (err != BusError::none)
            return error_frame(request.transaction, request.unit,
                               request.address, err);
        reply.op = kOpRead | kOpResponseFlag;
        reply.count = request.count;
        reply.words = std::move(words);
    } else {
        const BusError err =
            it->second->write_span(request.address, request.words);
        if (err != BusError::none)
            return error_frame(request.transaction, request.unit,
                               request.address, err);
        reply.op = kOpWrite | kOpResponseFlag;
        reply.count = request.count;
    }
    return reply;
}

BusClient::BusClient(const std::string& host, std::uint16_t port,
                     std::chrono::milliseconds timeout)
    : timeout_(timeout) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0)
        throw ProtocolError(std::string("socket: ") + std::strerror(errno));
    const auto fail = [this](const std::string& what) {
        ::close(fd_);
        fd_ = -1;
        throw ProtocolError(what);
    };
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        fail("not a numeric IPv4 address: " + host);
    // connect under the same deadline as requests
    const int flags = ::fcntl(fd_, F_GETFL, 0);
    ::fcntl(fd_, F_SETFL, flags | O_NONBLOCK);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
        if (errno != EINPROGRESS)
            fail("connect " + host + ":" + std::to_string(port) + ": " +
                 std::strerror(errno));
        pollfd pfd{fd_, POLLOUT, 0};
        const int rc = ::poll(&pfd, 1, static_cast<int>(timeout_.count()));
        if (rc == 0) {
            ::close(fd_);
            fd_ = -1;
            throw BusTimeout("connect to " + host + ":" +
                             std::to_string(port) + " timed out");
        }
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd_, SOL_SOCKET, SO_ERROR, &err, &len);
        if (rc < 0 || err != 0)
            fail("connect " + host + ":" + std::to_string(port) + ": " +
                 std::strerror(err != 0 ? err : errno));
    }
    ::fcntl(fd_, F_SETFL, flags);
}

BusClient::~BusClient() {
    if (fd_ >= 0)
        ::close(fd_);
}

namespace {

// reads n bytes or throws; the deadline covers the whole response
void read_deadline(int fd, std::uint8_t* buf, std::size_t n,
                   std::chrono::steady_clock::time_point deadline) {
    while (n > 0) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
            deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0)
            throw BusTimeout("request timed out waiting for the response");
        pollfd pfd{fd, POLLIN, 0};
        const int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
        if (rc == 0)
            throw BusTimeout("request timed out waiting for the response");
        if (rc < 0) {
            if (errno == EINTR)
                continue;
            throw ProtocolError(std::string("poll: ") + std::strerror(errno));
        }
        const ssize_t got = ::recv(fd, buf, n, 0);
        if (got == 0)
            throw ProtocolError("connection closed by the server");
        if (got < 0) {
            if (errno == EINTR)
                continue;
            throw ProtocolError(std::string("recv: ") + std::strerror(errno));
        }
        buf += got;
        n -= static_cast<std::size_t>(got);
    }
}

} // namespace

Frame BusClient::transact(Frame request) {
    std::lock_guard lock(mutex_);
    request.transaction = next_transaction_++;
    const auto bytes = encode_frame(request);
    if (!write_all(fd_, bytes.data(), bytes.size()))
        throw ProtocolError(std::string("send: ") + std::strerror(errno));
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    std::uint8_t head[2];
    read_deadline(fd_, head, 2, deadline);
    const std::uint16_t length = get_u16(head);
    if (length < 8 || length > kMaxBody)
        throw ProtocolError("response length field out of range");
    std::vector<std::uint8_t> buf(2u + length);
    buf[0] = head[0];
    buf[1] = head[1];
    read_deadline(fd_, buf.data() + 2, length, deadline);
    const Frame reply = decode_frame(buf.data(), buf.size());
    if (reply.transaction != request.transaction)
        throw ProtocolError("response transaction id does not match");
    if (reply.op == kOpError) {
        const auto code = static_cast<BusError>(reply.words[0]);
        const std::string what = "unit " + std::to_string(request.unit) +
                                 " register " + hex_addr(request.address) +
                                 ": " + bus_error_name(code);
        if (code == BusError::access_denied)
            throw AccessDenied(what);
        throw ProtocolError(what);
    }
    if (reply.op != (request.op | kOpResponseFlag))
        throw ProtocolError("unexpected response op");
    if (reply.unit != request.unit || reply.address != request.address)
        throw ProtocolError("response does not match the request");
    return reply;
}

std::vector<std::uint16_t> BusClient::read_words(std::uint8_t unit,
                                                 std::uint16_t address,
                                                 std::uint16_t count) {
    Frame request;
    request.unit = unit;
    request.op = kOpRead;
    request.address = address;
    request.count = count;
    Frame reply = transact(std::move(request));
    if (reply.count != count || reply.words.size() != std::size_t{count})
        throw ProtocolError("short read response");
    return std::move(reply.words);
}

void BusClient::write_words(std::uint8_t unit, std::uint16_t address,
                            const std::vector<std::uint16_t>& words) {
    if (words.empty() || words.size() > std::size_t{kMaxWords})
        throw ProtocolError("write span must cover 1 to " +
                            std::to_string(kMaxWords) + " words");
    Frame request;
    request.unit = unit;
    request.op = kOpWrite;
    request.address = address;
    request.count = static_cast<std::uint16_t>(words.size());
    request.words = words;
    transact(std::move(request));
}

double BusClient::read_analog(std::uint8_t unit, std::uint16_t address) {
    const auto words = read_words(unit, address, 2);
    return analog_value(words[0], words[1]);
}

void BusClient::write_analog(std::uint8_t unit, std::uint16_t address,
                             double value) {
    const auto words = analog_words(value);
    write_words(unit, address, {words[0], words[1]});
}

int BusClient::read_word(std::uint8_t unit, std::uint16_t address) {
    const auto words = read_words(unit, address, 1);
    return static_cast<std::int16_t>(words[0]);
}

void BusClient::write_word(std::uint8_t unit, std::uint16_t address,
                           int value) {
    if (value < INT16_MIN || value > INT16_MAX)
        throw LimitError("value " + std::to_string(value) +
                         " does not fit a 16-bit register");
    write_words(unit, address,
                {static_cast<std::uint16_t>(static_cast<std::int16_t>(value))});
}

} // namespace ccm::bus
