#include "ugp/bridge.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <charconv>
#include <cstring>

#include "ugp/errors.hpp"

namespace ugp {

namespace {

static_assert(std::endian::native == std::endian::little, "wire codec assumes a little-endian host");

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  template <typename T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void text(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, MessageTag tag) : bytes_(bytes), tag_(tag) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::span<const std::uint8_t> rest() {
    auto r = bytes_.subspan(pos_);
    pos_ = bytes_.size();
    return r;
  }
  std::string rest_text() {
    auto r = rest();
    return std::string(r.begin(), r.end());
  }
  void finish() const {
    if (pos_ != bytes_.size()) {
      throw ProtocolError(std::string(tag_name(tag_)) + " payload has " + std::to_string(bytes_.size() - pos_) +
                          " trailing bytes");
    }
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ProtocolError(std::string(tag_name(tag_)) + " payload is truncated");
  }

  std::span<const std::uint8_t> bytes_;
  MessageTag tag_;
  std::size_t pos_ = 0;
};

std::uint32_t read_u32(const std::uint8_t* p) {
  std::uint32_t v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

std::string errno_text() { return std::strerror(errno); }

}  // namespace

MessageTag tag_of(const WireMessage& message) {
  return static_cast<MessageTag>(message.index() + 1);
}

std::string_view tag_name(MessageTag tag) {
  switch (tag) {
    case MessageTag::hello: return "HELLO";
    case MessageTag::hello_ack: return "HELLO_ACK";
    case MessageTag::reset: return "RESET";
    case MessageTag::step: return "STEP";
    case MessageTag::obs: return "OBS";
    case MessageTag::error: return "ERROR";
    case MessageTag::close: return "CLOSE";
  }
  return "UNKNOWN";
}

void encode_into(const WireMessage& message, std::vector<std::uint8_t>& out) {
  const std::size_t start = out.size();
  Writer w(out);
  w.put<std::uint32_t>(0);
  w.put(static_cast<std::uint8_t>(tag_of(message)));
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, wire::Hello>) {
          w.text(m.env_name);
        } else if constexpr (std::is_same_v<M, wire::HelloAck>) {
          w.put(m.action_count);
          w.put(m.height);
          w.put(m.width);
          w.put(m.channels);
        } else if constexpr (std::is_same_v<M, wire::Reset>) {
          w.put(m.seed);
        } else if constexpr (std::is_same_v<M, wire::Step>) {
          w.put(m.action);
        } else if constexpr (std::is_same_v<M, wire::Obs>) {
          if (m.pixels.size() != std::size_t{m.height} * m.width * m.channels) {
            throw ProtocolError("OBS pixel count " + std::to_string(m.pixels.size()) + " disagrees with dims " +
                                std::to_string(m.height) + "x" + std::to_string(m.width) + "x" +
                                std::to_string(m.channels));
          }
          w.put(m.reward);
          w.put(static_cast<std::uint8_t>(m.terminal ? 1 : 0));
          w.put(m.height);
          w.put(m.width);
          w.put(m.channels);
          w.bytes(m.pixels);
        } else if constexpr (std::is_same_v<M, wire::Error>) {
          w.put(m.code);
          w.text(m.text);
        }
      },
      message);
  const std::size_t body = out.size() - start - sizeof(std::uint32_t);
  if (body > FrameDecoder::kMaxFrame) throw ProtocolError("message exceeds the maximum frame size");
  const auto length = static_cast<std::uint32_t>(body);
  std::memcpy(out.data() + start, &length, sizeof length);
}

std::vector<std::uint8_t> encode(const WireMessage& message) {
  std::vector<std::uint8_t> out;
  encode_into(message, out);
  return out;
}

WireMessage decode_body(std::span<const std::uint8_t> body) {
  if (body.empty()) throw ProtocolError("empty frame has no tag");
  const std::uint8_t raw = body[0];
  if (raw < 0x01 || raw > 0x07) throw ProtocolError("unknown message tag " + std::to_string(raw));
  const auto tag = static_cast<MessageTag>(raw);
  Reader r(body.subspan(1), tag);
  WireMessage out;
  switch (tag) {
    case MessageTag::hello:
      out = wire::Hello{r.rest_text()};
      break;
    case MessageTag::hello_ack: {
      wire::HelloAck m;
      m.action_count = r.get<std::uint16_t>();
      m.height = r.get<std::uint16_t>();
      m.width = r.get<std::uint16_t>();
      m.channels = r.get<std::uint16_t>();
      out = m;
      break;
    }
    case MessageTag::reset:
      out = wire::Reset{r.get<std::uint64_t>()};
      break;
    case MessageTag::step:
      out = wire::Step{r.get<std::uint16_t>()};
      break;
    case MessageTag::obs: {
      wire::Obs m;
      m.reward = r.get<double>();
      const auto terminal = r.get<std::uint8_t>();
      if (terminal > 1) throw ProtocolError("OBS terminal flag must be 0 or 1, got " + std::to_string(terminal));
      m.terminal = terminal == 1;
      m.height = r.get<std::uint16_t>();
      m.width = r.get<std::uint16_t>();
      m.channels = r.get<std::uint16_t>();
      const auto pixels = r.rest();
      if (pixels.size() != std::size_t{m.height} * m.width * m.channels) {
        throw ProtocolError("OBS carries " + std::to_string(pixels.size()) + " pixel bytes for dims " +
                            std::to_string(m.height) + "x" + std::to_string(m.width) + "x" +
                            std::to_string(m.channels));
      }
      m.pixels.assign(pixels.begin(), pixels.end());
      out = std::move(m);
      break;
    }
    case MessageTag::error: {
      wire::Error m;
      m.code = r.get<std::uint16_t>();
      m.text = r.rest_text();
      out = std::move(m);
      break;
    }
    case MessageTag::close:
      out = wire::Close{};
      break;
  }
  r.finish();
  return out;
}

WireMessage decode(std::span<const std::uint8_t> frame) {
  if (frame.size() < sizeof(std::uint32_t)) throw ProtocolError("frame shorter than its length prefix");
  const std::uint32_t length = read_u32(frame.data());
  if (frame.size() - sizeof(std::uint32_t) != length) {
    throw ProtocolError("frame length prefix " + std::to_string(length) + " disagrees with " +
                        std::to_string(frame.size() - sizeof(std::uint32_t)) + " body bytes");
  }
  return decode_body(frame.subspan(sizeof(std::uint32_t)));
}

void FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
  if (read_ > 0 && read_ == buffer_.size()) {
    buffer_.clear();
    read_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<std::vector<std::uint8_t>> FrameDecoder::next_body() {
  if (buffered() < sizeof(std::uint32_t)) return std::nullopt;
  const std::uint32_t length = read_u32(buffer_.data() + read_);
  if (length == 0) throw ProtocolError("frame with zero length has no tag");
  if (length > kMaxFrame) throw ProtocolError("frame length " + std::to_string(length) + " exceeds the maximum");
  if (buffered() - sizeof(std::uint32_t) < length) return std::nullopt;
  const auto begin = buffer_.begin() + static_cast<std::ptrdiff_t>(read_ + sizeof(std::uint32_t));
  std::vector<std::uint8_t> body(begin, begin + length);
  read_ += sizeof(std::uint32_t) + length;
  if (read_ > (1u << 16) && read_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(read_));
    read_ = 0;
  }
  return body;
}

std::optional<WireMessage> FrameDecoder::next() {
  auto body = next_body();
  if (!body) return std::nullopt;
  return decode_body(*body);
}

Endpoint parse_endpoint(std::string_view text) {
  Endpoint e;
  const auto colon = text.rfind(':');
  e.host = std::string(text.substr(0, colon));
  if (colon != std::string_view::npos) {
    const std::string_view port = text.substr(colon + 1);
    unsigned value = 0;
    auto [end, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
    if (ec != std::errc() || end != port.data() + port.size() || value == 0 || value > 65535) {
      throw ConfigError("bad port in environment server address '" + std::string(text) + "'");
    }
    e.port = static_cast<std::uint16_t>(value);
  }
  if (e.host.empty()) throw ConfigError("environment server address '" + std::string(text) + "' has no host");
  return e;
}

// Connection

BridgeConnection::BridgeConnection(const Endpoint& endpoint, std::chrono::milliseconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  const std::string port = std::to_string(endpoint.port);
  if (int rc = ::getaddrinfo(endpoint.host.c_str(), port.c_str(), &hints, &found); rc != 0) {
    throw EnvironmentError("cannot resolve " + endpoint.host + ": " + ::gai_strerror(rc));
  }
  std::string last_error = "no addresses";
  for (addrinfo* a = found; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
      fd_ = fd;
      break;
    }
    last_error = errno_text();
    ::close(fd);
  }
  ::freeaddrinfo(found);
  if (fd_ < 0) {
    throw EnvironmentError("cannot connect to environment server " + endpoint.host + ":" + port + ": " + last_error);
  }
}

BridgeConnection::~BridgeConnection() { close(); }

void BridgeConnection::close() noexcept {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void BridgeConnection::send(const WireMessage& message) {
  if (fd_ < 0) throw EnvironmentError("environment server connection is closed");
  const std::vector<std::uint8_t> frame = encode(message);
  std::size_t sent = 0;
  while (sent < frame.size()) {
    const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw EnvironmentError("lost connection to environment server while sending: " + errno_text());
    sent += static_cast<std::size_t>(n);
  }
}

std::vector<std::uint8_t> BridgeConnection::receive_body() {
  if (fd_ < 0) throw EnvironmentError("environment server connection is closed");
  std::uint8_t chunk[1 << 14];
  for (;;) {
    if (auto body = decoder_.next_body()) return std::move(*body);
    const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      throw EnvironmentError("environment server timed out");
    }
    if (n <= 0) throw EnvironmentError("environment server closed the connection");
    decoder_.feed(std::span(chunk, static_cast<std::size_t>(n)));
  }
}

WireMessage BridgeConnection::receive() { return decode_body(receive_body()); }

// Remote environment

RemoteEnvironment::RemoteEnvironment(const Endpoint& endpoint, std::string env_name, std::chrono::milliseconds timeout)
    : env_name_(std::move(env_name)), connection_(endpoint, timeout) {
  connection_.send(wire::Hello{env_name_});
  const WireMessage reply = connection_.receive();
  if (const auto* err = std::get_if<wire::Error>(&reply)) {
    throw EnvironmentError("server refused '" + env_name_ + "' (code " + std::to_string(err->code) + "): " + err->text);
  }
  const auto* ack = std::get_if<wire::HelloAck>(&reply);
  if (!ack) throw ProtocolError("expected HELLO_ACK, got " + std::string(tag_name(tag_of(reply))));
  if (ack->action_count < 2) throw ProtocolError("server advertises fewer than 2 actions for '" + env_name_ + "'");
  if (ack->height == 0 || ack->width == 0 || (ack->channels != 1 && ack->channels != 3)) {
    throw ProtocolError("server advertises unsupported observation dims for '" + env_name_ + "'");
  }
  ack_ = *ack;
}

RemoteEnvironment::~RemoteEnvironment() {
  try {
    connection_.send(wire::Close{});
  } catch (...) {
  }
}

FrameProfile RemoteEnvironment::frame_profile() const {
  return FrameProfile::image(ack_.height, ack_.width, ack_.channels);
}

Observation RemoteEnvironment::exchange(const WireMessage& request) {
  connection_.send(request);
  WireMessage reply = connection_.receive();
  if (const auto* err = std::get_if<wire::Error>(&reply)) {
    throw EnvironmentError("environment '" + env_name_ + "' failed (code " + std::to_string(err->code) + "): " +
                           err->text);
  }
  auto* obs = std::get_if<wire::Obs>(&reply);
  if (!obs) throw ProtocolError("expected OBS, got " + std::string(tag_name(tag_of(reply))));
  if (obs->height != ack_.height || obs->width != ack_.width || obs->channels != ack_.channels) {
    throw ProtocolError("OBS dims differ from the HELLO_ACK advertisement");
  }
  Observation out;
  out.pixels = std::move(obs->pixels);
  out.height = obs->height;
  out.width = obs->width;
  out.channels = obs->channels;
  out.reward = obs->reward;
  out.terminal = obs->terminal;
  return out;
}

Observation RemoteEnvironment::reset(std::uint64_t seed) { return exchange(wire::Reset{seed}); }

Observation RemoteEnvironment::step(std::size_t action) {
  if (action >= ack_.action_count) {
    throw IndexError("action " + std::to_string(action) + " out of range for '" + env_name_ + "'");
  }
  return exchange(wire::Step{static_cast<std::uint16_t>(action)});
}

EnvironmentFactory remote_factory(const Endpoint& endpoint, std::string env_name, std::chrono::milliseconds timeout) {
  return [endpoint, env_name = std::move(env_name), timeout] {
    return std::make_unique<RemoteEnvironment>(endpoint, env_name, timeout);
  };
}

// Conformance probe

bool ConformanceReport::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

ConformanceReport serve_check(const Endpoint& endpoint, std::string_view env_name, std::chrono::milliseconds timeout) {
  ConformanceReport report;
  auto record = [&](std::string name, bool ok, std::string detail = {}) {
    report.checks.push_back({std::move(name), ok, std::move(detail)});
    return ok;
  };
  try {
    BridgeConnection conn(endpoint, timeout);
    record("connect", true);

    conn.send(wire::Hello{std::string(env_name)});
    const WireMessage hello = conn.receive();
    const auto* ack = std::get_if<wire::HelloAck>(&hello);
    if (!record("hello_ack", ack != nullptr, ack ? "" : "reply was " + std::string(tag_name(tag_of(hello))))) {
      return report;
    }
    record("action_count", ack->action_count >= 2, std::to_string(ack->action_count) + " actions");

    conn.send(wire::Reset{0});
    const std::vector<std::uint8_t> first = conn.receive_body();
    conn.send(wire::Reset{0});
    const std::vector<std::uint8_t> second = conn.receive_body();
    record("reset_deterministic", first == second, first == second ? "" : "OBS bytes differ across RESET(0)");

    const WireMessage obs = decode_body(first);
    const auto* o = std::get_if<wire::Obs>(&obs);
    record("obs_dims", o && o->height == ack->height && o->width == ack->width && o->channels == ack->channels);

    conn.send(wire::Step{0});
    const WireMessage stepped = conn.receive();
    record("step_obs", std::holds_alternative<wire::Obs>(stepped) || std::holds_alternative<wire::Error>(stepped),
           std::string(tag_name(tag_of(stepped))));

    conn.send(wire::Step{ack->action_count});
    const WireMessage bad = conn.receive();
    record("bad_action_error", std::holds_alternative<wire::Error>(bad), std::string(tag_name(tag_of(bad))));

    conn.send(wire::Close{});
    record("close", true);
  } catch (const std::exception& e) {
    record("transport", false, e.what());
  }
  return report;
}

}  // namespace ugp
