#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ugp/env.hpp"

namespace ugp {

inline constexpr std::uint16_t kDefaultBridgePort = 9732;

enum class MessageTag : std::uint8_t {
  hello = 0x01,
  hello_ack = 0x02,
  reset = 0x03,
  step = 0x04,
  obs = 0x05,
  error = 0x06,
  close = 0x07,
};

namespace wire {

struct Hello {
  std::string env_name;
  friend bool operator==(const Hello&, const Hello&) = default;
};

struct HelloAck {
  std::uint16_t action_count = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint16_t channels = 0;
  friend bool operator==(const HelloAck&, const HelloAck&) = default;
};

struct Reset {
  std::uint64_t seed = 0;
  friend bool operator==(const Reset&, const Reset&) = default;
};

struct Step {
  std::uint16_t action = 0;
  friend bool operator==(const Step&, const Step&) = default;
};

struct Obs {
  double reward = 0.0;
  bool terminal = false;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint16_t channels = 0;
  std::vector<std::uint8_t> pixels;
  friend bool operator==(const Obs&, const Obs&) = default;
};

struct Error {
  std::uint16_t code = 0;
  std::string text;
  friend bool operator==(const Error&, const Error&) = default;
};

struct Close {
  friend bool operator==(const Close&, const Close&) = default;
};

}  // namespace wire

using WireMessage =
    std::variant<wire::Hello, wire::HelloAck, wire::Reset, wire::Step, wire::Obs, wire::Error, wire::Close>;

MessageTag tag_of(const WireMessage& message);
std::string_view tag_name(MessageTag tag);

/// Frame layout: u32 LE length of (tag + payload), u8 tag, payload.
void encode_into(const WireMessage& message, std::vector<std::uint8_t>& out);
std::vector<std::uint8_t> encode(const WireMessage& message);

/// Decodes one tag + payload body (the bytes the length prefix covers).
/// Throws ProtocolError on unknown tags, short or oversized payloads and OBS
/// frames whose dims disagree with the pixel count.
WireMessage decode_body(std::span<const std::uint8_t> body);

/// Decodes exactly one complete frame.
WireMessage decode(std::span<const std::uint8_t> frame);

/// Incremental decoder for a byte stream cut at arbitrary boundaries.
class FrameDecoder {
 public:
  static constexpr std::uint32_t kMaxFrame = 64u << 20;

  void feed(std::span<const std::uint8_t> bytes);
  /// Next complete message, if buffered.
  std::optional<WireMessage> next();
  /// Like next() but returns the raw body bytes (tag + payload).
  std::optional<std::vector<std::uint8_t>> next_body();
  [[nodiscard]] std::size_t buffered() const noexcept { return buffer_.size() - read_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t read_ = 0;
};

struct Endpoint {
  std::string host;
  std::uint16_t port = kDefaultBridgePort;
};

/// "host:port" or "host" (default port). ConfigError on malformed input.
Endpoint parse_endpoint(std::string_view text);

/// Blocking, framed, request-response TCP connection.
class BridgeConnection {
 public:
  BridgeConnection(const Endpoint& endpoint, std::chrono::milliseconds timeout);
  ~BridgeConnection();
  BridgeConnection(const BridgeConnection&) = delete;
  BridgeConnection& operator=(const BridgeConnection&) = delete;

  void send(const WireMessage& message);
  /// Raw body of the next message; EnvironmentError on timeout or disconnect.
  std::vector<std::uint8_t> receive_body();
  WireMessage receive();
  void close() noexcept;

 private:
  int fd_ = -1;
  FrameDecoder decoder_;
};

/// An environment living behind an environment server.
///
/// Observations use the image profile with the dims advertised in HELLO_ACK.
/// ERROR replies and connection failures surface as EnvironmentError.
class RemoteEnvironment : public Environment {
 public:
  RemoteEnvironment(const Endpoint& endpoint, std::string env_name,
                    std::chrono::milliseconds timeout = std::chrono::seconds(30));
  ~RemoteEnvironment() override;

  Observation reset(std::uint64_t seed) override;
  Observation step(std::size_t action) override;
  [[nodiscard]] std::size_t action_count() const override { return ack_.action_count; }
  [[nodiscard]] FrameProfile frame_profile() const override;

  [[nodiscard]] const wire::HelloAck& handshake() const noexcept { return ack_; }

 private:
  Observation exchange(const WireMessage& request);

  std::string env_name_;
  BridgeConnection connection_;
  wire::HelloAck ack_;
};

EnvironmentFactory remote_factory(const Endpoint& endpoint, std::string env_name,
                                  std::chrono::milliseconds timeout = std::chrono::seconds(30));

struct ConformanceCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct ConformanceReport {
  std::vector<ConformanceCheck> checks;
  [[nodiscard]] bool passed() const;
};

/// Probes a server with the null environment: handshake, reset determinism,
/// step framing, error on a bad action, and clean close.
ConformanceReport serve_check(const Endpoint& endpoint, std::string_view env_name = "null-env",
                              std::chrono::milliseconds timeout = std::chrono::seconds(5));

}  // namespace ugp
