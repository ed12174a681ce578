#include "null_env_server.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <stdexcept>

namespace ugp::testing {

NullEnvServer::NullEnvServer() : NullEnvServer(Options{}) {}

NullEnvServer::NullEnvServer(Options options) : options_(options) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("socket failed");
  const int yes = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 64) != 0) {
    ::close(listen_fd_);
    throw std::runtime_error("bind/listen failed");
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

NullEnvServer::~NullEnvServer() {
  stopping_ = true;
  acceptor_.join();
  ::close(listen_fd_);
  {
    std::lock_guard lock(mutex_);
    for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  for (auto& t : workers_) t.join();
}

void NullEnvServer::accept_loop() {
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    if (::poll(&p, 1, 20) <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    ++sessions_;
    std::lock_guard lock(mutex_);
    client_fds_.push_back(fd);
    workers_.emplace_back([this, fd] { serve(fd); });
  }
}

WireMessage NullEnvServer::respond(const Options& options, Session& s, const WireMessage& request) {
  const std::size_t frame = std::size_t{options.height} * options.width * options.channels;
  auto obs = [&](double reward, bool terminal) {
    return wire::Obs{reward, terminal, options.height, options.width, options.channels,
                     std::vector<std::uint8_t>(frame, s.pixel)};
  };
  if (const auto* hello = std::get_if<wire::Hello>(&request)) {
    if (hello->env_name != "null-env") return wire::Error{1, "unknown environment '" + hello->env_name + "'"};
    s.greeted = true;
    return wire::HelloAck{options.advertised_actions, options.height, options.width, options.channels};
  }
  if (!s.greeted) return wire::Error{3, "HELLO first"};
  if (const auto* reset = std::get_if<wire::Reset>(&request)) {
    s.pixel = static_cast<std::uint8_t>(reset->seed & 0xff);
    s.steps = 0;
    s.active = true;
    return obs(0.0, false);
  }
  if (const auto* step = std::get_if<wire::Step>(&request)) {
    if (!s.active) return wire::Error{2, "STEP without an active episode"};
    if (step->action >= 2) return wire::Error{2, "action " + std::to_string(step->action) + " out of range"};
    s.pixel = static_cast<std::uint8_t>(s.pixel + step->action + 1);
    ++s.steps;
    const bool terminal = s.steps >= options.episode_length;
    if (terminal) s.active = false;
    return obs(static_cast<double>(step->action), terminal);
  }
  return wire::Error{3, "unexpected " + std::string(tag_name(tag_of(request)))};
}

void NullEnvServer::serve(int fd) {
  Session session;
  FrameDecoder decoder;
  std::vector<std::uint8_t> buf(4096);
  std::size_t requests = 0;
  for (;;) {
    const ssize_t n = ::recv(fd, buf.data(), buf.size(), 0);
    if (n <= 0) break;
    decoder.feed(std::span(buf.data(), static_cast<std::size_t>(n)));
    bool done = false;
    try {
      while (auto msg = decoder.next()) {
        if (std::holds_alternative<wire::Close>(*msg)) {
          done = true;
          break;
        }
        if (options_.drop_after != 0 && ++requests > options_.drop_after) {
          done = true;
          break;
        }
        const auto reply = encode(respond(options_, session, *msg));
        if (::send(fd, reply.data(), reply.size(), MSG_NOSIGNAL) != static_cast<ssize_t>(reply.size())) {
          done = true;
          break;
        }
      }
    } catch (const std::exception&) {
      done = true;  // protocol violation closes the connection
    }
    if (done) break;
  }
  ::shutdown(fd, SHUT_RDWR);
  std::lock_guard lock(mutex_);
  std::erase(client_fds_, fd);
  ::close(fd);
}

}  // namespace ugp::testing
