#pragma once

#include <stdexcept>
#include <string>

namespace ugp {

/// Invalid network, engine or experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or observation shape disagrees with what the receiver expects.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unknown task id, tensor name or environment name.
class LookupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A forward trace was used against a different parameter version.
class StalenessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (empty batch, step after terminal, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Failure reported by (or while talking to) an environment.
class EnvironmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed bytes on the environment wire protocol.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed checkpoint container.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ugp
