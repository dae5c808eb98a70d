#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace vmrfa {

namespace detail {

inline void concat_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void concat_into(std::ostringstream& oss, T&& head, Rest&&... rest) {
  oss << std::forward<T>(head);
  concat_into(oss, std::forward<Rest>(rest)...);
}

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  concat_into(oss, std::forward<Args>(args)...);
  return oss.str();
}

}  // namespace detail

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shapes incompatible with an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid structural configuration (channel counts, strips, unknown keys).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse: violated preconditions that are not shape related.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Dataset ingestion problems (manifest rows, image decoding, labels).
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed binary files (tensor files, checkpoints).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite values encountered during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

template <typename E = Error, typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw E(detail::concat(std::forward<Args>(args)...));
}

}  // namespace vmrfa
