#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <sstream>
#include <utility>

namespace unvalley {

// Error taxonomy shared by the library and the CLI. Each class maps to a
// distinct process exit code (see tools/ and README).
class Error : public std::runtime_error {
 public:
  explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
  virtual const char* kind() const noexcept { return "error"; }
  virtual int exit_code() const noexcept { return 1; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape_error"; }
  int exit_code() const noexcept override { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config_error"; }
  int exit_code() const noexcept override { return 3; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io_error"; }
  int exit_code() const noexcept override { return 4; }
};

class IntegrityError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "integrity_error"; }
  int exit_code() const noexcept override { return 5; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric_error"; }
  int exit_code() const noexcept override { return 6; }
};

template <typename... Args>
std::string strcat_msg(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

#define UNVALLEY_CHECK(cond, ErrorType, ...)                         \
  do {                                                               \
    if (!(cond)) throw ErrorType(::unvalley::strcat_msg(__VA_ARGS__)); \
  } while (0)

// FNV-1a over raw bytes. Used for parameter freeze checksums and cache keys;
// not cryptographic.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace unvalley
