#pragma once

#include <stdexcept>
#include <string>

namespace sspf {

// Error taxonomy shared by the whole library. The CLI maps these onto its
// stable exit codes (config=2, io=3, numeric=4).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

struct SizingError : Error {
  explicit SizingError(const std::string& msg) : Error("sizing error: " + msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

struct PathError : Error {
  explicit PathError(const std::string& msg) : Error("path error: " + msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

}  // namespace sspf
