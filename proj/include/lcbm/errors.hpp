#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcbm {

// Process exit codes used by the CLI. Library code never calls exit(); it
// throws one of the exceptions below and the CLI maps them.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kConfig = 2,
  kData = 3,
  kOracleTransport = 4,
  kNumeric = 5,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kData)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Violated operation precondition (bad shapes, empty inputs, out-of-range ids).
class PreconditionError : public Error {
 public:
  explicit PreconditionError(const std::string& what)
      : Error(what, ExitCode::kData) {}
};

// Bad command-line usage or a missing required input named on it.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(what, ExitCode::kConfig) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0,
             std::string raw = {})
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what,
              ExitCode::kData),
        line_(line),
        raw_(std::move(raw)) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::size_t line_;
  std::string raw_;
};

// Remote oracle (LLM, MLLM, embedding service) failed at the transport level.
class OracleError : public Error {
 public:
  explicit OracleError(const std::string& what)
      : Error(what, ExitCode::kOracleTransport) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(what, ExitCode::kNumeric) {}
};

}  // namespace lcbm
