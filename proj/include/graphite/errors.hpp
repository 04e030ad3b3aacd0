#pragma once

#include <stdexcept>
#include <string>

namespace graphite {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward value became NaN/inf, or a numeric precondition failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration (unknown key, bad value).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data. `line` is 1-based, 0 when not tied to a line.
class DataError : public Error {
 public:
  DataError(const std::string& what, std::string file = {}, std::size_t line = 0)
      : Error(format(what, file, line)), file_(std::move(file)), line_(line) {}

  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  static std::string format(const std::string& what, const std::string& file,
                            std::size_t line) {
    if (file.empty()) return what;
    if (line == 0) return file + ": " + what;
    return file + ":" + std::to_string(line) + ": " + what;
  }

  std::string file_;
  std::size_t line_;
};

}  // namespace graphite
