#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cprobe {

// Every error raised by the library carries a short machine-readable kind
// ("shape", "not_extracted", ...) next to the human message. The CLI prints
// both as a structured record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

class ShapeError : public Error {
 public:
  ShapeError(int layer, const std::string& m) : Error("shape", m), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

class DuplicateIdError : public Error {
 public:
  explicit DuplicateIdError(const std::string& m) : Error("duplicate_id", m) {}
};

class NotExtractedError : public Error {
 public:
  explicit NotExtractedError(const std::string& m) : Error("not_extracted", m) {}
};

class RangeError : public Error {
 public:
  explicit RangeError(const std::string& m) : Error("range", m) {}
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& m) : Error("schema", m) {}
};

class ValueError : public Error {
 public:
  ValueError(std::size_t row, const std::string& m) : Error("value", m), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class DegenerateDataError : public Error {
 public:
  explicit DegenerateDataError(const std::string& m) : Error("degenerate_data", m) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& m) : Error("data", m) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

class RankError : public Error {
 public:
  explicit RankError(const std::string& m) : Error("rank", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

class AlignmentError : public Error {
 public:
  explicit AlignmentError(const std::string& m) : Error("alignment", m) {}
};

class UndefinedKappaError : public Error {
 public:
  explicit UndefinedKappaError(const std::string& m) : Error("undefined_kappa", m) {}
};

class EndpointError : public Error {
 public:
  EndpointError(const std::string& m, bool retryable)
      : Error("endpoint", m), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

class ReplayMissError : public Error {
 public:
  explicit ReplayMissError(const std::string& m) : Error("replay_miss", m) {}
};

}  // namespace cprobe
