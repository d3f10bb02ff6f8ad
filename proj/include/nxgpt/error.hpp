#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nxgpt {

enum class ErrorKind {
  kInvalidConfig,
  kDegenerateInput,
  kCorruptCheckpoint,
  kVersion,
  kShapeMismatch,
  kWrongModality,
  kInvalidInput,
  kTokenization,
  kInvalidParameter,
  kNumeric,
  kSequenceTooLong,
  kSignalCountMismatch,
  kOutOfRange,
  kUntrainedBackbone,
  kMissingDecoder,
  kDependency,
  kParse,
  kDanglingRef,
  kUnknownTemplate,
  kEmptyBatch,
  kIo,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace nxgpt
