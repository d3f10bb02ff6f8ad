#include "nxgpt/error.hpp"

namespace nxgpt {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidConfig: return "invalid config";
    case ErrorKind::kDegenerateInput: return "degenerate input";
    case ErrorKind::kCorruptCheckpoint: return "corrupt checkpoint";
    case ErrorKind::kVersion: return "unsupported version";
    case ErrorKind::kShapeMismatch: return "shape mismatch";
    case ErrorKind::kWrongModality: return "wrong modality";
    case ErrorKind::kInvalidInput: return "invalid input";
    case ErrorKind::kTokenization: return "tokenization error";
    case ErrorKind::kInvalidParameter: return "invalid parameter";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kSequenceTooLong: return "sequence too long";
    case ErrorKind::kSignalCountMismatch: return "signal count mismatch";
    case ErrorKind::kOutOfRange: return "out of range";
    case ErrorKind::kUntrainedBackbone: return "untrained backbone";
    case ErrorKind::kMissingDecoder: return "missing decoder";
    case ErrorKind::kDependency: return "missing dependency";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kDanglingRef: return "dangling reference";
    case ErrorKind::kUnknownTemplate: return "unknown template";
    case ErrorKind::kEmptyBatch: return "empty batch";
    case ErrorKind::kIo: return "io error";
  }
  return "error";
}

}  // namespace nxgpt
