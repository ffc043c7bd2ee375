#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace unirag {

// Every failure the library can raise, one kind per contract clause.
enum class ErrorKind {
  ZeroVector,
  EmptyInput,
  ShapeMismatch,
  UnsupportedStyle,
  ProviderUnavailable,
  DimensionMismatch,
  InvalidConfig,
  EmptyBank,
  DuplicateId,
  EmptyIndex,
  ChecksumMismatch,
  VersionMismatch,
  IoFailure,
  EmptyQuery,
  UnknownTruthId,
  BackendUnavailable,
  BackendRejected,
  Timeout,
  StaleTape,
  NonFiniteLoss,
  NotNormalized,
};

// Pipeline stage an error surfaced in; none when context-free.
enum class Stage {
  none,
  embed,
  bank,
  encode,
  retrieval,
  context,
  generate,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::ZeroVector: return "zero_vector";
    case ErrorKind::EmptyInput: return "empty_input";
    case ErrorKind::ShapeMismatch: return "shape_mismatch";
    case ErrorKind::UnsupportedStyle: return "unsupported_style";
    case ErrorKind::ProviderUnavailable: return "provider_unavailable";
    case ErrorKind::DimensionMismatch: return "dimension_mismatch";
    case ErrorKind::InvalidConfig: return "invalid_config";
    case ErrorKind::EmptyBank: return "empty_bank";
    case ErrorKind::DuplicateId: return "duplicate_id";
    case ErrorKind::EmptyIndex: return "empty_index";
    case ErrorKind::ChecksumMismatch: return "checksum_mismatch";
    case ErrorKind::VersionMismatch: return "version_mismatch";
    case ErrorKind::IoFailure: return "io_failure";
    case ErrorKind::EmptyQuery: return "empty_query";
    case ErrorKind::UnknownTruthId: return "unknown_truth_id";
    case ErrorKind::BackendUnavailable: return "backend_unavailable";
    case ErrorKind::BackendRejected: return "backend_rejected";
    case ErrorKind::Timeout: return "timeout";
    case ErrorKind::StaleTape: return "stale_tape";
    case ErrorKind::NonFiniteLoss: return "non_finite_loss";
    case ErrorKind::NotNormalized: return "not_normalized";
  }
  return "unknown";
}

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::none: return "none";
    case Stage::embed: return "embed";
    case Stage::bank: return "bank";
    case Stage::encode: return "encode";
    case Stage::retrieval: return "retrieval";
    case Stage::context: return "context";
    case Stage::generate: return "generate";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(to_string(kind)) + ": " + msg),
        kind_(kind),
        stage_(Stage::none),
        raw_(msg) {}

  Error(ErrorKind kind, Stage stage, const std::string& msg)
      : std::runtime_error(std::string(to_string(stage)) + " stage: " +
                           std::string(to_string(kind)) + ": " + msg),
        kind_(kind),
        stage_(stage),
        raw_(msg) {}

  ErrorKind kind() const noexcept { return kind_; }
  Stage stage() const noexcept { return stage_; }
  const std::string& raw_message() const noexcept { return raw_; }

  // Same error re-tagged with the pipeline stage it surfaced in.
  Error with_stage(Stage stage) const { return Error(kind_, stage, raw_); }

 private:
  ErrorKind kind_;
  Stage stage_;
  std::string raw_;
};

// Process exit codes used by the command line tool.
//   0 success, 2 config, 3 I/O and integrity, 4 validation, 5 backend.
inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidConfig:
      return 2;
    case ErrorKind::IoFailure:
    case ErrorKind::ChecksumMismatch:
    case ErrorKind::VersionMismatch:
      return 3;
    case ErrorKind::ProviderUnavailable:
    case ErrorKind::BackendUnavailable:
    case ErrorKind::BackendRejected:
    case ErrorKind::Timeout:
      return 5;
    case ErrorKind::ZeroVector:
    case ErrorKind::EmptyInput:
    case ErrorKind::ShapeMismatch:
    case ErrorKind::UnsupportedStyle:
    case ErrorKind::DimensionMismatch:
    case ErrorKind::EmptyBank:
    case ErrorKind::DuplicateId:
    case ErrorKind::EmptyIndex:
    case ErrorKind::EmptyQuery:
    case ErrorKind::UnknownTruthId:
    case ErrorKind::StaleTape:
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::NotNormalized:
      return 4;
  }
  return 4;
}

}  // namespace unirag
