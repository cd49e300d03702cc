#pragma once

#include <stdexcept>
#include <string>

namespace catf {

// Numeric values double as CLI exit codes and C API status codes.
enum class ErrorCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kData = 3,
  kInvariant = 4,
  kCheckpoint = 5,
  kMalformedMetrics = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define CATF_DEFINE_ERROR(Name, Code)                                        \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& what) : Error(ErrorCode::Code, what) {} \
  }

CATF_DEFINE_ERROR(DimensionError, kInternal);
CATF_DEFINE_ERROR(NumericError, kInternal);
CATF_DEFINE_ERROR(ContractError, kInternal);
CATF_DEFINE_ERROR(IndexError, kInternal);
CATF_DEFINE_ERROR(DomainError, kInternal);
CATF_DEFINE_ERROR(LookupError, kInternal);
CATF_DEFINE_ERROR(MissingNodeError, kInternal);
CATF_DEFINE_ERROR(ImmutabilityError, kInvariant);
CATF_DEFINE_ERROR(InvariantError, kInvariant);
CATF_DEFINE_ERROR(ProtocolError, kInternal);
CATF_DEFINE_ERROR(ConfigError, kConfig);
CATF_DEFINE_ERROR(DataError, kData);
CATF_DEFINE_ERROR(FormatError, kData);
CATF_DEFINE_ERROR(CheckpointError, kCheckpoint);
CATF_DEFINE_ERROR(MetricsError, kMalformedMetrics);

#undef CATF_DEFINE_ERROR

}  // namespace catf
