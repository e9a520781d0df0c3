#pragma once

#include <stdexcept>
#include <string>

namespace mthd {

// Every failure carries a stable machine-readable code; the server forwards it
// verbatim in its error payloads.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define MTHD_DEFINE_ERROR(Name, default_code)                      \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& message,                      \
                  std::string code = default_code)                 \
        : Error(std::move(code), message) {}                       \
  };

MTHD_DEFINE_ERROR(DimensionError, "dimension_error")
MTHD_DEFINE_ERROR(IndexError, "index_error")
MTHD_DEFINE_ERROR(ContractError, "contract_error")
MTHD_DEFINE_ERROR(ConfigError, "config_error")
MTHD_DEFINE_ERROR(RuleParseError, "rule_parse_error")
MTHD_DEFINE_ERROR(FormatError, "format_error")
MTHD_DEFINE_ERROR(IoError, "io_error")
MTHD_DEFINE_ERROR(SampleError, "sample_error")
MTHD_DEFINE_ERROR(DivergenceError, "adaptation_diverged")
MTHD_DEFINE_ERROR(ConstraintError, "constraint_too_long")
MTHD_DEFINE_ERROR(LengthError, "source_too_long")

#undef MTHD_DEFINE_ERROR

}  // namespace mthd
