#pragma once

#include <stdexcept>
#include <string>

namespace ddaunet {

// Error taxonomy. Each category maps to a stable CLI exit code (see
// tools/main.cpp); everything derives from Error so library users can catch
// one type.
class Error : public std::runtime_error {
public:
  Error(std::string category, const std::string& msg)
      : std::runtime_error(msg), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

private:
  std::string category_;
};

#define DDAUNET_DEFINE_ERROR(NAME, CATEGORY)                 \
  class NAME : public Error {                                \
  public:                                                    \
    explicit NAME(const std::string& msg)                    \
        : Error(CATEGORY, msg) {}                            \
  }

DDAUNET_DEFINE_ERROR(IoError, "io");
DDAUNET_DEFINE_ERROR(FormatError, "format");
DDAUNET_DEFINE_ERROR(TruncationError, "truncation");
DDAUNET_DEFINE_ERROR(LabelError, "label");
DDAUNET_DEFINE_ERROR(ParameterError, "parameter");
DDAUNET_DEFINE_ERROR(SpecError, "spec");
DDAUNET_DEFINE_ERROR(SamplingError, "sampling");
DDAUNET_DEFINE_ERROR(ShapeError, "shape");
DDAUNET_DEFINE_ERROR(ConfigError, "config");
DDAUNET_DEFINE_ERROR(CompatibilityError, "compatibility");
DDAUNET_DEFINE_ERROR(DegenerateError, "degenerate");
DDAUNET_DEFINE_ERROR(SchemaError, "schema");
DDAUNET_DEFINE_ERROR(DivergenceError, "divergence");

#undef DDAUNET_DEFINE_ERROR

}  // namespace ddaunet
