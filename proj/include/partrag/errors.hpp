#pragma once

#include <stdexcept>
#include <string>

namespace partrag {

// Every failure raised by the library derives from Error so callers (CLI,
// service) can map it to a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define PARTRAG_DEFINE_ERROR(Name, tag)                              \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(tag, what) {}     \
  };

PARTRAG_DEFINE_ERROR(DimensionError, "dimension")
PARTRAG_DEFINE_ERROR(DegenerateInputError, "degenerate_input")
PARTRAG_DEFINE_ERROR(NumericalError, "numerical")
PARTRAG_DEFINE_ERROR(CapacityError, "capacity")
PARTRAG_DEFINE_ERROR(ConfigError, "config")
PARTRAG_DEFINE_ERROR(FormatError, "format")
PARTRAG_DEFINE_ERROR(FingerprintError, "fingerprint")
PARTRAG_DEFINE_ERROR(QueryError, "query")
PARTRAG_DEFINE_ERROR(GenerationError, "generation")
PARTRAG_DEFINE_ERROR(PartInvisibleError, "part_invisible")
PARTRAG_DEFINE_ERROR(EditError, "edit")
PARTRAG_DEFINE_ERROR(MissingArtifactError, "missing_artifact")

#undef PARTRAG_DEFINE_ERROR

}  // namespace partrag
