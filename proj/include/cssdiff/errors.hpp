#pragma once

#include <stdexcept>
#include <string>

namespace cssdiff {

// All library failures derive from Error so callers (the CLI in particular)
// can catch one type and map it to a nonzero exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CSSDIFF_DEFINE_ERROR(Name)            \
  class Name : public Error {                 \
   public:                                    \
    using Error::Error;                       \
  };

CSSDIFF_DEFINE_ERROR(DimensionError)
CSSDIFF_DEFINE_ERROR(ParameterError)
CSSDIFF_DEFINE_ERROR(RangeError)
CSSDIFF_DEFINE_ERROR(ShapeError)
CSSDIFF_DEFINE_ERROR(DomainError)
CSSDIFF_DEFINE_ERROR(ArityError)
CSSDIFF_DEFINE_ERROR(ContractError)
CSSDIFF_DEFINE_ERROR(IoError)
CSSDIFF_DEFINE_ERROR(TrainingError)
CSSDIFF_DEFINE_ERROR(CompatibilityError)

#undef CSSDIFF_DEFINE_ERROR

}  // namespace cssdiff
