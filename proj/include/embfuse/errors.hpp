// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every embfuse module.

#pragma once

#include <stdexcept>
#include <string>

namespace embfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define EMBFUSE_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

// vecfuse
EMBFUSE_DEFINE_ERROR(DimMismatch);
EMBFUSE_DEFINE_ERROR(AlignmentError);
EMBFUSE_DEFINE_ERROR(ConfigError);

// embstore
EMBFUSE_DEFINE_ERROR(IoError);
EMBFUSE_DEFINE_ERROR(ValidationError);
EMBFUSE_DEFINE_ERROR(FormatError);
EMBFUSE_DEFINE_ERROR(VersionError);
EMBFUSE_DEFINE_ERROR(ChecksumError);
EMBFUSE_DEFINE_ERROR(SchemaError);
EMBFUSE_DEFINE_ERROR(DuplicateIdError);

// neuralnet / metrics
EMBFUSE_DEFINE_ERROR(ShapeError);
EMBFUSE_DEFINE_ERROR(DegenerateDataError);
EMBFUSE_DEFINE_ERROR(EmptyEvalError);

// harness
EMBFUSE_DEFINE_ERROR(StratificationError);
EMBFUSE_DEFINE_ERROR(TrainingError);

#undef EMBFUSE_DEFINE_ERROR

}  // namespace embfuse
