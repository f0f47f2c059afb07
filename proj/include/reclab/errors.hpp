#pragma once

#include <stdexcept>
#include <string>

namespace reclab {

// Every library error derives from Error. The category decides the CLI exit
// code: config problems exit 1, numeric/runtime failures 2, missing inputs 3.
enum class ErrorCategory { config, runtime, missing_input };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define RECLAB_DEFINE_ERROR(Name, Category)                                 \
  class Name : public Error {                                               \
   public:                                                                  \
    explicit Name(const std::string& what) : Error(Category, what) {}       \
  }

// tensor
RECLAB_DEFINE_ERROR(DimensionError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(NumericError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(UsageError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(InputError, ErrorCategory::runtime);

// model / recycle
RECLAB_DEFINE_ERROR(CompositionError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(SchemaError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(InitError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(DistillationError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(ProjectionError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(InterpolationError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(UnsupportedKindError, ErrorCategory::runtime);

// corpus / train
RECLAB_DEFINE_ERROR(SpecError, ErrorCategory::config);
RECLAB_DEFINE_ERROR(DataError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(ConfigError, ErrorCategory::config);

// harness
RECLAB_DEFINE_ERROR(FormatError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(VersionError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(ChecksumError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(TruncationError, ErrorCategory::runtime);
RECLAB_DEFINE_ERROR(MissingInputError, ErrorCategory::missing_input);

#undef RECLAB_DEFINE_ERROR

}  // namespace reclab
