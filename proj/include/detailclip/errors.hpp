#pragma once

#include <stdexcept>
#include <string>

namespace detailclip {

/// Base class for every error raised by the library. `kind()` is the stable
/// name printed by the CLI before exiting nonzero.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define DETAILCLIP_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                          \
   public:                                                              \
    explicit Name(const std::string& what) : Error(#Name, what) {}     \
  };

DETAILCLIP_DEFINE_ERROR(DivisibilityError)
DETAILCLIP_DEFINE_ERROR(RangeError)
DETAILCLIP_DEFINE_ERROR(ParseError)
DETAILCLIP_DEFINE_ERROR(IoError)
DETAILCLIP_DEFINE_ERROR(VersionError)
DETAILCLIP_DEFINE_ERROR(ShapeMismatch)
DETAILCLIP_DEFINE_ERROR(ConfigMismatch)
DETAILCLIP_DEFINE_ERROR(ShapeError)
DETAILCLIP_DEFINE_ERROR(UnknownWord)
DETAILCLIP_DEFINE_ERROR(VocabularyError)
DETAILCLIP_DEFINE_ERROR(LengthError)
DETAILCLIP_DEFINE_ERROR(MaskCardinalityError)
DETAILCLIP_DEFINE_ERROR(ZeroNormError)
DETAILCLIP_DEFINE_ERROR(DegenerateBatch)
DETAILCLIP_DEFINE_ERROR(EmptyMask)
DETAILCLIP_DEFINE_ERROR(NonFiniteLoss)
DETAILCLIP_DEFINE_ERROR(LoadOnlyPreset)

#undef DETAILCLIP_DEFINE_ERROR

}  // namespace detailclip
