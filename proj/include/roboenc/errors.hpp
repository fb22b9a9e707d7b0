#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace roboenc {

// Base of every error the library throws. `kind()` is the stable name used in
// structured error reports.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define ROBOENC_DEFINE_ERROR(Name)                                      \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(#Name, what) {}      \
  };

ROBOENC_DEFINE_ERROR(ShapeError)
ROBOENC_DEFINE_ERROR(NumericError)
ROBOENC_DEFINE_ERROR(ContractError)
ROBOENC_DEFINE_ERROR(DegenerateInput)
ROBOENC_DEFINE_ERROR(GenerationError)
ROBOENC_DEFINE_ERROR(FormatError)
ROBOENC_DEFINE_ERROR(CorruptCodebook)
ROBOENC_DEFINE_ERROR(ConfigError)

#undef ROBOENC_DEFINE_ERROR

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t epoch, const std::string& what)
      : Error("TrainingDiverged", what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

}  // namespace roboenc
