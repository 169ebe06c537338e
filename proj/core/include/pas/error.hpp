#pragma once

#include <stdexcept>
#include <string>

namespace pas {

// Base of every error raised by the library. `kind()` is a stable,
// machine-parsable class name used by the CLI error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define PAS_DEFINE_ERROR(Name, Tag)                                     \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(Tag, what) {}        \
  };

PAS_DEFINE_ERROR(DimensionError, "dimension")
PAS_DEFINE_ERROR(ConfigError, "config")
PAS_DEFINE_ERROR(ContractError, "contract")
PAS_DEFINE_ERROR(NumericError, "numeric")
PAS_DEFINE_ERROR(StructuralError, "structural")
PAS_DEFINE_ERROR(FormatError, "format")
PAS_DEFINE_ERROR(CorruptCheckpoint, "corrupt-checkpoint")
PAS_DEFINE_ERROR(VersionError, "version")
PAS_DEFINE_ERROR(IoError, "io")

#undef PAS_DEFINE_ERROR

// Raised by ConfigError sites that can name the offending key.
class ConfigKeyError : public ConfigError {
 public:
  ConfigKeyError(std::string key, const std::string& what)
      : ConfigError(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace pas
