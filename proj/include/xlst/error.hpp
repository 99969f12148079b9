#pragma once

#include <stdexcept>
#include <string>

namespace xlst {

// Every failure the library reports derives from Error so that tools can
// catch one type and still print a specific diagnostic.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class InputTooShortError : public Error { using Error::Error; };
class DegenerateFrameError : public Error { using Error::Error; };
class LabelError : public Error { using Error::Error; };
class InfeasibleAlignmentError : public Error { using Error::Error; };
class OracleScaleError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };
class TrainingDivergenceError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class ChecksumError : public FormatError { using FormatError::FormatError; };
class VersionError : public FormatError { using FormatError::FormatError; };

}  // namespace xlst
