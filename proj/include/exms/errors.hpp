#pragma once

#include <stdexcept>
#include <string>

namespace exms {

// Stable error codes. The CLI prints them as "error[Name]: message" so
// scripts can match on the bracketed name.
enum class Errc {
  ShapeMismatch,
  NonScalarLoss,
  ModeMismatch,
  IndivisibleHeads,
  EmptyAttentionRow,
  IndivisibleImage,
  IndivisibleGrid,
  SlotCountMismatch,
  SequenceTooShort,
  MtpDisabled,
  InvalidSamplingParams,
  InvertedBox,
  OutOfImage,
  DoesNotFit,
  TooCrowded,
  InfeasibleBalance,
  IoError,
  FormatError,
  ConfigError,
  DivergedLoss,
  UnknownSuite,
  AllMasked,
  DegenerateGroup,
  EmptyBatch,
  InvalidValue,
};

const char* errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message);
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] void raise(Errc code, const std::string& message);

inline void require(bool cond, Errc code, const std::string& message) {
  if (!cond) raise(code, message);
}

}  // namespace exms
