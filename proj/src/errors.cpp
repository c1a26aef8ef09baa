#include "exms/errors.hpp"

namespace exms {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonScalarLoss: return "NonScalarLoss";
    case Errc::ModeMismatch: return "ModeMismatch";
    case Errc::IndivisibleHeads: return "IndivisibleHeads";
    case Errc::EmptyAttentionRow: return "EmptyAttentionRow";
    case Errc::IndivisibleImage: return "IndivisibleImage";
    case Errc::IndivisibleGrid: return "IndivisibleGrid";
    case Errc::SlotCountMismatch: return "SlotCountMismatch";
    case Errc::SequenceTooShort: return "SequenceTooShort";
    case Errc::MtpDisabled: return "MtpDisabled";
    case Errc::InvalidSamplingParams: return "InvalidSamplingParams";
    case Errc::InvertedBox: return "InvertedBox";
    case Errc::OutOfImage: return "OutOfImage";
    case Errc::DoesNotFit: return "DoesNotFit";
    case Errc::TooCrowded: return "TooCrowded";
    case Errc::InfeasibleBalance: return "InfeasibleBalance";
    case Errc::IoError: return "IoError";
    case Errc::FormatError: return "FormatError";
    case Errc::ConfigError: return "ConfigError";
    case Errc::DivergedLoss: return "DivergedLoss";
    case Errc::UnknownSuite: return "UnknownSuite";
    case Errc::AllMasked: return "AllMasked";
    case Errc::DegenerateGroup: return "DegenerateGroup";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::InvalidValue: return "InvalidValue";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

void raise(Errc code, const std::string& message) { throw Error(code, message); }

}  // namespace exms
