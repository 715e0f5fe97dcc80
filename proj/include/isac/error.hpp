#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace isac {

enum class ErrorCode {
    TooFewPoints,
    DegenerateSegment,
    OutOfRange,
    OffRoad,
    SingularGeometry,
    NonPositiveDistance,
    DegenerateAngle,
    SingularInnovation,
    BadTransitionMatrix,
    GammaOutOfRange,
    NonPsdCovariance,
    InsufficientHistory,
    NoData,
    InvalidScenario,
    UsageError,
    IoError,
    SchemaMismatch,
};

constexpr std::string_view to_string(ErrorCode code) noexcept
{
    switch (code) {
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::DegenerateSegment: return "DegenerateSegment";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::OffRoad: return "OffRoad";
    case ErrorCode::SingularGeometry: return "SingularGeometry";
    case ErrorCode::NonPositiveDistance: return "NonPositiveDistance";
    case ErrorCode::DegenerateAngle: return "DegenerateAngle";
    case ErrorCode::SingularInnovation: return "SingularInnovation";
    case ErrorCode::BadTransitionMatrix: return "BadTransitionMatrix";
    case ErrorCode::GammaOutOfRange: return "GammaOutOfRange";
    case ErrorCode::NonPsdCovariance: return "NonPsdCovariance";
    case ErrorCode::InsufficientHistory: return "InsufficientHistory";
    case ErrorCode::NoData: return "NoData";
    case ErrorCode::InvalidScenario: return "InvalidScenario";
    case ErrorCode::UsageError: return "UsageError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    }
    return "Unknown";
}

/// Exception carrying a machine-readable code. Every failure raised by the
/// library is an Error, so callers can map codes to exit statuses.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code)
    {
    }

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace isac
