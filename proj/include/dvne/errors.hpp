#pragma once

#include <stdexcept>
#include <string>

namespace dvne {

// Every error carries a short machine-parsable category so the CLI can
// report failures on a single line.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

#define DVNE_DEFINE_ERROR(Name, category_name)                                   \
    class Name : public Error {                                                  \
    public:                                                                      \
        explicit Name(const std::string& what) : Error(category_name, what) {}   \
    }

DVNE_DEFINE_ERROR(InvalidArgument, "invalid-argument");
DVNE_DEFINE_ERROR(InvalidInterval, "invalid-interval");
DVNE_DEFINE_ERROR(ShapeMismatch, "shape-mismatch");
DVNE_DEFINE_ERROR(UnsupportedOperation, "unsupported-operation");
DVNE_DEFINE_ERROR(StaleTape, "stale-tape");
DVNE_DEFINE_ERROR(PoseMismatch, "pose-mismatch");
DVNE_DEFINE_ERROR(UnsortedSamples, "unsorted-samples");
DVNE_DEFINE_ERROR(ConstraintError, "constraint");
DVNE_DEFINE_ERROR(IngestionError, "ingestion");
DVNE_DEFINE_ERROR(ConfigError, "config");
DVNE_DEFINE_ERROR(MissingCheckpoint, "missing-checkpoint");
DVNE_DEFINE_ERROR(CheckpointError, "checkpoint");
DVNE_DEFINE_ERROR(IoError, "io");
DVNE_DEFINE_ERROR(PriorError, "prior");
DVNE_DEFINE_ERROR(NumericalError, "numerical");

#undef DVNE_DEFINE_ERROR

}  // namespace dvne
