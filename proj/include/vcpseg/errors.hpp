#pragma once

#include <stdexcept>
#include <string>

namespace vcpseg {

// Base class for all framework errors. Subclasses map onto the CLI exit
// codes (config=2, data=3, divergence=4, checkpoint=5).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

class OverlongPrompt : public Error {
public:
    using Error::Error;
};

class InvalidLayer : public Error {
public:
    using Error::Error;
};

// Carries the offending tensor name so callers (and tests) can match on it.
class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& tensor_name,
                             const std::string& detail = "")
        : Error("checkpoint error: " + tensor_name +
                (detail.empty() ? "" : (" (" + detail + ")"))),
          tensor(tensor_name) {}
    std::string tensor;
};

class InvalidTemperature : public Error {
public:
    using Error::Error;
};

class InvalidMask : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class DivergedError : public Error {
public:
    using Error::Error;
};

class UndefinedMetric : public Error {
public:
    using Error::Error;
};

class DegenerateEmbedding : public Error {
public:
    using Error::Error;
};

}  // namespace vcpseg
