#pragma once

#include <stdexcept>
#include <string>

namespace trojanscope {

// Layer shapes do not chain, or a batch does not match the model input.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(int layer, const std::string& what)
        : std::invalid_argument(layer < 0 ? what : "layer " + std::to_string(layer) + ": " + what), layer_(layer)
    {
    }
    int layer() const { return layer_; }

private:
    int layer_;
};

// A NaN or Inf appeared in the output of a layer (or its gradient).
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(int layer, const std::string& stage)
        : std::runtime_error("non-finite value in " + stage + " of layer " + std::to_string(layer)), layer_(layer)
    {
    }
    int layer() const { return layer_; }

private:
    int layer_;
};

class ModelFormatError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};
class VersionMismatchError : public ModelFormatError {
    using ModelFormatError::ModelFormatError;
};
class TruncatedStreamError : public ModelFormatError {
    using ModelFormatError::ModelFormatError;
};
class ChecksumError : public ModelFormatError {
    using ModelFormatError::ModelFormatError;
};

class ConfigError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

class TrainingDivergedError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace trojanscope
