#pragma once

#include <stdexcept>

namespace grasp {

/// Malformed on-disk header or payload.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Payload shorter than its header declares.
class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

class WriteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or combination. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss during training. CLI exit code 3.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int epoch) : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// Missing prerequisite artifact (e.g. anatomy checkpoint). CLI exit code 4.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs inconsistent with each other or with a checkpoint. CLI exit code 4.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoints whose architectures cannot be mapped onto each other.
class IncompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Phantom placement failed after the retry budget.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pretrained anatomy model missed its validation Dice gate.
class UndertrainedAnatomyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace grasp
