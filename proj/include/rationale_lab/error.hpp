#pragma once

#include <stdexcept>
#include <string>

namespace rlab {

// Base of every error the library throws. Callers that only need to report
// can catch this; the CLI maps ConfigError to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class UndefinedError : public Error {
 public:
  using Error::Error;
};

class TokenizationError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

class ShortageError : public Error {
 public:
  ShortageError(int label, std::size_t wanted, std::size_t available)
      : Error("insufficient pool for class " + std::to_string(label) + ": need " +
              std::to_string(wanted) + ", have " + std::to_string(available)),
        label_(label) {}
  int label() const noexcept { return label_; }

 private:
  int label_;
};

class CountError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class DependencyError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, const std::string& what)
      : Error("training diverged at epoch " + std::to_string(epoch) + ": " + what),
        epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace rlab
