#pragma once

#include <stdexcept>
#include <string>

namespace dcpref {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
 public:
  using Error::Error;
};

class InvalidState : public Error {
 public:
  using Error::Error;
};

class ConfigurationError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Raised when a ranking probability evaluates clearly negative (or NaN).
class DegenerateProbability : public Error {
 public:
  DegenerateProbability(int case_index, const std::string& what)
      : Error(what), case_index_(case_index) {}
  int case_index() const noexcept { return case_index_; }

 private:
  int case_index_;
};

class IllConditionedKernel : public Error {
 public:
  using Error::Error;
};

class NumericalMomentError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace dcpref
