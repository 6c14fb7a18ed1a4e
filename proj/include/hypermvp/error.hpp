#pragma once

#include <stdexcept>
#include <string>

namespace hypermvp {

// Base for every rejection raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// A training loss went non-finite; the message names the term.
class TrainingHalted : public Error {
 public:
  using Error::Error;
};

}  // namespace hypermvp
