#pragma once

#include <stdexcept>
#include <string>

namespace msuf {

// Shape or configuration contract violated by the caller.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad or missing input data (corpus, lexicon, vectors, checkpoints).
// The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numeric operation produced NaN or Inf.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace msuf
