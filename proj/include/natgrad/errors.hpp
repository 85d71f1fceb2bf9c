#pragma once

#include <stdexcept>
#include <string>

namespace natgrad {

/// Argument outside the operation's domain (bad dimension, bad action, bad id).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Operation invoked in the wrong object state, e.g. stepping a finished episode.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite value or divergence detected during a numeric update.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ill-posed exact computation (non-ergodic chain, singular system).
class DegeneracyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace natgrad
