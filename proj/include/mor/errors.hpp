#pragma once

#include <stdexcept>
#include <string>

namespace mor {

// Invalid configuration: divisibility, unknown keys, zero counts.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A query token is missing from the store that governs its depth.
class CacheConsistencyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ScheduleExhausted : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mor
