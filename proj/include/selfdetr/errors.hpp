#pragma once

#include <stdexcept>
#include <string>

namespace selfdetr {

// Shape or axis mismatch between operands.
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// Input outside the mathematical domain of an operation (e.g. sqrt of a negative).
class DomainError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

// Invalid or inconsistent configuration.
class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// More ground truths than prediction slots / rows than columns.
class CapacityError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// Malformed input files or annotations.
class ValidationError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during optimization.
class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

}  // namespace selfdetr
