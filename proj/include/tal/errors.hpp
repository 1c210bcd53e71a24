#ifndef TAL_ERRORS_HPP
#define TAL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace tal {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dimension mismatch between containers, layers or caches.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A NaN or Inf showed up where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or impossible request (k > pool, empty arch, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// Violated precondition on the input data (e.g. unlabeled triplet passed to the loss).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Malformed text input. Carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Well-formed input that references something invalid. Carries the 1-based line number.
class ValidationError : public Error {
public:
    ValidationError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// The unlabeled pool cannot supply another batch.
class PoolExhausted : public Error {
public:
    using Error::Error;
};

/// Tie rejection in triplet sampling kept failing; the metric is degenerate.
class DegenerateMetric : public Error {
public:
    using Error::Error;
};

}  // namespace tal

#endif
