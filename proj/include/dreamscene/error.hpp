#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dreamscene {

// Error categories double as the CLI's machine-parseable error tags.
enum class ErrorCategory {
    validation,
    degenerate,
    parse,
    io,
    starvation,
    numeric,
    not_found,
};

const char* to_string(ErrorCategory category);

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& message)
        : std::runtime_error(message), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& message) : Error(ErrorCategory::validation, message) {}
};

class DegenerateError : public Error {
public:
    explicit DegenerateError(const std::string& message) : Error(ErrorCategory::degenerate, message) {}
};

class ParseError : public Error {
public:
    ParseError(const std::string& message, std::uint64_t byte_offset)
        : Error(ErrorCategory::parse, message + " (at byte offset " + std::to_string(byte_offset) + ")"),
          offset_(byte_offset) {}
    /// Structural problems that have no meaningful byte position (schema errors).
    explicit ParseError(const std::string& message) : Error(ErrorCategory::parse, message), offset_(0) {}

    std::uint64_t byte_offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error(ErrorCategory::io, message) {}
};

class StarvationError : public Error {
public:
    explicit StarvationError(const std::string& message) : Error(ErrorCategory::starvation, message) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& message) : Error(ErrorCategory::numeric, message) {}
};

class NotFoundError : public Error {
public:
    explicit NotFoundError(const std::string& message) : Error(ErrorCategory::not_found, message) {}
};

} // namespace dreamscene
