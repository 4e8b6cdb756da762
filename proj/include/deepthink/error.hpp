#pragma once

#include <stdexcept>
#include <string>

namespace dt {

// Every failure raised by the library derives from Error so callers can map
// categories onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class CapacityError : public Error { public: using Error::Error; };
class InputError : public Error { public: using Error::Error; };
class StateError : public Error { public: using Error::Error; };

class NumericDivergence : public Error {
public:
    NumericDivergence(std::size_t step, std::size_t layer)
        : Error("numeric divergence at step " + std::to_string(step) + ", layer " +
                std::to_string(layer)),
          step_(step), layer_(layer) {}
    std::size_t step() const noexcept { return step_; }
    std::size_t layer() const noexcept { return layer_; }

private:
    std::size_t step_;
    std::size_t layer_;
};

class IoError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class CompatibilityError : public Error { public: using Error::Error; };
class CorruptionError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace dt
