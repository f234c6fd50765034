#ifndef SFUDA_ERRORS_HPP
#define SFUDA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace sfuda {

/// Bad runtime argument: shape mismatch, non-finite input, structural
/// mismatch between a parameter list and a snapshot, ...
class argument_error : public std::invalid_argument {
public:
    explicit argument_error(const std::string& what) : std::invalid_argument(what) {}
};

/// Invalid configuration: unknown enum string, contradictory flags,
/// out-of-range hyperparameter.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem / serialization failure.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite loss or other numerical abort during training.
class numerical_error : public std::runtime_error {
public:
    explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

/// Scene synthesis could not satisfy the spec within bounded retries.
class generation_error : public std::runtime_error {
public:
    explicit generation_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sfuda

#endif
